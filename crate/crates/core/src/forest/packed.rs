//! Compact tree layout for batch scoring.

use super::{DecisionTree, Node};

/// 16-byte node. For splits, `value` is the threshold and the children sit
/// at `left` and `left + 1`. A leaf has a NaN threshold, which always steps
/// to `left + 1`, and `left` one below its own index, so walking past a leaf
/// stays on it and the walk needs no branch.
#[derive(Clone, Copy)]
struct PackedNode {
    feature: u32,
    left: u32,
    value: f64,
}

pub(crate) struct PackedTree {
    nodes: Vec<PackedNode>,
    /// Leaf values by node index; unused entries for splits.
    leaf: Vec<f64>,
    depth: usize,
}

impl PackedTree {
    pub(crate) fn new(tree: &DecisionTree) -> Self {
        let placeholder = PackedNode {
            feature: 0,
            left: 0,
            value: f64::NAN,
        };
        let mut nodes = vec![placeholder];
        let mut leaf = vec![0.0];
        // breadth-first so siblings land next to each other
        let mut queue = std::collections::VecDeque::from([(0usize, 0usize)]);
        while let Some((src, dst)) = queue.pop_front() {
            nodes[dst] = match tree.nodes[src] {
                Node::Leaf { legitimate } => {
                    leaf[dst] = legitimate;
                    PackedNode {
                        feature: 0,
                        left: (dst as u32).wrapping_sub(1),
                        value: f64::NAN,
                    }
                }
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    let at = nodes.len();
                    nodes.extend([placeholder; 2]);
                    leaf.extend([0.0; 2]);
                    queue.push_back((left as usize, at));
                    queue.push_back((right as usize, at + 1));
                    PackedNode {
                        feature,
                        left: at as u32,
                        value: threshold,
                    }
                }
            };
        }
        PackedTree {
            nodes,
            leaf,
            depth: tree.depth(),
        }
    }

    /// Adds this tree's leaf value to `sums` for every dense row of `block`
    /// (`block.len() == sums.len() * width`). Rows are walked in groups so
    /// independent lookups overlap.
    pub(crate) fn accumulate(&self, block: &[f64], width: usize, sums: &mut [f64]) {
        const LANES: usize = 8;
        let mut groups = block.chunks_exact(width * LANES).zip(sums.chunks_exact_mut(LANES));
        for (rows, out) in &mut groups {
            let at = self.walk::<LANES>(rows, width);
            for k in 0..LANES {
                out[k] += self.leaf[at[k] as usize];
            }
        }
        let done = sums.len() / LANES * LANES;
        for (k, out) in sums[done..].iter_mut().enumerate() {
            let at = self.walk::<1>(&block[(done + k) * width..(done + k + 1) * width], width);
            *out += self.leaf[at[0] as usize];
        }
    }

    /// Walks `L` consecutive rows in lockstep for the tree's full depth.
    #[inline(always)]
    fn walk<const L: usize>(&self, rows: &[f64], width: usize) -> [u32; L] {
        let nodes = &self.nodes[..];
        let mut at = [0u32; L];
        for _ in 0..self.depth {
            for k in 0..L {
                let node = nodes[at[k] as usize];
                let x = rows[k * width + node.feature as usize];
                at[k] = node.left.wrapping_add(u32::from(!(x <= node.value)));
            }
        }
        at
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packed_tree_matches_node_walk() {
        let tree = DecisionTree {
            nodes: vec![
                Node::Split {
                    feature: 1,
                    threshold: 0.5,
                    left: 2,
                    right: 1,
                    gain: 1.0,
                },
                Node::Split {
                    feature: 0,
                    threshold: -1.0,
                    left: 3,
                    right: 4,
                    gain: 0.5,
                },
                Node::Leaf { legitimate: 0.1 },
                Node::Leaf { legitimate: 0.7 },
                Node::Leaf { legitimate: 0.9 },
            ],
        };
        let packed = PackedTree::new(&tree);
        let rows = [[0.0, 0.0], [-2.0, 0.6], [0.0, 0.6], [5.0, 0.5], [-1.0, 1.0]];
        let block: Vec<f64> = rows.iter().flatten().copied().collect();
        let mut sums = vec![0.0; rows.len()];
        packed.accumulate(&block, 2, &mut sums);
        for (row, got) in rows.iter().zip(sums) {
            assert_eq!(got, tree.leaf_fraction_dense(row));
        }
    }
}
