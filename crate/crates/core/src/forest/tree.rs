use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ClassWeight, ForestParams};
use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::featurizer::{FeatureMatrix, SparseRow};

/// Gini impurity `1 - sum(p_c^2)` of a two-class count pair, with class
/// weights applied to the counts first.
pub fn gini_impurity(counts: [u64; 2], class_weights: [f64; 2]) -> Result<f64> {
    if counts == [0, 0] {
        return Err(Error::InvalidParam("gini impurity of an empty node".into()));
    }
    let w = [counts[0] as f64 * class_weights[0], counts[1] as f64 * class_weights[1]];
    let total = w[0] + w[1];
    if total <= 0.0 {
        return Err(Error::InvalidParam("gini impurity with zero total weight".into()));
    }
    Ok(1.0 - (w[0] / total).powi(2) - (w[1] / total).powi(2))
}

/// Per-class weights: `n / (2 * n_c)` when balanced, else 1.
pub fn class_weights(mode: ClassWeight, labels: &[Label], rows: &[usize]) -> [f64; 2] {
    match mode {
        ClassWeight::Uniform => [1.0, 1.0],
        ClassWeight::Balanced => {
            let mut counts = [0usize; 2];
            for &r in rows {
                counts[labels[r].index()] += 1;
            }
            let n = rows.len() as f64;
            counts.map(|c| if c == 0 { 1.0 } else { n / (2.0 * c as f64) })
        }
    }
}

/// Rows reaching a tree node, each with a multiplicity (bootstrap draws).
#[derive(Debug, Clone)]
pub struct Samples<'a> {
    matrix: &'a FeatureMatrix,
    labels: &'a [Label],
    entries: Vec<(u32, u32)>,
    class_weights: [f64; 2],
}

impl<'a> Samples<'a> {
    /// Every row once, uniform class weights.
    pub fn all(matrix: &'a FeatureMatrix, labels: &'a [Label]) -> Self {
        Self::weighted(matrix, labels, (0..matrix.rows()).map(|r| (r as u32, 1)).collect(), [1.0, 1.0])
    }

    /// Rows with multiplicities; rows with multiplicity 0 are dropped.
    pub fn weighted(
        matrix: &'a FeatureMatrix,
        labels: &'a [Label],
        mut entries: Vec<(u32, u32)>,
        class_weights: [f64; 2],
    ) -> Self {
        assert_eq!(matrix.rows(), labels.len(), "matrix rows and labels differ");
        entries.retain(|e| e.1 > 0);
        Samples {
            matrix,
            labels,
            entries,
            class_weights,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.iter().map(|e| e.1 as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    /// Weighted impurity decrease: `W*g(node) - W_l*g(left) - W_r*g(right)`.
    pub gain: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
        gain: f64,
    },
    Leaf {
        /// Weighted fraction of legitimate failures in the leaf.
        legitimate: f64,
    },
}

/// Binary tree stored as a flat node array; node 0 is the root. Samples
/// with `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
}

impl DecisionTree {
    #[inline]
    fn leaf_by(&self, get: impl Fn(usize) -> f64) -> f64 {
        let mut i = 0usize;
        loop {
            match self.nodes[i] {
                Node::Leaf { legitimate } => return legitimate,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    i = if get(feature as usize) <= threshold {
                        left as usize
                    } else {
                        right as usize
                    };
                }
            }
        }
    }

    /// Legitimate fraction of the leaf reached by a sparse row.
    pub fn leaf_fraction(&self, row: SparseRow<'_>) -> f64 {
        self.leaf_by(|f| row.get(f))
    }

    /// Same as [`leaf_fraction`](Self::leaf_fraction) for a dense buffer.
    pub fn leaf_fraction_dense(&self, x: &[f64]) -> f64 {
        self.leaf_by(|f| x[f])
    }

    /// Class fractions `(false alert, legitimate)` of the reached leaf.
    pub fn leaf_fractions(&self, row: SparseRow<'_>) -> (f64, f64) {
        let p = self.leaf_fraction(row);
        (1.0 - p, p)
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left as usize).max(walk(nodes, right as usize)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

/// Scratch buffers reused across features and nodes.
#[derive(Default)]
struct Scratch {
    /// Nonzero (value, positive, count) per candidate feature.
    nonzero: Vec<Vec<(f64, bool, u32)>>,
    /// Zero-valued counts per candidate feature and class.
    zero: Vec<[u64; 2]>,
    groups: Vec<(f64, f64, f64, u64)>,
}

struct NodeTotals {
    raw: [u64; 2],
    weighted: [f64; 2],
}

impl NodeTotals {
    fn of(entries: &[(u32, u32)], labels: &[Label], cw: [f64; 2]) -> Self {
        let mut raw = [0u64; 2];
        for &(row, c) in entries {
            raw[labels[row as usize].index()] += u64::from(c);
        }
        NodeTotals {
            raw,
            weighted: [raw[0] as f64 * cw[0], raw[1] as f64 * cw[1]],
        }
    }

    fn count(&self) -> u64 {
        self.raw[0] + self.raw[1]
    }

    fn legit_fraction(&self) -> f64 {
        let total = self.weighted[0] + self.weighted[1];
        if total > 0.0 {
            self.weighted[1] / total
        } else {
            0.0
        }
    }
}

#[inline]
fn sum_sq_over_total(w0: f64, w1: f64) -> f64 {
    (w0 * w0 + w1 * w1) / (w0 + w1)
}

fn best_split_in(
    matrix: &FeatureMatrix,
    labels: &[Label],
    entries: &[(u32, u32)],
    features: &[usize],
    cw: [f64; 2],
    min_samples_leaf: u64,
    allow_zero_gain: bool,
    scratch: &mut Scratch,
) -> Option<Split> {
    let totals = NodeTotals::of(entries, labels, cw);
    let [tw0, tw1] = totals.weighted;
    if tw0 <= 0.0 || tw1 <= 0.0 {
        return None;
    }
    let total_n = totals.count();
    let parent = sum_sq_over_total(tw0, tw1);
    let min_gain = 1e-12 * (tw0 + tw1);
    let mut best: Option<Split> = None;
    let mut first_valid: Option<Split> = None;

    // One merge pass per row over its sorted sparse indices collects the
    // values of every candidate feature.
    scratch.nonzero.resize_with(features.len(), Vec::new);
    scratch.zero.clear();
    scratch.zero.resize(features.len(), [0; 2]);
    for buf in &mut scratch.nonzero[..features.len()] {
        buf.clear();
    }
    for &(row, c) in entries {
        let r = matrix.row(row as usize);
        let pos = labels[row as usize].is_positive();
        let mut j = 0;
        for (k, &feature) in features.iter().enumerate() {
            let f = feature as u32;
            while j < r.indices.len() && r.indices[j] < f {
                j += 1;
            }
            if j < r.indices.len() && r.indices[j] == f && r.values[j] != 0.0 {
                scratch.nonzero[k].push((r.values[j], pos, c));
            } else {
                scratch.zero[k][usize::from(pos)] += u64::from(c);
            }
        }
    }

    for (k, &feature) in features.iter().enumerate() {
        let nonzero = &mut scratch.nonzero[k];
        let zero = scratch.zero[k];
        nonzero.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
        let below_zero = nonzero.partition_point(|e| e.0 < 0.0);

        // (value, weighted class 0, weighted class 1, raw count), ascending
        let groups = &mut scratch.groups;
        groups.clear();
        let mut push = |v: f64, pos: bool, c: u64| {
            let (w0, w1) = if pos { (0.0, c as f64 * cw[1]) } else { (c as f64 * cw[0], 0.0) };
            match groups.last_mut() {
                Some(g) if g.0 == v => {
                    g.1 += w0;
                    g.2 += w1;
                    g.3 += c;
                }
                _ => groups.push((v, w0, w1, c)),
            }
        };
        for &(v, pos, c) in &nonzero[..below_zero] {
            push(v, pos, u64::from(c));
        }
        if zero[0] > 0 {
            push(0.0, false, zero[0]);
        }
        if zero[1] > 0 {
            push(0.0, true, zero[1]);
        }
        for &(v, pos, c) in &nonzero[below_zero..] {
            push(v, pos, u64::from(c));
        }
        if groups.len() < 2 {
            continue;
        }

        let (mut l0, mut l1, mut ln) = (0.0f64, 0.0f64, 0u64);
        for i in 0..groups.len() - 1 {
            let g = groups[i];
            l0 += g.1;
            l1 += g.2;
            ln += g.3;
            let rn = total_n - ln;
            if ln < min_samples_leaf || rn < min_samples_leaf {
                continue;
            }
            let (r0, r1) = (tw0 - l0, tw1 - l1);
            if l0 + l1 <= 0.0 || r0 + r1 <= 0.0 {
                continue;
            }
            let gain = sum_sq_over_total(l0, l1) + sum_sq_over_total(r0, r1) - parent;
            let improves = gain > min_gain && best.is_none_or(|b| gain > b.gain);
            if !improves && first_valid.is_some() {
                continue;
            }
            let (a, b) = (g.0, groups[i + 1].0);
            let mut threshold = (a + b) / 2.0;
            if threshold >= b || !threshold.is_finite() {
                threshold = a;
            }
            let split = Split {
                feature,
                threshold,
                gain: gain.max(0.0),
            };
            if first_valid.is_none() {
                first_valid = Some(split);
            }
            if improves {
                best = Some(split);
            }
        }
    }
    if allow_zero_gain {
        best.or(first_valid)
    } else {
        best
    }
}

/// Best split over `features`: thresholds at midpoints between consecutive
/// distinct values, maximizing weighted impurity decrease. Ties go to the
/// lowest feature index, then the lowest threshold. `None` when no split
/// reduces impurity while keeping `min_samples_leaf` on both sides.
pub fn best_split(samples: &Samples<'_>, features: &[usize], min_samples_leaf: usize) -> Option<Split> {
    let mut sorted = features.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    best_split_in(
        samples.matrix,
        samples.labels,
        &samples.entries,
        &sorted,
        samples.class_weights,
        min_samples_leaf as u64,
        false,
        &mut Scratch::default(),
    )
}

/// Grows a CART tree, drawing a fresh candidate feature subset at every
/// node. Growth stops only on depth, size or purity: an impure node whose
/// candidates offer no impurity decrease still takes the first valid split
/// (lowest feature, lowest threshold).
pub fn grow_tree<R: Rng + ?Sized>(samples: &Samples<'_>, params: &ForestParams, rng: &mut R) -> Result<DecisionTree> {
    if samples.is_empty() {
        return Err(Error::Empty("cannot grow a tree without samples".into()));
    }
    params.validate()?;
    let d = samples.matrix.columns();
    let mtry = params.max_features.resolve(d);
    let all_features: Vec<usize> = (0..d).collect();
    let mut entries = samples.entries.clone();
    let mut scratch = Scratch::default();
    let mut nodes: Vec<Node> = vec![Node::Leaf { legitimate: 0.0 }];
    // (node id, start, end, depth)
    let mut stack = vec![(0usize, 0usize, entries.len(), 0usize)];
    let min_leaf = params.min_samples_leaf as u64;

    while let Some((id, start, end, depth)) = stack.pop() {
        let slice = &mut entries[start..end];
        let totals = NodeTotals::of(slice, samples.labels, samples.class_weights);
        let leaf = Node::Leaf {
            legitimate: totals.legit_fraction(),
        };
        let n = totals.count();
        let splittable = params.max_depth.is_none_or(|m| depth < m)
            && n >= params.min_samples_split as u64
            && n >= 2 * min_leaf
            && totals.raw[0] > 0
            && totals.raw[1] > 0;
        if !splittable {
            nodes[id] = leaf;
            continue;
        }
        let features = if mtry >= d {
            all_features.clone()
        } else {
            let mut f = rand::seq::index::sample(rng, d, mtry).into_vec();
            f.sort_unstable();
            f
        };
        let Some(split) = best_split_in(
            samples.matrix,
            samples.labels,
            slice,
            &features,
            samples.class_weights,
            min_leaf,
            true,
            &mut scratch,
        ) else {
            nodes[id] = leaf;
            continue;
        };
        let mut mid = 0;
        for i in 0..slice.len() {
            if samples.matrix.get(slice[i].0 as usize, split.feature) <= split.threshold {
                slice.swap(i, mid);
                mid += 1;
            }
        }
        let left = nodes.len();
        nodes.push(Node::Leaf { legitimate: 0.0 });
        nodes.push(Node::Leaf { legitimate: 0.0 });
        nodes[id] = Node::Split {
            feature: split.feature as u32,
            threshold: split.threshold,
            left: left as u32,
            right: left as u32 + 1,
            gain: split.gain,
        };
        stack.push((left + 1, start + mid, end, depth + 1));
        stack.push((left, start, start + mid, depth + 1));
    }
    Ok(DecisionTree { nodes })
}
