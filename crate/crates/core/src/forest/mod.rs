//! Random forest of Gini CART trees with soft-vote probabilities and a
//! calibrated decision threshold.

mod packed;
mod search;
mod tree;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use search::{
    cross_val_predict, random_search, CandidateScore, ParamSpace, SearchConfig, SearchOutcome,
};
pub use tree::{best_split, class_weights, gini_impurity, grow_tree, DecisionTree, Node, Samples, Split};

use crate::corpus::{FailureRecord, Label};
use packed::PackedTree;
use crate::error::{Error, Result};
use crate::featurizer::{FeatureMatrix, FeatureVector, FittedFeaturizer};
use crate::metrics::{pr_curve, PrPoint};

/// Dense scoring block size for batch prediction.
const BLOCK_BYTES: usize = 128 * 1024;

pub const MODEL_FORMAT: &str = "failtriage-model";
pub const MODEL_VERSION: &str = "1";

/// Number of candidate features drawn at each node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaxFeatures {
    Sqrt,
    Log2,
    All,
    Fraction(f64),
}

impl MaxFeatures {
    pub fn resolve(self, n_features: usize) -> usize {
        let d = n_features as f64;
        let k = match self {
            MaxFeatures::Sqrt => d.sqrt() as usize,
            MaxFeatures::Log2 => d.log2() as usize,
            MaxFeatures::All => n_features,
            MaxFeatures::Fraction(f) => (f * d) as usize,
        };
        k.clamp(1, n_features.max(1))
    }
}

impl fmt::Display for MaxFeatures {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaxFeatures::Sqrt => f.write_str("sqrt"),
            MaxFeatures::Log2 => f.write_str("log2"),
            MaxFeatures::All => f.write_str("all"),
            MaxFeatures::Fraction(x) => write!(f, "{x}"),
        }
    }
}

impl FromStr for MaxFeatures {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sqrt" => Ok(MaxFeatures::Sqrt),
            "log2" => Ok(MaxFeatures::Log2),
            "all" => Ok(MaxFeatures::All),
            other => match other.parse::<f64>() {
                Ok(x) if x > 0.0 && x <= 1.0 => Ok(MaxFeatures::Fraction(x)),
                _ => Err(Error::InvalidParam(format!(
                    "max features must be sqrt, log2, all or a fraction in (0, 1], got {other:?}"
                ))),
            },
        }
    }
}

impl Serialize for MaxFeatures {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MaxFeatures {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeight {
    Uniform,
    Balanced,
}

impl fmt::Display for ClassWeight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassWeight::Uniform => "uniform",
            ClassWeight::Balanced => "balanced",
        })
    }
}

impl FromStr for ClassWeight {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "uniform" => Ok(ClassWeight::Uniform),
            "balanced" => Ok(ClassWeight::Balanced),
            other => Err(Error::InvalidParam(format!("unknown class weight {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// `None` grows until the other stopping rules hold.
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    pub max_features: MaxFeatures,
    pub class_weight: ClassWeight,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            max_depth: None,
            min_samples_split: 2,
            min_samples_leaf: 1,
            max_features: MaxFeatures::Sqrt,
            class_weight: ClassWeight::Uniform,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::InvalidParam("n_trees must be >= 1".into()));
        }
        if self.min_samples_split < 2 {
            return Err(Error::InvalidParam("min_samples_split must be >= 2".into()));
        }
        if self.min_samples_leaf < 1 {
            return Err(Error::InvalidParam("min_samples_leaf must be >= 1".into()));
        }
        if let MaxFeatures::Fraction(f) = self.max_features {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidParam(format!("max features fraction {f} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    pub trees: Vec<DecisionTree>,
    pub params: ForestParams,
    /// Scores at or above the threshold are labelled legitimate.
    pub threshold: f64,
    pub n_features: usize,
    /// Fingerprint of the featurizer the training matrix came from.
    pub featurizer_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: String,
    params: ForestParams,
    threshold: f64,
    n_features: usize,
    featurizer_hash: Option<String>,
    trees: Vec<DecisionTree>,
}

/// RNG for tree `index`: one ChaCha stream per tree, independent of the
/// order in which trees are trained.
pub(crate) fn tree_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Trains on every row of `matrix`.
pub fn fit_forest(matrix: &FeatureMatrix, labels: &[Label], params: &ForestParams) -> Result<RandomForest> {
    let rows: Vec<usize> = (0..matrix.rows()).collect();
    fit_forest_on(matrix, labels, &rows, params)
}

/// Trains on the given subset of rows. Trees are built in parallel; each
/// tree draws from its own RNG stream so the result does not depend on
/// scheduling.
pub fn fit_forest_on(matrix: &FeatureMatrix, labels: &[Label], rows: &[usize], params: &ForestParams) -> Result<RandomForest> {
    params.validate()?;
    if rows.is_empty() || matrix.rows() == 0 {
        return Err(Error::Empty("cannot fit a forest on zero samples".into()));
    }
    if matrix.rows() != labels.len() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: matrix.rows(),
        });
    }
    let cw = class_weights(params.class_weight, labels, rows);
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = tree_rng(params.seed, t);
            let entries: Vec<(u32, u32)> = if params.bootstrap {
                let mut counts = vec![0u32; rows.len()];
                for _ in 0..rows.len() {
                    counts[rng.random_range(0..rows.len())] += 1;
                }
                rows.iter().zip(counts).map(|(&r, c)| (r as u32, c)).collect()
            } else {
                rows.iter().map(|&r| (r as u32, 1)).collect()
            };
            grow_tree(&Samples::weighted(matrix, labels, entries, cw), params, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RandomForest {
        trees,
        params: *params,
        threshold: 0.5,
        n_features: matrix.columns(),
        featurizer_hash: None,
    })
}

impl RandomForest {
    fn check_dimension(&self, got: usize) -> Result<()> {
        if got != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                got,
            });
        }
        Ok(())
    }

    /// Mean legitimate fraction over the leaves reached in every tree.
    pub fn predict_proba(&self, fv: &FeatureVector) -> Result<f64> {
        self.check_dimension(fv.dimension())?;
        let row = fv.as_row();
        let sum: f64 = self.trees.iter().map(|t| t.leaf_fraction(row)).sum();
        Ok(sum / self.trees.len() as f64)
    }

    pub fn predict(&self, fv: &FeatureVector) -> Result<Label> {
        Ok(Label::from_positive(self.predict_proba(fv)? >= self.threshold))
    }

    /// Scores every row of `matrix`; results are in row order.
    pub fn predict_proba_batch(&self, matrix: &FeatureMatrix) -> Result<Vec<f64>> {
        self.check_dimension(matrix.columns())?;
        // tree-major over dense blocks keeps each tree hot in cache; every
        // row still sums its trees in order, so results match predict_proba
        let packed: Vec<PackedTree> = self.trees.iter().map(PackedTree::new).collect();
        let width = matrix.columns().max(1);
        let block_rows = (BLOCK_BYTES / (width * 8)).clamp(8, 256);
        let n = matrix.rows();
        let starts: Vec<usize> = (0..n).step_by(block_rows).collect();
        let out = starts
            .into_par_iter()
            .flat_map_iter(|start| {
                let end = (start + block_rows).min(n);
                let mut block = vec![0.0f64; (end - start) * width];
                for (k, i) in (start..end).enumerate() {
                    let row = matrix.row(i);
                    for (&j, &v) in row.indices.iter().zip(row.values) {
                        block[k * width + j as usize] = v;
                    }
                }
                let mut sums = vec![0.0f64; end - start];
                for tree in &packed {
                    tree.accumulate(&block, width, &mut sums);
                }
                sums.into_iter().map(|s| s / self.trees.len() as f64)
            })
            .collect();
        Ok(out)
    }

    pub fn predict_rows(&self, matrix: &FeatureMatrix, rows: &[usize]) -> Vec<f64> {
        rows.iter()
            .map(|&r| {
                let row = matrix.row(r);
                self.trees.iter().map(|t| t.leaf_fraction(row)).sum::<f64>() / self.trees.len() as f64
            })
            .collect()
    }

    /// Sum of weighted impurity decrease per feature over all splits.
    pub fn impurity_decrease_per_feature(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_features];
        for tree in &self.trees {
            for node in &tree.nodes {
                if let Node::Split { feature, gain, .. } = *node {
                    out[feature as usize] += gain;
                }
            }
        }
        out
    }

    pub fn bind_featurizer(&mut self, featurizer: &FittedFeaturizer) -> Result<()> {
        self.check_dimension(featurizer.dimension())?;
        self.featurizer_hash = Some(featurizer.fingerprint()?);
        Ok(())
    }

    /// Fails unless `featurizer` is the one the model was trained with.
    pub fn check_featurizer(&self, featurizer: &FittedFeaturizer) -> Result<()> {
        let found = featurizer.fingerprint()?;
        match &self.featurizer_hash {
            Some(expected) if *expected == found => self.check_dimension(featurizer.dimension()),
            Some(expected) => Err(Error::FeaturizerHash {
                expected: expected.clone(),
                found,
            }),
            None => Err(Error::FeaturizerHash {
                expected: "<unbound>".into(),
                found,
            }),
        }
    }

    /// Featurizes and scores raw records after verifying the featurizer.
    pub fn predict_records(&self, featurizer: &FittedFeaturizer, records: &[FailureRecord]) -> Result<Vec<f64>> {
        self.check_featurizer(featurizer)?;
        let m = FeatureMatrix::from_rows(featurizer.dimension(), records.iter().map(|r| featurizer.transform(r)));
        self.predict_proba_batch(&m)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION.into(),
            params: self.params,
            threshold: self.threshold,
            n_features: self.n_features,
            featurizer_hash: self.featurizer_hash.clone(),
            trees: self.trees.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Malformed {
            what: "model file",
            detail: e.to_string(),
        })?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(Error::Version {
                what: "model",
                expected: format!("{MODEL_FORMAT} v{MODEL_VERSION}"),
                found: format!("{} v{}", file.format, file.version),
            });
        }
        if file.trees.len() != file.params.n_trees {
            return Err(Error::Malformed {
                what: "model file",
                detail: format!("{} trees stored, params say {}", file.trees.len(), file.params.n_trees),
            });
        }
        Ok(RandomForest {
            trees: file.trees,
            params: file.params,
            threshold: file.threshold,
            n_features: file.n_features,
            featurizer_hash: file.featurizer_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::write(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::read(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    pub f1: f64,
    pub curve: Vec<PrPoint>,
}

/// Picks the precision-recall curve point with the highest F1 for the
/// legitimate class; ties go to the highest threshold.
pub fn calibrate_threshold(probs: &[f64], labels: &[Label]) -> Result<Calibration> {
    let curve = pr_curve(probs, labels)?;
    let best = curve
        .iter()
        .fold(None::<&PrPoint>, |best, p| match best {
            Some(b) if p.f1 < b.f1 => Some(b),
            _ => Some(p),
        })
        .expect("curve always has candidates");
    Ok(Calibration {
        threshold: best.threshold,
        f1: best.f1,
        curve,
    })
}
