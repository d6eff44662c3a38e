use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fit_forest_on, ClassWeight, ForestParams, MaxFeatures};
use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::evaluation::stratified_kfold_indices;
use crate::featurizer::FeatureMatrix;
use crate::metrics::{apply_threshold, classification_scores, confusion};

/// Discrete hyperparameter distributions, each sampled uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpace {
    pub n_trees: Vec<usize>,
    pub max_depth: Vec<Option<usize>>,
    pub min_samples_split: Vec<usize>,
    pub min_samples_leaf: Vec<usize>,
    pub max_features: Vec<MaxFeatures>,
    pub class_weight: Vec<ClassWeight>,
    pub bootstrap: Vec<bool>,
}

impl Default for ParamSpace {
    fn default() -> Self {
        ParamSpace {
            n_trees: vec![50, 100, 200, 400],
            max_depth: vec![Some(8), Some(16), Some(32), None],
            min_samples_split: vec![2, 5, 10],
            min_samples_leaf: vec![1, 2, 5],
            max_features: vec![MaxFeatures::Sqrt, MaxFeatures::Log2, MaxFeatures::Fraction(0.3)],
            class_weight: vec![ClassWeight::Uniform, ClassWeight::Balanced],
            bootstrap: vec![true],
        }
    }
}

impl ParamSpace {
    /// A space holding exactly one setting.
    pub fn single(p: &ForestParams) -> Self {
        ParamSpace {
            n_trees: vec![p.n_trees],
            max_depth: vec![p.max_depth],
            min_samples_split: vec![p.min_samples_split],
            min_samples_leaf: vec![p.min_samples_leaf],
            max_features: vec![p.max_features],
            class_weight: vec![p.class_weight],
            bootstrap: vec![p.bootstrap],
        }
    }

    fn radices(&self) -> [usize; 7] {
        [
            self.n_trees.len(),
            self.max_depth.len(),
            self.min_samples_split.len(),
            self.min_samples_leaf.len(),
            self.max_features.len(),
            self.class_weight.len(),
            self.bootstrap.len(),
        ]
    }

    pub fn size(&self) -> usize {
        self.radices().iter().product()
    }

    /// Decodes a mixed-radix grid index into a parameter setting.
    pub fn setting(&self, mut index: usize, seed: u64) -> ForestParams {
        let mut digit = |len: usize| {
            let d = index % len;
            index /= len;
            d
        };
        ForestParams {
            n_trees: self.n_trees[digit(self.n_trees.len())],
            max_depth: self.max_depth[digit(self.max_depth.len())],
            min_samples_split: self.min_samples_split[digit(self.min_samples_split.len())],
            min_samples_leaf: self.min_samples_leaf[digit(self.min_samples_leaf.len())],
            max_features: self.max_features[digit(self.max_features.len())],
            class_weight: self.class_weight[digit(self.class_weight.len())],
            bootstrap: self.bootstrap[digit(self.bootstrap.len())],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.radices().contains(&0) {
            return Err(Error::InvalidParam("every hyperparameter needs at least one value".into()));
        }
        for i in 0..self.size() {
            self.setting(i, 0).validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub space: ParamSpace,
    pub n_iter: usize,
    pub folds: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            space: ParamSpace::default(),
            n_iter: 25,
            folds: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub params: ForestParams,
    pub fold_mcc: Vec<f64>,
    /// Mean fold MCC; `None` when the candidate could not be scored.
    pub mean_mcc: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: ForestParams,
    pub best_mcc: f64,
    pub candidates: Vec<CandidateScore>,
    /// Out-of-fold probabilities of the best candidate, one per row.
    #[serde(skip)]
    pub best_oof: Vec<f64>,
}

/// Randomized hyperparameter search scored by mean MCC over stratified
/// k-fold cross-validation at threshold 0.5. The winner's out-of-fold
/// probabilities are kept for threshold calibration.
///
/// Settings are drawn without replacement from the grid; when `n_iter`
/// covers the grid every setting is evaluated in grid order. Ties keep the
/// earlier candidate.
pub fn random_search(matrix: &FeatureMatrix, labels: &[Label], config: &SearchConfig) -> Result<SearchOutcome> {
    if config.n_iter == 0 {
        return Err(Error::InvalidParam("n_iter must be >= 1".into()));
    }
    if matrix.rows() != labels.len() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: matrix.rows(),
        });
    }
    config.space.validate()?;
    let size = config.space.size();
    let indices: Vec<usize> = if config.n_iter >= size {
        (0..size).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rand::seq::index::sample(&mut rng, size, config.n_iter).into_vec()
    };
    let folds = stratified_kfold_indices(labels, config.folds, config.seed)?;

    let mut candidates = Vec::with_capacity(indices.len());
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    for index in indices {
        let params = config.space.setting(index, config.seed);
        let (score, oof) = score_candidate(matrix, labels, &folds, params)?;
        if let Some(m) = score.mean_mcc {
            if best.as_ref().is_none_or(|(bm, _, _)| m > *bm) {
                best = Some((m, candidates.len(), oof));
            }
        }
        candidates.push(score);
    }
    let Some((best_mcc, best, best_oof)) = best else {
        return Err(Error::SingleClass(
            "no search candidate could be scored: every fold lacked a class".into(),
        ));
    };
    Ok(SearchOutcome {
        best: candidates[best].params,
        best_mcc,
        candidates,
        best_oof,
    })
}

fn score_candidate(
    matrix: &FeatureMatrix,
    labels: &[Label],
    folds: &[Vec<usize>],
    params: ForestParams,
) -> Result<(CandidateScore, Vec<f64>)> {
    let mut fold_mcc = Vec::with_capacity(folds.len());
    let mut oof = vec![0.0; labels.len()];
    for (k, held_out) in folds.iter().enumerate() {
        let train = complement(labels.len(), held_out);
        let has_both = |rows: &[usize]| {
            let pos = rows.iter().filter(|&&r| labels[r].is_positive()).count();
            pos > 0 && pos < rows.len()
        };
        if !has_both(&train) || !has_both(held_out) {
            let score = CandidateScore {
                params,
                fold_mcc,
                mean_mcc: None,
                note: Some(format!("fold {k} is missing a class; candidate skipped")),
            };
            return Ok((score, Vec::new()));
        }
        let forest = fit_forest_on(matrix, labels, &train, &params)?;
        let probs = forest.predict_rows(matrix, held_out);
        for (&r, &p) in held_out.iter().zip(&probs) {
            oof[r] = p;
        }
        let truth: Vec<Label> = held_out.iter().map(|&r| labels[r]).collect();
        let cm = confusion(&truth, &apply_threshold(&probs, 0.5))?;
        fold_mcc.push(classification_scores(&cm).mcc);
    }
    let mean = fold_mcc.iter().sum::<f64>() / fold_mcc.len() as f64;
    let score = CandidateScore {
        params,
        fold_mcc,
        mean_mcc: Some(mean),
        note: None,
    };
    Ok((score, oof))
}

fn complement(n: usize, held_out: &[usize]) -> Vec<usize> {
    let mut mask = vec![true; n];
    for &i in held_out {
        mask[i] = false;
    }
    (0..n).filter(|&i| mask[i]).collect()
}

/// Out-of-fold probabilities: each row is scored by a forest trained on
/// the other folds.
pub fn cross_val_predict(
    matrix: &FeatureMatrix,
    labels: &[Label],
    params: &ForestParams,
    folds: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let folds = stratified_kfold_indices(labels, folds, seed)?;
    let mut out = vec![0.0; labels.len()];
    for held_out in &folds {
        let train = complement(labels.len(), held_out);
        let forest = fit_forest_on(matrix, labels, &train, params)?;
        for (&r, p) in held_out.iter().zip(forest.predict_rows(matrix, held_out)) {
            out[r] = p;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_decoding_covers_every_setting() {
        let space = ParamSpace::default();
        assert_eq!(space.size(), 4 * 4 * 3 * 3 * 3 * 2);
        let mut seen = std::collections::HashSet::new();
        for i in 0..space.size() {
            seen.insert(format!("{:?}", space.setting(i, 1)));
        }
        assert_eq!(seen.len(), space.size());
    }

    #[test]
    fn empty_dimension_rejected() {
        let space = ParamSpace {
            n_trees: vec![],
            ..ParamSpace::default()
        };
        assert!(space.validate().is_err());
    }
}
