//! Confusion-matrix scores, precision-recall curves and impurity-based
//! feature importance. The positive class is `Legitimate`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::featurizer::FittedFeaturizer;
use crate::forest::RandomForest;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        ConfusionMatrix { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, actual: Label, predicted: Label) {
        match (actual.is_positive(), predicted.is_positive()) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }
}

pub fn confusion(labels: &[Label], predictions: &[Label]) -> Result<ConfusionMatrix> {
    if labels.len() != predictions.len() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: predictions.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty("no labels to score".into()));
    }
    let mut cm = ConfusionMatrix::default();
    for (&a, &p) in labels.iter().zip(predictions) {
        cm.add(a, p);
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
}

/// Precision, recall, F1 and Matthews correlation. A score whose
/// denominator is zero is 0.
pub fn classification_scores(cm: &ConfusionMatrix) -> Scores {
    let (tp, fp, fn_, tn) = (cm.tp as f64, cm.fp as f64, cm.fn_ as f64, cm.tn as f64);
    let ratio = |num: f64, den: f64| if den == 0.0 { 0.0 } else { num / den };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    let den = ((tn + fn_) * (tp + fp) * (tn + fp) * (fn_ + tp)).sqrt();
    let mcc = ratio(tn * tp - fp * fn_, den);
    Scores {
        precision,
        recall,
        f1,
        mcc,
    }
}

/// Labels scores at `threshold`: positive when `prob >= threshold`.
pub fn apply_threshold(probs: &[f64], threshold: f64) -> Vec<Label> {
    probs.iter().map(|&p| Label::from_positive(p >= threshold)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: ConfusionMatrix,
}

/// Candidate thresholds: 0, midpoints between consecutive distinct scores,
/// and 1, in ascending order.
pub fn candidate_thresholds(probs: &[f64]) -> Vec<f64> {
    let mut sorted: Vec<f64> = probs.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut out = Vec::with_capacity(sorted.len() + 1);
    out.push(0.0);
    for w in sorted.windows(2) {
        out.push(w[0] + (w[1] - w[0]) / 2.0);
    }
    out.push(1.0);
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

/// One point per candidate threshold, ordered by ascending threshold, so
/// recall is non-increasing along the curve.
pub fn pr_curve(probs: &[f64], labels: &[Label]) -> Result<Vec<PrPoint>> {
    if probs.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: probs.len(),
        });
    }
    let positives = labels.iter().filter(|l| l.is_positive()).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::SingleClass("precision-recall curve needs both classes".into()));
    }
    if probs.iter().any(|p| p.is_nan()) {
        return Err(Error::InvalidParam("NaN score".into()));
    }
    let mut pairs: Vec<(f64, bool)> = probs
        .iter()
        .zip(labels)
        .map(|(&p, l)| (p, l.is_positive()))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // positives_below[i] = positives among the i lowest scores
    let mut positives_below = Vec::with_capacity(pairs.len() + 1);
    positives_below.push(0u64);
    for &(_, pos) in &pairs {
        positives_below.push(positives_below.last().unwrap() + u64::from(pos));
    }
    let n = pairs.len() as u64;
    let total_pos = positives as u64;
    let curve = candidate_thresholds(probs)
        .into_iter()
        .map(|t| {
            let below = pairs.partition_point(|&(p, _)| p < t);
            let predicted = n - below as u64;
            let tp = total_pos - positives_below[below];
            let fp = predicted - tp;
            let fn_ = total_pos - tp;
            let tn = n - predicted - fn_;
            let cm = ConfusionMatrix::new(tp, fp, fn_, tn);
            let s = classification_scores(&cm);
            PrPoint {
                threshold: t,
                precision: s.precision,
                recall: s.recall,
                f1: s.f1,
                confusion: cm,
            }
        })
        .collect();
    Ok(curve)
}

pub fn pr_curve_csv(curve: &[PrPoint]) -> String {
    let mut out = String::from("threshold,precision,recall,f1,tp,fp,fn,tn\n");
    for p in curve {
        let c = p.confusion;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            p.threshold, p.precision, p.recall, p.f1, c.tp, c.fp, c.fn_, c.tn
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub index: usize,
    pub feature: String,
    pub origin: String,
    pub gain: f64,
}

/// Mean decrease in Gini impurity: sample-weighted impurity decrease of
/// every split, summed per feature across all trees and normalized to sum
/// to 1. Only features with positive gain are listed, highest first.
pub fn feature_importance(forest: &RandomForest, featurizer: Option<&FittedFeaturizer>) -> Vec<FeatureImportance> {
    let raw = forest.impurity_decrease_per_feature();
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Vec::new();
    }
    let mut ranked: Vec<FeatureImportance> = raw
        .iter()
        .enumerate()
        .filter(|(_, &g)| g > 0.0)
        .map(|(index, &g)| {
            let (feature, origin) = match featurizer.and_then(|f| f.column(index)) {
                Some(col) => (col.name(), col.origin().to_owned()),
                None => (format!("f{index}"), "unknown".to_owned()),
            };
            FeatureImportance {
                index,
                feature,
                origin,
                gain: g / total,
            }
        })
        .collect();
    ranked.sort_by(|a, b| b.gain.total_cmp(&a.gain).then(a.index.cmp(&b.index)));
    ranked
}

pub fn importance_csv(ranking: &[FeatureImportance]) -> String {
    let mut out = String::from("rank,feature,origin,gain\n");
    for (i, f) in ranking.iter().enumerate() {
        let _ = writeln!(out, "{},{},{},{}", i + 1, csv_field(&f.feature), f.origin, f.gain);
    }
    out
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(bits: &[u8]) -> Vec<Label> {
        bits.iter().map(|&b| Label::from_positive(b == 1)).collect()
    }

    #[test]
    fn confusion_cases() {
        let l = labels(&[1, 0, 1, 0]);
        let cm = confusion(&l, &l).unwrap();
        assert_eq!((cm.fp, cm.fn_), (0, 0));

        let cm = confusion(&labels(&[1, 0]), &labels(&[0, 1])).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(0, 1, 1, 0));

        let cm = confusion(&labels(&[1, 1, 0, 0, 0]), &labels(&[1, 0, 0, 0, 1])).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(1, 1, 1, 2));

        assert!(matches!(
            confusion(&labels(&[1]), &labels(&[1, 0])),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn perfect_classifier() {
        let s = classification_scores(&ConfusionMatrix::new(1, 0, 0, 1));
        assert_eq!(s, Scores { precision: 1.0, recall: 1.0, f1: 1.0, mcc: 1.0 });
    }

    #[test]
    fn worked_scores() {
        let s = classification_scores(&ConfusionMatrix::new(98, 2, 7, 893));
        assert!((s.precision - 0.98).abs() < 1e-12);
        assert!((s.recall - 98.0 / 105.0).abs() < 1e-12);
        // 2*tp / (2*tp + fp + fn)
        assert!((s.f1 - 196.0 / 205.0).abs() < 1e-12);
        let mcc = (893.0 * 98.0 - 2.0 * 7.0) / (900.0f64 * 100.0 * 895.0 * 105.0).sqrt();
        assert!((s.mcc - mcc).abs() < 1e-12);
        assert!((s.f1 - 0.956_10).abs() < 5e-6);
        assert!((s.mcc - 0.951_438).abs() < 5e-7);
    }

    #[test]
    fn degenerate_denominators() {
        let s = classification_scores(&ConfusionMatrix::new(0, 0, 3, 5));
        assert_eq!(s.precision, 0.0);
        assert_eq!(s.f1, 0.0);
        assert_eq!(s.mcc, 0.0);
        assert_eq!(classification_scores(&ConfusionMatrix::default()), Scores::default());
    }

    #[test]
    fn pr_curve_two_points() {
        let curve = pr_curve(&[0.9, 0.1], &labels(&[1, 0])).unwrap();
        assert!(curve.iter().any(|p| p.precision == 1.0 && p.recall == 1.0));
        let ts: Vec<f64> = curve.iter().map(|p| p.threshold).collect();
        assert_eq!(ts, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn pr_curve_rejects_single_class() {
        assert!(matches!(pr_curve(&[0.2, 0.4], &labels(&[1, 1])), Err(Error::SingleClass(_))));
    }

    #[test]
    fn threshold_zero_is_prevalence() {
        let probs = [0.3, 0.7, 0.1, 0.9, 0.5, 0.5];
        let curve = pr_curve(&probs, &labels(&[1, 0, 1, 0, 0, 1])).unwrap();
        assert_eq!(curve[0].threshold, 0.0);
        assert_eq!(curve[0].precision, 0.5);
        assert_eq!(curve[0].recall, 1.0);
        assert!(curve.windows(2).all(|w| w[0].recall >= w[1].recall));
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(csv_field("plain"), "plain");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
    }
}
