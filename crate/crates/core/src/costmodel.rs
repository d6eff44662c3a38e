//! Rerun-versus-classifier cost comparison.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Failure counts and unit costs. Defaults describe the Chromium dataset:
/// two testers, 1,000 builds each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CostInputs {
    pub false_alert_count: u64,
    pub legit_count: u64,
    pub rerun_seconds_per_false_alert: f64,
    pub rerun_seconds_per_legit: f64,
    pub predict_milliseconds_per_failure: f64,
    pub training_minutes: f64,
    pub build_count: u64,
}

impl Default for CostInputs {
    fn default() -> Self {
        CostInputs {
            false_alert_count: 969_417,
            legit_count: 225_762,
            rerun_seconds_per_false_alert: 2.3,
            rerun_seconds_per_legit: 1.0,
            predict_milliseconds_per_failure: 0.001,
            training_minutes: 30.0,
            build_count: 2_000,
        }
    }
}

impl CostInputs {
    pub fn validate(&self) -> Result<()> {
        let reals = [
            ("rerunSecondsPerFalseAlert", self.rerun_seconds_per_false_alert),
            ("rerunSecondsPerLegit", self.rerun_seconds_per_legit),
            ("predictMillisecondsPerFailure", self.predict_milliseconds_per_failure),
            ("trainingMinutes", self.training_minutes),
        ];
        for (name, v) in reals {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidParam(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.build_count == 0 {
            return Err(Error::InvalidParam("buildCount must be >= 1".into()));
        }
        Ok(())
    }

    pub fn failures(&self) -> u64 {
        self.false_alert_count + self.legit_count
    }
}

/// Rerun cost over classifier cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Speedup {
    Finite(f64),
    /// The classifier costs nothing while reruns do.
    Unbounded,
    /// Both costs are zero.
    NotApplicable,
}

impl Speedup {
    pub fn value(self) -> Option<f64> {
        match self {
            Speedup::Finite(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CostReport {
    pub inputs: CostInputs,
    pub rerun_total_hours: f64,
    pub rerun_per_build_minutes: f64,
    pub classifier_total_seconds: f64,
    pub classifier_per_build_milliseconds: f64,
    pub speedup_factor: Speedup,
    /// One-off training cost, not included in the classifier totals.
    pub training_minutes: f64,
    pub notes: Vec<String>,
}

pub fn compare_costs(ci: &CostInputs) -> Result<CostReport> {
    ci.validate()?;
    let rerun_seconds = ci.false_alert_count as f64 * ci.rerun_seconds_per_false_alert
        + ci.legit_count as f64 * ci.rerun_seconds_per_legit;
    let classifier_ms = ci.failures() as f64 * ci.predict_milliseconds_per_failure;
    let builds = ci.build_count as f64;
    let speedup = match (rerun_seconds > 0.0, classifier_ms > 0.0) {
        (_, true) => Speedup::Finite(rerun_seconds * 1e3 / classifier_ms),
        (true, false) => Speedup::Unbounded,
        (false, false) => Speedup::NotApplicable,
    };
    let mut notes = vec![format!(
        "training ({} min) is a one-off cost amortized over every later prediction and is excluded from the totals",
        ci.training_minutes
    )];
    if speedup == Speedup::Unbounded {
        notes.push("classifier cost is zero; speedup is unbounded".into());
    }
    Ok(CostReport {
        inputs: *ci,
        rerun_total_hours: rerun_seconds / 3600.0,
        rerun_per_build_minutes: rerun_seconds / builds / 60.0,
        classifier_total_seconds: classifier_ms / 1e3,
        classifier_per_build_milliseconds: classifier_ms / builds,
        speedup_factor: speedup,
        training_minutes: ci.training_minutes,
        notes,
    })
}

impl CostReport {
    /// Plain-text rendering with one table for reruns and one for the
    /// classifier.
    pub fn render(&self) -> String {
        let ci = &self.inputs;
        let mut out = String::new();
        let _ = writeln!(out, "Reruns");
        let _ = writeln!(
            out,
            "{:>18} {:>14} {:>18} {:>14} {:>16} {:>12}",
            "False alert avg", "False alerts", "Legit avg", "Legit", "Per build", "Total"
        );
        let _ = writeln!(
            out,
            "{:>18} {:>14} {:>18} {:>14} {:>16} {:>12}",
            format!("{} s", ci.rerun_seconds_per_false_alert),
            ci.false_alert_count,
            format!("{} s", ci.rerun_seconds_per_legit),
            ci.legit_count,
            format!("{:.2} min", self.rerun_per_build_minutes),
            format!("{:.2} h", self.rerun_total_hours)
        );
        let _ = writeln!(out);
        let _ = writeln!(out, "Classifier");
        let _ = writeln!(
            out,
            "{:>14} {:>18} {:>14} {:>16} {:>12}",
            "Training", "Per failure", "Failures", "Per build", "Total"
        );
        let _ = writeln!(
            out,
            "{:>14} {:>18} {:>14} {:>16} {:>12}",
            format!("{} min", ci.training_minutes),
            format!("{} ms", ci.predict_milliseconds_per_failure),
            ci.failures(),
            format!("{:.4} ms", self.classifier_per_build_milliseconds),
            format!("{:.4} s", self.classifier_total_seconds)
        );
        let _ = writeln!(out);
        let speedup = match self.speedup_factor {
            Speedup::Finite(v) => format!("{v:.0}x"),
            Speedup::Unbounded => "unbounded".into(),
            Speedup::NotApplicable => "n/a".into(),
        };
        let _ = writeln!(out, "Speedup: {speedup}");
        for n in &self.notes {
            let _ = writeln!(out, "Note: {n}");
        }
        out
    }
}
