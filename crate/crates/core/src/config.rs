//! Run configuration read from a flat `key = value` file.
//!
//! Blank lines and lines starting with `#` are ignored. List values are
//! comma separated, except `exclude_builds` which uses `;` because builder
//! names may contain commas. Command-line overrides go through
//! [`RunConfig::set`] after the file is read, so they win.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{AutoRule, BuildRange, MassFailurePolicy};
use crate::costmodel::CostInputs;
use crate::error::{Error, Result};
use crate::evaluation::{EvaluationConfig, Strategy};
use crate::featurizer::FeaturizerConfig;
use crate::forest::{ParamSpace, SearchConfig};
use crate::history::HistoryWindow;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub records: Option<PathBuf>,
    /// Outcome history; derived from the records when absent.
    pub history: Option<PathBuf>,
    /// Suite categories; the bundled mapping when absent.
    pub mapping: Option<PathBuf>,
    pub strict_mapping: bool,
    /// Model file read by `predict` and `importance`.
    pub model: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub window: u32,
    pub exclude_builds: Vec<BuildRange>,
    pub auto_rule_factor: Option<f64>,
    pub auto_rule_floor: Option<u64>,
    pub max_vocabulary: usize,
    pub space: ParamSpace,
    pub n_iter: usize,
    pub folds: usize,
    pub split_ratio: f64,
    pub strategies: Vec<Strategy>,
    pub seed: u64,
    pub cost: CostInputs,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let eval = EvaluationConfig::default();
        RunConfig {
            records: None,
            history: None,
            mapping: None,
            strict_mapping: false,
            model: None,
            out_dir: PathBuf::from("failtriage-out"),
            window: HistoryWindow::DEFAULT.get(),
            exclude_builds: Vec::new(),
            auto_rule_factor: None,
            auto_rule_floor: None,
            max_vocabulary: eval.featurizer.max_vocabulary,
            space: eval.search.space,
            n_iter: eval.search.n_iter,
            folds: eval.folds,
            split_ratio: eval.split_ratio,
            strategies: Strategy::standard_set(),
            seed: 0,
            cost: CostInputs::default(),
            synth: SynthConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn non_empty<T>(key: &str, v: Vec<T>) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::Config(format!("{key}: needs at least one value")));
    }
    Ok(v)
}

fn optional_depth(key: &str, s: &str) -> Result<Option<usize>> {
    match s.trim() {
        "none" | "unlimited" => Ok(None),
        other => parse(key, other).map(Some),
    }
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected true or false, got {other:?}"))),
    }
}

fn path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Every key accepted by [`RunConfig::set`].
    pub const KEYS: &'static [&'static str] = &[
        "records",
        "history",
        "mapping",
        "strict_mapping",
        "model",
        "out_dir",
        "window",
        "exclude_builds",
        "auto_rule_factor",
        "auto_rule_floor",
        "max_vocabulary",
        "search.n_trees",
        "search.max_depth",
        "search.min_samples_split",
        "search.min_samples_leaf",
        "search.max_features",
        "search.class_weight",
        "search.bootstrap",
        "n_iter",
        "folds",
        "split_ratio",
        "strategies",
        "seed",
        "cost.false_alerts",
        "cost.legit",
        "cost.rerun_seconds_per_false_alert",
        "cost.rerun_seconds_per_legit",
        "cost.predict_ms_per_failure",
        "cost.training_minutes",
        "cost.builds",
        "synth.n_failures",
        "synth.legit_fraction",
        "synth.separability",
        "synth.false_alert_tokens",
        "synth.legit_tokens",
        "synth.false_alert_mu",
        "synth.false_alert_sigma",
        "synth.legit_mu",
        "synth.legit_sigma",
        "synth.history_flake_bias",
        "synth.unreliable_legit_rate",
        "synth.builds",
        "synth.seed",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "records" => self.records = path(v),
            "history" => self.history = path(v),
            "mapping" => self.mapping = path(v),
            "strict_mapping" => self.strict_mapping = flag(key, v)?,
            "model" => self.model = path(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "window" => self.window = parse(key, v)?,
            "exclude_builds" => {
                self.exclude_builds = v
                    .split(';')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(BuildRange::parse)
                    .collect::<Result<_>>()?
            }
            "auto_rule_factor" => self.auto_rule_factor = if v == "none" { None } else { Some(parse(key, v)?) },
            "auto_rule_floor" => self.auto_rule_floor = if v == "none" { None } else { Some(parse(key, v)?) },
            "max_vocabulary" => self.max_vocabulary = parse(key, v)?,
            "search.n_trees" => self.space.n_trees = non_empty(key, list(key, v)?)?,
            "search.max_depth" => {
                self.space.max_depth = non_empty(
                    key,
                    v.split(',').map(|s| optional_depth(key, s)).collect::<Result<_>>()?,
                )?
            }
            "search.min_samples_split" => self.space.min_samples_split = non_empty(key, list(key, v)?)?,
            "search.min_samples_leaf" => self.space.min_samples_leaf = non_empty(key, list(key, v)?)?,
            "search.max_features" => self.space.max_features = non_empty(key, list(key, v)?)?,
            "search.class_weight" => self.space.class_weight = non_empty(key, list(key, v)?)?,
            "search.bootstrap" => {
                self.space.bootstrap =
                    non_empty(key, v.split(',').map(|s| flag(key, s)).collect::<Result<_>>()?)?
            }
            "n_iter" => self.n_iter = parse(key, v)?,
            "folds" => self.folds = parse(key, v)?,
            "split_ratio" => self.split_ratio = parse(key, v)?,
            // an empty list is allowed here and rejected when the run starts
            "strategies" => self.strategies = list(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "cost.false_alerts" => self.cost.false_alert_count = parse(key, v)?,
            "cost.legit" => self.cost.legit_count = parse(key, v)?,
            "cost.rerun_seconds_per_false_alert" => self.cost.rerun_seconds_per_false_alert = parse(key, v)?,
            "cost.rerun_seconds_per_legit" => self.cost.rerun_seconds_per_legit = parse(key, v)?,
            "cost.predict_ms_per_failure" => self.cost.predict_milliseconds_per_failure = parse(key, v)?,
            "cost.training_minutes" => self.cost.training_minutes = parse(key, v)?,
            "cost.builds" => self.cost.build_count = parse(key, v)?,
            "synth.n_failures" => self.synth.n_failures = parse(key, v)?,
            "synth.legit_fraction" => self.synth.legit_fraction = parse(key, v)?,
            "synth.separability" => self.synth.separability = parse(key, v)?,
            "synth.false_alert_tokens" => self.synth.false_alert_tokens = list(key, v)?,
            "synth.legit_tokens" => self.synth.legit_tokens = list(key, v)?,
            "synth.false_alert_mu" => self.synth.false_alert_duration.mu = parse(key, v)?,
            "synth.false_alert_sigma" => self.synth.false_alert_duration.sigma = parse(key, v)?,
            "synth.legit_mu" => self.synth.legit_duration.mu = parse(key, v)?,
            "synth.legit_sigma" => self.synth.legit_duration.sigma = parse(key, v)?,
            "synth.history_flake_bias" => self.synth.history_flake_bias = parse(key, v)?,
            "synth.unreliable_legit_rate" => self.synth.unreliable_legit_rate = parse(key, v)?,
            "synth.builds" => self.synth.builds = parse(key, v)?,
            "synth.seed" => self.synth.seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
            self.set(key.trim(), value.trim()).map_err(|e| {
                let detail = match e {
                    Error::Config(msg) => msg,
                    other => other.to_string(),
                };
                Error::Config(format!("line {}: {detail}", i + 1))
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::read(path, e))?;
        Self::parse(&text)
    }

    pub fn window(&self) -> Result<HistoryWindow> {
        HistoryWindow::new(self.window)
    }

    pub fn mass_failure_policy(&self) -> Result<MassFailurePolicy> {
        let auto_rule = match (self.auto_rule_factor, self.auto_rule_floor) {
            (None, None) => None,
            (Some(threshold_factor), Some(absolute_floor)) => Some(AutoRule {
                threshold_factor,
                absolute_floor,
            }),
            _ => {
                return Err(Error::Config(
                    "auto_rule_factor and auto_rule_floor must be set together".into(),
                ))
            }
        };
        let policy = MassFailurePolicy {
            explicit_build_exclusions: self.exclude_builds.clone(),
            auto_rule,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn evaluation(&self) -> EvaluationConfig {
        EvaluationConfig {
            split_ratio: self.split_ratio,
            folds: self.folds,
            seed: self.seed,
            featurizer: FeaturizerConfig {
                max_vocabulary: self.max_vocabulary,
            },
            search: SearchConfig {
                space: self.space.clone(),
                n_iter: self.n_iter,
                folds: self.folds,
                seed: self.seed,
            },
        }
    }

    /// The effective configuration in file syntax.
    pub fn render(&self) -> String {
        let join = |items: Vec<String>, sep: &str| items.join(sep);
        let show = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let strs = |v: &[String]| v.join(",");
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("records", show(&self.records));
        kv("history", show(&self.history));
        kv("mapping", show(&self.mapping));
        kv("strict_mapping", self.strict_mapping.to_string());
        kv("model", show(&self.model));
        kv("out_dir", self.out_dir.display().to_string());
        kv("window", self.window.to_string());
        kv(
            "exclude_builds",
            join(
                self.exclude_builds
                    .iter()
                    .map(|r| format!("{}:{}-{}", r.builder, r.first, r.last))
                    .collect(),
                "; ",
            ),
        );
        kv("auto_rule_factor", opt(self.auto_rule_factor.map(|v| v.to_string())));
        kv("auto_rule_floor", opt(self.auto_rule_floor.map(|v| v.to_string())));
        kv("max_vocabulary", self.max_vocabulary.to_string());
        let s = &self.space;
        kv("search.n_trees", join(s.n_trees.iter().map(ToString::to_string).collect(), ","));
        kv(
            "search.max_depth",
            join(s.max_depth.iter().map(|d| opt(d.map(|d| d.to_string()))).collect(), ","),
        );
        kv("search.min_samples_split", join(s.min_samples_split.iter().map(ToString::to_string).collect(), ","));
        kv("search.min_samples_leaf", join(s.min_samples_leaf.iter().map(ToString::to_string).collect(), ","));
        kv("search.max_features", join(s.max_features.iter().map(ToString::to_string).collect(), ","));
        kv("search.class_weight", join(s.class_weight.iter().map(ToString::to_string).collect(), ","));
        kv("search.bootstrap", join(s.bootstrap.iter().map(ToString::to_string).collect(), ","));
        kv("n_iter", self.n_iter.to_string());
        kv("folds", self.folds.to_string());
        kv("split_ratio", self.split_ratio.to_string());
        kv("strategies", join(self.strategies.iter().map(|s| s.slug()).collect(), ","));
        kv("seed", self.seed.to_string());
        let c = &self.cost;
        kv("cost.false_alerts", c.false_alert_count.to_string());
        kv("cost.legit", c.legit_count.to_string());
        kv("cost.rerun_seconds_per_false_alert", c.rerun_seconds_per_false_alert.to_string());
        kv("cost.rerun_seconds_per_legit", c.rerun_seconds_per_legit.to_string());
        kv("cost.predict_ms_per_failure", c.predict_milliseconds_per_failure.to_string());
        kv("cost.training_minutes", c.training_minutes.to_string());
        kv("cost.builds", c.build_count.to_string());
        let y = &self.synth;
        kv("synth.n_failures", y.n_failures.to_string());
        kv("synth.legit_fraction", y.legit_fraction.to_string());
        kv("synth.separability", y.separability.to_string());
        kv("synth.false_alert_tokens", strs(&y.false_alert_tokens));
        kv("synth.legit_tokens", strs(&y.legit_tokens));
        kv("synth.false_alert_mu", y.false_alert_duration.mu.to_string());
        kv("synth.false_alert_sigma", y.false_alert_duration.sigma.to_string());
        kv("synth.legit_mu", y.legit_duration.mu.to_string());
        kv("synth.legit_sigma", y.legit_duration.sigma.to_string());
        kv("synth.history_flake_bias", y.history_flake_bias.to_string());
        kv("synth.unreliable_legit_rate", y.unreliable_legit_rate.to_string());
        kv("synth.builds", y.builds.to_string());
        kv("synth.seed", y.seed.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{Category, Scope};
    use crate::forest::MaxFeatures;

    #[test]
    fn parses_file_syntax() {
        let text = "\
# comment
records = data/records.jsonl
window = 20
exclude_builds = Linux Tests:98177-98192; Win10 Tests x64:53760-53768
auto_rule_factor = 10
auto_rule_floor = 50
search.max_depth = 8, none
search.max_features = sqrt, 0.3
strategies = all->all, unit->unit
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.records, Some(PathBuf::from("data/records.jsonl")));
        assert_eq!(cfg.window, 20);
        assert_eq!(cfg.exclude_builds.len(), 2);
        assert_eq!(cfg.exclude_builds[1].builder, "Win10 Tests x64");
        assert_eq!(cfg.mass_failure_policy().unwrap().auto_rule.unwrap().absolute_floor, 50);
        assert_eq!(cfg.space.max_depth, vec![Some(8), None]);
        assert_eq!(cfg.space.max_features, vec![MaxFeatures::Sqrt, MaxFeatures::Fraction(0.3)]);
        assert_eq!(cfg.strategies[1], Strategy::new(Scope::Category(Category::Unit), Scope::Category(Category::Unit)));
    }

    #[test]
    fn later_values_win() {
        let mut cfg = RunConfig::parse("seed = 3\n").unwrap();
        cfg.set("seed", "9").unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn errors_name_the_line() {
        let err = RunConfig::parse("seed = 1\nbogus = 2\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(RunConfig::parse("no equals sign").is_err());
        assert!(RunConfig::parse("auto_rule_factor = 3").unwrap().mass_failure_policy().is_err());
    }

    #[test]
    fn render_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("exclude_builds", "Linux Tests:1-2").unwrap();
        cfg.set("records", "r.jsonl").unwrap();
        let again = RunConfig::parse(&cfg.render()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn every_key_is_settable() {
        let rendered = RunConfig::default().render();
        let keys: Vec<&str> = rendered.lines().filter_map(|l| l.split_once(" = ")).map(|(k, _)| k).collect();
        assert_eq!(keys, RunConfig::KEYS);
    }
}
