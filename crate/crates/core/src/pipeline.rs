//! End-to-end run: ingest, clean, evaluate the requested strategies, rank
//! features and compare costs, writing every artifact to one directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::corpus::{
    dataset_stats, filter_mass_failure_builds, load_records_file, BuildExclusion, Dataset, DatasetStats, Rejection,
};
use crate::costmodel::{compare_costs, CostInputs, CostReport};
use crate::error::{Error, Result};
use crate::evaluation::{run_strategy, CategoryMapping, EvaluationReport, Strategy};
use crate::history::{filter_unreliable, history_profile, load_history_file, HistoryProfile, TestHistory, UnreliableExclusion};
use crate::metrics::{feature_importance, importance_csv, pr_curve_csv, FeatureImportance};

/// Stamp written into every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Metadata {
    pub tool_version: String,
    pub seed: u64,
}

impl Metadata {
    pub fn new(seed: u64) -> Self {
        Metadata {
            tool_version: crate::TOOL_VERSION.into(),
            seed,
        }
    }

    /// Comment line prefixed to CSV and text artifacts.
    pub fn comment(&self) -> String {
        format!("# {} seed {}\n", self.tool_version, self.seed)
    }
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    #[serde(flatten)]
    meta: &'a Metadata,
    #[serde(flatten)]
    body: T,
}

pub fn write_json<T: Serialize>(path: &Path, meta: &Metadata, body: T) -> Result<()> {
    let text = serde_json::to_string_pretty(&Stamped { meta, body })? + "\n";
    fs::write(path, text).map_err(|e| Error::write(path, e))
}

pub fn write_text(path: &Path, meta: &Metadata, text: &str) -> Result<()> {
    fs::write(path, meta.comment() + text).map_err(|e| Error::write(path, e))
}

pub fn records_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.records
        .as_deref()
        .ok_or_else(|| Error::Config("no records path configured (set `records`)".into()))
}

pub fn ingest(cfg: &RunConfig) -> Result<(Dataset, Vec<Rejection>)> {
    load_records_file(records_path(cfg)?)
}

pub fn load_mapping(cfg: &RunConfig) -> Result<(CategoryMapping, Vec<Rejection>)> {
    match &cfg.mapping {
        Some(p) => CategoryMapping::load_file(p, cfg.strict_mapping),
        None => {
            let mut mapping = CategoryMapping::default();
            mapping.strict = cfg.strict_mapping;
            Ok((mapping, Vec::new()))
        }
    }
}

/// History from the configured file, or derived from the records.
pub fn load_history_for(cfg: &RunConfig, ds: &Dataset) -> Result<(TestHistory, Vec<Rejection>)> {
    match &cfg.history {
        Some(p) => load_history_file(p),
        None => Ok((TestHistory::from_records(ds), Vec::new())),
    }
}

pub struct Cleaned {
    pub dataset: Dataset,
    pub history: TestHistory,
    pub mass_failure: Vec<BuildExclusion>,
    pub unreliable: Vec<UnreliableExclusion>,
    pub history_rejections: Vec<Rejection>,
}

/// Mass-failure filter, then the unreliable-failure filter.
pub fn clean(cfg: &RunConfig, ds: &Dataset) -> Result<Cleaned> {
    let (after_mass, mass_failure) = filter_mass_failure_builds(ds, &cfg.mass_failure_policy()?)?;
    let (history, history_rejections) = load_history_for(cfg, &after_mass)?;
    let (dataset, unreliable) = filter_unreliable(&after_mass, &history, cfg.window()?);
    Ok(Cleaned {
        dataset,
        history,
        mass_failure,
        unreliable,
        history_rejections,
    })
}

/// Cost inputs with the failure and build counts of `ds` and the unit
/// costs from the configuration.
pub fn cost_inputs_for(cfg: &RunConfig, stats: &DatasetStats) -> CostInputs {
    CostInputs {
        false_alert_count: stats.total.false_alerts.failures as u64,
        legit_count: stats.total.legitimate.failures as u64,
        build_count: (stats.total.builds as u64).max(1),
        ..cfg.cost
    }
}

#[derive(Debug)]
pub struct PipelineSummary {
    pub out_dir: PathBuf,
    pub stats: DatasetStats,
    pub profile: HistoryProfile,
    pub evaluation: EvaluationReport,
    pub importance: Vec<FeatureImportance>,
    pub cost: CostReport,
    pub model_files: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Exclusions<'a> {
    mass_failure: &'a [BuildExclusion],
    unreliable: &'a [UnreliableExclusion],
}

#[derive(Serialize)]
struct RejectionLog<'a> {
    records: &'a [Rejection],
    history: &'a [Rejection],
    mapping: &'a [Rejection],
}

#[derive(Serialize)]
struct Importance<'a> {
    strategy: String,
    features: &'a [FeatureImportance],
}

pub struct Evaluated {
    pub report: EvaluationReport,
    pub model_files: Vec<PathBuf>,
    /// Ranking from the first strategy's model.
    pub importance: (Strategy, Vec<FeatureImportance>),
}

/// Runs the configured strategies on `ds` and writes, under `out`, the
/// evaluation report plus one model directory per strategy.
pub fn evaluate(cfg: &RunConfig, ds: &Dataset, mapping: &CategoryMapping, out: &Path) -> Result<Evaluated> {
    if cfg.strategies.is_empty() {
        return Err(Error::NoStrategies);
    }
    let meta = Metadata::new(cfg.seed);
    let eval_cfg = cfg.evaluation();
    let mut reports = Vec::with_capacity(cfg.strategies.len());
    let mut model_files = Vec::new();
    let mut importance = None;
    for &strategy in &cfg.strategies {
        let run = run_strategy(ds, strategy, mapping, &eval_cfg)?;
        let dir = out.join("models").join(strategy.slug());
        fs::create_dir_all(&dir).map_err(|e| Error::write(&dir, e))?;
        let model_path = dir.join("model.json");
        run.model.forest.save(&model_path)?;
        run.model.featurizer.save(&dir.join("featurizer.json"))?;
        write_text(&dir.join("calibration.csv"), &meta, &pr_curve_csv(&run.model.calibration.curve))?;
        write_json(&dir.join("search.json"), &meta, &run.model.search)?;
        let ranking = feature_importance(&run.model.forest, Some(&run.model.featurizer));
        write_text(&dir.join("importance.csv"), &meta, &importance_csv(&ranking))?;
        model_files.push(model_path);
        importance.get_or_insert((strategy, ranking));
        reports.push(run.report);
    }
    let report = EvaluationReport::new(cfg.seed, reports);
    // the report carries its own version and seed fields
    let path = out.join("evaluation.json");
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::write(&path, e))?;
    write_text(&out.join("evaluation.txt"), &meta, &report.render_table())?;
    Ok(Evaluated {
        report,
        model_files,
        importance: importance.expect("at least one strategy ran"),
    })
}

/// Runs every stage and writes all artifacts under `cfg.out_dir`.
///
/// Model, featurizer and metric files depend only on the configuration
/// and inputs; wall-clock timings appear only in the evaluation report.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineSummary> {
    if cfg.strategies.is_empty() {
        return Err(Error::NoStrategies);
    }
    let meta = Metadata::new(cfg.seed);
    let (mapping, mapping_rejections) = load_mapping(cfg)?;
    let (raw, record_rejections) = ingest(cfg)?;
    let cleaned = clean(cfg, &raw)?;
    let ds = &cleaned.dataset;

    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::write(&out, e))?;
    write_text(&out.join("config.txt"), &meta, &cfg.render())?;
    write_json(
        &out.join("rejections.json"),
        &meta,
        RejectionLog {
            records: &record_rejections,
            history: &cleaned.history_rejections,
            mapping: &mapping_rejections,
        },
    )?;
    write_json(
        &out.join("exclusions.json"),
        &meta,
        Exclusions {
            mass_failure: &cleaned.mass_failure,
            unreliable: &cleaned.unreliable,
        },
    )?;
    let stats = dataset_stats(ds);
    write_json(&out.join("dataset_stats.json"), &meta, &stats)?;
    write_text(&out.join("dataset_stats.txt"), &meta, &stats.render())?;
    let profile = history_profile(ds, &cleaned.history, cfg.window()?);
    write_text(&out.join("history_profile.csv"), &meta, &profile.to_csv())?;

    let Evaluated {
        report: evaluation,
        model_files,
        importance: (first, ranking),
    } = evaluate(cfg, ds, &mapping, &out)?;

    write_json(
        &out.join("importance.json"),
        &meta,
        Importance {
            strategy: first.to_string(),
            features: &ranking,
        },
    )?;

    let cost = compare_costs(&cost_inputs_for(cfg, &stats))?;
    write_json(&out.join("cost.json"), &meta, &cost)?;
    write_text(&out.join("cost.txt"), &meta, &cost.render())?;

    Ok(PipelineSummary {
        out_dir: out,
        stats,
        profile,
        evaluation,
        importance: ranking,
        cost,
        model_files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_strategy_list_is_rejected_first() {
        let mut cfg = RunConfig::default();
        cfg.set("strategies", "").unwrap();
        let err = run_pipeline(&cfg).unwrap_err();
        assert_eq!(err.to_string(), "no strategies requested");
    }

    #[test]
    fn missing_records_path_is_named() {
        let mut cfg = RunConfig::default();
        cfg.set("records", "/nonexistent/records.jsonl").unwrap();
        let err = run_pipeline(&cfg).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/records.jsonl"), "{err}");
    }
}
