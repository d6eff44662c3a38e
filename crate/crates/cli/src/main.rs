use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use failtriage_core::config::RunConfig;
use failtriage_core::corpus::{dataset_stats, filter_mass_failure_builds, write_jsonl, write_records, Label};
use failtriage_core::costmodel::compare_costs;
use failtriage_core::evaluation::{map_category, train_model, Scope};
use failtriage_core::featurizer::FittedFeaturizer;
use failtriage_core::forest::RandomForest;
use failtriage_core::history::history_profile;
use failtriage_core::metrics::{feature_importance, importance_csv};
use failtriage_core::pipeline::{
    clean, cost_inputs_for, evaluate, ingest, load_history_for, load_mapping, run_pipeline, write_json, write_text,
    Metadata,
};
use failtriage_core::synth::generate_synthetic;
use failtriage_core::{Error, ErrorKind, Result};
use serde::Serialize;

/// Classifies CI test failures as false alerts or legitimate failures.
#[derive(Parser)]
#[command(name = "failtriage", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand. Values given here override the
/// configuration file; `--set` is applied last.
#[derive(Args, Clone, Default)]
struct Common {
    /// Configuration file with `key = value` lines.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,
    /// Extra `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Line-delimited failure records.
    #[arg(long)]
    records: Option<String>,
    /// Line-delimited outcome history; derived from the records if absent.
    #[arg(long)]
    history: Option<String>,
    /// Suite-to-category mapping file.
    #[arg(long)]
    mapping: Option<String>,
    /// Directory for reports and models.
    #[arg(long)]
    out_dir: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// History window in commits.
    #[arg(long)]
    window: Option<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let flags = [
            ("records", &self.records),
            ("history", &self.history),
            ("mapping", &self.mapping),
            ("out_dir", &self.out_dir),
            ("seed", &self.seed),
            ("window", &self.window),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate a record file and report rejected lines and counts.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Write the accepted records here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Apply the mass-failure and unreliable-failure filters.
    Clean {
        #[command(flatten)]
        common: Common,
        /// Cleaned records; defaults to OUT_DIR/clean_records.jsonl.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Generate a synthetic dataset with history and ground truth.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_failures: Option<String>,
        #[arg(long)]
        legit_fraction: Option<String>,
        #[arg(long)]
        separability: Option<String>,
        #[arg(long)]
        builds: Option<String>,
        #[arg(long)]
        history_flake_bias: Option<String>,
    },
    /// Train one model on the cleaned records of a scope.
    Train {
        #[command(flatten)]
        common: Common,
        /// all, gui, integration or unit.
        #[arg(long, default_value = "all")]
        scope: String,
    },
    /// Run the configured training strategies and write their reports.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated strategies such as `all->all,unit->unit`.
        #[arg(long)]
        strategies: Option<String>,
        #[arg(long)]
        n_iter: Option<String>,
    },
    /// Rank the features of a trained model.
    Importance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Defaults to featurizer.json next to the model.
        #[arg(long)]
        featurizer: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        top: usize,
    },
    /// Compare rerun cost with classifier cost.
    Cost {
        #[command(flatten)]
        common: Common,
        /// Print the machine-readable report instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Flake- and fail-rate statistics per label.
    ProfileHistory {
        #[command(flatten)]
        common: Common,
    },
    /// Score records with a trained model.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        featurizer: Option<PathBuf>,
        /// Predictions file; standard output when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Full pipeline: ingest, clean, evaluate, importance and cost.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategies: Option<String>,
        #[arg(long)]
        n_iter: Option<String>,
    },
}

fn set_opt(cfg: &mut RunConfig, key: &str, value: &Option<String>) -> Result<()> {
    match value {
        Some(v) => cfg.set(key, v),
        None => Ok(()),
    }
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::Write {
        path: cfg.out_dir.clone(),
        source: e,
    })?;
    Ok(&cfg.out_dir)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path).map(BufWriter::new).map_err(|e| Error::Write {
        path: path.to_owned(),
        source: e,
    })
}

fn model_paths(cfg: &RunConfig, model: &Option<PathBuf>, featurizer: &Option<PathBuf>) -> Result<(PathBuf, PathBuf)> {
    let model = model
        .clone()
        .or_else(|| cfg.model.clone())
        .ok_or_else(|| Error::Config("no model given (use --model or set `model`)".into()))?;
    let featurizer = featurizer
        .clone()
        .unwrap_or_else(|| model.with_file_name("featurizer.json"));
    Ok((model, featurizer))
}

#[derive(Serialize)]
struct Prediction<'a> {
    test_id: &'a str,
    builder: &'a str,
    build_id: i64,
    probability: f64,
    label: Label,
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest { common, output } => {
            let cfg = common.load()?;
            let (ds, rejections) = ingest(&cfg)?;
            eprintln!("{} records accepted, {} lines rejected", ds.len(), rejections.len());
            for r in &rejections {
                eprintln!("line {}: {}", r.line, r.reason);
            }
            if let Some(path) = output {
                write_records(&ds, create(&path)?)?;
            }
            let dir = out_dir(&cfg)?;
            write_jsonl(&rejections, create(&dir.join("rejections.jsonl"))?)?;
            print!("{}", dataset_stats(&ds).render());
        }
        Command::Clean { common, output } => {
            let cfg = common.load()?;
            let (raw, rejections) = ingest(&cfg)?;
            let cleaned = clean(&cfg, &raw)?;
            let dir = out_dir(&cfg)?;
            let meta = Metadata::new(cfg.seed);
            let path = output.unwrap_or_else(|| dir.join("clean_records.jsonl"));
            write_records(&cleaned.dataset, create(&path)?)?;
            #[derive(Serialize)]
            struct Log<'a> {
                rejected_lines: usize,
                mass_failure: &'a [failtriage_core::corpus::BuildExclusion],
                unreliable: &'a [failtriage_core::history::UnreliableExclusion],
            }
            write_json(
                &dir.join("exclusions.json"),
                &meta,
                Log {
                    rejected_lines: rejections.len(),
                    mass_failure: &cleaned.mass_failure,
                    unreliable: &cleaned.unreliable,
                },
            )?;
            eprintln!(
                "{} records in, {} rejected lines, {} mass-failure builds and {} unreliable failures excluded, {} kept",
                raw.len(),
                rejections.len(),
                cleaned.mass_failure.len(),
                cleaned.unreliable.len(),
                cleaned.dataset.len()
            );
            print!("{}", dataset_stats(&cleaned.dataset).render());
        }
        Command::Synth {
            mut common,
            n_failures,
            legit_fraction,
            separability,
            builds,
            history_flake_bias,
        } => {
            // --seed seeds the generator here
            let seed = common.seed.take();
            let mut cfg = common.load()?;
            set_opt(&mut cfg, "synth.seed", &seed)?;
            set_opt(&mut cfg, "synth.n_failures", &n_failures)?;
            set_opt(&mut cfg, "synth.legit_fraction", &legit_fraction)?;
            set_opt(&mut cfg, "synth.separability", &separability)?;
            set_opt(&mut cfg, "synth.builds", &builds)?;
            set_opt(&mut cfg, "synth.history_flake_bias", &history_flake_bias)?;
            cfg.synth.window = cfg.window;
            let out = generate_synthetic(&cfg.synth)?;
            let dir = out_dir(&cfg)?;
            out.write_to(dir)?;
            eprintln!(
                "wrote {} records ({} legitimate) and {} history entries to {}",
                out.dataset.len(),
                out.truth.legitimate.failures,
                out.truth.history_entries,
                dir.display()
            );
        }
        Command::Train { common, scope } => {
            let cfg = common.load()?;
            let scope: Scope = scope.parse()?;
            let (mapping, _) = load_mapping(&cfg)?;
            let (raw, _) = ingest(&cfg)?;
            let cleaned = clean(&cfg, &raw)?;
            let ds = &cleaned.dataset;
            let keep = ds
                .records
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let c = map_category(&r.suite, &mapping)?;
                    Ok(match scope {
                        Scope::All => Some(i),
                        Scope::Category(want) => (c == want).then_some(i),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let keep: Vec<usize> = keep.into_iter().flatten().collect();
            let train = ds.select(&keep, &format!("train scope {scope}"));
            if train.is_empty() {
                return Err(Error::Empty(format!("training scope {scope} has no records")));
            }
            let model = train_model(&train, &cfg.evaluation())?;
            let dir = out_dir(&cfg)?;
            let model_path = cfg.model.clone().unwrap_or_else(|| dir.join("model.json"));
            model.forest.save(&model_path)?;
            model.featurizer.save(&model_path.with_file_name("featurizer.json"))?;
            write_json(&dir.join("search.json"), &Metadata::new(cfg.seed), &model.search)?;
            eprintln!(
                "trained {} trees on {} records; cv MCC {:.4}, threshold {:.4}; model at {}",
                model.forest.trees.len(),
                train.len(),
                model.search.best_mcc,
                model.forest.threshold,
                model_path.display()
            );
        }
        Command::Evaluate {
            common,
            strategies,
            n_iter,
        } => {
            let mut cfg = common.load()?;
            set_opt(&mut cfg, "strategies", &strategies)?;
            set_opt(&mut cfg, "n_iter", &n_iter)?;
            if cfg.strategies.is_empty() {
                return Err(Error::NoStrategies);
            }
            let (mapping, _) = load_mapping(&cfg)?;
            let (raw, _) = ingest(&cfg)?;
            let cleaned = clean(&cfg, &raw)?;
            let dir = out_dir(&cfg)?.to_owned();
            let evaluated = evaluate(&cfg, &cleaned.dataset, &mapping, &dir)?;
            print!("{}", evaluated.report.render_table());
        }
        Command::Importance {
            common,
            model,
            featurizer,
            top,
        } => {
            let cfg = common.load()?;
            let (model_path, featurizer_path) = model_paths(&cfg, &model, &featurizer)?;
            let forest = RandomForest::load(&model_path)?;
            let featurizer = FittedFeaturizer::load(&featurizer_path)?;
            forest.check_featurizer(&featurizer)?;
            let ranking = feature_importance(&forest, Some(&featurizer));
            let dir = out_dir(&cfg)?;
            write_text(&dir.join("importance.csv"), &Metadata::new(forest.params.seed), &importance_csv(&ranking))?;
            println!("{:>4}  {:<32} {:<20} {:>8}", "rank", "feature", "origin", "gain");
            for (i, f) in ranking.iter().take(top).enumerate() {
                println!("{:>4}  {:<32} {:<20} {:>8.4}", i + 1, f.feature, f.origin, f.gain);
            }
        }
        Command::Cost { common, json } => {
            let cfg = common.load()?;
            let inputs = if cfg.records.is_some() {
                let (raw, _) = ingest(&cfg)?;
                let cleaned = clean(&cfg, &raw)?;
                cost_inputs_for(&cfg, &dataset_stats(&cleaned.dataset))
            } else {
                cfg.cost
            };
            let report = compare_costs(&inputs)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.render());
            }
        }
        Command::ProfileHistory { common } => {
            let cfg = common.load()?;
            let (raw, _) = ingest(&cfg)?;
            let (ds, _) = filter_mass_failure_builds(&raw, &cfg.mass_failure_policy()?)?;
            let (hist, rejections) = load_history_for(&cfg, &ds)?;
            if !rejections.is_empty() {
                eprintln!("{} history lines rejected", rejections.len());
            }
            let profile = history_profile(&ds, &hist, cfg.window()?);
            let dir = out_dir(&cfg)?;
            write_text(&dir.join("history_profile.csv"), &Metadata::new(cfg.seed), &profile.to_csv())?;
            println!(
                "{:<12} {:>9} {:>16} {:>18} {:>14}",
                "label", "failures", "flakeRate = 0", "failRate > 0", "clean history"
            );
            for p in &profile.labels {
                println!(
                    "{:<12} {:>9} {:>15.2}% {:>17.2}% {:>13.2}%",
                    p.label.to_string(),
                    p.failures,
                    100.0 * p.flake_rate_zero,
                    100.0 * p.fail_rate_positive,
                    100.0 * p.clean_history
                );
            }
        }
        Command::Predict {
            common,
            model,
            featurizer,
            output,
        } => {
            let cfg = common.load()?;
            let (model_path, featurizer_path) = model_paths(&cfg, &model, &featurizer)?;
            let forest = RandomForest::load(&model_path)?;
            let featurizer = FittedFeaturizer::load(&featurizer_path)?;
            let (ds, rejections) = ingest(&cfg)?;
            if !rejections.is_empty() {
                eprintln!("{} record lines rejected", rejections.len());
            }
            let probs = forest.predict_records(&featurizer, &ds.records)?;
            let predictions: Vec<Prediction> = ds
                .records
                .iter()
                .zip(&probs)
                .map(|(r, &p)| Prediction {
                    test_id: &r.test_id,
                    builder: &r.builder,
                    build_id: r.build_id,
                    probability: p,
                    label: Label::from_positive(p >= forest.threshold),
                })
                .collect();
            match output {
                Some(path) => write_jsonl(&predictions, create(&path)?)?,
                None => write_jsonl(&predictions, io::stdout().lock())?,
            }
        }
        Command::Run {
            common,
            strategies,
            n_iter,
        } => {
            let mut cfg = common.load()?;
            set_opt(&mut cfg, "strategies", &strategies)?;
            set_opt(&mut cfg, "n_iter", &n_iter)?;
            let summary = run_pipeline(&cfg)?;
            let mut out = io::stdout().lock();
            let _ = write!(out, "{}", summary.stats.render());
            let _ = writeln!(out);
            let _ = write!(out, "{}", summary.evaluation.render_table());
            let _ = writeln!(out);
            let _ = write!(out, "{}", summary.cost.render());
            let _ = writeln!(out, "\nreports written to {}", summary.out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Internal => 3,
            })
        }
    }
}
