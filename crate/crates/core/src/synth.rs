//! Seeded generator of synthetic failure datasets with a known class
//! ratio, tunable separability and planted flake histories.
//!
//! `separability` controls every class-dependent signal at once. Each
//! artifact token slot, run duration and run tag status is drawn from the
//! record's own class distribution with probability `separability`, and
//! otherwise from a class-independent pool. At 0 nothing in the features
//! depends on the label; at 1 the signal tokens in the always-present
//! command artifact identify the class.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{write_jsonl, write_records, Dataset, FailureRecord, Label, RunStatus, RunTagStatus};
use crate::error::{Error, Result};
use crate::featurizer::{tokenize, Namespace};
use crate::history::{HistoryWindow, Outcome, TestHistory, TestKey};

/// Log-normal parameters of the run duration in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationParams {
    pub mu: f64,
    pub sigma: f64,
}

impl DurationParams {
    /// Matches a median and interquartile range.
    pub fn from_quartiles(q1: f64, median: f64, q3: f64) -> Self {
        // z-score of the upper quartile of a standard normal
        const Z75: f64 = 0.674_489_750_196_081_7;
        DurationParams {
            mu: median.ln(),
            sigma: (q3 / q1).ln() / (2.0 * Z75),
        }
    }

    pub fn median(&self) -> f64 {
        self.mu.exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SynthConfig {
    pub n_failures: usize,
    pub legit_fraction: f64,
    pub separability: f64,
    pub false_alert_tokens: Vec<String>,
    pub legit_tokens: Vec<String>,
    pub false_alert_duration: DurationParams,
    pub legit_duration: DurationParams,
    /// Probability that a false alert occurs in a test that flaked within
    /// the preceding window.
    pub history_flake_bias: f64,
    /// Probability that a legitimate failure occurs in a test that flaked
    /// within the preceding window (removed by the unreliable filter).
    pub unreliable_legit_rate: f64,
    pub builds: usize,
    pub window: u32,
    pub seed: u64,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| (*s).to_owned()).collect()
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_failures: 20_000,
            legit_fraction: 0.05,
            separability: 0.9,
            false_alert_tokens: words(&["timeout", "elements", "portal", "next", "retry", "flaky", "race", "waiting"]),
            legit_tokens: words(&["assert", "expected", "mismatch", "update", "load", "regression", "null", "abort"]),
            false_alert_duration: DurationParams::from_quartiles(0.18, 0.41, 1.31),
            legit_duration: DurationParams::from_quartiles(0.77, 1.09, 2.11),
            history_flake_bias: 0.84,
            unreliable_legit_rate: 0.002,
            builds: 200,
            window: HistoryWindow::DEFAULT.get(),
            seed: 0,
        }
    }
}

const BUILDERS: [(&str, i64); 2] = [("Linux Tests", 98_000), ("Win10 Tests x64", 53_000)];
const SUITES: [&str; 6] = [
    "blink_web_tests",
    "interactive_ui_tests",
    "browser_tests",
    "content_browsertests",
    "webkit_unit_tests",
    "unit_tests",
];
const NOISE_PER_NAMESPACE: usize = 48;
const SIGNAL_SLOTS: usize = 2;

/// Probability that an artifact was collected, independent of the class.
fn presence(ns: Namespace) -> f64 {
    match ns {
        Namespace::Command => 1.0,
        Namespace::CrashLog => 0.25,
        Namespace::StackTrace => 0.7,
        Namespace::Stderr => 0.8,
        Namespace::TestSource => 0.5,
    }
}

fn noise_prefix(ns: Namespace) -> &'static str {
    match ns {
        Namespace::Command => "flag",
        Namespace::CrashLog => "frame",
        Namespace::StackTrace => "func",
        Namespace::Stderr => "msg",
        Namespace::TestSource => "ident",
    }
}

const TAGS: [RunTagStatus; 3] = [RunTagStatus::Fail, RunTagStatus::Timeout, RunTagStatus::Crash];
const FALSE_ALERT_TAG_WEIGHTS: [f64; 3] = [0.80, 0.15, 0.05];
const LEGIT_TAG_WEIGHTS: [f64; 3] = [0.93, 0.04, 0.03];

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if self.n_failures < 10 {
            return bad(format!("nFailures must be >= 10, got {}", self.n_failures));
        }
        if !(self.legit_fraction > 0.0 && self.legit_fraction < 1.0) {
            return bad(format!("legitFraction must be in (0, 1), got {}", self.legit_fraction));
        }
        for (name, v) in [
            ("separability", self.separability),
            ("historyFlakeBias", self.history_flake_bias),
            ("unreliableLegitRate", self.unreliable_legit_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if self.builds < 4 {
            return bad(format!("builds must be >= 4, got {}", self.builds));
        }
        HistoryWindow::new(self.window)?;
        for d in [self.false_alert_duration, self.legit_duration] {
            if !d.mu.is_finite() || !(d.sigma > 0.0 && d.sigma.is_finite()) {
                return bad(format!("invalid log-normal parameters {d:?}"));
            }
        }
        for pool in [&self.false_alert_tokens, &self.legit_tokens] {
            if pool.is_empty() {
                return bad("signal token pools must not be empty".into());
            }
            for t in pool {
                if tokenize(t) != [t.clone()] {
                    return bad(format!("signal token {t:?} is not a single lowercase token"));
                }
            }
        }
        let n_legit = self.legit_count();
        if n_legit == 0 || n_legit == self.n_failures {
            return bad(format!(
                "legitFraction {} of {} failures leaves a class empty",
                self.legit_fraction, self.n_failures
            ));
        }
        Ok(())
    }

    /// Exact number of legitimate records generated.
    pub fn legit_count(&self) -> usize {
        (self.n_failures as f64 * self.legit_fraction).round() as usize
    }
}

/// Statistics of one class, computed by direct scans of the generated
/// timelines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ClassTruth {
    pub failures: usize,
    /// Records whose test was deliberately given a flake in the window.
    pub planted_flaky: usize,
    pub flake_rate_zero: f64,
    pub fail_rate_positive: f64,
    pub clean_history: f64,
    pub median_duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GroundTruth {
    pub tool_version: String,
    pub config: SynthConfig,
    pub false_alerts: ClassTruth,
    pub legitimate: ClassTruth,
    pub history_entries: usize,
    pub tests: usize,
}

pub struct SynthOutput {
    pub dataset: Dataset,
    pub history: TestHistory,
    pub truth: GroundTruth,
}

impl SynthOutput {
    /// Writes `records.jsonl`, `history.jsonl` and `ground_truth.json`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::write(dir, e))?;
        let create = |name: &str| {
            let path = dir.join(name);
            fs::File::create(&path)
                .map(BufWriter::new)
                .map_err(|e| Error::write(&path, e))
        };
        write_records(&self.dataset, create("records.jsonl")?)?;
        write_jsonl(&self.history.entries(), create("history.jsonl")?)?;
        let path = dir.join("ground_truth.json");
        fs::write(&path, serde_json::to_string_pretty(&self.truth)? + "\n").map_err(|e| Error::write(&path, e))
    }
}

type Timelines = HashMap<(usize, usize), BTreeMap<i64, Outcome>>;

struct Generator<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    commits: [i64; 2],
    /// (builder, test) → commit → outcome
    timelines: Timelines,
    test_suites: Vec<&'static str>,
    flaky_pool: Vec<usize>,
    legit_pool: Vec<usize>,
    noise: Vec<Vec<String>>,
    union_tokens: Vec<String>,
}

impl Generator<'_> {
    fn new_test(&mut self) -> usize {
        let suite = *SUITES.choose(&mut self.rng).expect("suites are non-empty");
        self.test_suites.push(suite);
        self.test_suites.len() - 1
    }

    fn free(&self, builder: usize, test: usize, commit: i64) -> bool {
        self.timelines
            .get(&(builder, test))
            .is_none_or(|t| !t.contains_key(&commit))
    }

    fn mark(&mut self, builder: usize, test: usize, commit: i64, outcome: Outcome) {
        self.timelines.entry((builder, test)).or_default().insert(commit, outcome);
    }

    /// Draws a test from `pool` with no outcome at `commit`, growing the
    /// pool when a few draws collide.
    fn pick(&mut self, from_flaky: bool, builder: usize, commit: i64) -> usize {
        for _ in 0..8 {
            let pool = if from_flaky { &self.flaky_pool } else { &self.legit_pool };
            if let Some(&t) = pool.choose(&mut self.rng) {
                if self.free(builder, t, commit) {
                    return t;
                }
            }
        }
        let t = self.new_test();
        if from_flaky {
            self.flaky_pool.push(t);
        } else {
            self.legit_pool.push(t);
        }
        t
    }

    /// Puts a flake in `[commit - w, commit - 1]` unless one is there
    /// already. Returns false when every slot holds a failure.
    fn plant_flake(&mut self, builder: usize, test: usize, commit: i64) -> bool {
        let lo = (commit - i64::from(self.cfg.window)).max(0);
        let timeline = self.timelines.entry((builder, test)).or_default();
        if timeline.range(lo..commit).any(|(_, &o)| o == Outcome::Flaked) {
            return true;
        }
        let open: Vec<i64> = (lo..commit).filter(|c| !timeline.contains_key(c)).collect();
        match open.choose(&mut self.rng) {
            Some(&c) => {
                timeline.insert(c, Outcome::Flaked);
                true
            }
            None => false,
        }
    }

    fn informative(&mut self) -> bool {
        self.rng.random_bool(self.cfg.separability)
    }

    /// Class whose distribution an uninformative draw comes from.
    fn background_class(&mut self) -> Label {
        Label::from_positive(self.rng.random_bool(self.cfg.legit_fraction))
    }

    fn duration(&mut self, label: Label, dists: &[LogNormal<f64>; 2]) -> f64 {
        let source = if self.informative() { label } else { self.background_class() };
        let d = dists[source.index()].sample(&mut self.rng);
        (d * 1e6).round() / 1e6
    }

    fn tag(&mut self, label: Label) -> RunTagStatus {
        let source = if self.informative() { label } else { self.background_class() };
        let weights = match source {
            Label::FalseAlert => FALSE_ALERT_TAG_WEIGHTS,
            Label::Legitimate => LEGIT_TAG_WEIGHTS,
        };
        let u: f64 = self.rng.random();
        let mut acc = 0.0;
        for (t, w) in TAGS.iter().zip(weights) {
            acc += w;
            if u < acc {
                return *t;
            }
        }
        TAGS[0]
    }

    fn artifact(&mut self, ns: Namespace, label: Label) -> String {
        if !self.rng.random_bool(presence(ns)) {
            return String::new();
        }
        let noise_count = self.rng.random_range(4..=12);
        let mut tokens: Vec<String> = (0..noise_count)
            .map(|_| {
                self.noise[ns as usize]
                    .choose(&mut self.rng)
                    .expect("noise vocabulary is non-empty")
                    .clone()
            })
            .collect();
        for _ in 0..SIGNAL_SLOTS {
            let token = if self.informative() {
                let pool = match label {
                    Label::FalseAlert => &self.cfg.false_alert_tokens,
                    Label::Legitimate => &self.cfg.legit_tokens,
                };
                pool.choose(&mut self.rng)
            } else {
                self.union_tokens.choose(&mut self.rng)
            };
            tokens.push(token.expect("token pools are non-empty").clone());
        }
        tokens.shuffle(&mut self.rng);
        tokens.join(" ")
    }
}

/// Generates a dataset, its history and the ground truth. Deterministic
/// for a given configuration.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_failures;
    let n_legit = cfg.legit_count();
    let mut labels: Vec<Label> = (0..n).map(|i| Label::from_positive(i < n_legit)).collect();
    labels.shuffle(&mut rng);

    let half = cfg.builds as i64 / 2;
    let commits = [cfg.builds as i64 - half, half];
    let noise = Namespace::ALL
        .iter()
        .map(|&ns| (0..NOISE_PER_NAMESPACE).map(|k| format!("{}{k}", noise_prefix(ns))).collect())
        .collect();
    let mut union_tokens = cfg.false_alert_tokens.clone();
    union_tokens.extend(cfg.legit_tokens.iter().cloned());
    let mut g = Generator {
        cfg,
        rng,
        commits,
        timelines: HashMap::new(),
        test_suites: Vec::new(),
        flaky_pool: Vec::new(),
        legit_pool: Vec::new(),
        noise,
        union_tokens,
    };
    for _ in 0..(n - n_legit).div_ceil(20) {
        let t = g.new_test();
        g.flaky_pool.push(t);
    }
    for _ in 0..n_legit.div_ceil(10) {
        let t = g.new_test();
        g.legit_pool.push(t);
    }
    let dists = [
        LogNormal::new(cfg.false_alert_duration.mu, cfg.false_alert_duration.sigma),
        LogNormal::new(cfg.legit_duration.mu, cfg.legit_duration.sigma),
    ]
    .map(|d| d.expect("validated log-normal parameters"));

    // (label, builder, commit, test, planted)
    let mut placed = Vec::with_capacity(n);
    for &label in &labels {
        let builder = g.rng.random_range(0..2usize);
        let flaky_history = match label {
            Label::FalseAlert => g.rng.random_bool(cfg.history_flake_bias),
            Label::Legitimate => g.rng.random_bool(cfg.unreliable_legit_rate),
        };
        let (commit, test) = if flaky_history {
            let commit = g.rng.random_range(1..g.commits[builder]);
            (commit, g.pick(true, builder, commit))
        } else if label == Label::FalseAlert {
            // a test that never failed before
            (g.rng.random_range(0..g.commits[builder]), g.new_test())
        } else {
            let commit = g.rng.random_range(0..g.commits[builder]);
            (commit, g.pick(false, builder, commit))
        };
        let outcome = match label {
            Label::FalseAlert => Outcome::Flaked,
            Label::Legitimate => Outcome::Failed,
        };
        g.mark(builder, test, commit, outcome);
        placed.push((label, builder, commit, test, flaky_history));
    }
    // Flakes are planted once every record holds its commit, so a planted
    // flake never lands on a commit that a failure needs.
    let mut planted = [0usize; 2];
    for &(label, builder, commit, test, flaky_history) in &placed {
        if flaky_history && g.plant_flake(builder, test, commit) {
            planted[label.index()] += 1;
        }
    }

    let mut records = Vec::with_capacity(n);
    for &(label, builder, commit, test, _) in &placed {
        let run_tag_status = g.tag(label);
        let run_status = match run_tag_status {
            RunTagStatus::Timeout => RunStatus::Abort,
            RunTagStatus::Crash => RunStatus::Crash,
            _ => RunStatus::Fail,
        };
        let run_duration = g.duration(label, &dists);
        let mut texts = Namespace::ALL.map(|ns| g.artifact(ns, label)).into_iter();
        let mut next = || texts.next().expect("one text per namespace");
        let (name, base) = BUILDERS[builder];
        records.push(FailureRecord {
            test_id: format!("{}.Test{test:05}", g.test_suites[test]),
            suite: g.test_suites[test].to_owned(),
            builder: name.to_owned(),
            build_id: base + commit,
            commit_index: commit,
            run_duration,
            run_status,
            run_tag_status,
            command: next(),
            crash_log: next(),
            stack_trace: next(),
            stderr: next(),
            test_source: next(),
            label,
        });
    }

    let truth_for = |label: Label, planted: usize| {
        let w = i64::from(cfg.window);
        let (mut flake_zero, mut fail_pos, mut clean) = (0usize, 0usize, 0usize);
        let mut durations = Vec::new();
        for (&(l, builder, commit, test, _), r) in placed.iter().zip(&records) {
            if l != label {
                continue;
            }
            durations.push(r.run_duration);
            let timeline = &g.timelines[&(builder, test)];
            let count = |o: Outcome| (commit - w..commit).filter(|x| timeline.get(x) == Some(&o)).count();
            let (flakes, fails) = (count(Outcome::Flaked), count(Outcome::Failed));
            flake_zero += usize::from(flakes == 0);
            fail_pos += usize::from(fails > 0);
            clean += usize::from(flakes == 0 && fails == 0);
        }
        let total = durations.len();
        durations.sort_by(f64::total_cmp);
        let median = if total % 2 == 1 {
            durations[total / 2]
        } else {
            (durations[total / 2 - 1] + durations[total / 2]) / 2.0
        };
        let frac = |c: usize| c as f64 / total as f64;
        ClassTruth {
            failures: total,
            planted_flaky: planted,
            flake_rate_zero: frac(flake_zero),
            fail_rate_positive: frac(fail_pos),
            clean_history: frac(clean),
            median_duration: median,
        }
    };
    let truth = GroundTruth {
        tool_version: crate::TOOL_VERSION.into(),
        config: cfg.clone(),
        false_alerts: truth_for(Label::FalseAlert, planted[0]),
        legitimate: truth_for(Label::Legitimate, planted[1]),
        history_entries: g.timelines.values().map(BTreeMap::len).sum(),
        tests: g.test_suites.len(),
    };

    let mut history = TestHistory::new();
    for (&(builder, test), timeline) in &g.timelines {
        let key = TestKey::new(
            BUILDERS[builder].0,
            format!("{}.Test{test:05}", g.test_suites[test]),
        );
        for (&c, &o) in timeline {
            history.insert(key.clone(), c, o)?;
        }
    }
    records.sort_by(|a, b| {
        (&a.builder, a.commit_index, &a.test_id).cmp(&(&b.builder, b.commit_index, &b.test_id))
    });
    let dataset = Dataset::new(records, format!("synthetic seed {}", cfg.seed));
    Ok(SynthOutput { dataset, history, truth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::history::history_profile;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n_failures: 2_000,
            builds: 40,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn exact_allocation() {
        let out = generate_synthetic(&small(1)).unwrap();
        let legit = out.dataset.records.iter().filter(|r| r.label.is_positive()).count();
        assert_eq!(legit, 100);
        assert_eq!(out.dataset.len(), 2_000);
    }

    #[test]
    fn same_seed_same_bytes() {
        let bytes = |seed| {
            let out = generate_synthetic(&small(seed)).unwrap();
            let mut buf = Vec::new();
            write_records(&out.dataset, &mut buf).unwrap();
            write_jsonl(&out.history.entries(), &mut buf).unwrap();
            buf
        };
        assert_eq!(bytes(5), bytes(5));
        assert_ne!(bytes(5), bytes(6));
    }

    #[test]
    fn profile_matches_ground_truth() {
        let out = generate_synthetic(&small(2)).unwrap();
        let w = HistoryWindow::new(out.truth.config.window).unwrap();
        let profile = history_profile(&out.dataset, &out.history, w);
        for (label, truth) in [(Label::FalseAlert, &out.truth.false_alerts), (Label::Legitimate, &out.truth.legitimate)] {
            let p = profile.get(label);
            assert_eq!(p.failures, truth.failures);
            assert_eq!(p.flake_rate_zero, truth.flake_rate_zero);
            assert_eq!(p.fail_rate_positive, truth.fail_rate_positive);
            assert_eq!(p.clean_history, truth.clean_history);
            assert_eq!(p.unknown_tests, 0);
        }
        // every planted flake is inside its record's window
        let fa = &out.truth.false_alerts;
        assert_eq!(1.0 - fa.flake_rate_zero, fa.planted_flaky as f64 / fa.failures as f64);
        assert!((fa.planted_flaky as f64 / fa.failures as f64 - 0.84).abs() < 0.03);
    }

    #[test]
    fn records_are_unique_and_valid() {
        let out = generate_synthetic(&small(3)).unwrap();
        let mut text = Vec::new();
        write_records(&out.dataset, &mut text).unwrap();
        let (back, rejected) = crate::corpus::load_records(text.as_slice(), "roundtrip").unwrap();
        assert!(rejected.is_empty());
        assert_eq!(back.records, out.dataset.records);
        assert!(out.dataset.records.iter().all(|r| !r.command.is_empty()));
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            SynthConfig { n_failures: 9, ..SynthConfig::default() },
            SynthConfig { legit_fraction: 1.0, ..SynthConfig::default() },
            SynthConfig { separability: 1.5, ..SynthConfig::default() },
            SynthConfig { builds: 2, ..SynthConfig::default() },
            SynthConfig { legit_tokens: vec![], ..SynthConfig::default() },
            SynthConfig { legit_tokens: words(&["Two words"]), ..SynthConfig::default() },
            SynthConfig { n_failures: 10, legit_fraction: 0.01, ..SynthConfig::default() },
        ];
        for cfg in bad {
            assert!(generate_synthetic(&cfg).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn quartile_fit() {
        let d = DurationParams::from_quartiles(0.18, 0.41, 1.31);
        assert!((d.median() - 0.41).abs() < 1e-12);
        assert!((d.sigma - 1.471_5).abs() < 1e-3);
    }
}
