//! Per-test outcome timelines and the flake/fail rate metrics computed over
//! a sliding window of previous commits.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Label, Rejection};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Passed,
    Flaked,
    Failed,
    Absent,
}

/// Window length in commits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryWindow(u32);

impl HistoryWindow {
    pub const DEFAULT: HistoryWindow = HistoryWindow(35);

    pub fn new(w: u32) -> Result<Self> {
        if w == 0 {
            return Err(Error::InvalidParam("history window must be >= 1".into()));
        }
        Ok(HistoryWindow(w))
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

impl Default for HistoryWindow {
    fn default() -> Self {
        Self::DEFAULT
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TestKey {
    pub builder: String,
    pub test_id: String,
}

impl TestKey {
    pub fn new(builder: impl Into<String>, test_id: impl Into<String>) -> Self {
        TestKey {
            builder: builder.into(),
            test_id: test_id.into(),
        }
    }
}

/// One line of a history import file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct HistoryEntry {
    pub builder: String,
    pub test_id: String,
    pub commit_index: i64,
    pub outcome: Outcome,
}

/// Outcome timelines scoped per builder.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TestHistory {
    timelines: HashMap<TestKey, BTreeMap<i64, Outcome>>,
}

/// A window rate plus whether the test was known to the history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowRate {
    pub rate: f64,
    pub unknown_test: bool,
}

impl TestHistory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records an outcome. A second, different outcome for the same commit
    /// is rejected; repeating the same outcome is a no-op.
    pub fn insert(&mut self, key: TestKey, commit: i64, outcome: Outcome) -> Result<()> {
        let timeline = self.timelines.entry(key).or_default();
        match timeline.get(&commit) {
            Some(&existing) if existing != outcome => Err(Error::Malformed {
                what: "history",
                detail: format!("conflicting outcomes {existing:?} and {outcome:?} at commit {commit}"),
            }),
            _ => {
                timeline.insert(commit, outcome);
                Ok(())
            }
        }
    }

    pub fn timeline(&self, key: &TestKey) -> Option<&BTreeMap<i64, Outcome>> {
        self.timelines.get(key)
    }

    pub fn len(&self) -> usize {
        self.timelines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timelines.is_empty()
    }

    /// Builds a history from the failures themselves: a false alert marks
    /// the test as flaked at that commit, a legitimate failure as failed.
    /// When both occur at one commit the flake wins, since a rerun passed.
    pub fn from_records(ds: &Dataset) -> Self {
        let mut hist = TestHistory::new();
        for r in &ds.records {
            let timeline = hist
                .timelines
                .entry(TestKey::new(&r.builder, &r.test_id))
                .or_default();
            let outcome = match r.label {
                Label::FalseAlert => Outcome::Flaked,
                Label::Legitimate => Outcome::Failed,
            };
            let slot = timeline.entry(r.commit_index).or_insert(outcome);
            if outcome == Outcome::Flaked {
                *slot = Outcome::Flaked;
            }
        }
        hist
    }

    pub fn entries(&self) -> Vec<HistoryEntry> {
        let mut keys: Vec<&TestKey> = self.timelines.keys().collect();
        keys.sort();
        keys.into_iter()
            .flat_map(|k| {
                self.timelines[k].iter().map(move |(&c, &o)| HistoryEntry {
                    builder: k.builder.clone(),
                    test_id: k.test_id.clone(),
                    commit_index: c,
                    outcome: o,
                })
            })
            .collect()
    }

    fn window_count(&self, key: &TestKey, n: i64, w: HistoryWindow, target: Outcome) -> WindowRate {
        let Some(timeline) = self.timelines.get(key) else {
            return WindowRate {
                rate: 0.0,
                unknown_test: true,
            };
        };
        let start = n - i64::from(w.get());
        let hits = timeline
            .range(start..n)
            .filter(|(_, &o)| o == target)
            .count();
        WindowRate {
            rate: hits as f64 / f64::from(w.get()),
            unknown_test: false,
        }
    }
}

/// Fraction of the `w` commits before `n` in which the test flaked. The
/// divisor stays `w` when fewer commits are on record.
pub fn flake_rate(hist: &TestHistory, key: &TestKey, n: i64, w: HistoryWindow) -> WindowRate {
    hist.window_count(key, n, w, Outcome::Flaked)
}

/// Fraction of the `w` commits before `n` in which the test failed
/// persistently.
pub fn fail_rate(hist: &TestHistory, key: &TestKey, n: i64, w: HistoryWindow) -> WindowRate {
    hist.window_count(key, n, w, Outcome::Failed)
}

pub fn load_history<R: BufRead>(source: R) -> Result<(TestHistory, Vec<Rejection>)> {
    let mut hist = TestHistory::new();
    let mut rejections = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let outcome = serde_json::from_str::<HistoryEntry>(&line)
            .map_err(|e| e.to_string())
            .and_then(|e| {
                hist.insert(TestKey::new(e.builder, e.test_id), e.commit_index, e.outcome)
                    .map_err(|e| e.to_string())
            });
        if let Err(reason) = outcome {
            rejections.push(Rejection {
                line: idx + 1,
                reason,
            });
        }
    }
    Ok((hist, rejections))
}

pub fn load_history_file(path: &std::path::Path) -> Result<(TestHistory, Vec<Rejection>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::read(path, e))?;
    load_history(std::io::BufReader::new(file))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnreliableExclusion {
    pub test_id: String,
    pub builder: String,
    pub build_id: i64,
    pub commit_index: i64,
    pub flake_rate: f64,
}

/// Drops legitimate failures of tests that flaked inside the window: these
/// are suspected false alerts that reruns did not expose. False alerts are
/// never removed.
pub fn filter_unreliable(
    ds: &Dataset,
    hist: &TestHistory,
    w: HistoryWindow,
) -> (Dataset, Vec<UnreliableExclusion>) {
    let mut kept = Vec::with_capacity(ds.len());
    let mut report = Vec::new();
    for r in &ds.records {
        if r.label == Label::Legitimate {
            let rate = flake_rate(hist, &TestKey::new(&r.builder, &r.test_id), r.commit_index, w);
            if rate.rate > 0.0 {
                report.push(UnreliableExclusion {
                    test_id: r.test_id.clone(),
                    builder: r.builder.clone(),
                    build_id: r.build_id,
                    commit_index: r.commit_index,
                    flake_rate: rate.rate,
                });
                continue;
            }
        }
        kept.push(r.clone());
    }
    let provenance = format!(
        "{}; unreliable filter (w={}) excluded {} failures",
        ds.provenance,
        w.get(),
        report.len()
    );
    (Dataset::new(kept, provenance), report)
}

/// Rate statistics for the failures of one label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelProfile {
    pub label: Label,
    pub failures: usize,
    pub flake_rate_zero: f64,
    pub fail_rate_positive: f64,
    pub clean_history: f64,
    /// Entry `k` is the fraction of failures whose window held exactly `k`
    /// flakes (rate `k / w`).
    pub flake_histogram: Vec<f64>,
    pub fail_histogram: Vec<f64>,
    pub unknown_tests: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryProfile {
    pub window: u32,
    pub labels: Vec<LabelProfile>,
}

impl HistoryProfile {
    pub fn get(&self, label: Label) -> &LabelProfile {
        self.labels
            .iter()
            .find(|p| p.label == label)
            .expect("profile holds both labels")
    }

    /// CSV with one row per (label, statistic).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,statistic,value\n");
        for p in &self.labels {
            let _ = writeln!(out, "{},failures,{}", p.label, p.failures);
            let _ = writeln!(out, "{},flake_rate_zero,{}", p.label, p.flake_rate_zero);
            let _ = writeln!(out, "{},fail_rate_positive,{}", p.label, p.fail_rate_positive);
            let _ = writeln!(out, "{},clean_history,{}", p.label, p.clean_history);
            let _ = writeln!(out, "{},unknown_tests,{}", p.label, p.unknown_tests);
            for (k, v) in p.flake_histogram.iter().enumerate() {
                let _ = writeln!(out, "{},flake_rate_hist_{}_of_{},{}", p.label, k, self.window, v);
            }
            for (k, v) in p.fail_histogram.iter().enumerate() {
                let _ = writeln!(out, "{},fail_rate_hist_{}_of_{},{}", p.label, k, self.window, v);
            }
        }
        out
    }
}

pub fn history_profile(ds: &Dataset, hist: &TestHistory, w: HistoryWindow) -> HistoryProfile {
    let bins = w.get() as usize + 1;
    let labels = [Label::FalseAlert, Label::Legitimate]
        .into_iter()
        .map(|label| {
            let mut flake_hist = vec![0usize; bins];
            let mut fail_hist = vec![0usize; bins];
            let (mut flake_zero, mut fail_pos, mut clean, mut unknown, mut n) = (0, 0, 0, 0, 0usize);
            for r in ds.records.iter().filter(|r| r.label == label) {
                n += 1;
                let key = TestKey::new(&r.builder, &r.test_id);
                let flake = flake_rate(hist, &key, r.commit_index, w);
                let fail = fail_rate(hist, &key, r.commit_index, w);
                unknown += usize::from(flake.unknown_test);
                flake_hist[(flake.rate * f64::from(w.get())).round() as usize] += 1;
                fail_hist[(fail.rate * f64::from(w.get())).round() as usize] += 1;
                flake_zero += usize::from(flake.rate == 0.0);
                fail_pos += usize::from(fail.rate > 0.0);
                clean += usize::from(flake.rate == 0.0 && fail.rate == 0.0);
            }
            let frac = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
            LabelProfile {
                label,
                failures: n,
                flake_rate_zero: frac(flake_zero),
                fail_rate_positive: frac(fail_pos),
                clean_history: frac(clean),
                flake_histogram: flake_hist.into_iter().map(frac).collect(),
                fail_histogram: fail_hist.into_iter().map(frac).collect(),
                unknown_tests: unknown,
            }
        })
        .collect();
    HistoryProfile {
        window: w.get(),
        labels,
    }
}
