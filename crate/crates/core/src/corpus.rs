//! Failure records, ingestion from line-delimited JSON, and dataset-level
//! cleaning filters.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::{self, Write as _};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw run result reported by the CI for a failing run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunStatus {
    Abort,
    Fail,
    Pass,
    Crash,
    Skip,
}

impl RunStatus {
    pub const ALL: [RunStatus; 5] = [
        RunStatus::Abort,
        RunStatus::Fail,
        RunStatus::Pass,
        RunStatus::Crash,
        RunStatus::Skip,
    ];

    /// Numeric encoding used in the feature space (0..=4).
    pub fn code(self) -> u8 {
        self as u8
    }
}

/// Finer-grained status attached by the test harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunTagStatus {
    Crash,
    Pass,
    Fail,
    Timeout,
    Success,
    Failure,
    FailureOnExit,
    Notrun,
    Skip,
    Unknown,
}

impl RunTagStatus {
    pub const ALL: [RunTagStatus; 10] = [
        RunTagStatus::Crash,
        RunTagStatus::Pass,
        RunTagStatus::Fail,
        RunTagStatus::Timeout,
        RunTagStatus::Success,
        RunTagStatus::Failure,
        RunTagStatus::FailureOnExit,
        RunTagStatus::Notrun,
        RunTagStatus::Skip,
        RunTagStatus::Unknown,
    ];

    /// Numeric encoding used in the feature space (0..=9).
    pub fn code(self) -> u8 {
        self as u8
    }
}

/// Ground truth for a failure. `Legitimate` is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    FalseAlert,
    Legitimate,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Legitimate
    }

    pub fn from_positive(positive: bool) -> Self {
        if positive {
            Label::Legitimate
        } else {
            Label::FalseAlert
        }
    }

    /// Class index: 0 for false alerts, 1 for legitimate failures.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::FalseAlert => "false_alert",
            Label::Legitimate => "legitimate",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One observed test failure.
///
/// Textual artifacts that were not collected are empty strings; they are
/// never absent, so the feature space stays fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct FailureRecord {
    pub test_id: String,
    pub suite: String,
    pub builder: String,
    pub build_id: i64,
    pub commit_index: i64,
    pub run_duration: f64,
    pub run_status: RunStatus,
    pub run_tag_status: RunTagStatus,
    #[serde(default, deserialize_with = "null_as_empty")]
    pub command: String,
    #[serde(default, deserialize_with = "null_as_empty")]
    pub crash_log: String,
    #[serde(default, deserialize_with = "null_as_empty")]
    pub stack_trace: String,
    #[serde(default, deserialize_with = "null_as_empty")]
    pub stderr: String,
    #[serde(default, deserialize_with = "null_as_empty")]
    pub test_source: String,
    pub label: Label,
}

fn null_as_empty<'de, D>(de: D) -> std::result::Result<String, D::Error>
where
    D: serde::Deserializer<'de>,
{
    Ok(Option::<String>::deserialize(de)?.unwrap_or_default())
}

/// Key under which two records count as the same observation.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct DuplicateKey {
    test_id: String,
    build_id: i64,
    builder: String,
    duration_bits: u64,
    run_status: RunStatus,
}

impl FailureRecord {
    fn duplicate_key(&self) -> DuplicateKey {
        DuplicateKey {
            test_id: self.test_id.clone(),
            build_id: self.build_id,
            builder: self.builder.clone(),
            duration_bits: self.run_duration.to_bits(),
            run_status: self.run_status,
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !self.run_duration.is_finite() || self.run_duration < 0.0 {
            return Err(format!("runDuration must be finite and >= 0, got {}", self.run_duration));
        }
        Ok(())
    }
}

/// Ingestion outcome for a single rejected input line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
}

/// Immutable, ordered collection of failure records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<FailureRecord>,
    pub provenance: String,
}

impl Dataset {
    pub fn new(records: Vec<FailureRecord>, provenance: impl Into<String>) -> Self {
        Dataset {
            records,
            provenance: provenance.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Subset by record indices, preserving the given order.
    pub fn select(&self, indices: &[usize], note: &str) -> Dataset {
        Dataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            provenance: format!("{}; {}", self.provenance, note),
        }
    }

    /// Records ordered by `(builder, commitIndex)`; ties keep input order.
    pub fn sorted_by_commit(&self) -> Dataset {
        let mut records = self.records.clone();
        records.sort_by(|a, b| {
            a.builder
                .cmp(&b.builder)
                .then(a.commit_index.cmp(&b.commit_index))
        });
        Dataset {
            records,
            provenance: self.provenance.clone(),
        }
    }

    fn with_note(&self, records: Vec<FailureRecord>, note: &str) -> Dataset {
        let provenance = if self.provenance.is_empty() {
            note.to_owned()
        } else {
            format!("{}; {}", self.provenance, note)
        };
        Dataset {
            records,
            provenance,
        }
    }
}

/// Reads line-delimited records. Invalid lines are reported and skipped;
/// only an unreadable stream is fatal. Blank lines are ignored.
pub fn load_records<R: BufRead>(source: R, provenance: &str) -> Result<(Dataset, Vec<Rejection>)> {
    let mut records = Vec::new();
    let mut rejections = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: FailureRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                rejections.push(Rejection {
                    line: line_no,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        if let Err(reason) = record.validate() {
            rejections.push(Rejection {
                line: line_no,
                reason,
            });
            continue;
        }
        if !seen.insert(record.duplicate_key()) {
            rejections.push(Rejection {
                line: line_no,
                reason: "duplicate record (testId, buildId, builder, runDuration, runStatus)".into(),
            });
            continue;
        }
        records.push(record);
    }
    Ok((Dataset::new(records, format!("loaded from {provenance}")), rejections))
}

pub fn load_records_file(path: &std::path::Path) -> Result<(Dataset, Vec<Rejection>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::read(path, e))?;
    load_records(std::io::BufReader::new(file), &path.display().to_string())
}

pub fn write_records<W: Write>(ds: &Dataset, mut out: W) -> Result<()> {
    for r in &ds.records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_jsonl<T: Serialize, W: Write>(items: &[T], mut out: W) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Inclusive range of build ids on one builder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildRange {
    pub builder: String,
    pub first: i64,
    pub last: i64,
}

impl BuildRange {
    pub fn contains(&self, builder: &str, build_id: i64) -> bool {
        self.builder == builder && (self.first..=self.last).contains(&build_id)
    }

    /// Parses `builder:first-last` or `builder:id`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad build range {s:?}, expected builder:first-last"));
        let (builder, range) = s.rsplit_once(':').ok_or_else(bad)?;
        let (first, last) = match range.split_once('-') {
            Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
            None => {
                let id = range.trim().parse().map_err(|_| bad())?;
                (id, id)
            }
        };
        if first > last || builder.trim().is_empty() {
            return Err(bad());
        }
        Ok(BuildRange {
            builder: builder.trim().to_owned(),
            first,
            last,
        })
    }
}

/// Automatic rule flagging builds with an abnormal number of failures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutoRule {
    pub threshold_factor: f64,
    pub absolute_floor: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MassFailurePolicy {
    pub explicit_build_exclusions: Vec<BuildRange>,
    pub auto_rule: Option<AutoRule>,
}

impl MassFailurePolicy {
    pub fn validate(&self) -> Result<()> {
        if let Some(rule) = self.auto_rule {
            if !(rule.threshold_factor > 1.0) {
                return Err(Error::InvalidParam(format!(
                    "auto rule threshold factor must be > 1, got {}",
                    rule.threshold_factor
                )));
            }
            if rule.absolute_floor < 1 {
                return Err(Error::InvalidParam("auto rule absolute floor must be >= 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    Explicit,
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildExclusion {
    pub builder: String,
    pub build_id: i64,
    pub failures: usize,
    pub reason: ExclusionReason,
}

/// Removes records from builds where a large part of the suite failed at
/// once.
///
/// The automatic rule is applied until no further build crosses the
/// limit, since dropping an outlier build can lower the median. This makes
/// the filter idempotent.
pub fn filter_mass_failure_builds(
    ds: &Dataset,
    policy: &MassFailurePolicy,
) -> Result<(Dataset, Vec<BuildExclusion>)> {
    policy.validate()?;
    let mut excluded: BTreeMap<(String, i64), ExclusionReason> = BTreeMap::new();
    let mut counts: BTreeMap<(String, i64), usize> = BTreeMap::new();
    for r in &ds.records {
        *counts.entry((r.builder.clone(), r.build_id)).or_default() += 1;
    }
    for key in counts.keys() {
        if policy
            .explicit_build_exclusions
            .iter()
            .any(|range| range.contains(&key.0, key.1))
        {
            excluded.insert(key.clone(), ExclusionReason::Explicit);
        }
    }
    if let Some(rule) = policy.auto_rule {
        loop {
            let remaining: Vec<usize> = counts
                .iter()
                .filter(|(k, _)| !excluded.contains_key(*k))
                .map(|(_, &c)| c)
                .collect();
            let Some(median) = median_count(&remaining) else {
                break;
            };
            let limit = (rule.absolute_floor as f64).max(rule.threshold_factor * median);
            let newly: Vec<(String, i64)> = counts
                .iter()
                .filter(|(k, &c)| !excluded.contains_key(*k) && c as f64 > limit)
                .map(|(k, _)| k.clone())
                .collect();
            if newly.is_empty() {
                break;
            }
            for key in newly {
                excluded.insert(key, ExclusionReason::Auto);
            }
        }
    }
    let records = ds
        .records
        .iter()
        .filter(|r| !excluded.contains_key(&(r.builder.clone(), r.build_id)))
        .cloned()
        .collect();
    let report = excluded
        .into_iter()
        .map(|((builder, build_id), reason)| BuildExclusion {
            failures: counts[&(builder.clone(), build_id)],
            builder,
            build_id,
            reason,
        })
        .collect::<Vec<_>>();
    let note = format!("mass-failure filter excluded {} builds", report.len());
    Ok((ds.with_note(records, &note), report))
}

fn median_count(counts: &[usize]) -> Option<f64> {
    if counts.is_empty() {
        return None;
    }
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let mid = sorted.len() / 2;
    Some(if sorted.len() % 2 == 0 {
        (sorted[mid - 1] + sorted[mid]) as f64 / 2.0
    } else {
        sorted[mid] as f64
    })
}

/// Failure and unique-test counts for one label.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub failures: usize,
    pub tests: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupStats {
    pub builds: usize,
    pub false_alerts: LabelCounts,
    pub legitimate: LabelCounts,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total: GroupStats,
    pub per_builder: BTreeMap<String, GroupStats>,
    pub per_suite: BTreeMap<String, GroupStats>,
}

impl DatasetStats {
    pub fn failures(&self, label: Label) -> usize {
        match label {
            Label::FalseAlert => self.total.false_alerts.failures,
            Label::Legitimate => self.total.legitimate.failures,
        }
    }

    /// Plain-text table: one row per builder plus a total row.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:>8} | {:>10} {:>12} | {:>10} {:>12}",
            "Tester", "#Builds", "FA #Tests", "FA #Failures", "LF #Tests", "LF #Failures"
        );
        let mut row = |name: &str, g: &GroupStats| {
            let _ = writeln!(
                out,
                "{:<24} {:>8} | {:>10} {:>12} | {:>10} {:>12}",
                name,
                g.builds,
                g.false_alerts.tests,
                g.false_alerts.failures,
                g.legitimate.tests,
                g.legitimate.failures
            );
        };
        for (name, g) in &self.per_builder {
            row(name, g);
        }
        row("Total", &self.total);
        out
    }
}

#[derive(Default)]
struct GroupAcc {
    builds: BTreeSet<(String, i64)>,
    failures: [usize; 2],
    tests: [BTreeSet<String>; 2],
}

impl GroupAcc {
    fn add(&mut self, r: &FailureRecord) {
        let l = r.label.index();
        self.builds.insert((r.builder.clone(), r.build_id));
        self.failures[l] += 1;
        self.tests[l].insert(r.test_id.clone());
    }

    fn finish(&self) -> GroupStats {
        GroupStats {
            builds: self.builds.len(),
            false_alerts: LabelCounts {
                failures: self.failures[0],
                tests: self.tests[0].len(),
            },
            legitimate: LabelCounts {
                failures: self.failures[1],
                tests: self.tests[1].len(),
            },
        }
    }
}

/// Exact per-label, per-builder and per-suite counts. Unique tests are
/// deduplicated by `testId` within each label.
pub fn dataset_stats(ds: &Dataset) -> DatasetStats {
    let mut total = GroupAcc::default();
    let mut builders: BTreeMap<String, GroupAcc> = BTreeMap::new();
    let mut suites: BTreeMap<String, GroupAcc> = BTreeMap::new();
    for r in &ds.records {
        total.add(r);
        builders.entry(r.builder.clone()).or_default().add(r);
        suites.entry(r.suite.clone()).or_default().add(r);
    }
    DatasetStats {
        total: total.finish(),
        per_builder: builders.iter().map(|(k, v)| (k.clone(), v.finish())).collect(),
        per_suite: suites.iter().map(|(k, v)| (k.clone(), v.finish())).collect(),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn record(test_id: &str, builder: &str, build_id: i64, label: Label) -> FailureRecord {
        FailureRecord {
            test_id: test_id.into(),
            suite: "blink_web_tests".into(),
            builder: builder.into(),
            build_id,
            commit_index: build_id,
            run_duration: 0.5,
            run_status: RunStatus::Fail,
            run_tag_status: RunTagStatus::Fail,
            command: String::new(),
            crash_log: String::new(),
            stack_trace: String::new(),
            stderr: String::new(),
            test_source: String::new(),
            label,
        }
    }

    fn line(status: &str, tag: &str) -> String {
        format!(
            r#"{{"testId":"t1","suite":"browser_tests","builder":"Linux Tests","buildId":7,"commitIndex":3,"runDuration":1.5,"runStatus":"{status}","runTagStatus":"{tag}","command":"run","crashLog":"","stackTrace":"","stderr":"boom","testSource":"","label":"legitimate"}}"#
        )
    }

    #[test]
    fn empty_stream() {
        let (ds, rej) = load_records("".as_bytes(), "mem").unwrap();
        assert!(ds.is_empty());
        assert!(rej.is_empty());
    }

    #[test]
    fn fail_status_encodes_to_one() {
        let (ds, rej) = load_records(line("FAIL", "TIMEOUT").as_bytes(), "mem").unwrap();
        assert!(rej.is_empty());
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.records[0].run_status.code(), 1);
        assert_eq!(ds.records[0].run_tag_status.code(), 3);
    }

    #[test]
    fn bogus_tag_rejected_and_ingestion_continues() {
        let mut input = line("FAIL", "FAIL");
        input.push('\n');
        input.push_str(&line("CRASH", "BOGUS"));
        input.push('\n');
        input.push_str(&line("ABORT", "CRASH"));
        let (ds, rej) = load_records(input.as_bytes(), "mem").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(rej.len(), 1);
        assert_eq!(rej[0].line, 2);
        assert!(rej[0].reason.contains("BOGUS"), "{}", rej[0].reason);
    }

    #[test]
    fn malformed_negative_and_duplicate_lines() {
        let neg = line("FAIL", "FAIL").replace("1.5", "-1.0");
        let input = [line("FAIL", "FAIL"), "{not json".into(), neg, line("FAIL", "FAIL")].join("\n");
        let (ds, rej) = load_records(input.as_bytes(), "mem").unwrap();
        assert_eq!(ds.len(), 1);
        let lines: Vec<usize> = rej.iter().map(|r| r.line).collect();
        assert_eq!(lines, vec![2, 3, 4]);
        assert!(rej[2].reason.contains("duplicate"));
    }

    #[test]
    fn missing_artifacts_become_empty() {
        let input = r#"{"testId":"t","suite":"s","builder":"b","buildId":1,"commitIndex":1,"runDuration":0,"runStatus":"PASS","runTagStatus":"SKIP","crashLog":null,"label":"false_alert"}"#;
        let (ds, rej) = load_records(input.as_bytes(), "mem").unwrap();
        assert!(rej.is_empty(), "{rej:?}");
        assert_eq!(ds.records[0].crash_log, "");
        assert_eq!(ds.records[0].command, "");
    }

    #[test]
    fn explicit_build_range_removed() {
        let mut records: Vec<_> = (98170..98200)
            .map(|b| record("t", "Linux Tests", b, Label::FalseAlert))
            .collect();
        records.push(record("t", "Win10 Tests x64", 98180, Label::FalseAlert));
        let ds = Dataset::new(records, "fixture");
        let policy = MassFailurePolicy {
            explicit_build_exclusions: vec![BuildRange::parse("Linux Tests:98177-98192").unwrap()],
            auto_rule: None,
        };
        let (out, report) = filter_mass_failure_builds(&ds, &policy).unwrap();
        assert_eq!(report.len(), 16);
        assert!(out
            .records
            .iter()
            .all(|r| r.builder != "Linux Tests" || !(98177..=98192).contains(&r.build_id)));
        assert_eq!(out.len(), ds.len() - 16);
    }

    #[test]
    fn empty_dataset_filter() {
        let (out, report) =
            filter_mass_failure_builds(&Dataset::default(), &MassFailurePolicy::default()).unwrap();
        assert!(out.is_empty());
        assert!(report.is_empty());
    }

    #[test]
    fn auto_rule_drops_outlier_build() {
        let mut records = Vec::new();
        for (build, n) in [(1, 10), (2, 12), (3, 11), (4, 400)] {
            for i in 0..n {
                records.push(record(&format!("t{i}"), "b", build, Label::FalseAlert));
            }
        }
        let ds = Dataset::new(records, "fixture");
        let policy = MassFailurePolicy {
            explicit_build_exclusions: vec![],
            auto_rule: Some(AutoRule {
                threshold_factor: 10.0,
                absolute_floor: 50,
            }),
        };
        let (out, report) = filter_mass_failure_builds(&ds, &policy).unwrap();
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].build_id, 4);
        assert_eq!(report[0].failures, 400);
        assert_eq!(report[0].reason, ExclusionReason::Auto);
        assert_eq!(out.len(), 33);
        let (again, report2) = filter_mass_failure_builds(&out, &policy).unwrap();
        assert_eq!(again.records, out.records);
        assert!(report2.is_empty());
    }

    #[test]
    fn invalid_auto_rule_rejected() {
        let policy = MassFailurePolicy {
            explicit_build_exclusions: vec![],
            auto_rule: Some(AutoRule {
                threshold_factor: 1.0,
                absolute_floor: 5,
            }),
        };
        assert!(filter_mass_failure_builds(&Dataset::default(), &policy).is_err());
    }

    #[test]
    fn stats_dedupe_tests() {
        assert_eq!(dataset_stats(&Dataset::default()), DatasetStats::default());
        let ds = Dataset::new(
            vec![
                record("same", "b", 1, Label::FalseAlert),
                record("same", "b", 2, Label::FalseAlert),
            ],
            "fixture",
        );
        let stats = dataset_stats(&ds);
        assert_eq!(stats.total.false_alerts.failures, 2);
        assert_eq!(stats.total.false_alerts.tests, 1);
        assert_eq!(stats.total.legitimate, LabelCounts::default());
        assert_eq!(stats.total.builds, 2);
    }

    #[test]
    fn build_range_parsing() {
        let r = BuildRange::parse("Win10 Tests x64:53760-53768").unwrap();
        assert_eq!(r.builder, "Win10 Tests x64");
        assert!(r.contains("Win10 Tests x64", 53768));
        assert!(!r.contains("Win10 Tests x64", 53769));
        assert_eq!(BuildRange::parse("b:5").unwrap().last, 5);
        assert!(BuildRange::parse("nocolon").is_err());
        assert!(BuildRange::parse("b:9-3").is_err());
    }
}
