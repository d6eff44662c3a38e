//! Stratified splitting, test-suite categories and the cross-/intra-category
//! training strategies.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::io::BufRead;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Label, Rejection};
use crate::error::{Error, Result};
use crate::featurizer::{FeaturizerConfig, FittedFeaturizer};
use crate::forest::{
    calibrate_threshold, fit_forest, random_search, Calibration, RandomForest, SearchConfig,
    SearchOutcome,
};
use crate::metrics::{apply_threshold, classification_scores, confusion, ConfusionMatrix, Scores};

fn class_indices(labels: &[Label]) -> [Vec<usize>; 2] {
    let mut out = [Vec::new(), Vec::new()];
    for (i, l) in labels.iter().enumerate() {
        out[l.index()].push(i);
    }
    out
}

const CLASS_NAMES: [&str; 2] = ["false_alert", "legitimate"];

/// Splits record indices into (train, test), preserving the class ratio.
/// Each class contributes `round(ratio * count)` records to train, kept
/// within `[1, count - 1]` so both sides see every class.
pub fn stratified_split_indices(labels: &[Label], ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidParam(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut idx) in class_indices(labels).into_iter().enumerate() {
        if idx.len() < 2 {
            return Err(Error::ClassTooSmall {
                class: CLASS_NAMES[class],
                got: idx.len(),
                needed: 2,
            });
        }
        idx.shuffle(&mut rng);
        let n_train = ((ratio * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn stratified_split(ds: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = stratified_split_indices(&ds.labels(), ratio, seed)?;
    Ok((
        ds.select(&train, &format!("stratified train split {ratio} seed {seed}")),
        ds.select(&test, &format!("stratified test split {ratio} seed {seed}")),
    ))
}

/// Stratified k-fold assignment. Classes are shuffled, concatenated and
/// dealt round-robin, so fold sizes differ by at most one and per-class
/// counts stay within one of proportional. Folds are sorted.
pub fn stratified_kfold_indices(labels: &[Label], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::InvalidParam(format!("k-fold needs k >= 2, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut position = 0usize;
    for (class, mut idx) in class_indices(labels).into_iter().enumerate() {
        if idx.len() < k {
            return Err(Error::ClassTooSmall {
                class: CLASS_NAMES[class],
                got: idx.len(),
                needed: k,
            });
        }
        idx.shuffle(&mut rng);
        for i in idx {
            folds[position % k].push(i);
            position += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

pub fn stratified_kfold(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    stratified_kfold_indices(&ds.labels(), k, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Category {
    Gui,
    Integration,
    Unit,
    Unknown,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Gui => "GUI",
            Category::Integration => "Integration",
            Category::Unit => "Unit",
            Category::Unknown => "Unknown",
        }
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gui" => Ok(Category::Gui),
            "integration" => Ok(Category::Integration),
            "unit" => Ok(Category::Unit),
            other => Err(Error::InvalidParam(format!("unknown category {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingEntry {
    pub suite: String,
    pub category: Category,
}

/// Suite name to test category. The default mapping covers the Chromium
/// suites in `data/suite_categories.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryMapping {
    suites: BTreeMap<String, Category>,
    pub strict: bool,
}

const DEFAULT_MAPPING: &str = include_str!("../data/suite_categories.jsonl");

impl Default for CategoryMapping {
    fn default() -> Self {
        let (mapping, rejections) =
            Self::load(DEFAULT_MAPPING.as_bytes(), false).expect("bundled mapping is readable");
        debug_assert!(rejections.is_empty());
        mapping
    }
}

impl CategoryMapping {
    pub fn new(strict: bool) -> Self {
        CategoryMapping {
            suites: BTreeMap::new(),
            strict,
        }
    }

    pub fn insert(&mut self, suite: impl Into<String>, category: Category) {
        self.suites.insert(suite.into(), category);
    }

    pub fn load<R: BufRead>(source: R, strict: bool) -> Result<(Self, Vec<Rejection>)> {
        let mut mapping = Self::new(strict);
        let mut rejections = Vec::new();
        for (i, line) in source.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<MappingEntry>(&line) {
                Ok(e) if e.category != Category::Unknown => mapping.insert(e.suite, e.category),
                Ok(_) => rejections.push(Rejection {
                    line: i + 1,
                    reason: "category UNKNOWN cannot be assigned explicitly".into(),
                }),
                Err(e) => rejections.push(Rejection {
                    line: i + 1,
                    reason: e.to_string(),
                }),
            }
        }
        Ok((mapping, rejections))
    }

    pub fn load_file(path: &std::path::Path, strict: bool) -> Result<(Self, Vec<Rejection>)> {
        let file = std::fs::File::open(path).map_err(|e| Error::read(path, e))?;
        Self::load(std::io::BufReader::new(file), strict)
    }

    pub fn entries(&self) -> Vec<MappingEntry> {
        self.suites
            .iter()
            .map(|(s, &c)| MappingEntry {
                suite: s.clone(),
                category: c,
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.suites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.suites.is_empty()
    }
}

/// Category of a suite. Unmapped suites are an error in strict mode and
/// `Unknown` otherwise.
pub fn map_category(suite: &str, mapping: &CategoryMapping) -> Result<Category> {
    match mapping.suites.get(suite) {
        Some(&c) => Ok(c),
        None if mapping.strict => Err(Error::UnmappedSuite(suite.to_owned())),
        None => Ok(Category::Unknown),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scope", content = "category")]
pub enum Scope {
    All,
    Category(Category),
}

impl Scope {
    fn admits(self, c: Category) -> bool {
        match self {
            Scope::All => true,
            Scope::Category(want) => want == c,
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::All => f.write_str("All"),
            Scope::Category(c) => f.write_str(c.name()),
        }
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("all") {
            Ok(Scope::All)
        } else {
            s.parse().map(Scope::Category)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Strategy {
    pub train: Scope,
    pub test: Scope,
}

impl Strategy {
    pub fn new(train: Scope, test: Scope) -> Self {
        Strategy { train, test }
    }

    /// All→All, All→{GUI, Integration, Unit} and X→X per category.
    pub fn standard_set() -> Vec<Strategy> {
        let cats = [Category::Gui, Category::Integration, Category::Unit];
        let mut out = vec![Strategy::new(Scope::All, Scope::All)];
        out.extend(cats.iter().map(|&c| Strategy::new(Scope::All, Scope::Category(c))));
        out.extend(cats.iter().map(|&c| Strategy::new(Scope::Category(c), Scope::Category(c))));
        out
    }

    /// File-name friendly form, e.g. `all-to-gui`.
    pub fn slug(&self) -> String {
        format!("{}-to-{}", self.train, self.test).to_ascii_lowercase()
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} → {}", self.train, self.test)
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// Accepts `train->test`, `train→test` or `train-to-test`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let parts = ["->", "→", "-to-"]
            .iter()
            .find_map(|sep| s.split_once(sep))
            .ok_or_else(|| Error::Config(format!("strategy {s:?} must look like train->test")))?;
        Ok(Strategy::new(parts.0.parse()?, parts.1.parse()?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationConfig {
    pub split_ratio: f64,
    pub folds: usize,
    pub seed: u64,
    pub featurizer: FeaturizerConfig,
    pub search: SearchConfig,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            split_ratio: 0.8,
            folds: 5,
            seed: 0,
            featurizer: FeaturizerConfig::default(),
            search: SearchConfig::default(),
        }
    }
}

/// Seeds derived from the master seed, recorded in every report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub split: u64,
    pub search: u64,
    pub forest: u64,
}

impl Seeds {
    pub fn derive(master: u64) -> Self {
        Seeds {
            master,
            split: master,
            search: master.wrapping_add(1),
            forest: master.wrapping_add(2),
        }
    }
}

/// Featurizer and calibrated forest fitted on one training set.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub featurizer: FittedFeaturizer,
    pub forest: RandomForest,
    pub search: SearchOutcome,
    pub calibration: Calibration,
}

/// Fits the featurizer, searches hyperparameters, refits on the whole
/// training set and calibrates the threshold on the out-of-fold
/// probabilities of the winning search candidate. Nothing outside `train`
/// is consulted.
pub fn train_model(train: &Dataset, config: &EvaluationConfig) -> Result<TrainedModel> {
    let labels = train.labels();
    let positives = labels.iter().filter(|l| l.is_positive()).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::SingleClass(format!(
            "training set has {positives} legitimate failures out of {}",
            labels.len()
        )));
    }
    let seeds = Seeds::derive(config.seed);
    let featurizer = FittedFeaturizer::fit(train, &config.featurizer)?;
    let matrix = featurizer.transform_dataset(train);
    let search_config = SearchConfig {
        seed: seeds.search,
        folds: config.folds,
        ..config.search.clone()
    };
    let search = random_search(&matrix, &labels, &search_config)?;
    let params = crate::forest::ForestParams {
        seed: seeds.forest,
        ..search.best
    };
    let mut forest = fit_forest(&matrix, &labels, &params)?;
    let calibration = calibrate_threshold(&search.best_oof, &labels)?;
    forest.threshold = calibration.threshold;
    forest.bind_featurizer(&featurizer)?;
    Ok(TrainedModel {
        featurizer,
        forest,
        search,
        calibration,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub false_alerts: usize,
    pub legitimate: usize,
    pub total: usize,
}

impl ClassCounts {
    pub fn of(ds: &Dataset) -> Self {
        let legitimate = ds.records.iter().filter(|r| r.label.is_positive()).count();
        ClassCounts {
            false_alerts: ds.len() - legitimate,
            legitimate,
            total: ds.len(),
        }
    }

    fn plus(self, o: ClassCounts) -> Self {
        ClassCounts {
            false_alerts: self.false_alerts + o.false_alerts,
            legitimate: self.legitimate + o.legitimate,
            total: self.total + o.total,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub train_ms: f64,
    pub predict_ms: f64,
    pub predict_ms_per_failure: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: Strategy,
    pub threshold: f64,
    pub confusion: ConfusionMatrix,
    pub scores: Scores,
    /// Same predictions cut at 0.5 instead of the calibrated threshold.
    pub default_threshold_confusion: ConfusionMatrix,
    pub default_threshold_scores: Scores,
    /// Records in the scoped training and test sets combined.
    pub classes: ClassCounts,
    pub train_classes: ClassCounts,
    pub test_classes: ClassCounts,
    pub best_params: crate::forest::ForestParams,
    pub cv_mcc: f64,
    pub seeds: Seeds,
    pub timing: Timing,
}

pub struct StrategyRun {
    pub report: StrategyReport,
    pub model: TrainedModel,
}

fn scoped(ds: &Dataset, indices: &[usize], categories: &[Category], scope: Scope, what: &str) -> Dataset {
    let keep: Vec<usize> = indices
        .iter()
        .copied()
        .filter(|&i| scope.admits(categories[i]) && (scope == Scope::All || categories[i] != Category::Unknown))
        .collect();
    ds.select(&keep, &format!("{what} scope {scope}"))
}

/// Runs one strategy: a stratified split of the full dataset, scoping of
/// train and test, training on the scoped train set and scoring the scoped
/// test set.
pub fn run_strategy(
    ds: &Dataset,
    strategy: Strategy,
    mapping: &CategoryMapping,
    config: &EvaluationConfig,
) -> Result<StrategyRun> {
    let categories = ds
        .records
        .iter()
        .map(|r| map_category(&r.suite, mapping))
        .collect::<Result<Vec<_>>>()?;
    let seeds = Seeds::derive(config.seed);
    let (train_idx, test_idx) = stratified_split_indices(&ds.labels(), config.split_ratio, seeds.split)?;
    let train = scoped(ds, &train_idx, &categories, strategy.train, "train");
    let test = scoped(ds, &test_idx, &categories, strategy.test, "test");
    if train.is_empty() {
        return Err(Error::Empty(format!("training scope {} has no records", strategy.train)));
    }
    if test.is_empty() {
        return Err(Error::Empty(format!("test scope {} has no records", strategy.test)));
    }

    let started = Instant::now();
    let model = train_model(&train, config).map_err(|e| match e {
        Error::SingleClass(m) => Error::SingleClass(format!("training scope {}: {m}", strategy.train)),
        other => other,
    })?;
    let train_ms = started.elapsed().as_secs_f64() * 1e3;

    let matrix = model.featurizer.transform_dataset(&test);
    let started = Instant::now();
    let probs = model.forest.predict_proba_batch(&matrix)?;
    let predict_ms = started.elapsed().as_secs_f64() * 1e3;

    let truth = test.labels();
    let cm = confusion(&truth, &apply_threshold(&probs, model.forest.threshold))?;
    let cm_default = confusion(&truth, &apply_threshold(&probs, 0.5))?;
    let train_classes = ClassCounts::of(&train);
    let test_classes = ClassCounts::of(&test);
    let report = StrategyReport {
        strategy,
        threshold: model.forest.threshold,
        confusion: cm,
        scores: classification_scores(&cm),
        default_threshold_confusion: cm_default,
        default_threshold_scores: classification_scores(&cm_default),
        classes: train_classes.plus(test_classes),
        train_classes,
        test_classes,
        best_params: model.forest.params,
        cv_mcc: model.search.best_mcc,
        seeds,
        timing: Timing {
            train_ms,
            predict_ms,
            predict_ms_per_failure: predict_ms / test.len() as f64,
        },
    };
    Ok(StrategyRun { report, model })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub tool_version: String,
    pub seed: u64,
    pub strategies: Vec<StrategyReport>,
}

impl EvaluationReport {
    pub fn new(seed: u64, strategies: Vec<StrategyReport>) -> Self {
        EvaluationReport {
            tool_version: crate::TOOL_VERSION.into(),
            seed,
            strategies,
        }
    }

    /// Human-readable table: strategy, four metrics, three class counts.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<28} | {:>9} {:>9} {:>9} {:>9} | {:>12} {:>14} {:>10} | {:>9}",
            "Training strategy", "Precision", "Recall", "F1", "MCC", "False alerts", "Legit failures", "Total", "Threshold"
        );
        let _ = writeln!(out, "{}", "-".repeat(124));
        let pct = |x: f64| format!("{:.1}%", 100.0 * x);
        for r in &self.strategies {
            let _ = writeln!(
                out,
                "{:<28} | {:>9} {:>9} {:>9} {:>9} | {:>12} {:>14} {:>10} | {:>9.4}",
                r.strategy.to_string(),
                pct(r.scores.precision),
                pct(r.scores.recall),
                pct(r.scores.f1),
                pct(r.scores.mcc),
                r.classes.false_alerts,
                r.classes.legitimate,
                r.classes.total,
                r.threshold
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(pos: usize, n: usize) -> Vec<Label> {
        (0..n).map(|i| Label::from_positive(i < pos)).collect()
    }

    #[test]
    fn split_exact_counts() {
        let y = labels(10, 100);
        let (train, test) = stratified_split_indices(&y, 0.8, 7).unwrap();
        assert_eq!(train.len(), 80);
        assert_eq!(test.len(), 20);
        assert_eq!(train.iter().filter(|&&i| y[i].is_positive()).count(), 8);
        assert_eq!(test.iter().filter(|&&i| y[i].is_positive()).count(), 2);
        assert_eq!(stratified_split_indices(&y, 0.8, 7).unwrap(), (train, test));
    }

    #[test]
    fn split_errors() {
        assert!(matches!(
            stratified_split_indices(&labels(1, 10), 0.8, 0),
            Err(Error::ClassTooSmall { class: "legitimate", .. })
        ));
        assert!(stratified_split_indices(&labels(5, 10), 1.0, 0).is_err());
    }

    #[test]
    fn kfold_one_of_each_per_fold() {
        let y = labels(5, 10);
        let folds = stratified_kfold_indices(&y, 5, 3).unwrap();
        for f in &folds {
            assert_eq!(f.len(), 2);
            assert_eq!(f.iter().filter(|&&i| y[i].is_positive()).count(), 1);
        }
    }

    #[test]
    fn kfold_leave_one_out() {
        let y = labels(3, 6);
        let folds = stratified_kfold_indices(&y, 3, 0).unwrap();
        assert!(folds.iter().all(|f| f.len() == 2));
        let y = labels(4, 8);
        let folds = stratified_kfold_indices(&y, 8, 0);
        // both classes need at least k records
        assert!(matches!(folds, Err(Error::ClassTooSmall { needed: 8, .. })));
    }

    #[test]
    fn table_mapping() {
        let m = CategoryMapping::default();
        assert_eq!(m.len(), 33);
        assert_eq!(map_category("blink_web_tests", &m).unwrap(), Category::Gui);
        assert_eq!(map_category("browser_tests", &m).unwrap(), Category::Integration);
        assert_eq!(map_category("webkit_unit_tests", &m).unwrap(), Category::Unit);
        assert_eq!(map_category("brand_new_tests", &m).unwrap(), Category::Unknown);
        let mut strict = m;
        strict.strict = true;
        assert!(matches!(map_category("brand_new_tests", &strict), Err(Error::UnmappedSuite(_))));
    }

    #[test]
    fn mapping_file_rejections() {
        let input = "{\"suite\":\"a\",\"category\":\"GUI\"}\n{\"suite\":\"b\",\"category\":\"UNKNOWN\"}\n{\"suite\":\"c\"}\n";
        let (m, rej) = CategoryMapping::load(input.as_bytes(), false).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(rej.iter().map(|r| r.line).collect::<Vec<_>>(), vec![2, 3]);
    }

    #[test]
    fn strategy_parsing() {
        let s: Strategy = "all->gui".parse().unwrap();
        assert_eq!(s, Strategy::new(Scope::All, Scope::Category(Category::Gui)));
        assert_eq!(s.to_string(), "All → GUI");
        assert_eq!(s.slug(), "all-to-gui");
        assert_eq!("Unit→Unit".parse::<Strategy>().unwrap().slug(), "unit-to-unit");
        assert_eq!("integration-to-integration".parse::<Strategy>().unwrap().train, Scope::Category(Category::Integration));
        assert!("gui".parse::<Strategy>().is_err());
        assert!("all->mobile".parse::<Strategy>().is_err());
        assert_eq!(Strategy::standard_set().len(), 7);
    }
}
