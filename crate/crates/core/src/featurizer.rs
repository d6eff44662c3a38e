//! Sparse feature extraction from failure records.
//!
//! Layout of the feature space, in column order:
//!
//! | columns | content |
//! |---------|---------|
//! | 0 | `runDuration` in seconds |
//! | 1 | `runStatus` code (0..=4) |
//! | 2 | `runTagStatus` code (0..=9) |
//! | 3..8 | character length of each artifact |
//! | 8.. | one TF-IDF block per artifact namespace |
//!
//! Each TF-IDF block uses raw term counts, smoothed inverse document
//! frequency `ln((1 + N) / (1 + df)) + 1` and is L2-normalized on its own.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Dataset, FailureRecord};
use crate::error::{Error, Result};

pub const FEATURIZER_FORMAT: &str = "failtriage-featurizer";
pub const FEATURIZER_VERSION: &str = "1";

/// Columns preceding the TF-IDF blocks.
pub const DENSE_COLUMNS: usize = 3 + Namespace::ALL.len();

/// Lowercases, splits on every non-alphanumeric character and drops tokens
/// shorter than two characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2)
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Namespace {
    Command,
    CrashLog,
    StackTrace,
    Stderr,
    TestSource,
}

impl Namespace {
    pub const ALL: [Namespace; 5] = [
        Namespace::Command,
        Namespace::CrashLog,
        Namespace::StackTrace,
        Namespace::Stderr,
        Namespace::TestSource,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Namespace::Command => "command",
            Namespace::CrashLog => "crashLog",
            Namespace::StackTrace => "stackTrace",
            Namespace::Stderr => "stderr",
            Namespace::TestSource => "testSource",
        }
    }

    pub fn text(self, r: &FailureRecord) -> &str {
        match self {
            Namespace::Command => &r.command,
            Namespace::CrashLog => &r.crash_log,
            Namespace::StackTrace => &r.stack_trace,
            Namespace::Stderr => &r.stderr,
            Namespace::TestSource => &r.test_source,
        }
    }
}

impl fmt::Display for Namespace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    pub namespace: Namespace,
    pub max_size: usize,
    /// Number of documents the vocabulary was fitted on.
    pub documents: usize,
    tokens: Vec<String>,
    idf: Vec<f64>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps the `max_size` most document-frequent tokens (ties broken
    /// lexicographically) and assigns indices in lexicographic order.
    pub fn fit<'a>(namespace: Namespace, docs: impl Iterator<Item = &'a str>, max_size: usize) -> Self {
        let mut df: HashMap<String, usize> = HashMap::new();
        let mut n = 0usize;
        for doc in docs {
            n += 1;
            let mut tokens = tokenize(doc);
            tokens.sort_unstable();
            tokens.dedup();
            for t in tokens {
                *df.entry(t).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = df.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size);
        ranked.sort_by(|a, b| a.0.cmp(&b.0));
        let idf = ranked.iter().map(|(_, d)| smoothed_idf(n, *d)).collect();
        let tokens: Vec<String> = ranked.into_iter().map(|(t, _)| t).collect();
        Self::assemble(namespace, max_size, n, tokens, idf)
    }

    fn assemble(namespace: Namespace, max_size: usize, documents: usize, tokens: Vec<String>, idf: Vec<f64>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary {
            namespace,
            max_size,
            documents,
            tokens,
            idf,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn idf(&self, token: &str) -> Option<f64> {
        self.index_of(token).map(|i| self.idf[i])
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// L2-normalized TF-IDF weights of `text`, as (local index, weight)
    /// pairs in index order.
    pub fn weigh(&self, text: &str) -> Vec<(usize, f64)> {
        let mut counts: Vec<(usize, u32)> = Vec::new();
        let mut ids: Vec<usize> = tokenize(text).iter().filter_map(|t| self.index_of(t)).collect();
        ids.sort_unstable();
        for id in ids {
            match counts.last_mut() {
                Some((last, c)) if *last == id => *c += 1,
                _ => counts.push((id, 1)),
            }
        }
        let mut weights: Vec<(usize, f64)> = counts
            .into_iter()
            .map(|(i, c)| (i, f64::from(c) * self.idf[i]))
            .collect();
        let norm = weights.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (_, w) in &mut weights {
                *w /= norm;
            }
        }
        weights
    }
}

fn smoothed_idf(documents: usize, df: usize) -> f64 {
    ((1.0 + documents as f64) / (1.0 + df as f64)).ln() + 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturizerConfig {
    pub max_vocabulary: usize,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        FeaturizerConfig {
            max_vocabulary: 2000,
        }
    }
}

/// What a column of the feature space holds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Column<'a> {
    RunDuration,
    RunStatus,
    RunTagStatus,
    Length(Namespace),
    Token { namespace: Namespace, token: &'a str },
}

impl Column<'_> {
    /// Display name; TF-IDF columns report their bare token.
    pub fn name(&self) -> String {
        match self {
            Column::RunDuration => "runDuration".into(),
            Column::RunStatus => "runStatus".into(),
            Column::RunTagStatus => "runTagStatus".into(),
            Column::Length(ns) => format!("{}Length", ns.name()),
            Column::Token { token, .. } => (*token).to_owned(),
        }
    }

    pub fn origin(&self) -> &'static str {
        match self {
            Column::RunDuration | Column::RunStatus | Column::RunTagStatus => "run properties",
            Column::Length(_) => "artifacts",
            Column::Token { .. } => "artifact vocabulary",
        }
    }
}

/// Frozen feature space: per-namespace vocabularies plus fixed columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedFeaturizer {
    vocabularies: Vec<Vocabulary>,
    offsets: Vec<usize>,
    dimension: usize,
}

#[derive(Serialize, Deserialize)]
struct FeaturizerFile {
    format: String,
    version: String,
    vocabularies: Vec<VocabularyFile>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    namespace: Namespace,
    max_size: usize,
    documents: usize,
    tokens: Vec<String>,
    idf: Vec<f64>,
}

impl FittedFeaturizer {
    /// Fits one vocabulary per namespace on the training records only.
    pub fn fit(train: &Dataset, config: &FeaturizerConfig) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Empty("cannot fit featurizer on an empty training set".into()));
        }
        let vocabularies = Namespace::ALL
            .iter()
            .map(|&ns| {
                Vocabulary::fit(
                    ns,
                    train.records.iter().map(|r| ns.text(r)),
                    config.max_vocabulary,
                )
            })
            .collect();
        Ok(Self::from_vocabularies(vocabularies))
    }

    fn from_vocabularies(vocabularies: Vec<Vocabulary>) -> Self {
        let mut offsets = Vec::with_capacity(vocabularies.len());
        let mut next = DENSE_COLUMNS;
        for v in &vocabularies {
            offsets.push(next);
            next += v.len();
        }
        FittedFeaturizer {
            vocabularies,
            offsets,
            dimension: next,
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn vocabulary(&self, ns: Namespace) -> &Vocabulary {
        &self.vocabularies[ns as usize]
    }

    /// First column of a namespace's TF-IDF block.
    pub fn block_offset(&self, ns: Namespace) -> usize {
        self.offsets[ns as usize]
    }

    pub fn column(&self, index: usize) -> Option<Column<'_>> {
        match index {
            0 => Some(Column::RunDuration),
            1 => Some(Column::RunStatus),
            2 => Some(Column::RunTagStatus),
            i if i < DENSE_COLUMNS => Some(Column::Length(Namespace::ALL[i - 3])),
            i if i < self.dimension => {
                let slot = self.offsets.partition_point(|&o| o <= i) - 1;
                let vocab = &self.vocabularies[slot];
                Some(Column::Token {
                    namespace: vocab.namespace,
                    token: &vocab.tokens[i - self.offsets[slot]],
                })
            }
            _ => None,
        }
    }

    pub fn transform(&self, r: &FailureRecord) -> FeatureVector {
        let mut entries: Vec<(u32, f64)> = Vec::with_capacity(DENSE_COLUMNS + 32);
        let dense = [
            r.run_duration,
            f64::from(r.run_status.code()),
            f64::from(r.run_tag_status.code()),
        ];
        for (i, v) in dense.into_iter().enumerate() {
            entries.push((i as u32, v));
        }
        for (k, ns) in Namespace::ALL.iter().enumerate() {
            entries.push(((3 + k) as u32, ns.text(r).chars().count() as f64));
        }
        for (vocab, &offset) in self.vocabularies.iter().zip(&self.offsets) {
            let text = vocab.namespace.text(r);
            for (i, w) in vocab.weigh(text) {
                entries.push(((offset + i) as u32, w));
            }
        }
        entries.retain(|&(_, v)| v != 0.0);
        FeatureVector::from_sorted(self.dimension, entries)
    }

    pub fn transform_dataset(&self, ds: &Dataset) -> FeatureMatrix {
        FeatureMatrix::from_rows(self.dimension, ds.records.iter().map(|r| self.transform(r)))
    }

    pub fn to_json(&self) -> Result<String> {
        let file = FeaturizerFile {
            format: FEATURIZER_FORMAT.into(),
            version: FEATURIZER_VERSION.into(),
            vocabularies: self
                .vocabularies
                .iter()
                .map(|v| VocabularyFile {
                    namespace: v.namespace,
                    max_size: v.max_size,
                    documents: v.documents,
                    tokens: v.tokens.clone(),
                    idf: v.idf.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: FeaturizerFile = serde_json::from_str(text).map_err(|e| Error::Malformed {
            what: "featurizer file",
            detail: e.to_string(),
        })?;
        if file.format != FEATURIZER_FORMAT || file.version != FEATURIZER_VERSION {
            return Err(Error::Version {
                what: "featurizer",
                expected: format!("{FEATURIZER_FORMAT} v{FEATURIZER_VERSION}"),
                found: format!("{} v{}", file.format, file.version),
            });
        }
        let layout: Vec<Namespace> = file.vocabularies.iter().map(|v| v.namespace).collect();
        if layout != Namespace::ALL {
            return Err(Error::Malformed {
                what: "featurizer file",
                detail: format!("unexpected namespace layout {layout:?}"),
            });
        }
        let mut vocabularies = Vec::with_capacity(file.vocabularies.len());
        for v in file.vocabularies {
            if v.tokens.len() != v.idf.len() || v.tokens.len() > v.max_size {
                return Err(Error::Malformed {
                    what: "featurizer file",
                    detail: format!("inconsistent vocabulary for {}", v.namespace),
                });
            }
            vocabularies.push(Vocabulary::assemble(v.namespace, v.max_size, v.documents, v.tokens, v.idf));
        }
        Ok(Self::from_vocabularies(vocabularies))
    }

    /// Content hash of the serialized featurizer; models record it.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(sha256_hex(self.to_json()?.as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::write(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::read(path, e))?;
        Self::from_json(&text)
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Sparse vector with strictly increasing indices.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    dimension: usize,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl FeatureVector {
    fn from_sorted(dimension: usize, entries: Vec<(u32, f64)>) -> Self {
        debug_assert!(entries.windows(2).all(|w| w[0].0 < w[1].0));
        let (indices, values) = entries.into_iter().unzip();
        FeatureVector {
            dimension,
            indices,
            values,
        }
    }

    /// Builds a vector from arbitrary (index, value) pairs; zero values are
    /// dropped.
    pub fn new(dimension: usize, mut entries: Vec<(u32, f64)>) -> Result<Self> {
        entries.sort_by_key(|e| e.0);
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidParam("duplicate feature index".into()));
        }
        if let Some(&(i, _)) = entries.iter().find(|e| e.0 as usize >= dimension) {
            return Err(Error::DimensionMismatch {
                expected: dimension,
                got: i as usize + 1,
            });
        }
        if entries.iter().any(|e| !e.1.is_finite()) {
            return Err(Error::InvalidParam("non-finite feature value".into()));
        }
        entries.retain(|e| e.1 != 0.0);
        Ok(Self::from_sorted(dimension, entries))
    }

    pub fn dense(dimension: usize, values: &[f64]) -> Result<Self> {
        if values.len() != dimension {
            return Err(Error::DimensionMismatch {
                expected: dimension,
                got: values.len(),
            });
        }
        Self::new(dimension, values.iter().enumerate().map(|(i, &v)| (i as u32, v)).collect())
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn get(&self, index: usize) -> f64 {
        self.as_row().get(index)
    }

    pub fn run_duration(&self) -> f64 {
        self.get(0)
    }

    pub fn run_status(&self) -> f64 {
        self.get(1)
    }

    pub fn run_tag_status(&self) -> f64 {
        self.get(2)
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn as_row(&self) -> SparseRow<'_> {
        SparseRow {
            indices: &self.indices,
            values: &self.values,
        }
    }
}

/// Borrowed view of one sparse row.
#[derive(Debug, Clone, Copy)]
pub struct SparseRow<'a> {
    pub indices: &'a [u32],
    pub values: &'a [f64],
}

impl SparseRow<'_> {
    #[inline]
    pub fn get(&self, index: usize) -> f64 {
        match self.indices.binary_search(&(index as u32)) {
            Ok(pos) => self.values[pos],
            Err(_) => 0.0,
        }
    }
}

/// Compressed sparse row matrix of feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    columns: usize,
    row_ptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn from_rows(columns: usize, rows: impl IntoIterator<Item = FeatureVector>) -> Self {
        let mut m = FeatureMatrix {
            columns,
            row_ptr: vec![0],
            indices: Vec::new(),
            values: Vec::new(),
        };
        for row in rows {
            assert_eq!(row.dimension, columns, "row dimension differs from matrix");
            m.indices.extend_from_slice(&row.indices);
            m.values.extend_from_slice(&row.values);
            m.row_ptr.push(m.indices.len());
        }
        m
    }

    /// Convenience constructor from dense rows.
    pub fn from_dense(rows: &[Vec<f64>]) -> Result<Self> {
        let columns = rows.first().map_or(0, Vec::len);
        let vectors = rows
            .iter()
            .map(|r| FeatureVector::dense(columns, r))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_rows(columns, vectors))
    }

    pub fn rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn columns(&self) -> usize {
        self.columns
    }

    #[inline]
    pub fn row(&self, i: usize) -> SparseRow<'_> {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        SparseRow {
            indices: &self.indices[a..b],
            values: &self.values[a..b],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.row(row).get(col)
    }

    pub fn row_vector(&self, i: usize) -> FeatureVector {
        let r = self.row(i);
        FeatureVector {
            dimension: self.columns,
            indices: r.indices.to_vec(),
            values: r.values.to_vec(),
        }
    }

    pub fn select(&self, rows: &[usize]) -> FeatureMatrix {
        FeatureMatrix::from_rows(self.columns, rows.iter().map(|&i| self.row_vector(i)))
    }
}
