//! Classifier pools backed by precomputed response tables.
//!
//! A [`Pool`] is a list of [`ClassifierSpec`]s plus one [`ResponseTable`]
//! per data split. Responses are class-probability vectors over the global
//! class set; a classifier trained on a class subset puts zero mass outside
//! it. Pools come from [`generate_synthetic`] or from files written by an
//! external builder (see [`load_pool`]).
//!
//! Response-table file layout (all little-endian):
//!
//! ```text
//! 0..8    magic "LACRT1\0\0"
//! 8..12   u32 n_examples
//! 12..16  u32 n_classifiers
//! 16..20  u32 n_classes
//! 20..24  u32 split tag (0 train, 1 val, 2 test)
//! 24..28  u32 reserved, zero
//! 28..32  u32 reserved, zero
//! 32..    u16 labels[n_examples]
//!         f32 responses[n_examples][n_classifiers][n_classes]
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numkit::argmax;
use crate::rng;

pub const TABLE_MAGIC: &[u8; 8] = b"LACRT1\0\0";
pub const HEADER_LEN: usize = 32;
/// Tolerance on per-row probability sums.
pub const ROW_SUM_TOL: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum PoolError {
    #[error("{path}: bad magic at offset {offset}, expected \"LACRT1\\0\\0\"")]
    BadMagic { path: String, offset: usize },
    #[error("{path}: truncated at offset {offset}, expected {expected} bytes")]
    Truncated { path: String, offset: usize, expected: usize },
    #[error("{path}: {extra} unexpected trailing bytes after offset {offset}")]
    TrailingData { path: String, offset: usize, extra: usize },
    #[error("{path}: invalid header field at offset {offset}: {msg}")]
    Header { path: String, offset: usize, msg: String },
    #[error("example {example}, classifier {classifier}: row sums to {sum}, not 1")]
    RowSum { example: usize, classifier: usize, sum: f64 },
    #[error("example {example}, classifier {classifier}: entry {value} outside [0,1]")]
    EntryRange { example: usize, classifier: usize, value: f32 },
    #[error("example {example}: label {label} >= {n_classes} classes")]
    LabelRange { example: usize, label: usize, n_classes: usize },
    #[error("manifest lists {manifest} classifiers but table has {table}")]
    ClassifierCountMismatch { manifest: usize, table: usize },
    #[error("manifest declares {manifest} classes but table has {table}")]
    ClassCountMismatch { manifest: usize, table: usize },
    #[error("split {0} supplied more than once")]
    DuplicateSplit(Split),
    #[error("split {0} not present in pool")]
    MissingSplit(Split),
    #[error("invalid classifier id list: {0}")]
    BadIds(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}")]
    Io { path: String, source: std::io::Error },
}

impl PoolError {
    /// Stable identifier for each failure kind.
    pub fn code(&self) -> &'static str {
        match self {
            PoolError::BadMagic { .. } => "bad-magic",
            PoolError::Truncated { .. } => "truncated",
            PoolError::TrailingData { .. } => "trailing-data",
            PoolError::Header { .. } => "bad-header",
            PoolError::RowSum { .. } => "row-sum",
            PoolError::EntryRange { .. } => "entry-range",
            PoolError::LabelRange { .. } => "label-range",
            PoolError::ClassifierCountMismatch { .. } => "classifier-count-mismatch",
            PoolError::ClassCountMismatch { .. } => "class-count-mismatch",
            PoolError::DuplicateSplit(_) => "duplicate-split",
            PoolError::MissingSplit(_) => "missing-split",
            PoolError::BadIds(_) => "bad-ids",
            PoolError::Manifest(_) => "bad-manifest",
            PoolError::Config(_) => "bad-config",
            PoolError::Io { .. } => "io",
        }
    }

    pub fn is_io(&self) -> bool {
        matches!(self, PoolError::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, PoolError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PoolError + '_ {
    move |source| PoolError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn tag(self) -> u32 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.lacrt", self.name())
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| format!("unknown split {s:?} (expected train, val or test)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Synthetic,
    #[default]
    Imported,
}

/// One pool member. Serialized as a manifest `classifiers` entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub id: usize,
    pub name: String,
    /// Abstract execution time charged per call.
    pub cost: f64,
    /// Global class indices the classifier was trained on.
    pub class_subset: Vec<usize>,
    #[serde(default)]
    pub arch: String,
    #[serde(default)]
    pub test_accuracy: Option<f64>,
    #[serde(default)]
    pub source: Source,
    /// Id in the pool this one was taken from by [`subset_view`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub n_classes: usize,
    pub classifiers: Vec<ClassifierSpec>,
}

/// Per-example, per-classifier class-probability vectors for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseTable {
    n_examples: usize,
    n_classifiers: usize,
    n_classes: usize,
    split: Split,
    labels: Vec<u16>,
    responses: Vec<f32>,
}

impl ResponseTable {
    /// Builds and validates a table.
    pub fn new(
        split: Split,
        n_classifiers: usize,
        n_classes: usize,
        labels: Vec<u16>,
        responses: Vec<f32>,
    ) -> Result<Self> {
        let n_examples = labels.len();
        if n_classes == 0 || n_classes > u16::MAX as usize + 1 {
            return Err(PoolError::Config(format!("n_classes {n_classes} out of range")));
        }
        if responses.len() != n_examples * n_classifiers * n_classes {
            return Err(PoolError::Config(format!(
                "{} response values for {n_examples}x{n_classifiers}x{n_classes}",
                responses.len()
            )));
        }
        let table = Self { n_examples, n_classifiers, n_classes, split, labels, responses };
        table.validate()?;
        Ok(table)
    }

    /// Checks labels, entry ranges and row sums.
    pub fn validate(&self) -> Result<()> {
        for (example, &label) in self.labels.iter().enumerate() {
            if label as usize >= self.n_classes {
                return Err(PoolError::LabelRange { example, label: label as usize, n_classes: self.n_classes });
            }
            for classifier in 0..self.n_classifiers {
                let row = self.response(example, classifier);
                if let Some(&value) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(PoolError::EntryRange { example, classifier, value });
                }
                let sum: f64 = row.iter().map(|&v| v as f64).sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(PoolError::RowSum { example, classifier, sum });
                }
            }
        }
        Ok(())
    }

    pub fn n_examples(&self) -> usize {
        self.n_examples
    }

    pub fn n_classifiers(&self) -> usize {
        self.n_classifiers
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn label(&self, example: usize) -> usize {
        self.labels[example] as usize
    }

    pub fn response(&self, example: usize, classifier: usize) -> &[f32] {
        let start = (example * self.n_classifiers + classifier) * self.n_classes;
        &self.responses[start..start + self.n_classes]
    }

    /// Concatenated responses of `classifiers` for one example.
    pub fn features(&self, example: usize, classifiers: &[usize]) -> Vec<f32> {
        classifiers
            .iter()
            .flat_map(|&k| self.response(example, k).iter().copied())
            .collect()
    }

    /// Argmax accuracy of a single classifier.
    pub fn classifier_accuracy(&self, classifier: usize) -> f64 {
        if self.n_examples == 0 {
            return 0.0;
        }
        let hits = (0..self.n_examples)
            .filter(|&e| argmax(self.response(e, classifier)) == self.label(e))
            .count();
        hits as f64 / self.n_examples as f64
    }

    /// Exact on-disk size of a table with these dimensions.
    pub fn encoded_len(n_examples: usize, n_classifiers: usize, n_classes: usize) -> usize {
        HEADER_LEN + 2 * n_examples + 4 * n_examples * n_classifiers * n_classes
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::encoded_len(self.n_examples, self.n_classifiers, self.n_classes));
        out.extend_from_slice(TABLE_MAGIC);
        for v in [self.n_examples as u32, self.n_classifiers as u32, self.n_classes as u32, self.split.tag(), 0, 0] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        for &r in &self.responses {
            out.extend_from_slice(&r.to_le_bytes());
        }
        out
    }

    /// Parses and validates a table; `path` is used only in error messages.
    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        let truncated = |offset: usize, expected: usize| PoolError::Truncated { path: path.to_string(), offset, expected };
        if bytes.len() < 8 || &bytes[..8] != TABLE_MAGIC {
            return Err(PoolError::BadMagic { path: path.to_string(), offset: 0 });
        }
        if bytes.len() < HEADER_LEN {
            return Err(truncated(bytes.len(), HEADER_LEN));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
        let (n_examples, n_classifiers, n_classes) = (word(0) as usize, word(1) as usize, word(2) as usize);
        let split = Split::from_tag(word(3)).ok_or_else(|| PoolError::Header {
            path: path.to_string(),
            offset: 20,
            msg: format!("unknown split tag {}", word(3)),
        })?;
        for (i, offset) in [(4, 24), (5, 28)] {
            if word(i) != 0 {
                return Err(PoolError::Header { path: path.to_string(), offset, msg: "reserved bytes not zero".into() });
            }
        }
        let expected = Self::encoded_len(n_examples, n_classifiers, n_classes);
        if bytes.len() < expected {
            return Err(truncated(bytes.len(), expected));
        }
        if bytes.len() > expected {
            return Err(PoolError::TrailingData { path: path.to_string(), offset: expected, extra: bytes.len() - expected });
        }
        let label_end = HEADER_LEN + 2 * n_examples;
        let labels = bytes[HEADER_LEN..label_end]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        let responses = bytes[label_end..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if n_classes == 0 {
            return Err(PoolError::Header { path: path.to_string(), offset: 16, msg: "zero classes".into() });
        }
        Self::new(split, n_classifiers, n_classes, labels, responses)
    }

    fn restricted(&self, ids: &[usize]) -> Self {
        let mut responses = Vec::with_capacity(self.n_examples * ids.len() * self.n_classes);
        for e in 0..self.n_examples {
            for &k in ids {
                responses.extend_from_slice(self.response(e, k));
            }
        }
        Self {
            n_examples: self.n_examples,
            n_classifiers: ids.len(),
            n_classes: self.n_classes,
            split: self.split,
            labels: self.labels.clone(),
            responses,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    pub name: String,
    n_classes: usize,
    specs: Vec<ClassifierSpec>,
    tables: BTreeMap<Split, ResponseTable>,
}

impl Pool {
    pub fn new(name: impl Into<String>, n_classes: usize, specs: Vec<ClassifierSpec>, tables: Vec<ResponseTable>) -> Result<Self> {
        for (i, s) in specs.iter().enumerate() {
            if s.id != i {
                return Err(PoolError::Manifest(format!("classifier ids must be 0..N-1 in order; entry {i} has id {}", s.id)));
            }
            if s.class_subset.is_empty() {
                return Err(PoolError::Manifest(format!("classifier {i} has an empty class subset")));
            }
            if let Some(&c) = s.class_subset.iter().find(|&&c| c >= n_classes) {
                return Err(PoolError::Manifest(format!("classifier {i} subset contains class {c} >= {n_classes}")));
            }
            if !(s.cost >= 0.0 && s.cost.is_finite()) {
                return Err(PoolError::Manifest(format!("classifier {i} has invalid cost {}", s.cost)));
            }
        }
        let mut map = BTreeMap::new();
        for t in tables {
            if t.n_classifiers != specs.len() {
                return Err(PoolError::ClassifierCountMismatch { manifest: specs.len(), table: t.n_classifiers });
            }
            if t.n_classes != n_classes {
                return Err(PoolError::ClassCountMismatch { manifest: n_classes, table: t.n_classes });
            }
            if map.contains_key(&t.split) {
                return Err(PoolError::DuplicateSplit(t.split));
            }
            map.insert(t.split, t);
        }
        Ok(Self { name: name.into(), n_classes, specs, tables: map })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_classifiers(&self) -> usize {
        self.specs.len()
    }

    pub fn specs(&self) -> &[ClassifierSpec] {
        &self.specs
    }

    pub fn costs(&self) -> Vec<f64> {
        self.specs.iter().map(|s| s.cost).collect()
    }

    pub fn table(&self, split: Split) -> Result<&ResponseTable> {
        self.tables.get(&split).ok_or(PoolError::MissingSplit(split))
    }

    pub fn splits(&self) -> impl Iterator<Item = Split> + '_ {
        self.tables.keys().copied()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest { name: self.name.clone(), n_classes: self.n_classes, classifiers: self.specs.clone() }
    }
}

/// Where a pool's manifest and split tables live on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolPaths {
    pub manifest: PathBuf,
    pub tables: BTreeMap<Split, PathBuf>,
}

impl PoolPaths {
    /// `DIR/manifest.json` and `DIR/{train,val,test}.lacrt`.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            manifest: dir.join("manifest.json"),
            tables: Split::ALL.into_iter().map(|s| (s, dir.join(s.file_name()))).collect(),
        }
    }
}

pub fn save_pool(pool: &Pool, paths: &PoolPaths) -> Result<()> {
    for split in pool.splits() {
        let path = paths
            .tables
            .get(&split)
            .ok_or_else(|| PoolError::Config(format!("no output path for split {split}")))?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(path, pool.table(split)?.to_bytes()).map_err(io_err(path))?;
    }
    let mut json = serde_json::to_string_pretty(&pool.manifest()).map_err(|e| PoolError::Manifest(e.to_string()))?;
    json.push('\n');
    if let Some(parent) = paths.manifest.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(&paths.manifest, json).map_err(io_err(&paths.manifest))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PoolError::Manifest(format!("{}: {e}", path.display())))
}

pub fn read_table(path: &Path) -> Result<ResponseTable> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    ResponseTable::from_bytes(&bytes, &path.display().to_string())
}

/// Loads a manifest and its split tables; the split of each table comes from its header.
pub fn load_pool(manifest_path: &Path, table_paths: &[PathBuf]) -> Result<Pool> {
    let manifest = read_manifest(manifest_path)?;
    let tables = table_paths.iter().map(|p| read_table(p)).collect::<Result<Vec<_>>>()?;
    Pool::new(manifest.name, manifest.n_classes, manifest.classifiers, tables)
}

/// Loads `DIR/manifest.json` plus whichever split tables exist in `DIR`.
pub fn load_pool_dir(dir: &Path) -> Result<Pool> {
    let paths = PoolPaths::in_dir(dir);
    let present: Vec<PathBuf> = paths.tables.values().filter(|p| p.exists()).cloned().collect();
    load_pool(&paths.manifest, &present)
}

/// Accuracy of the argmax of the unweighted mean response of all classifiers.
///
/// When several classes share the maximal mean, the example earns
/// `1/ties` credit if its label is among them (the expected accuracy of a
/// uniformly random tie-break).
pub fn average_responses_accuracy(pool: &Pool, split: Split) -> Result<f64> {
    let table = pool.table(split)?;
    if table.n_examples() == 0 {
        return Ok(0.0);
    }
    let mut credit = 0.0f64;
    let mut mean = vec![0.0f64; pool.n_classes];
    for e in 0..table.n_examples() {
        mean.iter_mut().for_each(|m| *m = 0.0);
        for k in 0..pool.n_classifiers() {
            mean.iter_mut().zip(table.response(e, k)).for_each(|(m, &r)| *m += r as f64);
        }
        credit += tie_credit(&mean, table.label(e));
    }
    Ok(credit / table.n_examples() as f64)
}

/// `1/|argmax set|` if `label` attains the maximum of `scores`, else 0.
pub fn tie_credit(scores: &[f64], label: usize) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if scores[label] != max {
        return 0.0;
    }
    1.0 / scores.iter().filter(|&&s| s == max).count() as f64
}

/// Pool restricted to `ids` (in the given order), with ids re-densified.
pub fn subset_view(pool: &Pool, ids: &[usize]) -> Result<Pool> {
    if ids.is_empty() {
        return Err(PoolError::BadIds("empty id list".into()));
    }
    let mut seen = vec![false; pool.n_classifiers()];
    for &id in ids {
        if id >= pool.n_classifiers() {
            return Err(PoolError::BadIds(format!("id {id} out of range for {} classifiers", pool.n_classifiers())));
        }
        if std::mem::replace(&mut seen[id], true) {
            return Err(PoolError::BadIds(format!("id {id} listed twice")));
        }
    }
    let specs = ids
        .iter()
        .enumerate()
        .map(|(new_id, &old)| {
            let mut s = pool.specs[old].clone();
            s.origin = Some(s.origin.unwrap_or(old));
            s.id = new_id;
            s
        })
        .collect();
    let tables = pool.tables.values().map(|t| t.restricted(ids)).collect();
    Pool::new(pool.name.clone(), pool.n_classes, specs, tables)
}

/// What a classifier emits for examples whose label is outside its subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffSubsetBehavior {
    UniformOverSubset,
    ConfidentRandomInSubset,
    UniformOverAll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticClassifier {
    #[serde(default)]
    pub name: Option<String>,
    pub class_subset: Vec<usize>,
    pub in_subset_accuracy: f64,
    pub off_subset_behavior: OffSubsetBehavior,
    #[serde(default = "default_cost")]
    pub cost: f64,
}

fn default_cost() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPoolConfig {
    pub name: String,
    pub n_classes: usize,
    pub classifiers: Vec<SyntheticClassifier>,
    pub examples: SplitSizes,
    /// Class prior; uniform when absent.
    #[serde(default)]
    pub label_prior: Option<Vec<f64>>,
    /// Draw exact label counts and exactly balanced per-label outcomes
    /// instead of independent samples.
    #[serde(default)]
    pub stratified: bool,
    pub seed: u64,
}

impl SyntheticPoolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(PoolError::Config("need at least two classes".into()));
        }
        if self.classifiers.is_empty() {
            return Err(PoolError::Config("need at least one classifier".into()));
        }
        for (i, c) in self.classifiers.iter().enumerate() {
            if c.class_subset.is_empty() {
                return Err(PoolError::Config(format!("classifier {i}: empty class subset")));
            }
            let mut sorted = c.class_subset.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != c.class_subset.len() || sorted.iter().any(|&k| k >= self.n_classes) {
                return Err(PoolError::Config(format!("classifier {i}: subset must be distinct classes < {}", self.n_classes)));
            }
            if !(0.0..=1.0).contains(&c.in_subset_accuracy) {
                return Err(PoolError::Config(format!("classifier {i}: accuracy outside [0,1]")));
            }
            if !(c.cost >= 0.0 && c.cost.is_finite()) {
                return Err(PoolError::Config(format!("classifier {i}: invalid cost")));
            }
        }
        if let Some(prior) = &self.label_prior {
            if prior.len() != self.n_classes || prior.iter().any(|&p| !(p >= 0.0)) || prior.iter().sum::<f64>() <= 0.0 {
                return Err(PoolError::Config("label prior must have n_classes nonnegative entries with positive sum".into()));
            }
        }
        Ok(())
    }

    fn prior(&self) -> Vec<f64> {
        let raw = self.label_prior.clone().unwrap_or_else(|| vec![1.0; self.n_classes]);
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|p| p / total).collect()
    }
}

/// Per-example outcome of one classifier, before turning into a probability row.
#[derive(Clone, Copy)]
enum Outcome {
    OneHot(usize),
    UniformSubset,
    UniformAll,
}

/// Samples response tables for every split.
pub fn generate_synthetic(config: &SyntheticPoolConfig) -> Result<Pool> {
    config.validate()?;
    let specs = config
        .classifiers
        .iter()
        .enumerate()
        .map(|(id, c)| ClassifierSpec {
            id,
            name: c.name.clone().unwrap_or_else(|| format!("c{id}")),
            cost: c.cost,
            class_subset: c.class_subset.clone(),
            arch: "synthetic".into(),
            test_accuracy: None,
            source: Source::Synthetic,
            origin: None,
        })
        .collect::<Vec<_>>();
    let sizes = [
        (Split::Train, config.examples.train),
        (Split::Val, config.examples.val),
        (Split::Test, config.examples.test),
    ];
    let mut tables = Vec::new();
    for (split, n) in sizes {
        let mut rng = rng::stream(config.seed, split.tag() as u64 + 1);
        tables.push(synthesize_split(config, split, n, &mut rng)?);
    }
    let mut pool = Pool::new(config.name.clone(), config.n_classes, specs, tables)?;
    let test = pool.tables.get(&Split::Test).filter(|t| t.n_examples() > 0).cloned();
    if let Some(test) = test {
        for (k, spec) in pool.specs.iter_mut().enumerate() {
            spec.test_accuracy = Some(test.classifier_accuracy(k));
        }
    }
    Ok(pool)
}

fn synthesize_split(config: &SyntheticPoolConfig, split: Split, n: usize, rng: &mut rng::Rng) -> Result<ResponseTable> {
    let prior = config.prior();
    let labels: Vec<usize> = if config.stratified {
        let mut labels: Vec<usize> = exact_counts(&prior, n)
            .into_iter()
            .enumerate()
            .flat_map(|(c, count)| std::iter::repeat_n(c, count))
            .collect();
        labels.shuffle(rng);
        labels
    } else {
        let cdf: Vec<f64> = prior
            .iter()
            .scan(0.0, |acc, &p| {
                *acc += p;
                Some(*acc)
            })
            .collect();
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                cdf.iter().position(|&c| u < c).unwrap_or(config.n_classes - 1)
            })
            .collect()
    };

    let n_classes = config.n_classes;
    let mut outcomes = vec![Vec::with_capacity(n); config.classifiers.len()];
    for (k, clf) in config.classifiers.iter().enumerate() {
        outcomes[k] = if config.stratified {
            stratified_outcomes(clf, &labels, rng)
        } else {
            labels.iter().map(|&y| sample_outcome(clf, y, rng)).collect()
        };
    }

    let mut responses = Vec::with_capacity(n * config.classifiers.len() * n_classes);
    for e in 0..n {
        for (k, clf) in config.classifiers.iter().enumerate() {
            let mut row = vec![0.0f32; n_classes];
            match outcomes[k][e] {
                Outcome::OneHot(c) => row[c] = 1.0,
                Outcome::UniformSubset => {
                    let p = 1.0 / clf.class_subset.len() as f32;
                    clf.class_subset.iter().for_each(|&c| row[c] = p);
                }
                Outcome::UniformAll => row.iter_mut().for_each(|v| *v = 1.0 / n_classes as f32),
            }
            responses.extend(row);
        }
    }
    ResponseTable::new(split, config.classifiers.len(), n_classes, labels.into_iter().map(|l| l as u16).collect(), responses)
}

fn sample_outcome(clf: &SyntheticClassifier, y: usize, rng: &mut rng::Rng) -> Outcome {
    if clf.class_subset.contains(&y) {
        let wrong: Vec<usize> = clf.class_subset.iter().copied().filter(|&c| c != y).collect();
        if wrong.is_empty() || rng.random::<f64>() < clf.in_subset_accuracy {
            Outcome::OneHot(y)
        } else {
            Outcome::OneHot(wrong[rng.random_range(0..wrong.len())])
        }
    } else {
        match clf.off_subset_behavior {
            OffSubsetBehavior::UniformOverSubset => Outcome::UniformSubset,
            OffSubsetBehavior::UniformOverAll => Outcome::UniformAll,
            OffSubsetBehavior::ConfidentRandomInSubset => {
                Outcome::OneHot(clf.class_subset[rng.random_range(0..clf.class_subset.len())])
            }
        }
    }
}

/// Outcomes with exact per-label frequencies: `round(acc * n_y)` correct
/// answers, wrong and off-subset one-hot choices cycled evenly, then shuffled.
fn stratified_outcomes(clf: &SyntheticClassifier, labels: &[usize], rng: &mut rng::Rng) -> Vec<Outcome> {
    let mut out = vec![Outcome::UniformAll; labels.len()];
    let max_label = labels.iter().copied().max().map_or(0, |m| m + 1);
    for y in 0..max_label {
        let idx: Vec<usize> = (0..labels.len()).filter(|&e| labels[e] == y).collect();
        let m = idx.len();
        let mut assigned: Vec<Outcome> = if clf.class_subset.contains(&y) {
            let wrong: Vec<usize> = clf.class_subset.iter().copied().filter(|&c| c != y).collect();
            let correct = if wrong.is_empty() { m } else { (clf.in_subset_accuracy * m as f64).round() as usize };
            (0..m)
                .map(|j| if j < correct { Outcome::OneHot(y) } else { Outcome::OneHot(wrong[(j - correct) % wrong.len()]) })
                .collect()
        } else {
            match clf.off_subset_behavior {
                OffSubsetBehavior::UniformOverSubset => vec![Outcome::UniformSubset; m],
                OffSubsetBehavior::UniformOverAll => vec![Outcome::UniformAll; m],
                OffSubsetBehavior::ConfidentRandomInSubset => {
                    (0..m).map(|j| Outcome::OneHot(clf.class_subset[j % clf.class_subset.len()])).collect()
                }
            }
        };
        assigned.shuffle(rng);
        for (e, o) in idx.into_iter().zip(assigned) {
            out[e] = o;
        }
    }
    out
}

/// Largest-remainder apportionment of `n` items to `weights`.
fn exact_counts(weights: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = weights.iter().map(|w| w * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let missing = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

/// Ready-made synthetic pools used across tests, examples and the CLI.
pub mod presets {
    use super::*;

    /// Four classes in two groups `{0,1}` and `{2,3}`.
    ///
    /// `R` reveals only the group: for labels 0/1 it answers a uniformly
    /// random one-hot in `{0,1}`, for labels 2/3 it spreads mass over all
    /// classes. `S01` and `S23` are perfect inside their group and answer a
    /// random confident in-group class outside it. Querying `R` and then the
    /// matching specialist classifies every example; any fixed pair reaches
    /// only 0.75.
    pub fn router(seed: u64) -> SyntheticPoolConfig {
        SyntheticPoolConfig {
            name: "router".into(),
            n_classes: 4,
            classifiers: vec![
                SyntheticClassifier {
                    name: Some("R".into()),
                    class_subset: vec![0, 1],
                    in_subset_accuracy: 0.5,
                    off_subset_behavior: OffSubsetBehavior::UniformOverAll,
                    cost: 1.0,
                },
                SyntheticClassifier {
                    name: Some("S01".into()),
                    class_subset: vec![0, 1],
                    in_subset_accuracy: 1.0,
                    off_subset_behavior: OffSubsetBehavior::ConfidentRandomInSubset,
                    cost: 1.0,
                },
                SyntheticClassifier {
                    name: Some("S23".into()),
                    class_subset: vec![2, 3],
                    in_subset_accuracy: 1.0,
                    off_subset_behavior: OffSubsetBehavior::ConfidentRandomInSubset,
                    cost: 1.0,
                },
            ],
            examples: SplitSizes { train: 2000, val: 800, test: 2000 },
            label_prior: None,
            stratified: true,
            seed,
        }
    }

    /// Single classifier that is always right.
    pub fn perfect(n_classes: usize, seed: u64) -> SyntheticPoolConfig {
        SyntheticPoolConfig {
            name: "perfect".into(),
            n_classes,
            classifiers: vec![SyntheticClassifier {
                name: Some("oracle".into()),
                class_subset: (0..n_classes).collect(),
                in_subset_accuracy: 1.0,
                off_subset_behavior: OffSubsetBehavior::UniformOverAll,
                cost: 1.0,
            }],
            examples: SplitSizes { train: 512, val: 256, test: 512 },
            label_prior: None,
            stratified: false,
            seed,
        }
    }

    /// Six classes covered by four overlapping, noisy class-subset
    /// specialists. Each extra query adds information, so accuracy grows
    /// with the budget.
    pub fn overlap(seed: u64) -> SyntheticPoolConfig {
        let spec = |name: &str, subset: &[usize], acc: f64| SyntheticClassifier {
            name: Some(name.into()),
            class_subset: subset.to_vec(),
            in_subset_accuracy: acc,
            off_subset_behavior: OffSubsetBehavior::ConfidentRandomInSubset,
            cost: 1.0,
        };
        SyntheticPoolConfig {
            name: "overlap".into(),
            n_classes: 6,
            classifiers: vec![
                spec("A", &[0, 1, 2], 0.9),
                spec("B", &[2, 3, 4], 0.9),
                spec("C", &[4, 5, 0], 0.9),
                spec("D", &[1, 3, 5], 0.9),
            ],
            examples: SplitSizes { train: 3000, val: 1000, test: 3000 },
            label_prior: None,
            stratified: false,
            seed,
        }
    }
}
