//! Dataset manifests and the deterministic sampling, splitting and fold
//! structures built on top of them.
//!
//! A [`DatasetManifest`] is an immutable index of `(id, path, label)` rows
//! under a [`LabelSchema`]. Every operation here is a pure function of its
//! inputs and seed.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::rng::{derive_seed, rng_from_seed, shuffle};

pub const NORMAL: &str = "normal";
pub const DISEASE: &str = "disease";
pub const COVID: &str = "covid";
pub const OPACITY: &str = "opacity";
pub const PNEUMONIA: &str = "pneumonia";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid label schema: {0}")]
    InvalidSchema(String),
    #[error("class '{class}' has no directory under {root}")]
    MissingClassDirectory { class: String, root: PathBuf },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("class '{class}' has {available} samples, {requested} requested")]
    InsufficientSamples { class: String, available: usize, requested: usize },
    #[error("fraction {0} is not strictly between 0 and 1")]
    InvalidFraction(f64),
    #[error("class '{class}' has {available} samples, at least {required} required")]
    ClassTooSmall { class: String, available: usize, required: usize },
    #[error("fold count {0} must be at least 2")]
    InvalidK(usize),
    #[error("label '{label}' of sample '{id}' is not in the schema")]
    UnknownLabel { id: String, label: String },
    #[error("duplicate sample id '{0}'")]
    DuplicateId(String),
    #[error("expected a {expected:?} schema, got {actual:?}")]
    WrongStage { expected: Stage, actual: Stage },
    #[error("sample '{0}' is not in the fold plan")]
    UnassignedSample(String),
    #[error("malformed manifest file {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Which task a schema labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Multiclass4,
    Stage1Binary,
    Stage2Disease,
}

impl Stage {
    pub fn class_count(self) -> usize {
        match self {
            Stage::Multiclass4 => 4,
            Stage::Stage1Binary => 2,
            Stage::Stage2Disease => 3,
        }
    }
}

/// Ordered class names for one task.
///
/// `classes` keeps the declared order. Numeric indices (model outputs,
/// confusion-matrix rows) always follow the alphabetical order returned by
/// [`LabelSchema::encoded`], see [`encode_labels`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema", into = "RawSchema")]
pub struct LabelSchema {
    classes: Vec<String>,
    stage: Stage,
    sorted: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RawSchema {
    classes: Vec<String>,
    stage: Stage,
}

impl TryFrom<RawSchema> for LabelSchema {
    type Error = DataError;
    fn try_from(raw: RawSchema) -> Result<Self> {
        LabelSchema::new(raw.classes, raw.stage)
    }
}

impl From<LabelSchema> for RawSchema {
    fn from(s: LabelSchema) -> Self {
        RawSchema { classes: s.classes, stage: s.stage }
    }
}

impl LabelSchema {
    pub fn new<I, S>(classes: I, stage: Stage) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let classes: Vec<String> = classes.into_iter().map(Into::into).collect();
        if classes.iter().any(|c| c.trim().is_empty()) {
            return Err(DataError::InvalidSchema("empty class name".into()));
        }
        let unique: BTreeSet<&String> = classes.iter().collect();
        if unique.len() != classes.len() {
            return Err(DataError::InvalidSchema("duplicate class name".into()));
        }
        if classes.len() != stage.class_count() {
            return Err(DataError::InvalidSchema(format!(
                "{stage:?} needs {} classes, got {}",
                stage.class_count(),
                classes.len()
            )));
        }
        if stage == Stage::Stage1Binary && !(unique.contains(&NORMAL.to_string()) && unique.contains(&DISEASE.to_string())) {
            return Err(DataError::InvalidSchema("binary schema must be (normal, disease)".into()));
        }
        let sorted = unique.into_iter().cloned().collect();
        Ok(LabelSchema { classes, stage, sorted })
    }

    /// `[normal, covid, opacity, pneumonia]`
    pub fn multiclass4() -> Self {
        Self::new([NORMAL, COVID, OPACITY, PNEUMONIA], Stage::Multiclass4).expect("valid")
    }

    /// `[normal, disease]`
    pub fn stage1() -> Self {
        Self::new([NORMAL, DISEASE], Stage::Stage1Binary).expect("valid")
    }

    /// `[covid, opacity, pneumonia]`
    pub fn stage2() -> Self {
        Self::new([COVID, OPACITY, PNEUMONIA], Stage::Stage2Disease).expect("valid")
    }

    /// Guesses the schema from a set of labels by class count.
    pub fn infer<'a>(labels: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let set: BTreeSet<&str> = labels.into_iter().collect();
        let stage = match set.len() {
            2 => Stage::Stage1Binary,
            3 => Stage::Stage2Disease,
            4 => Stage::Multiclass4,
            n => return Err(DataError::InvalidSchema(format!("cannot infer a schema from {n} labels"))),
        };
        // Keep the canonical declared order when the names are the usual ones.
        let canonical = match stage {
            Stage::Multiclass4 => Self::multiclass4(),
            Stage::Stage1Binary => Self::stage1(),
            Stage::Stage2Disease => Self::stage2(),
        };
        if canonical.sorted.iter().map(String::as_str).eq(set.iter().copied()) {
            return Ok(canonical);
        }
        Self::new(set, stage)
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    /// Classes in declared order.
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    /// Classes in encoded (alphabetical) order.
    pub fn encoded(&self) -> &[String] {
        &self.sorted
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn contains(&self, class: &str) -> bool {
        self.index_of(class).is_some()
    }

    /// Encoded index of `class`.
    pub fn index_of(&self, class: &str) -> Option<usize> {
        self.sorted.binary_search_by(|c| c.as_str().cmp(class)).ok()
    }

    /// Class name at encoded index `idx`.
    pub fn name(&self, idx: usize) -> &str {
        &self.sorted[idx]
    }

    /// Class treated as positive by a single-output binary head.
    pub fn positive_class(&self) -> Option<&str> {
        match self.stage {
            Stage::Stage1Binary => Some(DISEASE),
            _ => None,
        }
    }

    /// Non-normal classes in declared order.
    pub fn disease_classes(&self) -> Vec<&str> {
        self.classes.iter().map(String::as_str).filter(|c| *c != NORMAL).collect()
    }
}

impl fmt::Display for LabelSchema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}", self.classes.join(", "))
    }
}

/// Bijection between class names and integer indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelEncoding {
    to_index: BTreeMap<String, usize>,
    to_name: Vec<String>,
}

impl LabelEncoding {
    pub fn encode(&self, class: &str) -> Option<usize> {
        self.to_index.get(class).copied()
    }

    pub fn decode(&self, idx: usize) -> Option<&str> {
        self.to_name.get(idx).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.to_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.to_name.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.to_name.iter().enumerate().map(|(i, n)| (n.as_str(), i))
    }
}

/// Index = position in alphabetical class order.
pub fn encode_labels(schema: &LabelSchema) -> LabelEncoding {
    let to_name = schema.encoded().to_vec();
    let to_index = to_name.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    LabelEncoding { to_index, to_name }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub path: PathBuf,
    pub label: String,
    /// Class the sample had before relabeling (stage-1 "disease" rows).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<String>,
}

impl Sample {
    pub fn new(id: impl Into<String>, path: impl Into<PathBuf>, label: impl Into<String>) -> Self {
        Sample { id: id.into(), path: path.into(), label: label.into(), origin: None }
    }

    /// Original class, falling back to the current label.
    pub fn original_label(&self) -> &str {
        self.origin.as_deref().unwrap_or(&self.label)
    }
}

/// Validated, ordered list of samples under one schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    schema: LabelSchema,
    samples: Vec<Sample>,
}

impl DatasetManifest {
    pub fn new(schema: LabelSchema, samples: Vec<Sample>) -> Result<Self> {
        let mut ids = HashSet::with_capacity(samples.len());
        for s in &samples {
            if !schema.contains(&s.label) {
                return Err(DataError::UnknownLabel { id: s.id.clone(), label: s.label.clone() });
            }
            if !ids.insert(s.id.as_str()) {
                return Err(DataError::DuplicateId(s.id.clone()));
            }
        }
        Ok(DatasetManifest { schema, samples })
    }

    pub fn empty(schema: LabelSchema) -> Self {
        DatasetManifest { schema, samples: Vec::new() }
    }

    pub fn schema(&self) -> &LabelSchema {
        &self.schema
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Sample> {
        self.samples.iter()
    }

    pub fn ids(&self) -> BTreeSet<&str> {
        self.samples.iter().map(|s| s.id.as_str()).collect()
    }

    /// Encoded label index of every sample.
    pub fn label_indices(&self) -> Vec<usize> {
        self.samples.iter().map(|s| self.schema.index_of(&s.label).expect("validated")).collect()
    }

    /// Manifest positions of each class, keyed by class name in encoded order.
    pub fn positions_by_class(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut by: BTreeMap<&str, Vec<usize>> =
            self.schema.encoded().iter().map(|c| (c.as_str(), Vec::new())).collect();
        for (i, s) in self.samples.iter().enumerate() {
            by.get_mut(s.label.as_str()).expect("validated").push(i);
        }
        by
    }

    pub fn class_counts(&self) -> BTreeMap<String, usize> {
        self.positions_by_class().into_iter().map(|(c, v)| (c.to_string(), v.len())).collect()
    }

    /// Keeps samples whose manifest position is in `positions` (any order),
    /// preserving manifest order.
    pub fn select(&self, positions: &[usize]) -> DatasetManifest {
        let mut keep = positions.to_vec();
        keep.sort_unstable();
        keep.dedup();
        DatasetManifest {
            schema: self.schema.clone(),
            samples: keep.into_iter().map(|i| self.samples[i].clone()).collect(),
        }
    }

    pub fn filter(&self, mut pred: impl FnMut(&Sample) -> bool) -> DatasetManifest {
        DatasetManifest {
            schema: self.schema.clone(),
            samples: self.samples.iter().filter(|s| pred(s)).cloned().collect(),
        }
    }
}

impl<'a> IntoIterator for &'a DatasetManifest {
    type Item = &'a Sample;
    type IntoIter = std::slice::Iter<'a, Sample>;
    fn into_iter(self) -> Self::IntoIter {
        self.samples.iter()
    }
}

/// A file that was found but could not be read as an image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

/// Output of [`scan_directory`]: the manifest plus its build log.
#[derive(Debug, Clone)]
pub struct ScanReport {
    pub manifest: DatasetManifest,
    pub skipped: Vec<SkippedFile>,
}

/// Folder-name overrides for datasets whose directories are not named
/// after the schema classes (e.g. `opacity` stored as `Lung_Opacity`).
#[derive(Debug, Clone, Default)]
pub struct ScanOptions {
    pub folders: BTreeMap<String, String>,
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn find_class_dir(root: &Path, class: &str, opts: &ScanOptions) -> Option<PathBuf> {
    let wanted = opts.folders.get(class).map(String::as_str).unwrap_or(class);
    let exact = root.join(wanted);
    if exact.is_dir() {
        return Some(exact);
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(root)
        .ok()?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    entries.into_iter().find(|p| {
        p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.eq_ignore_ascii_case(wanted))
    })
}

/// Lists every decodable PNG/JPEG under each class folder of `root`.
///
/// Ids are the `/`-joined path relative to `root`; the manifest is sorted by
/// that relative path. Files whose header cannot be decoded are left out and
/// recorded in [`ScanReport::skipped`].
pub fn scan_directory(root: &Path, schema: &LabelSchema) -> Result<ScanReport> {
    scan_directory_with(root, schema, &ScanOptions::default())
}

pub fn scan_directory_with(root: &Path, schema: &LabelSchema, opts: &ScanOptions) -> Result<ScanReport> {
    if !root.is_dir() {
        return Err(DataError::Io(io::Error::new(
            io::ErrorKind::NotFound,
            format!("dataset root {} is not a directory", root.display()),
        )));
    }
    let mut found: Vec<(String, Sample)> = Vec::new();
    let mut skipped = Vec::new();
    for class in schema.classes() {
        let dir = find_class_dir(root, class, opts)
            .ok_or_else(|| DataError::MissingClassDirectory { class: class.clone(), root: root.to_path_buf() })?;
        for entry in WalkDir::new(&dir).follow_links(true).sort_by_file_name() {
            let entry = entry.map_err(|e| DataError::Io(io::Error::other(e.to_string())))?;
            if !entry.file_type().is_file() {
                continue;
            }
            let path = entry.path();
            let is_image = path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)));
            if !is_image {
                continue;
            }
            if let Err(reason) = probe_image(path) {
                log::warn!("skipping {}: {reason}", path.display());
                skipped.push(SkippedFile { path: path.to_path_buf(), reason });
                continue;
            }
            let rel = path.strip_prefix(root).unwrap_or(path);
            let id = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            found.push((id.clone(), Sample::new(id, path, class.clone())));
        }
    }
    if found.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    found.sort_by(|a, b| a.0.cmp(&b.0));
    let manifest = DatasetManifest::new(schema.clone(), found.into_iter().map(|(_, s)| s).collect())?;
    Ok(ScanReport { manifest, skipped })
}

fn probe_image(path: &Path) -> std::result::Result<(), String> {
    let reader = image::ImageReader::open(path).map_err(|e| e.to_string())?;
    let reader = reader.with_guessed_format().map_err(|e| e.to_string())?;
    reader.into_dimensions().map(|_| ()).map_err(|e| e.to_string())
}

/// Draws exactly `n_per_class` samples of every class without replacement.
///
/// Each class is shuffled with its own stream derived from `seed` and the
/// class name; the first `n_per_class` positions are kept. The result keeps
/// manifest order.
pub fn sample_balanced(manifest: &DatasetManifest, n_per_class: usize, seed: u64) -> Result<DatasetManifest> {
    let by_class = manifest.positions_by_class();
    let mut keep = Vec::with_capacity(n_per_class * by_class.len());
    for (class, positions) in &by_class {
        if positions.len() < n_per_class {
            return Err(DataError::InsufficientSamples {
                class: class.to_string(),
                available: positions.len(),
                requested: n_per_class,
            });
        }
        keep.extend(draw(positions, n_per_class, derive_seed(seed, &format!("sample/{class}"))));
    }
    Ok(manifest.select(&keep))
}

fn draw(positions: &[usize], n: usize, seed: u64) -> Vec<usize> {
    let mut shuffled = positions.to_vec();
    shuffle(&mut rng_from_seed(seed), &mut shuffled);
    shuffled.truncate(n);
    shuffled
}

/// Stratified two-way split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitResult {
    pub train: DatasetManifest,
    pub held_out: DatasetManifest,
    pub seed: u64,
    pub fraction: f64,
}

/// `round(count * fraction)` with halves rounded up. A 1e-9 slack absorbs
/// binary representation error so 1500 at 0.2 is exactly 300.
pub fn stratified_count(count: usize, fraction: f64) -> usize {
    (count as f64 * fraction + 0.5 + 1e-9).floor() as usize
}

fn stratified_split(manifest: &DatasetManifest, fraction: f64, seed: u64, tag: &str) -> Result<SplitResult> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::InvalidFraction(fraction));
    }
    let by_class = manifest.positions_by_class();
    let mut held = Vec::new();
    for (class, positions) in &by_class {
        if positions.len() < 2 {
            return Err(DataError::ClassTooSmall { class: class.to_string(), available: positions.len(), required: 2 });
        }
        let n_held = stratified_count(positions.len(), fraction);
        held.extend(draw(positions, n_held, derive_seed(seed, &format!("{tag}/{class}"))));
    }
    let held_set: HashSet<usize> = held.iter().copied().collect();
    let train: Vec<usize> = (0..manifest.len()).filter(|i| !held_set.contains(i)).collect();
    Ok(SplitResult { train: manifest.select(&train), held_out: manifest.select(&held), seed, fraction })
}

/// Reserves `round(count * test_fraction)` samples of each class as the holdout.
pub fn split_holdout(manifest: &DatasetManifest, test_fraction: f64, seed: u64) -> Result<SplitResult> {
    stratified_split(manifest, test_fraction, seed, "holdout")
}

pub const DEFAULT_VAL_FRACTION: f64 = 0.25;

/// Splits a training manifest into train and validation parts; same rules
/// as [`split_holdout`].
pub fn split_train_val(train: &DatasetManifest, val_fraction: f64, seed: u64) -> Result<SplitResult> {
    stratified_split(train, val_fraction, seed, "val")
}

/// Assignment of every sample id to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignments.get(id).copied()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// `(training, validation)` manifests for `fold`.
    pub fn split(&self, manifest: &DatasetManifest, fold: usize) -> Result<(DatasetManifest, DatasetManifest)> {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (i, s) in manifest.iter().enumerate() {
            match self.fold_of(&s.id) {
                Some(f) if f == fold => val.push(i),
                Some(_) => train.push(i),
                None => return Err(DataError::UnassignedSample(s.id.clone())),
            }
        }
        Ok((manifest.select(&train), manifest.select(&val)))
    }
}

/// Stratified k-fold plan.
///
/// Each class is shuffled and dealt round-robin over the folds. The deal for
/// a class starts where the previous class stopped, so whole-fold sizes also
/// differ by at most one.
pub fn make_folds(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(DataError::InvalidK(k));
    }
    let mut assignments = BTreeMap::new();
    let mut offset = 0usize;
    for (class, positions) in manifest.positions_by_class() {
        if positions.len() < k {
            return Err(DataError::ClassTooSmall { class: class.to_string(), available: positions.len(), required: k });
        }
        let mut order = positions.clone();
        shuffle(&mut rng_from_seed(derive_seed(seed, &format!("folds/{class}"))), &mut order);
        for (j, pos) in order.iter().enumerate() {
            assignments.insert(manifest.samples()[*pos].id.clone(), (offset + j) % k);
        }
        offset = (offset + positions.len()) % k;
    }
    Ok(FoldPlan { k, assignments })
}

/// Per-disease-class quotas for a stage-1 set with `n_per_side` disease rows:
/// `n / 3` each, with the remainder handed out one at a time in declared order.
pub fn disease_quotas(n_per_side: usize, disease_classes: &[&str]) -> Vec<usize> {
    let d = disease_classes.len().max(1);
    let base = n_per_side / d;
    let extra = n_per_side % d;
    (0..disease_classes.len()).map(|i| base + usize::from(i < extra)).collect()
}

fn require_stage(manifest: &DatasetManifest, stage: Stage) -> Result<()> {
    let actual = manifest.schema().stage();
    if actual != stage || !manifest.schema().contains(NORMAL) {
        return Err(DataError::WrongStage { expected: stage, actual });
    }
    Ok(())
}

/// Balanced normal-vs-disease manifest drawn from a 4-class manifest.
///
/// `n_per_side` normal samples plus `n_per_side` disease samples split
/// evenly across the disease classes (see [`disease_quotas`]). Disease rows
/// are relabeled `disease` and keep their class in [`Sample::origin`].
pub fn build_stage1_dataset(manifest: &DatasetManifest, n_per_side: usize, seed: u64) -> Result<DatasetManifest> {
    require_stage(manifest, Stage::Multiclass4)?;
    let by_class = manifest.positions_by_class();
    let diseases = manifest.schema().disease_classes();
    let quotas = disease_quotas(n_per_side, &diseases);
    let mut picks: Vec<(&str, usize)> = vec![(NORMAL, n_per_side)];
    picks.extend(diseases.iter().copied().zip(quotas));
    let mut keep = Vec::with_capacity(2 * n_per_side);
    for (class, n) in picks {
        let positions = &by_class[class];
        if positions.len() < n {
            return Err(DataError::InsufficientSamples { class: class.to_string(), available: positions.len(), requested: n });
        }
        keep.extend(draw(positions, n, derive_seed(seed, &format!("stage1/{class}"))));
    }
    keep.sort_unstable();
    let samples = keep
        .into_iter()
        .map(|i| {
            let s = &manifest.samples()[i];
            if s.label == NORMAL {
                s.clone()
            } else {
                Sample { label: DISEASE.into(), origin: Some(s.label.clone()), ..s.clone() }
            }
        })
        .collect();
    DatasetManifest::new(LabelSchema::stage1(), samples)
}

/// Largest `n_per_side` that [`build_stage1_dataset`] can satisfy.
pub fn max_stage1_per_side(manifest: &DatasetManifest) -> usize {
    let counts = manifest.class_counts();
    let diseases = manifest.schema().disease_classes();
    let normal = counts.get(NORMAL).copied().unwrap_or(0);
    let feasible = |n: usize| {
        disease_quotas(n, &diseases).iter().zip(&diseases).all(|(q, c)| counts.get(*c).copied().unwrap_or(0) >= *q)
    };
    (0..=normal).rev().find(|&n| feasible(n)).unwrap_or(0)
}

/// Keeps only the disease rows of a 4-class manifest, under the 3-class schema.
pub fn filter_stage2(manifest: &DatasetManifest) -> Result<DatasetManifest> {
    require_stage(manifest, Stage::Multiclass4)?;
    let schema = LabelSchema::new(manifest.schema().disease_classes(), Stage::Stage2Disease)?;
    let samples = manifest.iter().filter(|s| s.label != NORMAL).cloned().collect();
    DatasetManifest::new(schema, samples)
}

/// Maps a 4-class label to its stage-1 label.
pub fn stage1_label(label: &str) -> &'static str {
    if label == NORMAL {
        NORMAL
    } else {
        DISEASE
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    id: String,
    filepath: String,
    label: String,
}

/// Writes `id,filepath,label` with LF line endings.
pub fn write_manifest_csv(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    for s in manifest {
        w.serialize(ManifestRow { id: s.id.clone(), filepath: s.path.to_string_lossy().into_owned(), label: s.label.clone() })?;
    }
    if manifest.is_empty() {
        w.write_record(["id", "filepath", "label"])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a manifest CSV. The schema is inferred from the labels unless given.
/// Relative file paths resolve against the CSV's directory.
pub fn read_manifest_csv(path: &Path, schema: Option<&LabelSchema>) -> Result<DatasetManifest> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["id", "filepath", "label"] {
        return Err(DataError::Malformed { path: path.to_path_buf(), message: format!("unexpected header {header:?}") });
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::new();
    for row in r.deserialize::<ManifestRow>() {
        let row = row?;
        let p = PathBuf::from(&row.filepath);
        let p = if p.is_relative() { base.join(p) } else { p };
        samples.push(Sample::new(row.id, p, row.label));
    }
    let schema = match schema {
        Some(s) => s.clone(),
        None => {
            if samples.is_empty() {
                return Err(DataError::EmptyDataset);
            }
            LabelSchema::infer(samples.iter().map(|s| s.label.as_str()))?
        }
    };
    DatasetManifest::new(schema, samples)
}

/// Writes `id,fold`.
pub fn write_folds_csv(plan: &FoldPlan, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(["id", "fold"])?;
    for (id, fold) in &plan.assignments {
        w.write_record([id.as_str(), &fold.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_folds_csv(path: &Path) -> Result<FoldPlan> {
    let mut r = csv::Reader::from_path(path)?;
    let mut assignments = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let fold: usize = rec
            .get(1)
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| DataError::Malformed { path: path.to_path_buf(), message: "bad fold column".into() })?;
        assignments.insert(rec.get(0).unwrap_or_default().to_string(), fold);
    }
    let k = assignments.values().max().map_or(0, |m| m + 1);
    Ok(FoldPlan { k, assignments })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(counts: &[(&str, usize)]) -> DatasetManifest {
        let mut samples = Vec::new();
        for (class, n) in counts {
            for i in 0..*n {
                samples.push(Sample::new(format!("{class}/{i:04}"), format!("/x/{class}/{i:04}.png"), *class));
            }
        }
        DatasetManifest::new(LabelSchema::infer(counts.iter().map(|c| c.0)).unwrap(), samples).unwrap()
    }

    fn four(n: [usize; 4]) -> DatasetManifest {
        manifest(&[(NORMAL, n[0]), (COVID, n[1]), (OPACITY, n[2]), (PNEUMONIA, n[3])])
    }

    #[test]
    fn schema_invariants() {
        assert!(LabelSchema::new(["a", "b", "c"], Stage::Multiclass4).is_err());
        assert!(LabelSchema::new(["a", "a", "b", "c"], Stage::Multiclass4).is_err());
        assert!(LabelSchema::new(["a", "", "b", "c"], Stage::Multiclass4).is_err());
        assert!(LabelSchema::new(["yes", "no"], Stage::Stage1Binary).is_err());
        assert!(LabelSchema::new(["normal", "disease"], Stage::Stage1Binary).is_ok());
        assert_eq!(LabelSchema::multiclass4().classes()[0], "normal");
    }

    #[test]
    fn encoding_is_alphabetical() {
        let enc = encode_labels(&LabelSchema::multiclass4());
        let got: Vec<_> = enc.iter().collect();
        assert_eq!(got, vec![("covid", 0), ("normal", 1), ("opacity", 2), ("pneumonia", 3)]);
        let enc = encode_labels(&LabelSchema::stage1());
        assert_eq!(enc.encode("disease"), Some(0));
        assert_eq!(enc.encode("normal"), Some(1));
        for (name, i) in enc.iter() {
            assert_eq!(enc.decode(i), Some(name));
        }
    }

    #[test]
    fn manifest_rejects_bad_rows() {
        let s = LabelSchema::stage1();
        let dup = vec![Sample::new("a", "a", "normal"), Sample::new("a", "b", "disease")];
        assert!(matches!(DatasetManifest::new(s.clone(), dup), Err(DataError::DuplicateId(_))));
        let bad = vec![Sample::new("a", "a", "covid")];
        assert!(matches!(DatasetManifest::new(s, bad), Err(DataError::UnknownLabel { .. })));
    }

    #[test]
    fn balanced_sampling() {
        let m = four([10, 20, 30, 40]);
        let out = sample_balanced(&m, 10, 1).unwrap();
        assert_eq!(out.len(), 40);
        assert!(out.class_counts().values().all(|&c| c == 10));
        assert_eq!(out, sample_balanced(&m, 10, 1).unwrap());
        let err = sample_balanced(&four([40, 40, 40, 40]), 50, 1).unwrap_err();
        assert!(matches!(err, DataError::InsufficientSamples { available: 40, requested: 50, .. }));
    }

    #[test]
    fn holdout_counts() {
        let m = four([1500; 4]);
        let s = split_holdout(&m, 0.2, 7).unwrap();
        for c in s.held_out.class_counts().values() {
            assert_eq!(*c, 300);
        }
        for c in s.train.class_counts().values() {
            assert_eq!(*c, 1200);
        }
        let s = split_holdout(&four([10; 4]), 0.2, 7).unwrap();
        assert!(s.held_out.class_counts().values().all(|&c| c == 2));
        assert!(matches!(split_holdout(&m, 1.0, 7), Err(DataError::InvalidFraction(_))));
        assert!(matches!(split_holdout(&m, 0.0, 7), Err(DataError::InvalidFraction(_))));
        assert!(matches!(split_holdout(&four([1, 5, 5, 5]), 0.2, 7), Err(DataError::ClassTooSmall { .. })));
    }

    #[test]
    fn train_val_counts() {
        let s = split_train_val(&four([1200; 4]), 0.25, 3).unwrap();
        assert!(s.train.class_counts().values().all(|&c| c == 900));
        assert!(s.held_out.class_counts().values().all(|&c| c == 300));
        let s = split_train_val(&four([4; 4]), 0.25, 3).unwrap();
        assert!(s.train.class_counts().values().all(|&c| c == 3));
        assert_eq!(s, split_train_val(&four([4; 4]), 0.25, 3).unwrap());
    }

    #[test]
    fn half_rounds_up() {
        assert_eq!(stratified_count(10, 0.25), 3);
        assert_eq!(stratified_count(1500, 0.2), 300);
        assert_eq!(stratified_count(10, 0.15), 2);
        assert_eq!(stratified_count(9, 0.1), 1);
    }

    #[test]
    fn folds_of_twenty() {
        let m = four([25; 4]);
        let plan = make_folds(&m, 5, 11).unwrap();
        assert_eq!(plan.fold_sizes(), vec![20; 5]);
        for f in 0..5 {
            let (_, val) = plan.split(&m, f).unwrap();
            assert!(val.class_counts().values().all(|&c| c == 5));
        }
        assert!(matches!(make_folds(&m, 1, 11), Err(DataError::InvalidK(1))));
        assert!(matches!(make_folds(&four([3, 9, 9, 9]), 5, 1), Err(DataError::ClassTooSmall { .. })));
    }

    #[test]
    fn stage1_balance() {
        let m = four([1500; 4]);
        let s1 = build_stage1_dataset(&m, 1500, 5).unwrap();
        assert_eq!(s1.schema(), &LabelSchema::stage1());
        let mut origins: BTreeMap<&str, usize> = BTreeMap::new();
        for s in &s1 {
            *origins.entry(s.original_label()).or_default() += 1;
        }
        assert_eq!(origins[NORMAL], 1500);
        assert_eq!(origins[COVID], 500);
        assert_eq!(origins[OPACITY], 500);
        assert_eq!(origins[PNEUMONIA], 500);

        let s1 = build_stage1_dataset(&four([5; 4]), 3, 5).unwrap();
        assert_eq!(s1.class_counts()[DISEASE], 3);
        assert_eq!(disease_quotas(4, &[COVID, OPACITY, PNEUMONIA]), vec![2, 1, 1]);
        assert_eq!(disease_quotas(5, &[COVID, OPACITY, PNEUMONIA]), vec![2, 2, 1]);
        assert!(matches!(build_stage1_dataset(&four([5, 1, 5, 5]), 6, 5), Err(DataError::InsufficientSamples { .. })));
    }

    #[test]
    fn stage1_quota_remainder_exhaustive() {
        let diseases = [COVID, OPACITY, PNEUMONIA];
        for n in 0..300 {
            let q = disease_quotas(n, &diseases);
            assert_eq!(q.iter().sum::<usize>(), n);
            let (lo, hi) = (q.iter().min().unwrap(), q.iter().max().unwrap());
            assert!(hi - lo <= 1);
            // extras go to the earliest classes
            assert!(q.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn max_per_side() {
        assert_eq!(max_stage1_per_side(&four([10, 3, 3, 3])), 9);
        assert_eq!(max_stage1_per_side(&four([10, 4, 3, 3])), 10);
        assert_eq!(max_stage1_per_side(&four([5, 9, 9, 9])), 5);
    }

    #[test]
    fn stage2_filter() {
        let m = four([15, 5, 5, 5]);
        let s2 = filter_stage2(&m).unwrap();
        assert_eq!(s2.len(), 15);
        assert_eq!(s2.schema().stage(), Stage::Stage2Disease);
        assert!(s2.class_counts().values().all(|&c| c == 5));
        let only_normal = four([15, 0, 0, 0]);
        assert!(filter_stage2(&only_normal).unwrap().is_empty());
        assert!(filter_stage2(&s2).is_err());
    }

    #[test]
    fn manifest_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = four([2, 2, 2, 2]);
        let path = dir.path().join("m.csv");
        write_manifest_csv(&m, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("id,filepath,label\n"));
        assert!(!text.contains('\r'));
        assert_eq!(read_manifest_csv(&path, None).unwrap(), m);

        let plan = make_folds(&m, 2, 0).unwrap();
        let fp = dir.path().join("folds.csv");
        write_folds_csv(&plan, &fp).unwrap();
        assert_eq!(read_folds_csv(&fp).unwrap(), plan);
    }
}
