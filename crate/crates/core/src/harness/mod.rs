//! Experiment orchestration: sample → split → fit → evaluate, with optional
//! k-fold cross-validation, artifact writing and comparison tables.
//!
//! Protocol: the stratified holdout is reserved first. With `k >= 2` the
//! remaining pool is cut into k stratified folds and one model is trained
//! per fold (validated on its held fold); otherwise the pool is split once
//! into train and validation parts. Every trained model is scored on the
//! holdout, and the reported accuracy is the mean over those scores.
//!
//! Every seed is derived from the root seed with a fixed tag:
//! `sample`, `holdout`, `stage1`, `folds`, `val`, and `fit/<stage>/<fold>`.

pub mod config;
pub mod table;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{ExperimentConfig, Mode, ModelChoice, ModelKind, TrainSection};
pub use table::{comparison_table, ComparisonRow, ComparisonTable, ReferenceRow};

use crate::cascade::{predictions_csv, CascadeError, CascadeModel, RoutingPolicy, StageResult};
use crate::dataio::{
    build_stage1_dataset, filter_stage2, make_folds, max_stage1_per_side, read_manifest_csv, sample_balanced,
    scan_directory_with, split_holdout, split_train_val, DataError, DatasetManifest, LabelSchema, ScanOptions,
};
use crate::metrics::{confusion_matrix, ConfusionMatrix, MetricsError};
use crate::model::{count_parameters, fit, HeadMode, ModelError, TrainedModel, TrainingHistory};
use crate::rng::derive_seed;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Cascade(#[from] CascadeError),
    #[error("holdout leakage: {0} holdout ids appear in training or validation data")]
    Leakage(usize),
    #[error("output directory {0} is in use by another run")]
    OutputLocked(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Whether the failure happened while computing (training, inference)
    /// rather than in the inputs or configuration.
    pub fn is_runtime(&self) -> bool {
        match self {
            HarnessError::Model(e) | HarnessError::Cascade(CascadeError::Model(e)) => matches!(
                e,
                ModelError::NonFiniteLoss { .. } | ModelError::MissingPrediction(_)
            ),
            HarnessError::Leakage(_) => true,
            _ => false,
        }
    }
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Aggregate { mean, std: var.sqrt() }
    }
}

/// Results of one trained model (or cascade) on the holdout.
#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub test: StageResult,
    /// Stage-wise results of a cascade, keyed by name.
    pub stages: Vec<(String, StageResult)>,
}

impl FoldResult {
    pub fn accuracy(&self) -> f64 {
        self.test.report.accuracy
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    /// Per-stage histories (one entry outside cascade mode), folds concatenated.
    pub histories: Vec<(String, TrainingHistory)>,
    pub folds: Vec<FoldResult>,
    pub aggregate: Aggregate,
    pub duration_secs: f64,
    pub trainable_parameters: usize,
    pub holdout_size: usize,
}

impl ExperimentResult {
    pub fn history(&self, stage: &str) -> Option<&TrainingHistory> {
        self.histories.iter().find(|(n, _)| n == stage).map(|(_, h)| h)
    }

    /// Summed confusion matrix of all folds' holdout evaluations.
    pub fn pooled_confusion(&self) -> ConfusionMatrix {
        let mut cm = self.folds[0].test.confusion.clone();
        for f in &self.folds[1..] {
            cm.add(&f.test.confusion);
        }
        cm
    }

    pub fn model_name(&self) -> String {
        let base = self.config.model.display_name();
        match self.config.mode {
            Mode::Cascade => format!("two-stage cascade ({base})"),
            m => format!("{base} [{}]", m.name()),
        }
    }

    pub fn summary(&self) -> ResultSummary {
        ResultSummary {
            model: self.model_name(),
            mode: self.config.mode,
            dataset: self.config.dataset_label(),
            duration_secs: self.duration_secs,
            accuracy: self.aggregate.mean,
            accuracy_std: self.aggregate.std,
            fold_accuracies: self.folds.iter().map(FoldResult::accuracy).collect(),
            trainable_parameters: self.trainable_parameters,
        }
    }
}

/// Machine-readable run summary written as `result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultSummary {
    pub model: String,
    pub mode: Mode,
    pub dataset: String,
    pub duration_secs: f64,
    pub accuracy: f64,
    pub accuracy_std: f64,
    pub fold_accuracies: Vec<f64>,
    pub trainable_parameters: usize,
}

impl ResultSummary {
    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        let path = dir.join("result.json");
        let text = fs::read_to_string(&path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }
}

/// Loads the 4-class input manifest named by the config.
pub fn load_dataset(config: &ExperimentConfig) -> Result<DatasetManifest, HarnessError> {
    let schema = LabelSchema::multiclass4();
    let manifest = match (&config.data_root, &config.manifest) {
        (Some(root), _) => {
            let opts = ScanOptions { folders: config.folders.clone() };
            let scan = scan_directory_with(root, &schema, &opts)?;
            for s in &scan.skipped {
                log::warn!("skipped {}: {}", s.path.display(), s.reason);
            }
            scan.manifest
        }
        (None, Some(path)) => read_manifest_csv(path, Some(&schema))?,
        (None, None) => return Err(HarnessError::Config("no dataset configured".into())),
    };
    if config.n_per_class > 0 {
        Ok(sample_balanced(&manifest, config.n_per_class, derive_seed(config.seed, "sample"))?)
    } else {
        Ok(manifest)
    }
}

fn task_manifest(config: &ExperimentConfig, stage: &str, pool: &DatasetManifest) -> Result<DatasetManifest, HarnessError> {
    match stage {
        "one_shot" => Ok(pool.clone()),
        "stage1" => {
            let n = if config.stage1_per_side > 0 { config.stage1_per_side } else { max_stage1_per_side(pool) };
            Ok(build_stage1_dataset(pool, n, derive_seed(config.seed, "stage1"))?)
        }
        "stage2" => Ok(filter_stage2(pool)?),
        other => Err(HarnessError::Config(format!("unknown stage {other}"))),
    }
}

fn assert_no_leakage(holdout: &DatasetManifest, parts: &[&DatasetManifest]) -> Result<(), HarnessError> {
    let held = holdout.ids();
    let leaked: BTreeSet<&str> = parts.iter().flat_map(|m| m.iter().map(|s| s.id.as_str())).filter(|id| held.contains(id)).collect();
    if leaked.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::Leakage(leaked.len()))
    }
}

/// (train, validation) pairs for each fold, or one pair without CV.
fn fold_splits(config: &ExperimentConfig, task: &DatasetManifest) -> Result<Vec<(DatasetManifest, DatasetManifest)>, HarnessError> {
    if config.cross_validation() {
        let plan = make_folds(task, config.k, derive_seed(config.seed, "folds"))?;
        (0..config.k).map(|f| Ok(plan.split(task, f)?)).collect()
    } else {
        let s = split_train_val(task, config.val_fraction, derive_seed(config.seed, "val"))?;
        Ok(vec![(s.train, s.held_out)])
    }
}

struct StageRun {
    name: &'static str,
    history: TrainingHistory,
    models: Vec<TrainedModel<f32>>,
    trainable: usize,
}

/// Output of a run that has not been written to disk yet.
struct RunOutput {
    result: ExperimentResult,
    predictions: String,
    models: Vec<(String, TrainedModel<f32>)>,
}

fn single_model_predictions(model: &TrainedModel<f32>, test: &DatasetManifest) -> Result<(Vec<String>, String), HarnessError> {
    let raw = model.predict_proba(test)?;
    let labels = model.predict_labels(test)?;
    let schema = model.schema();
    let mut csv = String::from("id,true_label,pred_label");
    for c in schema.encoded() {
        let _ = write!(csv, ",p_{c}");
    }
    csv.push('\n');
    for ((s, label), r) in test.iter().zip(&labels).zip(&raw) {
        let _ = write!(csv, "{},{},{}", s.id, s.label, label);
        for v in model.expand(r) {
            let _ = write!(csv, ",{v:.6}");
        }
        csv.push('\n');
    }
    Ok((labels, csv))
}

fn execute(config: &ExperimentConfig) -> Result<RunOutput, HarnessError> {
    config.validate()?;
    let started = Instant::now();
    let data = load_dataset(config)?;
    let mut result_folds = Vec::new();
    let mut histories = Vec::new();
    let mut models = Vec::new();
    let trainable;
    let predictions;
    let holdout_size;

    if config.mode == Mode::Cascade {
        let split = split_holdout(&data, config.test_fraction, derive_seed(config.seed, "holdout"))?;
        let holdout = split.held_out;
        holdout_size = holdout.len();
        let mut runs = Vec::new();
        for (name, head) in config.heads() {
            let task = task_manifest(config, name, &split.train)?;
            runs.push(train_stage(config, name, head, &task, &holdout)?);
        }
        let (s1, s2) = (runs.remove(0), runs.remove(0));
        trainable = s1.trainable + s2.trainable;
        let mut dump = None;
        for (fold, (m1, m2)) in s1.models.iter().zip(&s2.models).enumerate() {
            let cascade = CascadeModel::builder().stage1(m1.clone()).stage2(m2.clone()).policy(RoutingPolicy::default()).build()?;
            let eval = cascade.evaluate(&holdout)?;
            if fold == 0 {
                dump = Some(predictions_csv(&cascade.composed_classes(), &eval.predictions));
            }
            let mut stages = vec![("stage1".to_string(), eval.stage1)];
            if let Some(r) = eval.stage2_oracle_routed {
                stages.push(("stage2".into(), r));
            }
            if let Some(r) = eval.stage2_pipeline_routed {
                stages.push(("stage2_pipeline".into(), r));
            }
            result_folds.push(FoldResult { fold, test: eval.end_to_end, stages });
        }
        predictions = dump.unwrap_or_default();
        models.push(("stage1".to_string(), s1.models[0].clone()));
        models.push(("stage2".to_string(), s2.models[0].clone()));
        histories.push((s1.name.to_string(), s1.history));
        histories.push((s2.name.to_string(), s2.history));
    } else {
        let (name, head) = config.heads()[0];
        // The holdout is cut from the task manifest so that stage datasets
        // keep their own class balance.
        let task = task_manifest(config, name, &data)?;
        let split = split_holdout(&task, config.test_fraction, derive_seed(config.seed, "holdout"))?;
        let holdout = split.held_out;
        holdout_size = holdout.len();
        let run = train_stage(config, name, head, &split.train, &holdout)?;
        trainable = run.trainable;
        let mut dump = None;
        for (fold, model) in run.models.iter().enumerate() {
            let (labels, csv) = single_model_predictions(model, &holdout)?;
            if fold == 0 {
                dump = Some(csv);
            }
            let truth: Vec<&str> = holdout.iter().map(|s| s.label.as_str()).collect();
            let cm = confusion_matrix(&truth, &labels, holdout.schema())?;
            result_folds.push(FoldResult { fold, test: StageResult::new(cm)?, stages: Vec::new() });
        }
        predictions = dump.unwrap_or_default();
        models.push((name.to_string(), run.models[0].clone()));
        histories.push((name.to_string(), run.history));
    }

    let accuracies: Vec<f64> = result_folds.iter().map(FoldResult::accuracy).collect();
    let result = ExperimentResult {
        config: config.clone(),
        histories,
        aggregate: Aggregate::of(&accuracies),
        folds: result_folds,
        duration_secs: started.elapsed().as_secs_f64(),
        trainable_parameters: trainable,
        holdout_size,
    };
    Ok(RunOutput { result, predictions, models })
}

fn train_stage(
    config: &ExperimentConfig,
    name: &'static str,
    head: HeadMode,
    task: &DatasetManifest,
    holdout: &DatasetManifest,
) -> Result<StageRun, HarnessError> {
    let spec = config.model.build(task.schema(), head)?;
    let trainable = count_parameters(&spec)?.trainable;
    let mut history = TrainingHistory::default();
    let mut models = Vec::new();
    for (fold, (train, val)) in fold_splits(config, task)?.into_iter().enumerate() {
        assert_no_leakage(holdout, &[&train, &val])?;
        let tc = config.train.config(head, derive_seed(config.seed, &format!("fit/{name}/{fold}")));
        log::info!("{name}: fold {fold}: {} train, {} validation", train.len(), val.len());
        let (model, h) = fit::<f32>(&spec, &train, &val, &tc)?;
        history.extend(h.with_fold(fold));
        models.push(model);
    }
    Ok(StageRun { name, history, models, trainable })
}

/// Runs the configured experiment and writes its artifacts to the output
/// directory. Cross-validates when `k >= 2`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult, HarnessError> {
    let out = execute(config)?;
    write_artifacts(&config.output_dir(), &out)?;
    Ok(out.result)
}

/// [`run_experiment`] with cross-validation required.
pub fn run_cross_validation(config: &ExperimentConfig) -> Result<ExperimentResult, HarnessError> {
    if !config.cross_validation() {
        return Err(HarnessError::Config(format!("cross-validation needs k >= 2, got {}", config.k)));
    }
    run_experiment(config)
}

/// Writes a history CSV (`fold,epoch,loss,accuracy,val_loss,val_accuracy`).
pub fn write_history_csv(history: &TrainingHistory, path: &Path) -> Result<(), HarnessError> {
    Ok(history.write_csv(path)?)
}

/// Exclusive lock on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self, HarnessError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(OutputLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(HarnessError::OutputLocked(dir.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn report_text(title: &str, results: &[(usize, &StageResult)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{title}\n");
    let mut pooled = results[0].1.confusion.clone();
    for (_, r) in &results[1..] {
        pooled.add(&r.confusion);
    }
    if let Ok(rep) = crate::metrics::classification_report::<f64>(&pooled) {
        if results.len() > 1 {
            let _ = writeln!(out, "pooled over {} folds", results.len());
        }
        out.push_str(&rep.render());
    }
    if results.len() > 1 {
        out.push('\n');
        let accs: Vec<f64> = results.iter().map(|(_, r)| r.report.accuracy).collect();
        for ((fold, _), a) in results.iter().zip(&accs) {
            let _ = writeln!(out, "fold {fold}: accuracy {a:.4}");
        }
        let agg = Aggregate::of(&accs);
        let _ = writeln!(out, "mean accuracy {:.4} (std {:.4})", agg.mean, agg.std);
    }
    out
}

fn write_stage_files(dir: &Path, name: &str, title: &str, results: &[(usize, &StageResult)]) -> Result<(), HarnessError> {
    let mut pooled = results[0].1.confusion.clone();
    for (_, r) in &results[1..] {
        pooled.add(&r.confusion);
    }
    pooled.write_csv(&dir.join(format!("confusion_{name}.csv")))?;
    fs::write(dir.join(format!("report_{name}.txt")), report_text(title, results))?;
    let per_fold: Vec<_> = results
        .iter()
        .map(|(f, r)| serde_json::json!({"fold": f, "report": r.report, "confusion": r.confusion.counts}))
        .collect();
    fs::write(dir.join(format!("report_{name}.json")), serde_json::to_string_pretty(&per_fold).expect("json"))?;
    Ok(())
}

fn write_artifacts(dir: &Path, out: &RunOutput) -> Result<(), HarnessError> {
    let _lock = OutputLock::acquire(dir)?;
    let r = &out.result;
    fs::write(dir.join("config.snapshot"), r.config.to_toml())?;
    if r.config.mode == Mode::Cascade {
        for (name, h) in &r.histories {
            write_history_csv(h, &dir.join(format!("history_{name}.csv")))?;
        }
    } else {
        write_history_csv(&r.histories[0].1, &dir.join("history.csv"))?;
    }
    let mode = r.config.mode.name();
    let main: Vec<(usize, &StageResult)> = r.folds.iter().map(|f| (f.fold, &f.test)).collect();
    write_stage_files(dir, mode, &format!("{} on holdout ({} samples)", r.model_name(), r.holdout_size), &main)?;
    if r.config.mode == Mode::Cascade {
        for stage in ["stage1", "stage2", "stage2_pipeline"] {
            let rows: Vec<(usize, &StageResult)> = r
                .folds
                .iter()
                .filter_map(|f| f.stages.iter().find(|(n, _)| n == stage).map(|(_, s)| (f.fold, s)))
                .collect();
            if !rows.is_empty() {
                write_stage_files(dir, stage, &format!("cascade {stage} on holdout"), &rows)?;
            }
        }
    }
    fs::write(dir.join("predictions.csv"), &out.predictions)?;
    for (name, model) in &out.models {
        model.save(&dir.join(format!("model_{name}.json")))?;
    }
    let table = comparison_table(&[r.summary()], &[]);
    fs::write(dir.join("comparison.csv"), table.to_csv())?;
    fs::write(dir.join("result.json"), serde_json::to_string_pretty(&r.summary()).expect("json"))?;
    Ok(())
}
