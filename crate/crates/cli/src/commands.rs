use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use tsc_core::cascade::{load_classifier, predictions_csv, CascadeError, CascadeModel, RoutingPolicy, StageResult};
use tsc_core::dataio::{
    filter_stage2, read_manifest_csv, sample_balanced, scan_directory, scan_directory_with, stage1_label,
    write_manifest_csv, DataError, DatasetManifest, LabelSchema, Sample, ScanOptions, Stage,
};
use tsc_core::harness::{comparison_table, run_experiment, ExperimentConfig, HarnessError, OutputLock, ResultSummary};
use tsc_core::metrics::{confusion_matrix, MetricsError};
use tsc_core::model::ModelError;
use tsc_core::rng::derive_seed;
use tsc_core::stats::{class_distribution, scatter_table, write_distribution_csv, write_scatter_csv, StatsError};
use tsc_core::synthetic::{write_corpus, SyntheticConfig};
use tsc_report::{FigureKind, FigureSpec, ImageFormat, ReportError};

use crate::{Cli, Command, FigureArg, OUTPUT_ROOT_ENV};

#[derive(Debug)]
pub enum CliError {
    /// Bad usage, configuration or input data: exit 2.
    Input(String),
    /// A computation failed while running: exit 3.
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

fn model_runtime(e: &ModelError) -> bool {
    matches!(e, ModelError::NonFiniteLoss { .. } | ModelError::MissingPrediction(_))
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        if e.is_runtime() {
            CliError::Runtime(e.to_string())
        } else {
            CliError::Input(e.to_string())
        }
    }
}

impl From<CascadeError> for CliError {
    fn from(e: CascadeError) -> Self {
        match &e {
            CascadeError::Model(m) if model_runtime(m) || matches!(m, ModelError::DecodeFailure { .. }) => {
                CliError::Runtime(e.to_string())
            }
            CascadeError::InvalidDistribution(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        if model_runtime(&e) {
            CliError::Runtime(e.to_string())
        } else {
            CliError::Input(e.to_string())
        }
    }
}

macro_rules! input_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Input(e.to_string())
            }
        }
    )*};
}

input_error!(DataError, MetricsError, StatsError, ReportError, std::io::Error);

type Result<T = ()> = std::result::Result<T, CliError>;

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn out_dir(explicit: &Option<PathBuf>, name: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| output_root().join(name))
}

pub fn run(cli: &Cli) -> Result {
    let seed = cli.seed;
    match &cli.command {
        Command::Ingest(a) => ingest(a, seed.unwrap_or(0)),
        Command::Stats(a) => stats(a),
        Command::Train(a) => train(a, seed),
        Command::Evaluate(a) => evaluate(a),
        Command::Cascade(a) => cascade(a),
        Command::Compare(a) => compare(a),
        Command::Report(a) => report(a),
        Command::Synth(a) => synth(a, seed.unwrap_or(0)),
    }
}

fn print_counts(manifest: &DatasetManifest) {
    for (class, n) in manifest.class_counts() {
        println!("{class:>12}  {n}");
    }
    println!("{:>12}  {}", "total", manifest.len());
}

fn ingest(a: &crate::IngestArgs, seed: u64) -> Result {
    let opts = ScanOptions { folders: a.folders.iter().cloned().collect() };
    let scan = scan_directory_with(&a.root, &LabelSchema::multiclass4(), &opts)?;
    for s in &scan.skipped {
        eprintln!("skipped {}: {}", s.path.display(), s.reason);
    }
    let manifest = if a.n_per_class > 0 {
        sample_balanced(&scan.manifest, a.n_per_class, derive_seed(seed, "sample"))?
    } else {
        scan.manifest
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_manifest_csv(&manifest, &a.out)?;
    print_counts(&manifest);
    println!("manifest written to {}", a.out.display());
    Ok(())
}

fn read_any_manifest(path: &Path) -> Result<DatasetManifest> {
    match read_manifest_csv(path, None) {
        Ok(m) => Ok(m),
        Err(DataError::InvalidSchema(_)) => Ok(read_manifest_csv(path, Some(&LabelSchema::multiclass4()))?),
        Err(e) => Err(e.into()),
    }
}

fn stats(a: &crate::StatsArgs) -> Result {
    let manifest = match (&a.manifest, &a.root) {
        (Some(m), _) => read_any_manifest(m)?,
        (None, Some(root)) => scan_directory(root, &LabelSchema::multiclass4())?.manifest,
        (None, None) => return Err(CliError::Input("one of --manifest or --root is required".into())),
    };
    let dir = out_dir(&a.out_dir, "stats");
    fs::create_dir_all(&dir)?;
    let dist = class_distribution(&manifest);
    write_distribution_csv(&dist, &dir.join("distribution.csv"))?;
    let rows = scatter_table(&manifest)?;
    write_scatter_csv(&rows, &dir.join("stats.csv"))?;
    print_counts(&manifest);
    println!("wrote {} and {}", dir.join("distribution.csv").display(), dir.join("stats.csv").display());
    Ok(())
}

fn train(a: &crate::TrainArgs, seed: Option<u64>) -> Result {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(m) = a.mode {
        cfg.mode = m.into();
    }
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(r) = &a.data_root {
        cfg.data_root = Some(r.clone());
        cfg.manifest = None;
    }
    if let Some(m) = &a.manifest {
        cfg.manifest = Some(m.clone());
        cfg.data_root = None;
    }
    if let Some(n) = a.n_per_class {
        cfg.n_per_class = n;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = a.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if let Some(o) = &a.output {
        cfg.output_dir = Some(o.clone());
    } else if cfg.output_dir.is_none() {
        cfg.output_dir = Some(output_root().join(cfg.mode.name()));
    }
    let result = run_experiment(&cfg)?;
    let s = result.summary();
    println!("{} on {}: {} fold(s)", s.model, s.dataset, s.fold_accuracies.len());
    for (i, acc) in s.fold_accuracies.iter().enumerate() {
        println!("  fold {i}: holdout accuracy {acc:.4}");
    }
    println!("accuracy {:.4} (std {:.4}), {:.1}s, {} trainable parameters", s.accuracy, s.accuracy_std, s.duration_secs, s.trainable_parameters);
    println!("artifacts in {}", cfg.output_dir().display());
    Ok(())
}

/// Brings a manifest into the label space of `schema` (4-class manifests
/// are mapped to stage-1 labels or filtered to disease rows).
fn align_manifest(path: &Path, schema: &LabelSchema) -> Result<DatasetManifest> {
    if let Ok(m) = read_manifest_csv(path, Some(schema)) {
        return Ok(m);
    }
    let four = read_manifest_csv(path, Some(&LabelSchema::multiclass4()))?;
    match schema.stage() {
        Stage::Stage1Binary => {
            let samples = four
                .iter()
                .map(|s| Sample { label: stage1_label(&s.label).to_string(), origin: Some(s.label.clone()), ..s.clone() })
                .collect();
            Ok(DatasetManifest::new(schema.clone(), samples)?)
        }
        Stage::Stage2Disease => Ok(filter_stage2(&four)?),
        Stage::Multiclass4 => Ok(four),
    }
}

fn write_result(dir: &Path, name: &str, result: &StageResult) -> Result {
    result.confusion.write_csv(&dir.join(format!("confusion_{name}.csv")))?;
    fs::write(dir.join(format!("report_{name}.txt")), result.report.render())?;
    fs::write(dir.join(format!("report_{name}.json")), result.report.to_json())?;
    Ok(())
}

fn evaluate(a: &crate::EvaluateArgs) -> Result {
    let model = tsc_core::Model::load(&a.model)?;
    let manifest = align_manifest(&a.manifest, model.schema())?;
    let labels = model.predict_labels(&manifest)?;
    let truth: Vec<&str> = manifest.iter().map(|s| s.label.as_str()).collect();
    let result = StageResult::new(confusion_matrix(&truth, &labels, model.schema())?)?;
    let dir = out_dir(&a.out_dir, "evaluate");
    let _lock = OutputLock::acquire(&dir)?;
    write_result(&dir, "evaluate", &result)?;
    let mut csv = String::from("id,true_label,pred_label\n");
    for (s, l) in manifest.iter().zip(&labels) {
        csv.push_str(&format!("{},{},{}\n", s.id, s.label, l));
    }
    fs::write(dir.join("predictions.csv"), csv)?;
    print!("{}", result.report.render());
    println!("accuracy {:.4}", result.report.accuracy);
    Ok(())
}

fn cascade(a: &crate::CascadeArgs) -> Result {
    let policy = if a.soft { RoutingPolicy { disease_threshold: a.threshold, ..RoutingPolicy::soft() } } else { RoutingPolicy::hard(a.threshold) };
    let model = CascadeModel::builder()
        .stage1_boxed(load_classifier(&a.stage1)?)
        .stage2_boxed(load_classifier(&a.stage2)?)
        .policy(policy)
        .build()?;
    let test = read_manifest_csv(&a.manifest, Some(&LabelSchema::multiclass4()))?;
    let eval = model.evaluate(&test)?;
    let dir = out_dir(&a.out_dir, "cascade_eval");
    let _lock = OutputLock::acquire(&dir)?;
    fs::write(dir.join("predictions.csv"), predictions_csv(&model.composed_classes(), &eval.predictions))?;
    write_result(&dir, "cascade", &eval.end_to_end)?;
    write_result(&dir, "stage1", &eval.stage1)?;
    if let Some(r) = &eval.stage2_oracle_routed {
        write_result(&dir, "stage2", r)?;
    }
    if let Some(r) = &eval.stage2_pipeline_routed {
        write_result(&dir, "stage2_pipeline", r)?;
    }
    let normals = eval.predictions.iter().filter(|p| p.label == "normal").count();
    print!("{}", eval.end_to_end.report.render());
    println!("predicted normal: {normals} of {}", eval.predictions.len());
    println!("accuracy {:.4}", eval.end_to_end.report.accuracy);
    Ok(())
}

fn compare(a: &crate::CompareArgs) -> Result {
    let summaries = a.runs.iter().map(|d| ResultSummary::load(d)).collect::<std::result::Result<Vec<_>, _>>()?;
    let table = comparison_table(&summaries, &a.references);
    let out = a.out.clone().unwrap_or_else(|| output_root().join("comparison.csv"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&out, table.to_csv())?;
    print!("{}", table.render());
    Ok(())
}

fn report(a: &crate::ReportArgs) -> Result {
    let kind = match a.kind {
        FigureArg::Curves => FigureKind::Curves,
        FigureArg::Heatmap => FigureKind::Heatmap,
        FigureArg::Bars => FigureKind::Bars,
        FigureArg::Scatter => FigureKind::Scatter,
    };
    let mut spec = FigureSpec::new(kind, &a.input, &a.out);
    spec.title = a.title.clone();
    spec.per_class = a.per_class;
    if a.svg {
        spec.format = ImageFormat::Svg;
    }
    let s = spec.render()?;
    println!("{} ({} panel(s), {} series, {} points)", s.path.display(), s.panels, s.series, s.points);
    Ok(())
}

fn synth(a: &crate::SynthArgs, seed: u64) -> Result {
    if a.side < 8 || !(0.0..=1.0).contains(&a.noise) {
        return Err(CliError::Input("side must be at least 8 and noise in [0, 1]".into()));
    }
    write_corpus(&a.out, &SyntheticConfig { n_per_class: a.n_per_class, side: a.side, noise: a.noise, seed })?;
    let counts: BTreeMap<&str, usize> = tsc_core::synthetic::CLASSES.iter().map(|c| (*c, a.n_per_class)).collect();
    for (c, n) in counts {
        println!("{c:>12}  {n}");
    }
    println!("corpus written to {}", a.out.display());
    Ok(())
}
