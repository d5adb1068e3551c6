//! `tsc`: command-line front end for dataset ingestion, statistics,
//! training, cascade evaluation, comparison tables and figures.
//!
//! Exit codes: 0 on success, 2 for usage, configuration and input errors,
//! 3 when a computation fails at run time (diverging training, missing
//! predictions during inference).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::CliError;

/// Output root used when a command is not given an explicit output path.
pub const OUTPUT_ROOT_ENV: &str = "TSC_OUTPUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "tsc", version, about = "Two-stage chest X-ray classification toolkit")]
pub struct Cli {
    /// Root seed; overrides the config file. Every random choice derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Log progress to standard error (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Scan a class-per-folder image root and write a manifest CSV.
    Ingest(IngestArgs),
    /// Class distribution and per-image channel mean/std tables.
    Stats(StatsArgs),
    /// Train one-shot, stage1, stage2 or cascade models from a config file.
    Train(TrainArgs),
    /// Score a saved model on a manifest.
    Evaluate(EvaluateArgs),
    /// Run a two-stage cascade from saved stage models on a 4-class manifest.
    Cascade(CascadeArgs),
    /// Build a comparison table from finished run directories.
    Compare(CompareArgs),
    /// Render a figure from a CSV artifact.
    Report(ReportArgs),
    /// Write a synthetic pattern-stamped 4-class image corpus.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Dataset root with one folder per class.
    #[arg(long)]
    pub root: PathBuf,
    /// Manifest CSV to write (id,filepath,label).
    #[arg(long)]
    pub out: PathBuf,
    /// Draw this many samples per class (0 keeps everything).
    #[arg(long, default_value_t = 0)]
    pub n_per_class: usize,
    /// Folder override as CLASS=FOLDER, e.g. opacity=Lung_Opacity. Repeatable.
    #[arg(long = "folder", value_parser = parse_pair)]
    pub folders: Vec<(String, String)>,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// Manifest CSV to describe.
    #[arg(long, conflicts_with = "root", required_unless_present = "root")]
    pub manifest: Option<PathBuf>,
    /// Or a class-per-folder image root.
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// Directory for stats.csv and distribution.csv [default: $TSC_OUTPUT_ROOT/stats or runs/stats]
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    OneShot,
    Stage1,
    Stage2,
    Cascade,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Experiment config (TOML). Flags below override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Cross-validation folds; 0 or 1 trains once on a train/validation split.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long, conflicts_with = "data_root")]
    pub manifest: Option<PathBuf>,
    /// Output directory [default: $TSC_OUTPUT_ROOT/<mode> or runs/<mode>]
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub n_per_class: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Saved model (model_<stage>.json).
    #[arg(long)]
    pub model: PathBuf,
    /// Manifest to score.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory [default: $TSC_OUTPUT_ROOT/evaluate or runs/evaluate]
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CascadeArgs {
    /// Stage-1 (normal vs disease) model or prediction table.
    #[arg(long)]
    pub stage1: PathBuf,
    /// Stage-2 (disease type) model or prediction table.
    #[arg(long)]
    pub stage2: PathBuf,
    /// 4-class test manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Route to stage 2 when P(disease) is above this.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Label by the argmax of the composed distribution instead of thresholding.
    #[arg(long)]
    pub soft: bool,
    /// Output directory [default: $TSC_OUTPUT_ROOT/cascade_eval or runs/cascade_eval]
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Run directories containing result.json.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Reference row as MODEL,DATASET,ACCURACY_PERCENT. Repeatable.
    #[arg(long = "reference", value_parser = parse_reference)]
    pub references: Vec<tsc_core::harness::ReferenceRow>,
    /// CSV output [default: $TSC_OUTPUT_ROOT/comparison.csv or runs/comparison.csv]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FigureArg {
    /// Accuracy and loss curves from a history CSV.
    Curves,
    /// Confusion-matrix heatmap.
    Heatmap,
    /// Class-distribution bars from label,count.
    Bars,
    /// Channel mean vs std scatter from a stats CSV.
    Scatter,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(value_enum)]
    pub kind: FigureArg,
    /// Input CSV.
    #[arg(long)]
    pub input: PathBuf,
    /// Output image; a .svg extension selects SVG.
    #[arg(long)]
    pub out: PathBuf,
    /// Force SVG output.
    #[arg(long)]
    pub svg: bool,
    #[arg(long)]
    pub title: Option<String>,
    /// Scatter: one panel per class.
    #[arg(long)]
    pub per_class: bool,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output root; class folders are created under it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub n_per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub side: u32,
    /// Uniform pixel noise amplitude in [0, 1].
    #[arg(long, default_value_t = 0.15)]
    pub noise: f64,
}

fn parse_pair(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected CLASS=FOLDER, got '{s}'"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn parse_reference(s: &str) -> Result<tsc_core::harness::ReferenceRow, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [model, dataset, acc] = parts[..] else {
        return Err(format!("expected MODEL,DATASET,ACCURACY, got '{s}'"));
    };
    let accuracy = acc.parse::<f64>().map_err(|e| format!("bad accuracy '{acc}': {e}"))?;
    Ok(tsc_core::harness::ReferenceRow { model: model.into(), dataset: dataset.into(), accuracy, note: String::new() })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).target(env_logger::Target::Stderr).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

impl From<ModeArg> for tsc_core::harness::Mode {
    fn from(m: ModeArg) -> Self {
        use tsc_core::harness::Mode;
        match m {
            ModeArg::OneShot => Mode::OneShot,
            ModeArg::Stage1 => Mode::Stage1,
            ModeArg::Stage2 => Mode::Stage2,
            ModeArg::Cascade => Mode::Cascade,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}
