//! Static figures rendered from the CSV artifacts of a run: training
//! curves, confusion heatmaps, class-distribution bars and channel-stats
//! scatter plots.
//!
//! Every renderer reads only its CSV input, writes one PNG (or SVG) file
//! and returns a [`FigureSummary`] describing what was drawn.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Once;

use plotters::coord::Shift;
use plotters::prelude::*;
use plotters::style::text_anchor::{HPos, Pos, VPos};
use thiserror::Error;

use tsc_core::metrics::parse_confusion_csv;
use tsc_core::model::TrainingHistory;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("confusion matrix is not square: {rows} rows, {cols} columns")]
    NonSquareMatrix { rows: usize, cols: usize },
    #[error("drawing failed: {0}")]
    Draw(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, ReportError>;

fn parse_err(path: &Path, message: impl ToString) -> ReportError {
    ReportError::Parse { path: path.to_path_buf(), message: message.to_string() }
}

fn draw_err<E: std::fmt::Debug>(e: E) -> ReportError {
    ReportError::Draw(format!("{e:?}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ImageFormat {
    #[default]
    Png,
    Svg,
}

impl ImageFormat {
    /// `svg` for `.svg` paths, PNG otherwise.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("svg") => ImageFormat::Svg,
            _ => ImageFormat::Png,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::Svg => "svg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FigureKind {
    Curves,
    Heatmap,
    Bars,
    Scatter,
}

/// A figure to render: kind, CSV input, output file and options.
#[derive(Debug, Clone, PartialEq)]
pub struct FigureSpec {
    pub kind: FigureKind,
    pub input: PathBuf,
    pub output: PathBuf,
    pub title: Option<String>,
    pub format: ImageFormat,
    /// Scatter only: one panel per class.
    pub per_class: bool,
}

impl FigureSpec {
    pub fn new(kind: FigureKind, input: impl Into<PathBuf>, output: impl Into<PathBuf>) -> Self {
        let output = output.into();
        FigureSpec { kind, input: input.into(), format: ImageFormat::from_path(&output), output, title: None, per_class: false }
    }

    pub fn render(&self) -> Result<FigureSummary> {
        let opts = Options { title: self.title.clone(), format: self.format };
        match self.kind {
            FigureKind::Curves => render_curves_with(&self.input, &self.output, &opts),
            FigureKind::Heatmap => render_confusion_heatmap_with(&self.input, &self.output, &opts),
            FigureKind::Bars => render_distribution_with(&self.input, &self.output, &opts),
            FigureKind::Scatter => render_scatter_with(&self.input, &self.output, self.per_class, &opts),
        }
    }
}

/// What a renderer drew.
#[derive(Debug, Clone, PartialEq)]
pub struct FigureSummary {
    pub path: PathBuf,
    pub panels: usize,
    /// Series per panel.
    pub series: usize,
    /// Points, bars or cells across all panels.
    pub points: usize,
    /// Class or series names, in drawing order.
    pub labels: Vec<String>,
    /// Values printed on the figure (bar counts, cell counts).
    pub annotations: Vec<u64>,
}

#[derive(Debug, Clone, Default)]
pub struct Options {
    pub title: Option<String>,
    pub format: ImageFormat,
}

impl Options {
    pub fn for_path(path: &Path) -> Self {
        Options { title: None, format: ImageFormat::from_path(path) }
    }
}

const FONT: &str = "sans-serif";
static FONT_INIT: Once = Once::new();

fn ensure_font() {
    FONT_INIT.call_once(|| {
        let bytes: &'static [u8] = include_bytes!("../assets/DejaVuSans.ttf");
        plotters::style::register_font(FONT, FontStyle::Normal, bytes).map_err(|_| ()).expect("bundled font parses");
    });
}

/// Backend-generic drawing callback.
trait Painter {
    fn paint<DB: DrawingBackend>(&self, root: &DrawingArea<DB, Shift>) -> Result<()>;
}

fn paint_to(out: &Path, size: (u32, u32), format: ImageFormat, painter: &impl Painter) -> Result<()> {
    ensure_font();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    match format {
        ImageFormat::Png => {
            let root = BitMapBackend::new(out, size).into_drawing_area();
            root.fill(&WHITE).map_err(draw_err)?;
            painter.paint(&root)?;
            root.present().map_err(draw_err)?;
        }
        ImageFormat::Svg => {
            let root = SVGBackend::new(out, size).into_drawing_area();
            root.fill(&WHITE).map_err(draw_err)?;
            painter.paint(&root)?;
            root.present().map_err(draw_err)?;
        }
    }
    Ok(())
}

fn color(i: usize) -> RGBColor {
    const COLORS: [RGBColor; 10] = [
        RGBColor(31, 119, 180),
        RGBColor(255, 127, 14),
        RGBColor(44, 160, 44),
        RGBColor(214, 39, 40),
        RGBColor(148, 103, 189),
        RGBColor(140, 86, 75),
        RGBColor(227, 119, 194),
        RGBColor(127, 127, 127),
        RGBColor(188, 189, 34),
        RGBColor(23, 190, 207),
    ];
    COLORS[i % COLORS.len()]
}

/// Axis range with a little padding; widened when the data are constant.
fn padded(lo: f64, hi: f64) -> std::ops::Range<f64> {
    if !(lo.is_finite() && hi.is_finite()) {
        return 0.0..1.0;
    }
    let span = hi - lo;
    if span <= 1e-12 {
        let pad = if lo.abs() > 1e-12 { lo.abs() * 0.1 } else { 1.0 };
        return (lo - pad)..(hi + pad);
    }
    (lo - span * 0.05)..(hi + span * 0.05)
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

// ---------------------------------------------------------------- curves

struct Curves {
    title: String,
    folds: BTreeMap<usize, Vec<[f64; 5]>>,
}

impl Curves {
    fn panel<DB: DrawingBackend>(&self, area: &DrawingArea<DB, Shift>, name: &str, train: usize, val: usize) -> Result<()> {
        let (lo, hi) = min_max(self.folds.values().flatten().flat_map(|r| [r[train], r[val]]));
        let max_epoch = self.folds.values().flatten().map(|r| r[0]).fold(1.0, f64::max);
        let mut chart = ChartBuilder::on(area)
            .caption(name, (FONT, 18))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d(padded(1.0, max_epoch), padded(lo, hi))
            .map_err(draw_err)?;
        chart.configure_mesh().x_desc("epoch").y_desc(name).label_style((FONT, 12)).draw().map_err(draw_err)?;
        for (i, (fold, rows)) in self.folds.iter().enumerate() {
            let c = color(i);
            chart
                .draw_series(LineSeries::new(rows.iter().map(|r| (r[0], r[train])), c.stroke_width(2)))
                .map_err(draw_err)?
                .label(format!("fold {fold} train"))
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], c.stroke_width(2)));
            chart
                .draw_series(DashedLineSeries::new(rows.iter().map(|r| (r[0], r[val])), 6, 4, c.stroke_width(2)))
                .map_err(draw_err)?
                .label(format!("fold {fold} val"))
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], c.stroke_width(1)));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .label_font((FONT, 11))
            .draw()
            .map_err(draw_err)?;
        Ok(())
    }
}

impl Painter for Curves {
    fn paint<DB: DrawingBackend>(&self, root: &DrawingArea<DB, Shift>) -> Result<()> {
        let body = root.titled(&self.title, (FONT, 22)).map_err(draw_err)?;
        let panels = body.split_evenly((1, 2));
        // row layout: epoch, loss, accuracy, val_loss, val_accuracy
        self.panel(&panels[0], "accuracy", 2, 4)?;
        self.panel(&panels[1], "loss", 1, 3)?;
        Ok(())
    }
}

/// Two panels (accuracy, loss), each with a train and a validation series
/// per fold.
pub fn render_curves(history_csv: &Path, out: &Path) -> Result<FigureSummary> {
    render_curves_with(history_csv, out, &Options::for_path(out))
}

pub fn render_curves_with(history_csv: &Path, out: &Path, opts: &Options) -> Result<FigureSummary> {
    let history = TrainingHistory::read_csv(history_csv).map_err(|e| parse_err(history_csv, e))?;
    if history.rows.is_empty() {
        return Err(parse_err(history_csv, "history has no rows"));
    }
    let mut folds: BTreeMap<usize, Vec<[f64; 5]>> = BTreeMap::new();
    for r in &history.rows {
        folds.entry(r.fold).or_default().push([r.epoch as f64, r.loss, r.accuracy, r.val_loss, r.val_accuracy]);
    }
    let labels = folds.keys().flat_map(|f| [format!("fold {f} train"), format!("fold {f} val")]).collect();
    // two series per fold in each of the two panels
    let points = folds.values().map(Vec::len).sum::<usize>() * 4;
    let title = opts.title.clone().unwrap_or_else(|| "Training curves".into());
    let n_folds = folds.len();
    paint_to(out, (1200, 500), opts.format, &Curves { title, folds })?;
    Ok(FigureSummary { path: out.to_path_buf(), panels: 2, series: 2 * n_folds, points, labels, annotations: Vec::new() })
}

// ---------------------------------------------------------------- heatmap

struct Heatmap {
    title: String,
    classes: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl Painter for Heatmap {
    fn paint<DB: DrawingBackend>(&self, root: &DrawingArea<DB, Shift>) -> Result<()> {
        let k = self.classes.len();
        let max = self.counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
        let mut chart = ChartBuilder::on(root)
            .caption(&self.title, (FONT, 20))
            .margin(15)
            .x_label_area_size(45)
            .y_label_area_size(90)
            .build_cartesian_2d((0..k - 1).into_segmented(), (0..k - 1).into_segmented())
            .map_err(draw_err)?;
        let label = |v: &SegmentValue<usize>, flip: bool| match v {
            SegmentValue::CenterOf(i) if *i < k => self.classes[if flip { k - 1 - i } else { *i }].clone(),
            _ => String::new(),
        };
        chart
            .configure_mesh()
            .disable_mesh()
            .x_labels(k)
            .y_labels(k)
            .x_label_formatter(&|v| label(v, false))
            .y_label_formatter(&|v| label(v, true))
            .x_desc("predicted")
            .y_desc("true")
            .label_style((FONT, 13))
            .draw()
            .map_err(draw_err)?;
        for (i, row) in self.counts.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let t = v as f64 / max;
                let shade = RGBColor((255.0 - 225.0 * t) as u8, (255.0 - 150.0 * t) as u8, (255.0 - 75.0 * t) as u8);
                // true class i is drawn top to bottom
                let y = k - 1 - i;
                let cell = [(SegmentValue::Exact(j), SegmentValue::Exact(y)), (SegmentValue::Exact(j + 1), SegmentValue::Exact(y + 1))];
                chart.draw_series(std::iter::once(Rectangle::new(cell, shade.filled()))).map_err(draw_err)?;
                let ink = if t > 0.6 { WHITE } else { BLACK };
                let style = TextStyle::from((FONT, 16).into_font()).color(&ink).pos(Pos::new(HPos::Center, VPos::Center));
                let at = chart.backend_coord(&(SegmentValue::CenterOf(j), SegmentValue::CenterOf(y)));
                root.draw(&Text::new(v.to_string(), at, style)).map_err(draw_err)?;
            }
        }
        Ok(())
    }
}

/// Annotated K x K heatmap of a confusion-matrix CSV; rows are true
/// classes, columns predictions.
pub fn render_confusion_heatmap(cm_csv: &Path, out: &Path) -> Result<FigureSummary> {
    render_confusion_heatmap_with(cm_csv, out, &Options::for_path(out))
}

pub fn render_confusion_heatmap_with(cm_csv: &Path, out: &Path, opts: &Options) -> Result<FigureSummary> {
    let text = fs::read_to_string(cm_csv)?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let cols = lines.first().map(|h| h.split(',').count().saturating_sub(1)).unwrap_or(0);
    let rows = lines.len().saturating_sub(1);
    if rows != cols {
        return Err(ReportError::NonSquareMatrix { rows, cols });
    }
    let raw = parse_confusion_csv(&text).map_err(|e| parse_err(cm_csv, e))?;
    if raw.classes.len() < 2 {
        return Err(parse_err(cm_csv, "a confusion matrix needs at least two classes"));
    }
    let annotations = raw.counts.iter().flatten().copied().collect();
    let k = raw.classes.len();
    let title = opts.title.clone().unwrap_or_else(|| "Confusion matrix".into());
    let size = (160 + 110 * k as u32, 130 + 110 * k as u32);
    paint_to(out, size, opts.format, &Heatmap { title, classes: raw.classes.clone(), counts: raw.counts })?;
    Ok(FigureSummary { path: out.to_path_buf(), panels: 1, series: 1, points: k * k, labels: raw.classes, annotations })
}

// ---------------------------------------------------------------- bars

struct Bars {
    title: String,
    rows: Vec<(String, u64)>,
}

impl Painter for Bars {
    fn paint<DB: DrawingBackend>(&self, root: &DrawingArea<DB, Shift>) -> Result<()> {
        let n = self.rows.len();
        let max = self.rows.iter().map(|r| r.1).max().unwrap_or(0).max(1) as f64;
        let mut chart = ChartBuilder::on(root)
            .caption(&self.title, (FONT, 20))
            .margin(15)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(0.0..n as f64, 0.0..max * 1.15)
            .map_err(draw_err)?;
        let labels: Vec<String> = self.rows.iter().map(|r| r.0.clone()).collect();
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(n * 2 + 1)
            .x_label_formatter(&|x: &f64| {
                let i = x.floor() as usize;
                if (x - i as f64 - 0.5).abs() < 1e-6 {
                    labels.get(i).cloned().unwrap_or_default()
                } else {
                    String::new()
                }
            })
            .y_desc("count")
            .label_style((FONT, 13))
            .draw()
            .map_err(draw_err)?;
        for (i, (_, count)) in self.rows.iter().enumerate() {
            let x0 = i as f64 + 0.15;
            let x1 = i as f64 + 0.85;
            let h = *count as f64;
            chart.draw_series(std::iter::once(Rectangle::new([(x0, 0.0), (x1, h)], color(i).filled()))).map_err(draw_err)?;
            let style = TextStyle::from((FONT, 14).into_font()).pos(Pos::new(HPos::Center, VPos::Bottom));
            chart
                .draw_series(std::iter::once(Text::new(count.to_string(), (i as f64 + 0.5, h + max * 0.02), style)))
                .map_err(draw_err)?;
        }
        Ok(())
    }
}

fn read_distribution(path: &Path) -> Result<Vec<(String, u64)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| parse_err(path, e))?;
    let header = r.headers().map_err(|e| parse_err(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != ["label", "count"] {
        return Err(parse_err(path, "expected header label,count"));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| parse_err(path, e))?;
        let count = rec[1].trim().parse::<u64>().map_err(|e| parse_err(path, format!("bad count '{}': {e}", &rec[1])))?;
        rows.push((rec[0].to_string(), count));
    }
    if rows.is_empty() {
        return Err(parse_err(path, "no rows"));
    }
    Ok(rows)
}

/// One bar per class, with its count printed above it.
pub fn render_distribution(dist_csv: &Path, out: &Path) -> Result<FigureSummary> {
    render_distribution_with(dist_csv, out, &Options::for_path(out))
}

pub fn render_distribution_with(dist_csv: &Path, out: &Path, opts: &Options) -> Result<FigureSummary> {
    let rows = read_distribution(dist_csv)?;
    let title = opts.title.clone().unwrap_or_else(|| "Class distribution".into());
    let labels = rows.iter().map(|r| r.0.clone()).collect();
    let annotations: Vec<u64> = rows.iter().map(|r| r.1).collect();
    let n = rows.len();
    paint_to(out, (200 + 130 * n as u32, 480), opts.format, &Bars { title, rows })?;
    Ok(FigureSummary { path: out.to_path_buf(), panels: 1, series: 1, points: n, labels, annotations })
}

// ---------------------------------------------------------------- scatter

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterPoint {
    pub label: String,
    pub mean: f64,
    pub std: f64,
}

/// Reads the stats CSV, keeping channel 0 (`mean_c0`, `std_c0`).
pub fn read_scatter_csv(path: &Path) -> Result<Vec<ScatterPoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| parse_err(path, e))?;
    let header = r.headers().map_err(|e| parse_err(path, e))?.clone();
    let col = |name: &str| header.iter().position(|h| h == name).ok_or_else(|| parse_err(path, format!("missing column {name}")));
    let (label, mean, std) = (col("label")?, col("mean_c0")?, col("std_c0")?);
    let mut points = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| parse_err(path, e))?;
        let num = |i: usize| rec[i].trim().parse::<f64>().map_err(|e| parse_err(path, format!("bad value '{}': {e}", &rec[i])));
        points.push(ScatterPoint { label: rec[label].to_string(), mean: num(mean)?, std: num(std)? });
    }
    Ok(points)
}

struct Scatter {
    title: String,
    classes: Vec<String>,
    points: Vec<ScatterPoint>,
    per_class: bool,
}

impl Scatter {
    fn panel<DB: DrawingBackend>(&self, area: &DrawingArea<DB, Shift>, caption: &str, only: Option<usize>) -> Result<()> {
        let (xlo, xhi) = min_max(self.points.iter().map(|p| p.mean));
        let (ylo, yhi) = min_max(self.points.iter().map(|p| p.std));
        let mut chart = ChartBuilder::on(area)
            .caption(caption, (FONT, 16))
            .margin(10)
            .x_label_area_size(35)
            .y_label_area_size(50)
            .build_cartesian_2d(padded(xlo, xhi), padded(ylo, yhi))
            .map_err(draw_err)?;
        chart.configure_mesh().x_desc("mean").y_desc("std").label_style((FONT, 11)).draw().map_err(draw_err)?;
        for (ci, class) in self.classes.iter().enumerate() {
            if only.is_some_and(|o| o != ci) {
                continue;
            }
            let c = color(ci);
            chart
                .draw_series(
                    self.points.iter().filter(|p| &p.label == class).map(|p| Circle::new((p.mean, p.std), 3, c.mix(0.7).filled())),
                )
                .map_err(draw_err)?
                .label(class.as_str())
                .legend(move |(x, y)| Circle::new((x + 6, y), 4, c.filled()));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .label_font((FONT, 11))
            .draw()
            .map_err(draw_err)?;
        Ok(())
    }
}

impl Painter for Scatter {
    fn paint<DB: DrawingBackend>(&self, root: &DrawingArea<DB, Shift>) -> Result<()> {
        let body = root.titled(&self.title, (FONT, 20)).map_err(draw_err)?;
        if !self.per_class {
            return self.panel(&body, "", None);
        }
        let n = self.classes.len().max(1);
        let cols = (n as f64).sqrt().ceil() as usize;
        let rows = n.div_ceil(cols);
        let areas = body.split_evenly((rows, cols));
        for (i, class) in self.classes.iter().enumerate() {
            self.panel(&areas[i], class, Some(i))?;
        }
        Ok(())
    }
}

/// Mean-vs-std scatter colored by class; `per_class` draws one panel per
/// class (sharing axes) in the same file.
pub fn render_scatter(stats_csv: &Path, out: &Path, per_class: bool) -> Result<FigureSummary> {
    render_scatter_with(stats_csv, out, per_class, &Options::for_path(out))
}

pub fn render_scatter_with(stats_csv: &Path, out: &Path, per_class: bool, opts: &Options) -> Result<FigureSummary> {
    let points = read_scatter_csv(stats_csv)?;
    let mut classes: Vec<String> = points.iter().map(|p| p.label.clone()).collect();
    classes.sort();
    classes.dedup();
    let title = opts.title.clone().unwrap_or_else(|| if per_class { "Class scatter" } else { "Samples scatter" }.into());
    let panels = if per_class { classes.len().max(1) } else { 1 };
    let size = if per_class {
        let cols = (panels as f64).sqrt().ceil() as u32;
        let rows = (panels as u32).div_ceil(cols);
        (420 * cols, 60 + 380 * rows)
    } else {
        (800, 600)
    };
    let n = points.len();
    let series = if per_class { 1 } else { classes.len() };
    paint_to(out, size, opts.format, &Scatter { title, classes: classes.clone(), points, per_class })?;
    Ok(FigureSummary { path: out.to_path_buf(), panels, series, points: n, labels: classes, annotations: Vec::new() })
}
