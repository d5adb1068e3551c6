//! Confusion matrices and the classification report derived from them.
//!
//! Rows are true classes, columns predicted classes, both in the schema's
//! encoded (alphabetical) order. Ratios whose denominator is zero are
//! reported as 0 and flagged.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::LabelSchema;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{truth} true labels but {pred} predictions")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("label '{0}' is not in the schema")]
    UnknownLabel(String),
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("malformed confusion matrix file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub schema: LabelSchema,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(schema: &LabelSchema) -> Self {
        let k = schema.len();
        ConfusionMatrix { schema: schema.clone(), counts: vec![vec![0; k]; k] }
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    /// Count for a `(true, predicted)` pair of class names.
    pub fn get(&self, truth: &str, pred: &str) -> Option<u64> {
        Some(self.counts[self.schema.index_of(truth)?][self.schema.index_of(pred)?])
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    /// Header row and first column carry class names; the corner cell is `true\pred`.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("true\\pred");
        for c in self.schema.encoded() {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            out.push_str(self.schema.name(i));
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), MetricsError> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

/// Class names and counts from a confusion-matrix CSV, without a schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

/// Parses the confusion-matrix CSV. Rejects non-square grids and row
/// labels that disagree with the header.
pub fn read_confusion_csv(path: &Path) -> Result<RawMatrix, MetricsError> {
    parse_confusion_csv(&std::fs::read_to_string(path)?)
}

pub fn parse_confusion_csv(text: &str) -> Result<RawMatrix, MetricsError> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(text.as_bytes());
    let mut records = r.records();
    let header = records.next().ok_or_else(|| MetricsError::Malformed("empty file".into()))??;
    let classes: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut counts = Vec::new();
    for rec in records {
        let rec = rec?;
        if rec.len() != classes.len() + 1 {
            return Err(MetricsError::Malformed(format!("row has {} cells, expected {}", rec.len(), classes.len() + 1)));
        }
        if rec.get(0) != classes.get(counts.len()).map(String::as_str) {
            return Err(MetricsError::Malformed(format!("row label {:?} does not match header", rec.get(0))));
        }
        let row = rec
            .iter()
            .skip(1)
            .map(|v| v.trim().parse::<u64>().map_err(|e| MetricsError::Malformed(format!("bad count '{v}': {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        counts.push(row);
    }
    if classes.is_empty() || counts.len() != classes.len() {
        return Err(MetricsError::Malformed(format!("{} rows for {} classes", counts.len(), classes.len())));
    }
    Ok(RawMatrix { classes, counts })
}

/// `counts[i][j] = #{k : true_k = class_i and pred_k = class_j}`.
pub fn confusion_matrix<T: AsRef<str>, P: AsRef<str>>(
    y_true: &[T],
    y_pred: &[P],
    schema: &LabelSchema,
) -> Result<ConfusionMatrix, MetricsError> {
    if y_true.len() != y_pred.len() {
        return Err(MetricsError::LengthMismatch { truth: y_true.len(), pred: y_pred.len() });
    }
    let idx = |l: &str| schema.index_of(l).ok_or_else(|| MetricsError::UnknownLabel(l.to_string()));
    let mut cm = ConfusionMatrix::zeros(schema);
    for (t, p) in y_true.iter().zip(y_pred) {
        cm.counts[idx(t.as_ref())?][idx(p.as_ref())?] += 1;
    }
    Ok(cm)
}

/// Same as [`confusion_matrix`] over encoded class indices.
pub fn confusion_matrix_indices(y_true: &[usize], y_pred: &[usize], schema: &LabelSchema) -> Result<ConfusionMatrix, MetricsError> {
    if y_true.len() != y_pred.len() {
        return Err(MetricsError::LengthMismatch { truth: y_true.len(), pred: y_pred.len() });
    }
    let k = schema.len();
    let mut cm = ConfusionMatrix::zeros(schema);
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= k || p >= k {
            return Err(MetricsError::UnknownLabel(t.max(p).to_string()));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow<S> {
    pub class: String,
    pub precision: S,
    pub recall: S,
    pub f1: S,
    pub support: u64,
    /// Set when any of the three ratios hit a zero denominator.
    pub zero_division: bool,
}

fn ratio<S: Scalar>(num: u64, den: u64) -> (S, bool) {
    if den == 0 {
        (S::zero(), true)
    } else {
        (S::lit(num as f64) / S::lit(den as f64), false)
    }
}

fn f1_of<S: Scalar>(p: S, r: S) -> (S, bool) {
    let sum = p + r;
    if sum == S::zero() {
        (S::zero(), true)
    } else {
        (S::lit(2.0) * p * r / sum, false)
    }
}

pub fn precision_recall_f1_support<S: Scalar>(cm: &ConfusionMatrix) -> Vec<MetricRow<S>> {
    (0..cm.k())
        .map(|i| {
            let tp = cm.counts[i][i];
            let support = cm.row_sum(i);
            let (precision, zp) = ratio::<S>(tp, cm.col_sum(i));
            let (recall, zr) = ratio::<S>(tp, support);
            let (f1, zf) = f1_of(precision, recall);
            MetricRow { class: cm.schema.name(i).to_string(), precision, recall, f1, support, zero_division: zp || zr || zf }
        })
        .collect()
}

/// `trace / total`.
pub fn accuracy<S: Scalar>(cm: &ConfusionMatrix) -> Result<S, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    Ok(S::lit(cm.trace() as f64) / S::lit(total as f64))
}

/// Micro-averaged `(precision, recall, f1)`, pooled over all classes.
pub fn micro_average<S: Scalar>(cm: &ConfusionMatrix) -> (S, S, S) {
    let tp = cm.trace();
    let fp: u64 = (0..cm.k()).map(|j| cm.col_sum(j) - cm.counts[j][j]).sum();
    let fn_: u64 = (0..cm.k()).map(|i| cm.row_sum(i) - cm.counts[i][i]).sum();
    let (p, _) = ratio::<S>(tp, tp + fp);
    let (r, _) = ratio::<S>(tp, tp + fn_);
    let (f, _) = f1_of(p, r);
    (p, r, f)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages<S> {
    pub precision: S,
    pub recall: S,
    pub f1: S,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport<S> {
    pub rows: Vec<MetricRow<S>>,
    pub accuracy: S,
    pub macro_avg: Averages<S>,
    pub weighted_avg: Averages<S>,
    pub total: u64,
}

/// Per-class rows plus accuracy, macro (unweighted) and support-weighted averages.
pub fn classification_report<S: Scalar>(cm: &ConfusionMatrix) -> Result<ClassificationReport<S>, MetricsError> {
    let accuracy = accuracy::<S>(cm)?;
    let rows = precision_recall_f1_support::<S>(cm);
    let total = cm.total();
    let k = S::from_usize_lossy(rows.len());
    let mean = |f: fn(&MetricRow<S>) -> S| rows.iter().map(f).sum::<S>() / k;
    let weighted = |f: fn(&MetricRow<S>) -> S| {
        rows.iter().map(|r| f(r) * S::lit(r.support as f64)).sum::<S>() / S::lit(total as f64)
    };
    let macro_avg = Averages { precision: mean(|r| r.precision), recall: mean(|r| r.recall), f1: mean(|r| r.f1) };
    let weighted_avg =
        Averages { precision: weighted(|r| r.precision), recall: weighted(|r| r.recall), f1: weighted(|r| r.f1) };
    Ok(ClassificationReport { rows, accuracy, macro_avg, weighted_avg, total })
}

impl<S: Scalar> ClassificationReport<S> {
    /// Fixed-width text table with two decimals, laid out like the usual
    /// precision/recall/f1-score/support report.
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.class.len()).chain(["weighted avg".len()]).max().unwrap_or(12);
        let f = |v: S| format!("{:>9.2}", v.to_f64_lossy());
        let mut out = format!("{:>width$} {:>9} {:>9} {:>9} {:>9}\n\n", "", "precision", "recall", "f1-score", "support");
        for r in &self.rows {
            let _ = writeln!(out, "{:>width$} {} {} {} {:>9}", r.class, f(r.precision), f(r.recall), f(r.f1), r.support);
        }
        out.push('\n');
        let _ = writeln!(out, "{:>width$} {:>9} {:>9} {} {:>9}", "accuracy", "", "", f(self.accuracy), self.total);
        for (name, a) in [("macro avg", &self.macro_avg), ("weighted avg", &self.weighted_avg)] {
            let _ = writeln!(out, "{:>width$} {} {} {} {:>9}", name, f(a.precision), f(a.recall), f(a.f1), self.total);
        }
        let flagged: Vec<&str> = self.rows.iter().filter(|r| r.zero_division).map(|r| r.class.as_str()).collect();
        if !flagged.is_empty() {
            let _ = writeln!(out, "\nzero division (reported as 0.00): {}", flagged.join(", "));
        }
        out
    }

    /// Structured variant: `rows[]` with `class, precision, recall, f1,
    /// support, zero_division`, then `accuracy`, `macro_avg`,
    /// `weighted_avg` and `total`.
    pub fn to_json(&self) -> String
    where
        S: Serialize,
    {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn binary_schema() -> LabelSchema {
        LabelSchema::stage1()
    }

    fn cm2(counts: [[u64; 2]; 2]) -> ConfusionMatrix {
        ConfusionMatrix { schema: binary_schema(), counts: counts.iter().map(|r| r.to_vec()).collect() }
    }

    #[test]
    fn perfect_and_swapped() {
        let s = binary_schema();
        let cm = confusion_matrix(&["disease", "disease", "normal"], &["disease", "disease", "normal"], &s).unwrap();
        assert_eq!(cm.counts, vec![vec![2, 0], vec![0, 1]]);
        let cm = confusion_matrix(&["disease", "normal"], &["normal", "disease"], &s).unwrap();
        assert_eq!(cm.counts, vec![vec![0, 1], vec![1, 0]]);
    }

    #[test]
    fn errors() {
        let s = binary_schema();
        assert!(matches!(confusion_matrix(&["normal"], &[] as &[&str], &s), Err(MetricsError::LengthMismatch { .. })));
        assert!(matches!(confusion_matrix(&["normal"], &["cat"], &s), Err(MetricsError::UnknownLabel(_))));
        assert!(matches!(accuracy::<f64>(&ConfusionMatrix::zeros(&s)), Err(MetricsError::EmptyMatrix)));
        assert!(classification_report::<f64>(&ConfusionMatrix::zeros(&s)).is_err());
    }

    #[test]
    fn hand_worked_two_class() {
        let cm = cm2([[8, 2], [1, 9]]);
        let rows = precision_recall_f1_support::<f64>(&cm);
        assert_abs_diff_eq!(rows[0].precision, 8.0 / 9.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rows[0].recall, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(rows[0].f1, 16.0 / 19.0, epsilon = 1e-12);
        assert_abs_diff_eq!(accuracy::<f64>(&cm).unwrap(), 0.85, epsilon = 1e-15);
        let rep = classification_report::<f64>(&cm).unwrap();
        // class1: p = 9/11, r = 0.9, f1 = 18/21
        assert_abs_diff_eq!(rep.macro_avg.f1, (16.0 / 19.0 + 18.0 / 21.0) / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rep.macro_avg.f1, 0.8496, epsilon = 1e-4);
    }

    #[test]
    fn diagonal_is_all_ones() {
        let cm = cm2([[5, 0], [0, 7]]);
        let rep = classification_report::<f64>(&cm).unwrap();
        assert!(rep.rows.iter().all(|r| r.precision == 1.0 && r.recall == 1.0 && r.f1 == 1.0));
        assert_eq!(rep.accuracy, 1.0);
        let text = rep.render();
        for line in text.lines().filter(|l| l.contains("avg") || l.contains("disease") || l.contains("normal")) {
            assert!(line.contains("1.00"), "{line}");
            assert!(!line.contains("0.") || line.contains("1.00"));
        }
        assert_eq!(accuracy::<f64>(&cm2([[0, 5], [5, 0]])).unwrap(), 0.0);
    }

    #[test]
    fn zero_column_policy() {
        let cm = cm2([[0, 4], [0, 6]]);
        let rows = precision_recall_f1_support::<f64>(&cm);
        assert_eq!(rows[0].precision, 0.0);
        assert_eq!(rows[0].recall, 0.0);
        assert!(rows[0].zero_division);
        assert_abs_diff_eq!(rows[1].recall, 1.0);
        assert!(classification_report::<f64>(&cm).unwrap().render().contains("zero division"));
    }

    #[test]
    fn weighted_differs_from_macro() {
        let cm = cm2([[81, 9], [5, 5]]);
        let rep = classification_report::<f64>(&cm).unwrap();
        assert_ne!(rep.weighted_avg.recall, rep.macro_avg.recall);
        assert_abs_diff_eq!(rep.weighted_avg.recall, rep.accuracy, epsilon = 1e-12);
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let cm = cm2([[8, 2], [1, 9]]);
        let text = cm.to_csv_string();
        assert_eq!(text, "true\\pred,disease,normal\ndisease,8,2\nnormal,1,9\n");
        let raw = parse_confusion_csv(&text).unwrap();
        assert_eq!(raw.counts, cm.counts);
        assert!(parse_confusion_csv("x,a,b\na,1,2\n").is_err());
        assert!(parse_confusion_csv("x,a,b\na,1\nb,1,2\n").is_err());
    }

    #[test]
    fn json_has_documented_keys() {
        let rep = classification_report::<f64>(&cm2([[8, 2], [1, 9]])).unwrap();
        let v: serde_json::Value = serde_json::from_str(&rep.to_json()).unwrap();
        for key in ["class", "precision", "recall", "f1", "support", "zero_division"] {
            assert!(v["rows"][0].get(key).is_some(), "{key}");
        }
        assert!(v["macro_avg"]["f1"].is_number());
    }
}
