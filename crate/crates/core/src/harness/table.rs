//! Side-by-side comparison of finished runs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::ResultSummary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub dataset: String,
    pub time_s: Option<f64>,
    /// Percent.
    pub accuracy: f64,
    pub parameters: Option<usize>,
    pub note: String,
}

/// A published or otherwise external figure shown next to measured runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub model: String,
    pub dataset: String,
    /// Percent.
    pub accuracy: f64,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

pub fn comparison_table(results: &[ResultSummary], references: &[ReferenceRow]) -> ComparisonTable {
    let mut rows: Vec<ComparisonRow> = results
        .iter()
        .map(|r| ComparisonRow {
            model: r.model.clone(),
            dataset: r.dataset.clone(),
            time_s: Some(r.duration_secs),
            accuracy: r.accuracy * 100.0,
            parameters: Some(r.trainable_parameters),
            note: if r.fold_accuracies.len() > 1 {
                format!("mean of {} folds, std {:.1}", r.fold_accuracies.len(), r.accuracy_std * 100.0)
            } else {
                "measured".into()
            },
        })
        .collect();
    rows.extend(references.iter().map(|r| ComparisonRow {
        model: r.model.clone(),
        dataset: r.dataset.clone(),
        time_s: None,
        accuracy: r.accuracy,
        parameters: None,
        note: if r.note.is_empty() { "reference".into() } else { r.note.clone() },
    }));
    ComparisonTable { rows }
}

fn cells(r: &ComparisonRow) -> [String; 6] {
    [
        r.model.clone(),
        r.dataset.clone(),
        r.time_s.map(|t| format!("{t:.1}")).unwrap_or_else(|| "-".into()),
        format!("{:.1}", r.accuracy),
        r.parameters.map(|p| p.to_string()).unwrap_or_else(|| "-".into()),
        r.note.clone(),
    ]
}

const HEADER: [&str; 6] = ["model", "dataset", "time_s", "accuracy", "parameters", "note"];

impl ComparisonTable {
    /// Aligned plain-text rendering.
    pub fn render(&self) -> String {
        let body: Vec<[String; 6]> = self.rows.iter().map(cells).collect();
        let mut widths = HEADER.map(str::len);
        for row in &body {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, row: &[String]| {
            let parts: Vec<String> = row.iter().zip(widths).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&mut out, &HEADER.map(String::from));
        for row in &body {
            line(&mut out, row);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(HEADER).expect("in-memory write");
        for r in &self.rows {
            w.write_record(cells(r)).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}
