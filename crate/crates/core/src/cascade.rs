//! Two-stage cascade: a normal-vs-disease model routes samples to a
//! disease-type model, and the two outputs are composed into a 4-class
//! distribution.
//!
//! Hard routing (the default) sends a sample to stage 2 only when
//! `P(disease) > threshold`; a tie at the threshold stays `normal`. Soft
//! routing consults both stages for every sample and labels it by the
//! argmax of the composed distribution
//! `(1 - p, p * p2(covid), p * p2(opacity), p * p2(pneumonia))`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{stage1_label, DatasetManifest, LabelSchema, Stage, DISEASE, NORMAL};
use crate::metrics::{classification_report, confusion_matrix, ClassificationReport, ConfusionMatrix, MetricsError};
use crate::model::{ModelError, TrainedModel};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum CascadeError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("cascade has no {0} model")]
    UnfittedStage(&'static str),
    #[error("{stage} model has schema {found}, expected {expected}")]
    StageSchema { stage: &'static str, found: String, expected: String },
    #[error("test manifest must use the 4-class schema, got {0}")]
    TestSchema(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Anything that yields a probability distribution over its schema's
/// encoded classes for each sample of a manifest.
pub trait Classifier: Send + Sync {
    fn schema(&self) -> &LabelSchema;

    fn distributions(&self, samples: &DatasetManifest) -> Result<Vec<Vec<f64>>, ModelError>;
}

impl<S: Scalar> Classifier for TrainedModel<S> {
    fn schema(&self) -> &LabelSchema {
        TrainedModel::schema(self)
    }

    fn distributions(&self, samples: &DatasetManifest) -> Result<Vec<Vec<f64>>, ModelError> {
        Ok(self.predict_proba(samples)?.iter().map(|r| self.expand(r)).collect())
    }
}

/// Fixed per-sample distributions looked up by sample id. Used to replay
/// stored predictions and to build deterministic stage oracles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableClassifier {
    schema: LabelSchema,
    rows: HashMap<String, Vec<f64>>,
}

const TABLE_FORMAT: &str = "tsc-table-v1";

#[derive(Serialize, Deserialize)]
struct TableFile {
    format: String,
    schema: LabelSchema,
    rows: std::collections::BTreeMap<String, Vec<f64>>,
}

impl TableClassifier {
    pub fn new(schema: LabelSchema) -> Self {
        TableClassifier { schema, rows: HashMap::new() }
    }

    /// Distribution for `id`, in encoded class order.
    pub fn insert(&mut self, id: impl Into<String>, distribution: Vec<f64>) {
        assert_eq!(distribution.len(), self.schema.len(), "distribution width");
        self.rows.insert(id.into(), distribution);
    }

    /// Puts all mass on `class` for `id`.
    pub fn insert_label(&mut self, id: impl Into<String>, class: &str) {
        let mut d = vec![0.0; self.schema.len()];
        d[self.schema.index_of(class).expect("class in schema")] = 1.0;
        self.insert(id, d);
    }

    pub fn to_json(&self) -> String {
        let file = TableFile {
            format: TABLE_FORMAT.into(),
            schema: self.schema.clone(),
            rows: self.rows.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        };
        serde_json::to_string(&file).expect("table serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let file: TableFile = serde_json::from_str(text).map_err(|e| ModelError::Format(e.to_string()))?;
        if file.format != TABLE_FORMAT {
            return Err(ModelError::Format(format!("unknown format '{}'", file.format)));
        }
        if file.rows.values().any(|r| r.len() != file.schema.len()) {
            return Err(ModelError::Format("row width does not match schema".into()));
        }
        Ok(TableClassifier { schema: file.schema, rows: file.rows.into_iter().collect() })
    }
}

impl Classifier for TableClassifier {
    fn schema(&self) -> &LabelSchema {
        &self.schema
    }

    fn distributions(&self, samples: &DatasetManifest) -> Result<Vec<Vec<f64>>, ModelError> {
        samples
            .iter()
            .map(|s| self.rows.get(&s.id).cloned().ok_or_else(|| ModelError::MissingPrediction(s.id.clone())))
            .collect()
    }
}

/// Loads either a trained network or a prediction table from a model file.
pub fn load_classifier(path: &Path) -> Result<Box<dyn Classifier>, ModelError> {
    let text = std::fs::read_to_string(path)?;
    let format = serde_json::from_str::<serde_json::Value>(&text)
        .map_err(|e| ModelError::Format(e.to_string()))?
        .get("format")
        .and_then(|f| f.as_str().map(str::to_string));
    match format.as_deref() {
        Some(TABLE_FORMAT) => Ok(Box::new(TableClassifier::from_json(&text)?)),
        _ => Ok(Box::new(TrainedModel::<f32>::from_json(&text)?)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    Hard,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingPolicy {
    pub mode: RoutingMode,
    /// Hard mode routes to stage 2 when `P(disease)` is strictly above this.
    pub disease_threshold: f64,
}

impl Default for RoutingPolicy {
    fn default() -> Self {
        RoutingPolicy { mode: RoutingMode::Hard, disease_threshold: 0.5 }
    }
}

impl RoutingPolicy {
    pub fn hard(threshold: f64) -> Self {
        RoutingPolicy { mode: RoutingMode::Hard, disease_threshold: threshold }
    }

    pub fn soft() -> Self {
        RoutingPolicy { mode: RoutingMode::Soft, ..Self::default() }
    }

    pub fn routes_to_disease(&self, p_disease: f64) -> bool {
        p_disease > self.disease_threshold
    }
}

/// Composes `P(disease)` and a 3-class disease distribution into
/// `[normal, d0, d1, d2]`, where `d*` follow the order of `p2`.
pub fn compose_probabilities<S: Scalar>(p_disease: S, p2: &[S]) -> Result<[S; 4], CascadeError> {
    if !(p_disease >= S::zero() && p_disease <= S::one()) {
        return Err(CascadeError::InvalidDistribution(format!("P(disease) = {p_disease} outside [0,1]")));
    }
    if p2.len() != 3 {
        return Err(CascadeError::InvalidDistribution(format!("stage-2 distribution has {} entries", p2.len())));
    }
    if p2.iter().any(|&v| v.is_nan() || v < S::zero()) {
        return Err(CascadeError::InvalidDistribution("negative stage-2 probability".into()));
    }
    let sum: S = p2.iter().copied().sum();
    if (sum - S::one()).abs() > S::lit(1e-6) {
        return Err(CascadeError::InvalidDistribution(format!("stage-2 probabilities sum to {sum}")));
    }
    Ok([S::one() - p_disease, p_disease * p2[0], p_disease * p2[1], p_disease * p2[2]])
}

/// Stage-2 distributions keyed by sample position.
type Stage2Rows = HashMap<usize, Vec<f64>>;

/// Stage-1 model, stage-2 model and routing policy.
pub struct CascadeModel {
    stage1: Box<dyn Classifier>,
    stage2: Box<dyn Classifier>,
    policy: RoutingPolicy,
    output: LabelSchema,
    // index of "disease" in the stage-1 encoding
    disease_idx: usize,
}

#[derive(Default)]
pub struct CascadeBuilder {
    stage1: Option<Box<dyn Classifier>>,
    stage2: Option<Box<dyn Classifier>>,
    policy: RoutingPolicy,
}

impl CascadeBuilder {
    pub fn stage1(mut self, model: impl Classifier + 'static) -> Self {
        self.stage1 = Some(Box::new(model));
        self
    }

    pub fn stage1_boxed(mut self, model: Box<dyn Classifier>) -> Self {
        self.stage1 = Some(model);
        self
    }

    pub fn stage2(mut self, model: impl Classifier + 'static) -> Self {
        self.stage2 = Some(Box::new(model));
        self
    }

    pub fn stage2_boxed(mut self, model: Box<dyn Classifier>) -> Self {
        self.stage2 = Some(model);
        self
    }

    pub fn policy(mut self, policy: RoutingPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn build(self) -> Result<CascadeModel, CascadeError> {
        let stage1 = self.stage1.ok_or(CascadeError::UnfittedStage("stage-1"))?;
        let stage2 = self.stage2.ok_or(CascadeError::UnfittedStage("stage-2"))?;
        CascadeModel::new(stage1, stage2, self.policy)
    }
}

/// One cascade output.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadePrediction {
    pub id: String,
    pub true_label: String,
    pub label: String,
    pub p_disease: f64,
    /// Composed distribution, `[normal, d0, d1, d2]` with disease classes in
    /// stage-2 encoded order.
    pub distribution: [f64; 4],
    pub routed_to_disease: bool,
}

impl CascadeModel {
    pub fn builder() -> CascadeBuilder {
        CascadeBuilder::default()
    }

    pub fn new(stage1: Box<dyn Classifier>, stage2: Box<dyn Classifier>, policy: RoutingPolicy) -> Result<Self, CascadeError> {
        let s1 = stage1.schema();
        if s1.stage() != Stage::Stage1Binary {
            return Err(CascadeError::StageSchema { stage: "stage-1", found: s1.to_string(), expected: LabelSchema::stage1().to_string() });
        }
        let s2 = stage2.schema();
        if s2.stage() != Stage::Stage2Disease || s2.contains(NORMAL) {
            return Err(CascadeError::StageSchema { stage: "stage-2", found: s2.to_string(), expected: LabelSchema::stage2().to_string() });
        }
        if !(policy.disease_threshold > 0.0 && policy.disease_threshold < 1.0) {
            return Err(CascadeError::InvalidDistribution(format!("threshold {} outside (0,1)", policy.disease_threshold)));
        }
        let mut classes = vec![NORMAL.to_string()];
        classes.extend(s2.classes().iter().cloned());
        let output = LabelSchema::new(classes, Stage::Multiclass4).map_err(|e| CascadeError::StageSchema {
            stage: "stage-2",
            found: e.to_string(),
            expected: LabelSchema::stage2().to_string(),
        })?;
        let disease_idx = s1.index_of(DISEASE).expect("binary schema has disease");
        Ok(CascadeModel { stage1, stage2, policy, output, disease_idx })
    }

    pub fn policy(&self) -> RoutingPolicy {
        self.policy
    }

    pub fn output_schema(&self) -> &LabelSchema {
        &self.output
    }

    /// Output class names in composed-distribution order.
    pub fn composed_classes(&self) -> Vec<&str> {
        std::iter::once(NORMAL).chain(self.stage2.schema().encoded().iter().map(String::as_str)).collect()
    }

    fn stage2_rows(&self, samples: &DatasetManifest, positions: &[usize]) -> Result<HashMap<usize, Vec<f64>>, CascadeError> {
        if positions.is_empty() {
            return Ok(HashMap::new());
        }
        let subset = samples.select(positions);
        let dists = self.stage2.distributions(&subset)?;
        let mut sorted = positions.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        Ok(sorted.into_iter().zip(dists).collect())
    }

    fn run(&self, samples: &DatasetManifest, extra_stage2: &[usize]) -> Result<(Vec<CascadePrediction>, Stage2Rows), CascadeError> {
        let s1 = self.stage1.distributions(samples)?;
        let p_disease: Vec<f64> = s1.iter().map(|r| r[self.disease_idx]).collect();
        let routed: Vec<bool> = p_disease.iter().map(|&p| self.policy.routes_to_disease(p)).collect();
        let mut need: Vec<usize> = match self.policy.mode {
            RoutingMode::Hard => (0..samples.len()).filter(|&i| routed[i]).collect(),
            RoutingMode::Soft => (0..samples.len()).collect(),
        };
        need.extend_from_slice(extra_stage2);
        let s2 = self.stage2_rows(samples, &need)?;
        let classes = self.composed_classes();
        let uniform = [1.0 / 3.0; 3];
        let mut out = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let p = p_disease[i];
            let consulted = match self.policy.mode {
                RoutingMode::Hard => routed[i],
                RoutingMode::Soft => true,
            };
            // Stage 2 is not consulted for samples routed to normal; their
            // disease mass is spread evenly.
            let p2: &[f64] = if consulted { &s2[&i] } else { &uniform };
            let distribution = compose_probabilities(p, p2)?;
            let label_idx = match self.policy.mode {
                RoutingMode::Hard if !routed[i] => 0,
                RoutingMode::Hard => 1 + crate::model::argmax(p2),
                RoutingMode::Soft => crate::model::argmax(&distribution),
            };
            out.push(CascadePrediction {
                id: s.id.clone(),
                true_label: s.label.clone(),
                label: classes[label_idx].to_string(),
                p_disease: p,
                distribution,
                routed_to_disease: routed[i],
            });
        }
        Ok((out, s2))
    }

    /// Label and composed distribution for every sample.
    pub fn predict(&self, samples: &DatasetManifest) -> Result<Vec<CascadePrediction>, CascadeError> {
        Ok(self.run(samples, &[])?.0)
    }

    /// End-to-end and stage-wise evaluation on a 4-class test manifest.
    ///
    /// Stage 2 is scored twice: on every truly diseased sample
    /// (oracle-routed) and on the truly diseased samples that stage 1
    /// actually routed to it (pipeline-routed).
    pub fn evaluate(&self, test: &DatasetManifest) -> Result<CascadeEvaluation, CascadeError> {
        if test.is_empty() {
            return Err(CascadeError::EmptyTestSet);
        }
        if test.schema().stage() != Stage::Multiclass4 || test.schema().encoded() != self.output.encoded() {
            return Err(CascadeError::TestSchema(test.schema().to_string()));
        }
        let diseased: Vec<usize> = (0..test.len()).filter(|&i| test.samples()[i].label != NORMAL).collect();
        let (predictions, s2) = self.run(test, &diseased)?;

        let truth: Vec<&str> = predictions.iter().map(|p| p.true_label.as_str()).collect();
        let pred: Vec<&str> = predictions.iter().map(|p| p.label.as_str()).collect();
        let end_to_end = StageResult::new(confusion_matrix(&truth, &pred, &self.output)?)?;

        let s1_truth: Vec<&str> = truth.iter().map(|t| stage1_label(t)).collect();
        let s1_pred: Vec<&str> = predictions.iter().map(|p| if p.routed_to_disease { DISEASE } else { NORMAL }).collect();
        let stage1 = StageResult::new(confusion_matrix(&s1_truth, &s1_pred, self.stage1.schema())?)?;

        let s2_schema = self.stage2.schema();
        let s2_label = |i: usize| s2_schema.name(crate::model::argmax(&s2[&i])).to_string();
        let score = |positions: Vec<usize>| -> Result<Option<StageResult>, CascadeError> {
            if positions.is_empty() {
                return Ok(None);
            }
            let t: Vec<&str> = positions.iter().map(|&i| truth[i]).collect();
            let p: Vec<String> = positions.iter().map(|&i| s2_label(i)).collect();
            Ok(Some(StageResult::new(confusion_matrix(&t, &p, s2_schema)?)?))
        };
        let stage2_oracle_routed = score(diseased.clone())?;
        let stage2_pipeline_routed = score(diseased.into_iter().filter(|&i| predictions[i].routed_to_disease).collect())?;

        Ok(CascadeEvaluation { predictions, end_to_end, stage1, stage2_oracle_routed, stage2_pipeline_routed })
    }
}

/// A confusion matrix with its report.
#[derive(Debug, Clone, PartialEq)]
pub struct StageResult {
    pub confusion: ConfusionMatrix,
    pub report: ClassificationReport<f64>,
}

impl StageResult {
    pub fn new(confusion: ConfusionMatrix) -> Result<Self, MetricsError> {
        let report = classification_report(&confusion)?;
        Ok(StageResult { confusion, report })
    }
}

#[derive(Debug, Clone)]
pub struct CascadeEvaluation {
    pub predictions: Vec<CascadePrediction>,
    pub end_to_end: StageResult,
    pub stage1: StageResult,
    pub stage2_oracle_routed: Option<StageResult>,
    pub stage2_pipeline_routed: Option<StageResult>,
}

/// Prediction dump: `id,true_label,pred_label,p_normal,p_<d0>,p_<d1>,p_<d2>`.
pub fn predictions_csv(classes: &[&str], predictions: &[CascadePrediction]) -> String {
    let mut out = String::from("id,true_label,pred_label");
    for c in classes {
        let _ = write!(out, ",p_{c}");
    }
    out.push('\n');
    for p in predictions {
        let _ = write!(out, "{},{},{}", csv_field(&p.id), p.true_label, p.label);
        for v in p.distribution {
            let _ = write!(out, ",{v:.6}");
        }
        out.push('\n');
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Sample;
    use approx::assert_abs_diff_eq;

    #[test]
    fn composition_examples() {
        assert_eq!(compose_probabilities(0.0, &[0.2, 0.3, 0.5]).unwrap(), [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(compose_probabilities(1.0, &[0.2, 0.3, 0.5]).unwrap(), [0.0, 0.2, 0.3, 0.5]);
        let c = compose_probabilities(0.6, &[0.5, 0.25, 0.25]).unwrap();
        for (a, b) in c.iter().zip([0.4, 0.3, 0.15, 0.15]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        assert!(compose_probabilities(1.5, &[0.2, 0.3, 0.5]).is_err());
        assert!(compose_probabilities(0.5, &[0.2, 0.3, 0.6]).is_err());
        assert!(compose_probabilities(0.5, &[0.5, 0.5]).is_err());
        assert!(compose_probabilities(0.5f32, &[-0.1, 0.6, 0.5]).is_err());
    }

    fn one_sample(label: &str) -> DatasetManifest {
        DatasetManifest::new(LabelSchema::multiclass4(), vec![Sample::new("x", "x.png", label)]).unwrap()
    }

    fn stages(p_disease: f64, p2: [f64; 3]) -> (TableClassifier, TableClassifier) {
        let mut s1 = TableClassifier::new(LabelSchema::stage1());
        // encoded order: disease, normal
        s1.insert("x", vec![p_disease, 1.0 - p_disease]);
        let mut s2 = TableClassifier::new(LabelSchema::stage2());
        s2.insert("x", p2.to_vec());
        (s1, s2)
    }

    #[test]
    fn certain_normal_routes_normal() {
        let (s1, s2) = stages(0.0, [1.0, 0.0, 0.0]);
        let c = CascadeModel::builder().stage1(s1).stage2(s2).build().unwrap();
        let p = c.predict(&one_sample("covid")).unwrap();
        assert_eq!(p[0].label, "normal");
    }

    #[test]
    fn hard_routes_to_stage2_argmax() {
        let (s1, s2) = stages(0.9, [0.7, 0.2, 0.1]);
        let c = CascadeModel::builder().stage1(s1).stage2(s2).build().unwrap();
        assert_eq!(c.predict(&one_sample("covid")).unwrap()[0].label, "covid");
    }

    #[test]
    fn tie_at_threshold_is_normal() {
        let (s1, s2) = stages(0.5, [0.0, 0.0, 1.0]);
        let c = CascadeModel::builder().stage1(s1).stage2(s2).build().unwrap();
        assert_eq!(c.predict(&one_sample("covid")).unwrap()[0].label, "normal");
    }

    #[test]
    fn stage2_skipped_for_normal_routes() {
        let (s1, _) = stages(0.1, [1.0, 0.0, 0.0]);
        // an empty table would fail if consulted
        let s2 = TableClassifier::new(LabelSchema::stage2());
        let c = CascadeModel::builder().stage1(s1).stage2(s2).build().unwrap();
        let p = c.predict(&one_sample("normal")).unwrap();
        assert_eq!(p[0].label, "normal");
        assert_abs_diff_eq!(p[0].distribution.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn missing_stage_and_bad_schemas() {
        let (s1, s2) = stages(0.1, [1.0, 0.0, 0.0]);
        assert!(matches!(CascadeModel::builder().stage1(s1.clone()).build(), Err(CascadeError::UnfittedStage(_))));
        assert!(matches!(
            CascadeModel::builder().stage1(s2.clone()).stage2(s2.clone()).build(),
            Err(CascadeError::StageSchema { .. })
        ));
        assert!(matches!(
            CascadeModel::builder().stage1(s1.clone()).stage2(s1).build(),
            Err(CascadeError::StageSchema { .. })
        ));
    }

    #[test]
    fn table_json_roundtrip() {
        let (s1, _) = stages(0.3, [1.0, 0.0, 0.0]);
        assert_eq!(TableClassifier::from_json(&s1.to_json()).unwrap(), s1);
    }

    #[test]
    fn prediction_dump_header() {
        let (s1, s2) = stages(0.9, [0.7, 0.2, 0.1]);
        let c = CascadeModel::builder().stage1(s1).stage2(s2).build().unwrap();
        let text = predictions_csv(&c.composed_classes(), &c.predict(&one_sample("covid")).unwrap());
        assert!(text.starts_with("id,true_label,pred_label,p_normal,p_covid,p_opacity,p_pneumonia\n"));
        assert!(text.contains("x,covid,covid,0.100000,0.630000,0.180000,0.090000"));
    }
}
