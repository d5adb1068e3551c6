//! Model specification, parameter accounting, training and inference.

pub mod backbone;
pub mod network;
pub mod spec;
pub mod train;

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use image::DynamicImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backbone::{BackboneSpec, FeatureExtractor, PixelInput, RandomProjection};
pub use network::{Gradients, LayerParams, Network, Trace};
pub use spec::{
    build_baseline_cnn, build_baseline_cnn_with, build_transfer_head, build_transfer_head_with, count_parameters,
    Activation, CnnWidths, HeadMode, LayerSpec, ModelSpec, ParamCount, DEFAULT_HEAD_HIDDEN,
};
pub use train::{
    argmax, evaluate, format_sig6, train_network, HistoryRow, LossKind, TensorSet, TrainConfig, TrainingHistory,
    HISTORY_HEADER,
};

use crate::dataio::{DatasetManifest, LabelSchema};
use crate::imaging::load_image;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("layer {layer}: {detail}")]
    ShapeMismatch { layer: usize, detail: String },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("loss {loss:?} does not match a {head:?} head")]
    LossMismatch { loss: LossKind, head: HeadMode },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("validation set is empty")]
    EmptyValidationSet,
    #[error("training diverged: non-finite loss or weights in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("cannot decode sample '{id}': {message}")]
    DecodeFailure { id: String, message: String },
    #[error("no prediction available for sample '{0}'")]
    MissingPrediction(String),
    #[error("model needs an external feature extractor: {0}")]
    MissingExtractor(String),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A fitted network bound to its spec, label schema and input pipeline.
#[derive(Clone)]
pub struct TrainedModel<S> {
    spec: ModelSpec,
    schema: LabelSchema,
    network: Network<S>,
    extractor: Arc<dyn FeatureExtractor>,
}

impl<S: Scalar> fmt::Debug for TrainedModel<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TrainedModel").field("spec", &self.spec).field("schema", &self.schema).finish_non_exhaustive()
    }
}

/// Default input pipeline for a spec: its built-in backbone, or pixels.
pub fn default_extractor(spec: &ModelSpec) -> Arc<dyn FeatureExtractor> {
    match &spec.backbone {
        Some(b) => Arc::from(b.build()),
        None => Arc::new(PixelInput { shape: spec.input_shape }),
    }
}

fn decode_all(samples: &DatasetManifest) -> Result<Vec<DynamicImage>, ModelError> {
    samples
        .samples()
        .par_iter()
        .map(|s| load_image(&s.path).map_err(|e| ModelError::DecodeFailure { id: s.id.clone(), message: e.to_string() }))
        .collect()
}

fn cast_rows<S: Scalar>(rows: Vec<Vec<f32>>) -> Vec<Vec<S>> {
    rows.into_iter().map(|r| r.into_iter().map(|v| S::lit(f64::from(v))).collect()).collect()
}

/// Targets as the network sees them: class index for multiclass heads,
/// 1 for the positive class and 0 otherwise for binary heads.
pub fn targets_for(spec: &ModelSpec, schema: &LabelSchema, manifest: &DatasetManifest) -> Vec<usize> {
    match spec.head_mode {
        HeadMode::Multiclass => manifest.label_indices(),
        HeadMode::Binary => {
            let pos = schema.positive_class().expect("binary schema");
            manifest.iter().map(|s| usize::from(s.label == pos)).collect()
        }
    }
}

/// Decodes and featurizes a manifest for `spec`.
pub fn load_tensors<S: Scalar>(
    spec: &ModelSpec,
    extractor: &dyn FeatureExtractor,
    manifest: &DatasetManifest,
) -> Result<TensorSet<S>, ModelError> {
    let images = decode_all(manifest)?;
    let inputs = cast_rows(extractor.extract_batch(&images));
    Ok(TensorSet { inputs, targets: targets_for(spec, manifest.schema(), manifest) })
}

/// Trains a fresh network for `spec` with the spec's default input pipeline.
pub fn fit<S: Scalar>(
    spec: &ModelSpec,
    train: &DatasetManifest,
    val: &DatasetManifest,
    config: &TrainConfig,
) -> Result<(TrainedModel<S>, TrainingHistory), ModelError> {
    fit_with(spec, default_extractor(spec), train, val, config)
}

/// Like [`fit`], with an explicit feature extractor (e.g. a pretrained backbone).
pub fn fit_with<S: Scalar>(
    spec: &ModelSpec,
    extractor: Arc<dyn FeatureExtractor>,
    train: &DatasetManifest,
    val: &DatasetManifest,
    config: &TrainConfig,
) -> Result<(TrainedModel<S>, TrainingHistory), ModelError> {
    if train.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    if val.is_empty() {
        return Err(ModelError::EmptyValidationSet);
    }
    if train.schema() != val.schema() {
        return Err(ModelError::SchemaMismatch("train and validation schemas differ".into()));
    }
    let schema = train.schema().clone();
    spec.validate_for(&schema)?;
    config.validate_for(spec.head_mode)?;
    if extractor.feature_dim() != spec.input_shape.size() {
        return Err(ModelError::SchemaMismatch(format!(
            "extractor emits {} values, spec expects {}",
            extractor.feature_dim(),
            spec.input_shape
        )));
    }
    let train_t = load_tensors::<S>(spec, extractor.as_ref(), train)?;
    let val_t = load_tensors::<S>(spec, extractor.as_ref(), val)?;
    let mut network = Network::new(spec, config.seed)?;
    let history = train_network(&mut network, &train_t, &val_t, config)?;
    Ok((TrainedModel { spec: spec.clone(), schema, network, extractor }, history))
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    spec: ModelSpec,
    schema: LabelSchema,
    params: Vec<LayerParams>,
}

const MODEL_FORMAT: &str = "tsc-model-v1";

impl<S: Scalar> TrainedModel<S> {
    pub fn from_parts(spec: ModelSpec, schema: LabelSchema, network: Network<S>, extractor: Arc<dyn FeatureExtractor>) -> Self {
        TrainedModel { spec, schema, network, extractor }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn schema(&self) -> &LabelSchema {
        &self.schema
    }

    pub fn network(&self) -> &Network<S> {
        &self.network
    }

    /// Raw network outputs, one row per input: `K` softmax entries for
    /// multiclass heads, one P(positive) entry for binary heads.
    pub fn predict_tensors(&self, inputs: &[Vec<S>]) -> Vec<Vec<S>> {
        inputs.par_iter().map(|x| self.network.forward(x)).collect()
    }

    pub fn predict_images(&self, images: &[DynamicImage]) -> Vec<Vec<S>> {
        self.predict_tensors(&cast_rows(self.extractor.extract_batch(images)))
    }

    /// Raw outputs for every sample of a manifest (see [`predict_tensors`](Self::predict_tensors)).
    pub fn predict_proba(&self, samples: &DatasetManifest) -> Result<Vec<Vec<S>>, ModelError> {
        Ok(self.predict_images(&decode_all(samples)?))
    }

    /// Full distribution over the schema's encoded classes; binary outputs
    /// are expanded to `P(positive)` and its complement.
    pub fn expand(&self, raw: &[S]) -> Vec<f64> {
        match self.spec.head_mode {
            HeadMode::Multiclass => raw.iter().map(|v| v.to_f64_lossy()).collect(),
            HeadMode::Binary => {
                let p = raw[0].to_f64_lossy();
                let pos = self.schema.index_of(self.schema.positive_class().expect("binary")).expect("in schema");
                let mut out = vec![1.0 - p; self.schema.len()];
                out[pos] = p;
                out
            }
        }
    }

    /// Predicted label per sample. Binary heads pick the positive class only
    /// when P(positive) > 0.5.
    pub fn predict_labels(&self, samples: &DatasetManifest) -> Result<Vec<String>, ModelError> {
        let raw = self.predict_proba(samples)?;
        Ok(raw
            .iter()
            .map(|r| match self.spec.head_mode {
                HeadMode::Multiclass => self.schema.name(argmax(r)).to_string(),
                HeadMode::Binary => {
                    let pos = self.schema.positive_class().expect("binary");
                    if r[0].to_f64_lossy() > 0.5 {
                        pos.to_string()
                    } else {
                        self.schema.encoded().iter().find(|c| *c != pos).expect("two classes").clone()
                    }
                }
            })
            .collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ModelFile {
            format: MODEL_FORMAT.into(),
            spec: self.spec.clone(),
            schema: self.schema.clone(),
            params: self.network.export_params(),
        })
        .expect("model serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| ModelError::Format(e.to_string()))?;
        if file.format != MODEL_FORMAT {
            return Err(ModelError::Format(format!("unknown format '{}'", file.format)));
        }
        file.spec.validate_for(&file.schema)?;
        let mut network = Network::new(&file.spec, 0)?;
        network.import_params(&file.params)?;
        let extractor = default_extractor(&file.spec);
        Ok(TrainedModel { spec: file.spec, schema: file.schema, network, extractor })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
