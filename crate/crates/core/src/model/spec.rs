//! Declarative model descriptions and exact parameter accounting.

use serde::{Deserialize, Serialize};

use super::backbone::BackboneSpec;
use super::ModelError;
use crate::dataio::{LabelSchema, Stage};
use crate::imaging::Shape3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Softmax,
    Sigmoid,
}

/// One layer. Convolutions use stride 1 and no padding; pools use a stride
/// equal to their window and drop any remainder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d { filters: usize, kernel: [usize; 2] },
    #[serde(rename = "maxpool")]
    MaxPool { pool: [usize; 2] },
    Flatten,
    GlobalPool,
    Dense { units: usize },
    Activation { function: Activation },
}

impl LayerSpec {
    pub fn conv(filters: usize, kh: usize, kw: usize) -> Self {
        LayerSpec::Conv2d { filters, kernel: [kh, kw] }
    }

    pub fn pool(ph: usize, pw: usize) -> Self {
        LayerSpec::MaxPool { pool: [ph, pw] }
    }

    pub fn dense(units: usize) -> Self {
        LayerSpec::Dense { units }
    }

    pub fn act(function: Activation) -> Self {
        LayerSpec::Activation { function }
    }

    /// Output shape for `input`, or `None` when the layer cannot accept it.
    pub fn output_shape(&self, input: Shape3) -> Option<Shape3> {
        match *self {
            LayerSpec::Conv2d { filters, kernel: [kh, kw] } => {
                if filters == 0 || kh == 0 || kw == 0 || input.height < kh || input.width < kw {
                    return None;
                }
                Some(Shape3::new(input.height - kh + 1, input.width - kw + 1, filters))
            }
            LayerSpec::MaxPool { pool: [ph, pw] } => {
                if ph == 0 || pw == 0 || input.height < ph || input.width < pw {
                    return None;
                }
                Some(Shape3::new(input.height / ph, input.width / pw, input.channels))
            }
            LayerSpec::Flatten => Some(Shape3::flat(input.size())),
            LayerSpec::GlobalPool => Some(Shape3::flat(input.channels)),
            LayerSpec::Dense { units } => {
                (units > 0 && input.height == 1 && input.width == 1).then_some(Shape3::flat(units))
            }
            LayerSpec::Activation { .. } => Some(input),
        }
    }

    /// `(kh*kw*in + 1) * filters` for convolutions, `(in + 1) * out` for
    /// dense layers, zero otherwise.
    pub fn parameter_count(&self, input: Shape3) -> usize {
        match *self {
            LayerSpec::Conv2d { filters, kernel: [kh, kw] } => (kh * kw * input.channels + 1) * filters,
            LayerSpec::Dense { units } => (input.size() + 1) * units,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// `dense(K)` + softmax
    Multiclass,
    /// `dense(1)` + sigmoid, output read as P(positive class)
    Binary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_shape: Shape3,
    pub layers: Vec<LayerSpec>,
    pub head_mode: HeadMode,
    /// Leading layers that are never updated by training.
    #[serde(default)]
    pub frozen_prefix: usize,
    /// Feature extractor feeding the first layer; raw pixels when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<BackboneSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
}

impl ModelSpec {
    /// Shape after every layer; element 0 is the input.
    pub fn shapes(&self) -> Result<Vec<Shape3>, ModelError> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        if self.input_shape.size() == 0 {
            return Err(ModelError::ShapeMismatch { layer: 0, detail: format!("empty input {}", self.input_shape) });
        }
        shapes.push(self.input_shape);
        for (i, layer) in self.layers.iter().enumerate() {
            let input = *shapes.last().expect("non-empty");
            let out = layer.output_shape(input).ok_or_else(|| ModelError::ShapeMismatch {
                layer: i,
                detail: format!("{layer:?} cannot take input {input}"),
            })?;
            shapes.push(out);
        }
        Ok(shapes)
    }

    pub fn output_width(&self) -> Result<usize, ModelError> {
        Ok(self.shapes()?.last().expect("non-empty").size())
    }

    /// Checks shape consistency, the frozen prefix, and that the head
    /// matches `head_mode`.
    pub fn validate(&self) -> Result<(), ModelError> {
        let shapes = self.shapes()?;
        if self.frozen_prefix > self.layers.len() {
            return Err(ModelError::InvalidSpec(format!(
                "frozen_prefix {} exceeds {} layers",
                self.frozen_prefix,
                self.layers.len()
            )));
        }
        if let Some(b) = &self.backbone {
            if Shape3::flat(b.feature_dim()) != self.input_shape {
                return Err(ModelError::InvalidSpec(format!(
                    "backbone emits {} features but input_shape is {}",
                    b.feature_dim(),
                    self.input_shape
                )));
            }
        }
        let n = self.layers.len();
        let (want_act, head) = match self.head_mode {
            HeadMode::Multiclass => (Activation::Softmax, "dense(K)+softmax"),
            HeadMode::Binary => (Activation::Sigmoid, "dense(1)+sigmoid"),
        };
        let ok = n >= 2
            && matches!(self.layers[n - 2], LayerSpec::Dense { .. })
            && self.layers[n - 1] == LayerSpec::act(want_act)
            && (self.head_mode == HeadMode::Multiclass || shapes[n].size() == 1);
        if !ok {
            return Err(ModelError::InvalidSpec(format!("{:?} head must end in {head}", self.head_mode)));
        }
        if self.layers[..n - 1].contains(&LayerSpec::act(Activation::Softmax)) {
            return Err(ModelError::InvalidSpec("softmax is only supported as the output activation".into()));
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus agreement with a label schema.
    pub fn validate_for(&self, schema: &LabelSchema) -> Result<(), ModelError> {
        self.validate()?;
        let width = self.output_width()?;
        let expected = match self.head_mode {
            HeadMode::Multiclass => schema.len(),
            HeadMode::Binary if schema.stage() == Stage::Stage1Binary => 1,
            HeadMode::Binary => {
                return Err(ModelError::SchemaMismatch(format!("binary head needs a normal/disease schema, got {schema}")))
            }
        };
        if width != expected {
            return Err(ModelError::SchemaMismatch(format!(
                "model emits {width} outputs, schema {schema} needs {expected}"
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        toml::from_str(text).map_err(|e| ModelError::InvalidSpec(e.to_string()))
    }
}

/// Total and trainable parameter counts; layers before `frozen_prefix`
/// count toward the total only.
pub fn count_parameters(spec: &ModelSpec) -> Result<ParamCount, ModelError> {
    let shapes = spec.shapes()?;
    let mut total = 0;
    let mut trainable = 0;
    for (i, layer) in spec.layers.iter().enumerate() {
        let p = layer.parameter_count(shapes[i]);
        total += p;
        if i >= spec.frozen_prefix {
            trainable += p;
        }
    }
    Ok(ParamCount { total, trainable })
}

/// Widths of the baseline CNN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnWidths {
    pub conv1: usize,
    pub conv2: usize,
    pub dense: usize,
}

impl Default for CnnWidths {
    fn default() -> Self {
        CnnWidths { conv1: 32, conv2: 64, dense: 128 }
    }
}

fn head_layers(schema: &LabelSchema, head: HeadMode) -> Result<[LayerSpec; 2], ModelError> {
    match head {
        HeadMode::Multiclass => Ok([LayerSpec::dense(schema.len()), LayerSpec::act(Activation::Softmax)]),
        HeadMode::Binary if schema.stage() == Stage::Stage1Binary => {
            Ok([LayerSpec::dense(1), LayerSpec::act(Activation::Sigmoid)])
        }
        HeadMode::Binary => Err(ModelError::SchemaMismatch(format!("binary head needs a normal/disease schema, got {schema}"))),
    }
}

/// Two conv+pool blocks, a hidden dense layer and the output head, with the
/// default widths (conv 32/64, 3x3 kernels, 2x2 pools, dense 128).
pub fn build_baseline_cnn(schema: &LabelSchema, head: HeadMode, input: Shape3) -> Result<ModelSpec, ModelError> {
    build_baseline_cnn_with(schema, head, input, CnnWidths::default())
}

pub fn build_baseline_cnn_with(
    schema: &LabelSchema,
    head: HeadMode,
    input: Shape3,
    widths: CnnWidths,
) -> Result<ModelSpec, ModelError> {
    if input.height < 32 || input.width < 32 || !matches!(input.channels, 1 | 3) {
        return Err(ModelError::InvalidShape(format!("baseline CNN needs at least 32x32 with 1 or 3 channels, got {input}")));
    }
    if widths.conv1 == 0 || widths.conv2 == 0 || widths.dense == 0 {
        return Err(ModelError::InvalidShape("layer widths must be positive".into()));
    }
    let mut layers = vec![
        LayerSpec::conv(widths.conv1, 3, 3),
        LayerSpec::act(Activation::Relu),
        LayerSpec::pool(2, 2),
        LayerSpec::conv(widths.conv2, 3, 3),
        LayerSpec::act(Activation::Relu),
        LayerSpec::pool(2, 2),
        LayerSpec::Flatten,
        LayerSpec::dense(widths.dense),
        LayerSpec::act(Activation::Relu),
    ];
    layers.extend(head_layers(schema, head)?);
    let spec = ModelSpec { input_shape: input, layers, head_mode: head, frozen_prefix: 0, backbone: None };
    spec.validate()?;
    Ok(spec)
}

pub const DEFAULT_HEAD_HIDDEN: usize = 48;

/// Classification head over pooled backbone features:
/// `global_pool` (frozen, stands in for the backbone) → `dense(hidden)` →
/// relu → output head.
pub fn build_transfer_head(feature_dim: usize, schema: &LabelSchema, head: HeadMode) -> Result<ModelSpec, ModelError> {
    build_transfer_head_with(feature_dim, DEFAULT_HEAD_HIDDEN, schema, head)
}

pub fn build_transfer_head_with(
    feature_dim: usize,
    hidden: usize,
    schema: &LabelSchema,
    head: HeadMode,
) -> Result<ModelSpec, ModelError> {
    if feature_dim == 0 || hidden == 0 {
        return Err(ModelError::InvalidShape("feature_dim and hidden must be positive".into()));
    }
    let mut layers = vec![LayerSpec::GlobalPool, LayerSpec::dense(hidden), LayerSpec::act(Activation::Relu)];
    layers.extend(head_layers(schema, head)?);
    let spec = ModelSpec { input_shape: Shape3::flat(feature_dim), layers, head_mode: head, frozen_prefix: 1, backbone: None };
    spec.validate()?;
    Ok(spec)
}

impl From<[usize; 3]> for Shape3 {
    fn from([h, w, c]: [usize; 3]) -> Self {
        Shape3::new(h, w, c)
    }
}

impl From<Shape3> for [usize; 3] {
    fn from(s: Shape3) -> Self {
        [s.height, s.width, s.channels]
    }
}
