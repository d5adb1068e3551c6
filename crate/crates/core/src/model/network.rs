//! Dense/convolutional network evaluated and trained on the CPU.
//!
//! Tensors are flat `Vec<S>` in HWC order. Convolution weights are stored as
//! `[ky][kx][in_channel][filter]`, dense weights as `[input][output]`, so the
//! innermost loops always run over contiguous output channels.

use serde::{Deserialize, Serialize};

use super::spec::{Activation, HeadMode, LayerSpec, ModelSpec};
use super::ModelError;
use crate::imaging::Shape3;
use crate::rng::{derive_seed, rng_from_seed, unit_f64};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
enum Layer<S> {
    Conv { input: Shape3, filters: usize, kh: usize, kw: usize, weights: Vec<S>, bias: Vec<S> },
    Pool { input: Shape3, ph: usize, pw: usize },
    Flatten,
    GlobalPool { input: Shape3 },
    Dense { n_in: usize, n_out: usize, weights: Vec<S>, bias: Vec<S> },
    Act(Activation),
}

impl<S: Scalar> Layer<S> {
    fn params(&self) -> Option<(&[S], &[S])> {
        match self {
            Layer::Conv { weights, bias, .. } | Layer::Dense { weights, bias, .. } => Some((weights, bias)),
            _ => None,
        }
    }

    fn params_mut(&mut self) -> Option<(&mut Vec<S>, &mut Vec<S>)> {
        match self {
            Layer::Conv { weights, bias, .. } | Layer::Dense { weights, bias, .. } => Some((weights, bias)),
            _ => None,
        }
    }
}

/// Parameters of one layer, as stored in model files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradient buffers laid out like the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<S> {
    layers: Vec<(Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zero(&mut self) {
        for (w, b) in &mut self.layers {
            w.iter_mut().for_each(|v| *v = S::zero());
            b.iter_mut().for_each(|v| *v = S::zero());
        }
    }

    /// All gradient entries in parameter order.
    pub fn flat(&self) -> Vec<S> {
        self.layers.iter().flat_map(|(w, b)| w.iter().chain(b).copied()).collect()
    }
}

/// Per-layer activations kept for back-propagation.
#[derive(Debug, Clone)]
pub struct Trace<S> {
    acts: Vec<Vec<S>>,
    argmax: Vec<Vec<u32>>,
}

impl<S: Scalar> Trace<S> {
    pub fn output(&self) -> &[S] {
        self.acts.last().expect("input is always recorded")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<S> {
    layers: Vec<Layer<S>>,
    head: HeadMode,
    frozen_prefix: usize,
    input_size: usize,
}

fn softmax_in_place<S: Scalar>(v: &mut [S]) {
    let max = v.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

impl<S: Scalar> Network<S> {
    /// Fresh network for `spec`. Weights are drawn uniformly from
    /// `±sqrt(6 / fan_in)` with a per-layer stream derived from `seed`;
    /// biases start at zero.
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let shapes = spec.shapes()?;
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let input = shapes[i];
                let mut rng = rng_from_seed(derive_seed(seed, &format!("init/{i}")));
                let mut init = |n: usize, fan_in: usize| -> Vec<S> {
                    let limit = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| S::lit((2.0 * unit_f64(&mut rng) - 1.0) * limit)).collect()
                };
                match *l {
                    LayerSpec::Conv2d { filters, kernel: [kh, kw] } => {
                        let fan_in = kh * kw * input.channels;
                        Layer::Conv {
                            input,
                            filters,
                            kh,
                            kw,
                            weights: init(fan_in * filters, fan_in),
                            bias: vec![S::zero(); filters],
                        }
                    }
                    LayerSpec::MaxPool { pool: [ph, pw] } => Layer::Pool { input, ph, pw },
                    LayerSpec::Flatten => Layer::Flatten,
                    LayerSpec::GlobalPool => Layer::GlobalPool { input },
                    LayerSpec::Dense { units } => {
                        let n_in = input.size();
                        Layer::Dense { n_in, n_out: units, weights: init(n_in * units, n_in), bias: vec![S::zero(); units] }
                    }
                    LayerSpec::Activation { function } => Layer::Act(function),
                }
            })
            .collect();
        Ok(Network { layers, head: spec.head_mode, frozen_prefix: spec.frozen_prefix, input_size: shapes[0].size() })
    }

    pub fn head(&self) -> HeadMode {
        self.head
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().filter_map(Layer::params).map(|(w, b)| w.len() + b.len()).sum()
    }

    pub fn zero_gradients(&self) -> Gradients<S> {
        Gradients {
            layers: self
                .layers
                .iter()
                .map(|l| match l.params() {
                    Some((w, b)) => (vec![S::zero(); w.len()], vec![S::zero(); b.len()]),
                    None => (Vec::new(), Vec::new()),
                })
                .collect(),
        }
    }

    /// All parameters in order: per layer, weights then biases.
    pub fn params_flat(&self) -> Vec<S> {
        self.layers.iter().filter_map(Layer::params).flat_map(|(w, b)| w.iter().chain(b).copied()).collect()
    }

    pub fn set_params_flat(&mut self, values: &[S]) {
        let mut it = values.iter().copied();
        for (w, b) in self.layers.iter_mut().filter_map(Layer::params_mut) {
            for v in w.iter_mut().chain(b.iter_mut()) {
                *v = it.next().expect("enough values");
            }
        }
        assert!(it.next().is_none(), "too many values");
    }

    /// Parameters of the trainable (non-frozen) layers only.
    pub fn trainable_params_flat(&self) -> Vec<S> {
        self.layers[self.frozen_prefix..]
            .iter()
            .filter_map(Layer::params)
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }

    /// Parameters of the frozen prefix only.
    pub fn frozen_params_flat(&self) -> Vec<S> {
        self.layers[..self.frozen_prefix]
            .iter()
            .filter_map(Layer::params)
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }

    pub fn export_params(&self) -> Vec<LayerParams> {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .map(|(w, b)| LayerParams {
                weights: w.iter().map(|v| v.to_f64_lossy()).collect(),
                bias: b.iter().map(|v| v.to_f64_lossy()).collect(),
            })
            .collect()
    }

    pub fn import_params(&mut self, params: &[LayerParams]) -> Result<(), ModelError> {
        let slots: Vec<_> = self.layers.iter_mut().filter_map(Layer::params_mut).collect();
        if slots.len() != params.len() {
            return Err(ModelError::InvalidSpec(format!("expected {} parameter blocks, got {}", slots.len(), params.len())));
        }
        for ((w, b), p) in slots.into_iter().zip(params) {
            if w.len() != p.weights.len() || b.len() != p.bias.len() {
                return Err(ModelError::InvalidSpec("parameter block size mismatch".into()));
            }
            w.iter_mut().zip(&p.weights).for_each(|(d, s)| *d = S::lit(*s));
            b.iter_mut().zip(&p.bias).for_each(|(d, s)| *d = S::lit(*s));
        }
        Ok(())
    }

    /// Output probabilities for one input vector.
    pub fn forward(&self, input: &[S]) -> Vec<S> {
        let mut x = input.to_vec();
        for layer in &self.layers {
            let mut scratch = Vec::new();
            x = self.layer_forward(layer, &x, &mut scratch);
        }
        x
    }

    pub fn forward_trace(&self, input: &[S]) -> Trace<S> {
        assert_eq!(input.len(), self.input_size, "input width");
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut argmax = Vec::with_capacity(self.layers.len());
        acts.push(input.to_vec());
        for layer in &self.layers {
            let mut idx = Vec::new();
            let out = self.layer_forward(layer, acts.last().expect("non-empty"), &mut idx);
            acts.push(out);
            argmax.push(idx);
        }
        Trace { acts, argmax }
    }

    fn layer_forward(&self, layer: &Layer<S>, x: &[S], argmax: &mut Vec<u32>) -> Vec<S> {
        match layer {
            Layer::Conv { input, filters, kh, kw, weights, bias } => {
                let (h, w, c, f) = (input.height, input.width, input.channels, *filters);
                let (oh, ow) = (h - kh + 1, w - kw + 1);
                let row_len = kw * c;
                let mut out = vec![S::zero(); oh * ow * f];
                for y in 0..oh {
                    for xo in 0..ow {
                        let o = &mut out[(y * ow + xo) * f..][..f];
                        o.copy_from_slice(bias);
                        for ky in 0..*kh {
                            let in_row = &x[((y + ky) * w + xo) * c..][..row_len];
                            let w_rows = &weights[ky * row_len * f..][..row_len * f];
                            for (i, &v) in in_row.iter().enumerate() {
                                if v == S::zero() {
                                    continue;
                                }
                                for (acc, &wt) in o.iter_mut().zip(&w_rows[i * f..][..f]) {
                                    *acc += v * wt;
                                }
                            }
                        }
                    }
                }
                out
            }
            Layer::Pool { input, ph, pw } => {
                let (w, c) = (input.width, input.channels);
                let (oh, ow) = (input.height / ph, input.width / pw);
                let mut out = Vec::with_capacity(oh * ow * c);
                argmax.clear();
                argmax.reserve(oh * ow * c);
                for y in 0..oh {
                    for xo in 0..ow {
                        for ch in 0..c {
                            let mut best = ((y * ph) * w + xo * pw) * c + ch;
                            for dy in 0..*ph {
                                for dx in 0..*pw {
                                    let j = ((y * ph + dy) * w + xo * pw + dx) * c + ch;
                                    if x[j] > x[best] {
                                        best = j;
                                    }
                                }
                            }
                            out.push(x[best]);
                            argmax.push(best as u32);
                        }
                    }
                }
                out
            }
            Layer::Flatten => x.to_vec(),
            Layer::GlobalPool { input } => {
                let c = input.channels;
                let n = S::from_usize_lossy(input.height * input.width);
                let mut out = vec![S::zero(); c];
                for px in x.chunks_exact(c) {
                    out.iter_mut().zip(px).for_each(|(o, &v)| *o += v);
                }
                out.iter_mut().for_each(|o| *o /= n);
                out
            }
            Layer::Dense { n_out, weights, bias, .. } => {
                let mut out = bias.clone();
                for (i, &v) in x.iter().enumerate() {
                    if v == S::zero() {
                        continue;
                    }
                    for (o, &wt) in out.iter_mut().zip(&weights[i * n_out..][..*n_out]) {
                        *o += v * wt;
                    }
                }
                out
            }
            Layer::Act(Activation::Relu) => x.iter().map(|&v| v.max(S::zero())).collect(),
            Layer::Act(Activation::Sigmoid) => x.iter().map(|&v| sigmoid(v)).collect(),
            Layer::Act(Activation::Softmax) => {
                let mut out = x.to_vec();
                softmax_in_place(&mut out);
                out
            }
        }
    }

    /// Cross-entropy of the output for `target` (class index for multiclass
    /// heads, 0/1 for binary heads). Probabilities are clamped at machine
    /// epsilon before the log.
    pub fn loss_of(&self, probs: &[S], target: usize) -> S {
        let eps = S::epsilon();
        match self.head {
            HeadMode::Multiclass => -probs[target].max(eps).ln(),
            HeadMode::Binary => {
                let p = probs[0].max(eps).min(S::one() - eps);
                if target == 1 {
                    -p.ln()
                } else {
                    -(S::one() - p).ln()
                }
            }
        }
    }

    pub fn loss(&self, input: &[S], target: usize) -> S {
        self.loss_of(&self.forward(input), target)
    }

    /// Adds the loss gradient for one sample to `grads` and returns the loss.
    ///
    /// The output activation and the cross-entropy are differentiated
    /// together (`p - y` at the logits), then the chain runs down to the
    /// first trainable layer.
    pub fn backprop(&self, trace: &Trace<S>, target: usize, grads: &mut Gradients<S>) -> S {
        let probs = trace.output();
        let loss = self.loss_of(probs, target);
        let mut g: Vec<S> = probs.to_vec();
        match self.head {
            HeadMode::Multiclass => g[target] -= S::one(),
            HeadMode::Binary => g[0] -= S::from_usize_lossy(target),
        }
        let last = self.layers.len() - 1;
        let stop = self.frozen_prefix;
        for i in (stop..last).rev() {
            let need_input_grad = i > stop;
            g = self.layer_backward(i, trace, &g, grads, need_input_grad);
        }
        loss
    }

    fn layer_backward(&self, i: usize, trace: &Trace<S>, g: &[S], grads: &mut Gradients<S>, need_in: bool) -> Vec<S> {
        let x = &trace.acts[i];
        let out = &trace.acts[i + 1];
        match &self.layers[i] {
            Layer::Conv { input, filters, kh, kw, weights, .. } => {
                let (h, w, c, f) = (input.height, input.width, input.channels, *filters);
                let (oh, ow) = (h - kh + 1, w - kw + 1);
                let row_len = kw * c;
                let (gw, gb) = &mut grads.layers[i];
                let mut gin = if need_in { vec![S::zero(); x.len()] } else { Vec::new() };
                for y in 0..oh {
                    for xo in 0..ow {
                        let go = &g[(y * ow + xo) * f..][..f];
                        gb.iter_mut().zip(go).for_each(|(b, &v)| *b += v);
                        for ky in 0..*kh {
                            let base = ((y + ky) * w + xo) * c;
                            let in_row = &x[base..][..row_len];
                            let gw_rows = &mut gw[ky * row_len * f..][..row_len * f];
                            for (r, &v) in in_row.iter().enumerate() {
                                if v == S::zero() {
                                    continue;
                                }
                                for (acc, &gv) in gw_rows[r * f..][..f].iter_mut().zip(go) {
                                    *acc += v * gv;
                                }
                            }
                            if need_in {
                                let w_rows = &weights[ky * row_len * f..][..row_len * f];
                                for (r, gi) in gin[base..][..row_len].iter_mut().enumerate() {
                                    let mut s = S::zero();
                                    for (&wt, &gv) in w_rows[r * f..][..f].iter().zip(go) {
                                        s += wt * gv;
                                    }
                                    *gi += s;
                                }
                            }
                        }
                    }
                }
                gin
            }
            Layer::Pool { .. } => {
                let mut gin = vec![S::zero(); x.len()];
                for (&j, &gv) in trace.argmax[i].iter().zip(g) {
                    gin[j as usize] += gv;
                }
                gin
            }
            Layer::Flatten => g.to_vec(),
            Layer::GlobalPool { input } => {
                let n = S::from_usize_lossy(input.height * input.width);
                let mut gin = Vec::with_capacity(x.len());
                for _ in 0..input.height * input.width {
                    gin.extend(g.iter().map(|&v| v / n));
                }
                gin
            }
            Layer::Dense { n_out, weights, .. } => {
                let (gw, gb) = &mut grads.layers[i];
                gb.iter_mut().zip(g).for_each(|(b, &v)| *b += v);
                let mut gin = if need_in { vec![S::zero(); x.len()] } else { Vec::new() };
                for (r, &v) in x.iter().enumerate() {
                    if v != S::zero() {
                        for (acc, &gv) in gw[r * n_out..][..*n_out].iter_mut().zip(g) {
                            *acc += v * gv;
                        }
                    }
                    if need_in {
                        let mut s = S::zero();
                        for (&wt, &gv) in weights[r * n_out..][..*n_out].iter().zip(g) {
                            s += wt * gv;
                        }
                        gin[r] = s;
                    }
                }
                gin
            }
            Layer::Act(Activation::Relu) => {
                out.iter().zip(g).map(|(&o, &gv)| if o > S::zero() { gv } else { S::zero() }).collect()
            }
            Layer::Act(Activation::Sigmoid) => out.iter().zip(g).map(|(&o, &gv)| gv * o * (S::one() - o)).collect(),
            Layer::Act(Activation::Softmax) => {
                let dot: S = out.iter().zip(g).map(|(&o, &gv)| o * gv).sum();
                out.iter().zip(g).map(|(&o, &gv)| o * (gv - dot)).collect()
            }
        }
    }

    /// `params -= step * grads` on every trainable layer.
    pub fn apply_gradients(&mut self, grads: &Gradients<S>, step: S) {
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(&grads.layers).skip(self.frozen_prefix) {
            if let Some((w, b)) = layer.params_mut() {
                w.iter_mut().zip(gw).for_each(|(p, &d)| *p -= step * d);
                b.iter_mut().zip(gb).for_each(|(p, &d)| *p -= step * d);
            }
        }
    }

    pub fn params_finite(&self) -> bool {
        self.layers.iter().filter_map(Layer::params).all(|(w, b)| w.iter().chain(b).all(|v| v.is_finite()))
    }
}
