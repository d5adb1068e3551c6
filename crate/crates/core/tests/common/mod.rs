//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use tsc_core::cascade::TableClassifier;
use tsc_core::dataio::{DatasetManifest, LabelSchema, Sample};
use tsc_core::imaging::Shape3;
use tsc_core::model::{LayerSpec, ModelSpec};
use tsc_core::rng::{below, Rng};

/// Manifest with `counts[i]` samples of `schema.encoded()[i]` and dummy paths.
pub fn manifest_with(schema: &LabelSchema, counts: &[usize]) -> DatasetManifest {
    let mut samples = Vec::new();
    for (class, &n) in schema.encoded().iter().zip(counts) {
        for j in 0..n {
            let id = format!("{class}/{j:05}");
            samples.push(Sample::new(id.clone(), format!("/nonexistent/{id}.png"), class.clone()));
        }
    }
    DatasetManifest::new(schema.clone(), samples).unwrap()
}

pub struct NaiveMetrics {
    pub counts: Vec<Vec<u64>>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub support: Vec<u64>,
    pub accuracy: f64,
}

/// Counting oracle: every quantity from a direct scan of the pairs.
pub fn naive_metrics(y_true: &[usize], y_pred: &[usize], k: usize) -> NaiveMetrics {
    let mut counts = vec![vec![0u64; k]; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        counts[t][p] += 1;
    }
    let mut precision = Vec::new();
    let mut recall = Vec::new();
    let mut f1 = Vec::new();
    let mut support = Vec::new();
    for c in 0..k {
        let tp = y_true.iter().zip(y_pred).filter(|&(&t, &p)| t == c && p == c).count() as f64;
        let predicted = y_pred.iter().filter(|&&p| p == c).count() as f64;
        let actual = y_true.iter().filter(|&&t| t == c).count() as f64;
        let p = if predicted == 0.0 { 0.0 } else { tp / predicted };
        let r = if actual == 0.0 { 0.0 } else { tp / actual };
        precision.push(p);
        recall.push(r);
        f1.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
        support.push(actual as u64);
    }
    let hits = y_true.iter().zip(y_pred).filter(|(t, p)| t == p).count() as f64;
    NaiveMetrics { counts, precision, recall, f1, support, accuracy: hits / y_true.len() as f64 }
}

/// Parameter count by walking shapes by hand:
/// returns `(total, trainable)`.
pub fn closed_form_params(spec: &ModelSpec) -> (usize, usize) {
    let (mut h, mut w, mut c) = (spec.input_shape.height, spec.input_shape.width, spec.input_shape.channels);
    let mut total = 0;
    let mut trainable = 0;
    for (i, layer) in spec.layers.iter().enumerate() {
        let n = match *layer {
            LayerSpec::Conv2d { filters, kernel: [kh, kw] } => {
                let n = kh * kw * c * filters + filters;
                h = h - kh + 1;
                w = w - kw + 1;
                c = filters;
                n
            }
            LayerSpec::MaxPool { pool: [ph, pw] } => {
                h /= ph;
                w /= pw;
                0
            }
            LayerSpec::Flatten => {
                c *= h * w;
                h = 1;
                w = 1;
                0
            }
            LayerSpec::GlobalPool => {
                h = 1;
                w = 1;
                0
            }
            LayerSpec::Dense { units } => {
                let n = h * w * c * units + units;
                h = 1;
                w = 1;
                c = units;
                n
            }
            LayerSpec::Activation { .. } => 0,
        };
        total += n;
        if i >= spec.frozen_prefix {
            trainable += n;
        }
    }
    (total, trainable)
}

/// A random valid conv/pool/dense stack small enough to count by hand.
pub fn random_small_spec(rng: &mut Rng, head_units: usize) -> ModelSpec {
    use tsc_core::model::{Activation, HeadMode};
    let side = 6 + below(rng, 10) as usize;
    let channels = if below(rng, 2) == 0 { 1 } else { 3 };
    let mut layers = Vec::new();
    let mut cur = side;
    for _ in 0..below(rng, 3) {
        let k = 1 + below(rng, 3) as usize;
        if cur < k + 1 {
            break;
        }
        layers.push(LayerSpec::conv(1 + below(rng, 6) as usize, k, k));
        layers.push(LayerSpec::act(Activation::Relu));
        cur = cur - k + 1;
        if cur >= 4 && below(rng, 2) == 0 {
            layers.push(LayerSpec::pool(2, 2));
            cur /= 2;
        }
    }
    layers.push(if below(rng, 2) == 0 { LayerSpec::Flatten } else { LayerSpec::GlobalPool });
    for _ in 0..below(rng, 3) {
        layers.push(LayerSpec::dense(1 + below(rng, 20) as usize));
        layers.push(LayerSpec::act(Activation::Relu));
    }
    let (head, act) = if head_units == 1 { (HeadMode::Binary, Activation::Sigmoid) } else { (HeadMode::Multiclass, Activation::Softmax) };
    layers.push(LayerSpec::dense(head_units));
    layers.push(LayerSpec::act(act));
    let frozen_prefix = below(rng, layers.len() as u64) as usize;
    ModelSpec { input_shape: Shape3::new(side, side, channels), layers, head_mode: head, frozen_prefix, backbone: None }
}

/// Deterministic stage oracles with period-10 error patterns, indexed by
/// each sample's position `j` within its class (ids end in `/{j:05}`):
///
/// * stage 1: a normal sample is flagged as disease when `j % 10 == 0`;
///   a diseased sample is missed (called normal) when `j % 10 == 0`.
/// * stage 2, on a diseased sample of disease index `d`: correct for
///   `j % 10` in 1..=7, `d + 1` for 8, `d + 2` for 9 (mod 3); on a normal
///   sample: disease index `(j / 10) % 3`.
pub fn oracle_tables(test: &DatasetManifest) -> (TableClassifier, TableClassifier) {
    let s1 = LabelSchema::stage1();
    let s2 = LabelSchema::stage2();
    let disease_idx = s1.index_of("disease").unwrap();
    let mut t1 = TableClassifier::new(s1);
    let mut t2 = TableClassifier::new(s2.clone());
    for s in test.iter() {
        let j: usize = s.id.rsplit('/').next().unwrap().parse().unwrap();
        let is_normal = s.label == "normal";
        let flagged = is_normal == j.is_multiple_of(10);
        let p = if flagged { 0.8 } else { 0.2 };
        let mut d1 = vec![0.0; 2];
        d1[disease_idx] = p;
        d1[1 - disease_idx] = 1.0 - p;
        t1.insert(s.id.clone(), d1);
        let target = if is_normal {
            (j / 10) % 3
        } else {
            let d = s2.index_of(&s.label).unwrap();
            match j % 10 {
                8 => (d + 1) % 3,
                9 => (d + 2) % 3,
                _ => d,
            }
        };
        let mut d2 = vec![0.1; 3];
        d2[target] = 0.8;
        t2.insert(s.id.clone(), d2);
    }
    (t1, t2)
}

/// End-to-end confusion matrix implied by [`oracle_tables`] under hard
/// routing at 0.5, for `n` samples per class (n a multiple of 30), in the
/// 4-class encoded order covid, normal, opacity, pneumonia.
pub fn analytic_cascade_matrix(n: u64) -> [[u64; 4]; 4] {
    let tenth = n / 10;
    // composed index -> 4-class encoded index
    let disease_to_4 = [0usize, 2, 3];
    let normal = 1usize;
    let mut m = [[0u64; 4]; 4];
    m[normal][normal] = n - tenth;
    for d in 0..3 {
        // flagged normals: j % 10 == 0, split evenly by (j / 10) % 3
        m[normal][disease_to_4[d]] += tenth / 3;
    }
    for d in 0..3 {
        let row = disease_to_4[d];
        m[row][normal] = tenth;
        m[row][row] = 7 * tenth;
        m[row][disease_to_4[(d + 1) % 3]] = tenth;
        m[row][disease_to_4[(d + 2) % 3]] = tenth;
    }
    m
}
