//! Minibatch gradient descent and per-epoch history.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::Network;
use super::spec::HeadMode;
use super::ModelError;
use crate::rng::{derive_seed, rng_from_seed, shuffle};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CategoricalCrossEntropy,
    BinaryCrossEntropy,
}

impl LossKind {
    pub fn for_head(head: HeadMode) -> Self {
        match head {
            HeadMode::Multiclass => LossKind::CategoricalCrossEntropy,
            HeadMode::Binary => LossKind::BinaryCrossEntropy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss: LossKind,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate_for(&self, head: HeadMode) -> Result<(), ModelError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ModelError::InvalidConfig(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.loss != LossKind::for_head(head) {
            return Err(ModelError::LossMismatch { loss: self.loss, head });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub fold: usize,
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// One row per `(fold, epoch)`; epochs count from 1.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub rows: Vec<HistoryRow>,
}

pub const HISTORY_HEADER: &str = "fold,epoch,loss,accuracy,val_loss,val_accuracy";

/// `%.6g`-style rendering: six significant digits, trailing zeros dropped,
/// scientific notation outside `[1e-4, 1e6)`.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let sci = format!("{v:.5e}");
    let (mant, e) = sci.split_once('e').expect("exponent");
    let e: i32 = e.parse().expect("int exponent");
    if !(-4..6).contains(&e) {
        let mant = mant.trim_end_matches('0').trim_end_matches('.');
        return format!("{mant}e{}{:02}", if e < 0 { '-' } else { '+' }, e.abs());
    }
    let decimals = (5 - e).max(0) as usize;
    let s = format!("{v:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

impl TrainingHistory {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn with_fold(mut self, fold: usize) -> Self {
        self.rows.iter_mut().for_each(|r| r.fold = fold);
        self
    }

    pub fn extend(&mut self, other: TrainingHistory) {
        self.rows.extend(other.rows);
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(HISTORY_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.fold,
                r.epoch,
                format_sig6(r.loss),
                format_sig6(r.accuracy),
                format_sig6(r.val_loss),
                format_sig6(r.val_accuracy)
            ));
        }
        out
    }

    /// Writes the history CSV. Refuses an empty history.
    pub fn write_csv(&self, path: &Path) -> Result<(), ModelError> {
        if self.rows.is_empty() {
            return Err(ModelError::InvalidConfig("refusing to write an empty history".into()));
        }
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_csv(&text)
    }

    pub fn parse_csv(text: &str) -> Result<Self, ModelError> {
        let bad = |m: String| ModelError::Io(io::Error::new(io::ErrorKind::InvalidData, m));
        let mut lines = text.lines();
        if lines.next() != Some(HISTORY_HEADER) {
            return Err(bad(format!("history header must be '{HISTORY_HEADER}'")));
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(format!("line {}: expected 6 fields", n + 2)));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("line {}: {e}", n + 2)));
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("line {}: {e}", n + 2)));
            rows.push(HistoryRow {
                fold: int(f[0])?,
                epoch: int(f[1])?,
                loss: num(f[2])?,
                accuracy: num(f[3])?,
                val_loss: num(f[4])?,
                val_accuracy: num(f[5])?,
            });
        }
        Ok(TrainingHistory { rows })
    }
}

/// In-memory inputs with integer targets (class index, or 0/1 for binary heads).
#[derive(Debug, Clone, Default)]
pub struct TensorSet<S> {
    pub inputs: Vec<Vec<S>>,
    pub targets: Vec<usize>,
}

impl<S: Scalar> TensorSet<S> {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

fn predicted(head: HeadMode, probs: &[impl Scalar]) -> usize {
    match head {
        HeadMode::Binary => usize::from(probs[0].to_f64_lossy() > 0.5),
        HeadMode::Multiclass => argmax(probs),
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<S: PartialOrd + Copy>(v: &[S]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean loss and accuracy of `net` over `data`.
pub fn evaluate<S: Scalar>(net: &Network<S>, data: &TensorSet<S>) -> (f64, f64) {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (x, &y) in data.inputs.iter().zip(&data.targets) {
        let p = net.forward(x);
        loss += net.loss_of(&p, y).to_f64_lossy();
        correct += usize::from(predicted(net.head(), &p) == y);
    }
    let n = data.len().max(1) as f64;
    (loss / n, correct as f64 / n)
}

/// Plain minibatch gradient descent with a fixed step.
///
/// Each epoch visits the training set in an order shuffled by a stream
/// derived from `config.seed` and the epoch number. The reported training
/// loss and accuracy are averages over the epoch, measured on each batch
/// before its update; validation metrics are measured after the epoch.
pub fn train_network<S: Scalar>(
    net: &mut Network<S>,
    train: &TensorSet<S>,
    val: &TensorSet<S>,
    config: &TrainConfig,
) -> Result<TrainingHistory, ModelError> {
    config.validate_for(net.head())?;
    if train.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    if val.is_empty() {
        return Err(ModelError::EmptyValidationSet);
    }
    let lr = S::lit(config.learning_rate);
    let mut grads = net.zero_gradients();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainingHistory::default();
    for epoch in 1..=config.epochs {
        shuffle(&mut rng_from_seed(derive_seed(config.seed, &format!("epoch/{epoch}"))), &mut order);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            grads.zero();
            for &i in batch {
                let trace = net.forward_trace(&train.inputs[i]);
                let y = train.targets[i];
                loss_sum += net.backprop(&trace, y, &mut grads).to_f64_lossy();
                correct += usize::from(predicted(net.head(), trace.output()) == y);
            }
            net.apply_gradients(&grads, lr / S::from_usize_lossy(batch.len()));
            if !loss_sum.is_finite() || !net.params_finite() {
                return Err(ModelError::NonFiniteLoss { epoch });
            }
        }
        let n = train.len() as f64;
        let (val_loss, val_accuracy) = evaluate(net, val);
        if !val_loss.is_finite() {
            return Err(ModelError::NonFiniteLoss { epoch });
        }
        history.rows.push(HistoryRow { fold: 0, epoch, loss: loss_sum / n, accuracy: correct as f64 / n, val_loss, val_accuracy });
    }
    Ok(history)
}
