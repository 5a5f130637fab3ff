//! Surrogate-gradient training, evaluation and metric export.

use std::io::Write;
use std::path::Path;
use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{config, contract, Error, Result};
use crate::model::{Forward, Model};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    AdamW,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd_momentum" => Some(Self::SgdMomentum),
            "adamw" => Some(Self::AdamW),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::SgdMomentum => "sgd_momentum",
            Self::AdamW => "adamw",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

impl LrSchedule {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "constant" => Some(Self::Constant),
            "cosine" => Some(Self::Cosine),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Constant => "constant",
            Self::Cosine => "cosine",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    /// Momentum for SGD, first-moment decay for AdamW.
    pub momentum: f64,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
    pub flip: bool,
    /// Random translation by up to this many pixels (zero padding).
    pub crop_padding: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            optimizer: OptimizerKind::AdamW,
            momentum: 0.9,
            seed: 0,
            lr_schedule: LrSchedule::Cosine,
            flip: false,
            crop_padding: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config("train.epochs and train.batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(config(format!("train.learning_rate must be non-negative, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(config(format!("train.weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config(format!("train.momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }

    /// Learning rate for global step `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let p = step as f64 / total.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * p).cos())
            }
        }
    }
}

/// First-order optimiser state. Weight decay applies only to tensors with
/// at least two axes (weights, not biases or normalisation affines).
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    momentum: f64,
    weight_decay: f64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(model: &Model<T>, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<T>> = model.store.params().map(|(_, p)| vec![T::zero(); p.numel()]).collect();
        let second = if cfg.optimizer == OptimizerKind::AdamW { zeros.clone() } else { Vec::new() };
        Self { kind: cfg.optimizer, momentum: cfg.momentum, weight_decay: cfg.weight_decay, first: zeros, second, steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to `model` given per-parameter gradients.
    pub fn step(&mut self, model: &mut Model<T>, grads: &[Vec<T>], lr: f64) {
        self.steps += 1;
        let lr_t = T::from_f64_lossy(lr);
        let mu = T::from_f64_lossy(self.momentum);
        let wd = T::from_f64_lossy(self.weight_decay);
        let one = T::one();
        match self.kind {
            OptimizerKind::SgdMomentum => {
                for (((_, p), g), v) in model.store.params_mut().zip(grads).zip(&mut self.first) {
                    let decay = p.shape().len() >= 2;
                    for ((w, &g), v) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                        let g = if decay { g + wd * *w } else { g };
                        *v = mu * *v + g;
                        *w -= lr_t * *v;
                    }
                }
            }
            OptimizerKind::AdamW => {
                let b2 = T::from_f64_lossy(0.999);
                let eps = T::from_f64_lossy(1e-8);
                let c1 = one - mu.powi(self.steps.min(i32::MAX as u64) as i32);
                let c2 = one - b2.powi(self.steps.min(i32::MAX as u64) as i32);
                for ((((_, p), g), m), v) in model.store.params_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    let decay = if p.shape().len() >= 2 { one - lr_t * wd } else { one };
                    for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = mu * *m + (one - mu) * g;
                        *v = b2 * *v + (one - b2) * g * g;
                        let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                        *w = *w * decay - lr_t * update;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy of `logits [b, k]` against `labels` (no tape).
pub fn cross_entropy_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(logits.shape(), logits.data().to_vec())?;
    let l = tape.cross_entropy(x, labels)?;
    Ok(tape.value(l)[0].to_f64_lossy())
}

fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> (Vec<usize>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    (idx, rng)
}

fn augment(img: &mut [f64], c: usize, h: usize, w: usize, flip: bool, shift: (i64, i64)) {
    let src = img.to_vec();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sx = if flip { w - 1 - x } else { x } as i64 - shift.0;
                let sy = y as i64 - shift.1;
                let v = if (0..w as i64).contains(&sx) && (0..h as i64).contains(&sy) {
                    src[(ch * h + sy as usize) * w + sx as usize]
                } else {
                    0.0
                };
                img[(ch * h + y) * w + x] = v;
            }
        }
    }
}

/// One pass over `data` in a seed- and epoch-determined order. Batches are
/// assembled by a producer thread with at most one batch in flight.
pub fn train_epoch<T: Scalar>(
    model: &mut Model<T>,
    optimizer: &mut Optimizer<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochMetrics> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(contract("training data is empty"));
    }
    let (order, mut rng) = shuffled_indices(data.len(), cfg.seed, epoch);
    let batches: Vec<Vec<usize>> = order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect();
    let per_epoch = batches.len();
    let total_steps = per_epoch * cfg.epochs;
    let (c, h, w) = (data.channels, data.height, data.width);

    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut seen = 0usize;
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<(Tensor<T>, Vec<usize>)>>(0);
        scope.spawn(move || {
            for idx in &batches {
                let mut aug = |_: usize, img: &mut [f64]| {
                    let flip = cfg.flip && rng.gen_bool(0.5);
                    let p = cfg.crop_padding as i64;
                    let shift = if p > 0 { (rng.gen_range(-p..=p), rng.gen_range(-p..=p)) } else { (0, 0) };
                    if flip || shift != (0, 0) {
                        augment(img, c, h, w, flip, shift);
                    }
                };
                if tx.send(data.batch_augmented(idx, &mut aug)).is_err() {
                    return;
                }
            }
        });
        for (i, batch) in rx.iter().enumerate() {
            let (x, labels) = batch?;
            let lr = cfg.lr_at(epoch * per_epoch + i, total_steps);
            let (loss, hits) = train_step(model, optimizer, &x, &labels, lr)?;
            loss_sum += loss * labels.len() as f64;
            correct += hits;
            seen += labels.len();
        }
        Ok(())
    })?;
    Ok(EpochMetrics { epoch, train_loss: loss_sum / seen as f64, train_acc: correct as f64 / seen as f64 })
}

/// Forward, backward and update on one batch. Returns the loss and the number
/// of correct predictions.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    optimizer: &mut Optimizer<T>,
    x: &Tensor<T>,
    labels: &[usize],
    lr: f64,
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let (grads, updates, loss, hits) = {
        let mut ctx = Forward::new(&model.store, &mut tape, true);
        let xv = tape.constant(x.shape(), x.data().to_vec())?;
        let logits = model.forward(&mut tape, &mut ctx, xv)?;
        let loss_var = tape.cross_entropy(logits, labels)?;
        let loss = tape.value(loss_var)[0];
        if !loss.is_finite() {
            let culprit = tape
                .first_non_finite()
                .map(|(v, label)| format!("first non-finite tensor is node {} ({label})", v.index()))
                .unwrap_or_else(|| "no intermediate tensor is non-finite".into());
            return Err(Error::NonFinite(format!("training loss; {culprit}")));
        }
        let k = tape.shape(logits)[1];
        let hits = tape.value(logits).chunks(k).zip(labels).filter(|(row, &l)| argmax(row) == l).count();
        let g = tape.backward(loss_var)?;
        let grads: Vec<Vec<T>> = ctx.param_vars().iter().map(|&v| g.get_or_zeros(&tape, v)).collect();
        if let Some((i, _)) = grads.iter().enumerate().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            let name = model.store.params().nth(i).map(|(n, _)| n.to_string()).unwrap_or_default();
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        (grads, ctx.take_bn_updates(), loss.to_f64_lossy(), hits)
    };
    optimizer.step(model, &grads, lr);
    model.commit_bn_updates(updates);
    Ok((loss, hits))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1_accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub per_class_accuracy: Vec<f64>,
}

impl EvalReport {
    pub fn from_predictions(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(contract("cannot evaluate on empty data"));
        }
        if predictions.len() != labels.len() {
            return Err(contract("prediction and label counts differ"));
        }
        let mut confusion = vec![vec![0u64; classes]; classes];
        for (&p, &l) in predictions.iter().zip(labels) {
            if p >= classes || l >= classes {
                return Err(contract(format!("class index out of range for {classes} classes")));
            }
            confusion[l][p] += 1;
        }
        let trace: u64 = (0..classes).map(|i| confusion[i][i]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: u64 = row.iter().sum();
                if n == 0 {
                    0.0
                } else {
                    row[i] as f64 / n as f64
                }
            })
            .collect();
        Ok(Self { top1_accuracy: trace as f64 / labels.len() as f64, confusion, per_class_accuracy })
    }

    pub fn confusion_csv(&self) -> String {
        let k = self.confusion.len();
        let mut s = String::from("true\\pred");
        for j in 0..k {
            s.push_str(&format!(",{j}"));
        }
        s.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            s.push_str(&i.to_string());
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Predicted classes for every sample, in dataset order.
pub fn predict_all<T: Scalar>(model: &Model<T>, data: &Dataset, batch_size: usize) -> Result<Vec<usize>> {
    let k = model.config.num_classes;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = data.batch::<T>(chunk)?;
        let logits = model.predict(&x, None)?;
        out.extend(logits.data().chunks(k).map(argmax));
    }
    Ok(out)
}

pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset, batch_size: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(contract("cannot evaluate on empty data"));
    }
    let preds = predict_all(model, data, batch_size)?;
    EvalReport::from_predictions(&preds, &data.labels(), model.config.num_classes)
}

/// Append-only per-epoch CSV log.
pub struct MetricsLog {
    file: std::fs::File,
}

impl MetricsLog {
    pub const HEADER: &'static str = "epoch,train_loss,train_acc,eval_acc,wall_seconds";

    /// Opens `path` for appending; a new file starts with a seed comment and
    /// the column header.
    pub fn open(path: &Path, seed: u64) -> Result<Self> {
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(file, "# seed = {seed}")?;
            writeln!(file, "{}", Self::HEADER)?;
        }
        Ok(Self { file })
    }

    pub fn append(&mut self, m: &EpochMetrics, eval_acc: f64, wall_seconds: f64) -> Result<()> {
        writeln!(self.file, "{},{},{},{},{:.3}", m.epoch, m.train_loss, m.train_acc, eval_acc, wall_seconds)?;
        Ok(())
    }
}
