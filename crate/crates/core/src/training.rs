//! AdamW, the warmup + cosine schedule, and the shared training loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Graph;
use crate::backbone::ForwardPass;
use crate::data::PatchSet;
use crate::scalar::Scalar;
use crate::search_space::SubnetConfig;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss {loss} at step {step} with config {config}")]
    NonFinite { step: usize, loss: f64, config: String },
    #[error("dataset split is empty")]
    EmptyDataset,
    #[error("invalid optimizer settings: {0}")]
    InvalidHyper(String),
}

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimHyper {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    /// Upper bound; a smaller training set uses its own size.
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Also decay biases, LayerNorm parameters and VPT tokens.
    pub decay_all: bool,
}

impl Default for OptimHyper {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            weight_decay: 1e-3,
            warmup_epochs: 10,
            epochs: 100,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_all: false,
        }
    }
}

impl OptimHyper {
    pub fn supernet() -> Self {
        Self {
            base_lr: 5e-4,
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidHyper(m.to_string()));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if self.warmup_epochs > self.epochs {
            return bad("warmup_epochs must not exceed epochs");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        Ok(())
    }
}

/// Per-step learning rate: linear ramp from 0 over the warmup steps, then
/// half-cosine decay to a floor of `1e-6·base`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(hyper: &OptimHyper, steps_per_epoch: usize) -> Self {
        Self {
            base_lr: hyper.base_lr,
            warmup_steps: hyper.warmup_epochs * steps_per_epoch,
            total_steps: hyper.epochs * steps_per_epoch,
        }
    }

    /// `None` when `step` is outside `0..total_steps`.
    pub fn lr_at(&self, step: usize) -> Option<f64> {
        if step >= self.total_steps {
            return None;
        }
        if step < self.warmup_steps {
            return Some(self.base_lr * step as f64 / self.warmup_steps as f64);
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        let cosine = self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        Some(cosine.max(1e-6 * self.base_lr))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Decay applied directly to the weights.
    #[default]
    AdamW,
    /// Decay folded into the gradient (L2 penalty).
    Adam,
}

struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    /// Updates seen by each element, for bias correction.
    steps: Vec<u32>,
}

/// Adam-family optimizer with moments stored at full tensor shape, keyed by
/// tensor name, so every subnet slice of a bank shares the same state.
pub struct Optimizer<T> {
    kind: OptimizerKind,
    hyper: OptimHyper,
    state: BTreeMap<String, Moments<T>>,
}

/// Whether decay applies to `name` by default: weight matrices only.
pub fn decays_by_default(name: &str) -> bool {
    name.rsplit('.').next().is_some_and(|last| last.starts_with('W'))
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, hyper: OptimHyper) -> Self {
        Self {
            kind,
            hyper,
            state: BTreeMap::new(),
        }
    }

    /// Updates the top-left `rows × cols` block of `param` with `grad`.
    /// Elements outside the block, and their moments, are left untouched.
    pub fn update(
        &mut self,
        name: &str,
        param: &mut Tensor<T>,
        grad: &[T],
        region: (usize, usize),
        lr: f64,
    ) -> Result<(), TensorError> {
        let (rows, cols) = region;
        let (pr, pc) = param.matrix_dims();
        if rows > pr || cols > pc || grad.len() != rows * cols {
            return Err(TensorError::ShapeMismatch {
                op: "optimizer update",
                left: param.shape().to_vec(),
                right: vec![rows, cols],
            });
        }
        let numel = param.numel();
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![T::zero(); numel],
            v: vec![T::zero(); numel],
            steps: vec![0; numel],
        });
        let h = &self.hyper;
        let wd = if h.decay_all || decays_by_default(name) {
            T::lit(h.weight_decay)
        } else {
            T::zero()
        };
        let (b1, b2, eps, lr) = (T::lit(h.beta1), T::lit(h.beta2), T::lit(h.eps), T::lit(lr));
        let one = T::one();
        let data = param.data_mut();
        for r in 0..rows {
            for c in 0..cols {
                let i = r * pc + c;
                let mut g = grad[r * cols + c];
                if self.kind == OptimizerKind::Adam {
                    g += wd * data[i];
                } else {
                    data[i] -= lr * wd * data[i];
                }
                st.steps[i] += 1;
                let t = st.steps[i] as i32;
                st.m[i] = b1 * st.m[i] + (one - b1) * g;
                st.v[i] = b2 * st.v[i] + (one - b2) * g * g;
                let m_hat = st.m[i] / (one - b1.powi(t));
                let v_hat = st.v[i] / (one - b2.powi(t));
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// A model whose trainable tensors are addressed by name.
pub trait Trainable<T: Scalar> {
    fn forward(&self, g: &mut Graph<T>, config: &SubnetConfig, patches: &Tensor<T>) -> Result<ForwardPass, TensorError>;

    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>>;
}

/// One line of a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate at the last step of the epoch.
    pub lr: f64,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_acc: Option<f64>,
    /// Configs sampled at each step, when they vary.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub configs: Vec<String>,
}

/// Mini-batch training with a config drawn by `sample` at every step.
///
/// Each epoch visits the training set once in a fresh random order. The
/// callback runs after every epoch and may fill in `val_acc`.
pub fn train_loop<T, N, R>(
    net: &mut N,
    train: &PatchSet<T>,
    hyper: &OptimHyper,
    kind: OptimizerKind,
    rng: &mut R,
    mut sample: impl FnMut(&mut R) -> SubnetConfig,
    record_configs: bool,
    mut on_epoch: impl FnMut(&N, &mut EpochRecord),
) -> Result<Vec<EpochRecord>, TrainError>
where
    T: Scalar,
    N: Trainable<T>,
    R: Rng + ?Sized,
{
    hyper.check()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let batch = hyper.batch_size.min(train.len());
    let steps_per_epoch = train.len().div_ceil(batch);
    let schedule = Schedule::new(hyper, steps_per_epoch);
    let mut opt = Optimizer::new(kind, hyper.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(hyper.epochs);
    let mut step = 0;
    for epoch in 0..hyper.epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        let mut configs = Vec::new();
        for chunk in order.chunks(batch) {
            let config = sample(rng);
            let (patches, labels) = train.batch(chunk);
            let mut g = Graph::new();
            let pass = net.forward(&mut g, &config, &patches)?;
            let loss = g.cross_entropy(pass.logits, &labels)?;
            let value = g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(TrainError::NonFinite {
                    step,
                    loss: value,
                    config: config.key(),
                });
            }
            g.backward(loss)?;
            lr = schedule.lr_at(step).expect("step within schedule");
            for b in &pass.bindings {
                let Some(grad) = g.grad(b.var) else { continue };
                let shape = g.shape(b.var);
                let region = if shape.len() == 1 { (1, shape[0]) } else { (shape[0], shape[1]) };
                let param = net.tensor_mut(&b.name).ok_or_else(|| TensorError::InvalidShape {
                    op: "train step",
                    shape: vec![],
                    reason: format!("no trainable tensor named {}", b.name),
                })?;
                opt.update(&b.name, param, grad, region, lr)?;
            }
            loss_sum += value * chunk.len() as f64;
            if record_configs {
                configs.push(config.key());
            }
            step += 1;
        }
        let mut record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            val_acc: None,
            configs,
        };
        on_epoch(net, &mut record);
        log::debug!("epoch {epoch}: loss {:.4} lr {:.2e}", record.train_loss, record.lr);
        log.push(record);
    }
    Ok(log)
}

/// Top-1 accuracy of `config` over `data`; no gradients are recorded.
pub fn evaluate<T: Scalar, N: Trainable<T>>(net: &N, config: &SubnetConfig, data: &PatchSet<T>) -> Result<f64, TrainError> {
    let preds = predict(net, config, data)?;
    let correct = preds.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.len() as f64)
}

/// Arg-max class per sample (lowest index on ties).
pub fn predict<T: Scalar, N: Trainable<T>>(net: &N, config: &SubnetConfig, data: &PatchSet<T>) -> Result<Vec<usize>, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut preds = Vec::with_capacity(data.len());
    for chunk in indices.chunks(256) {
        let (patches, _) = data.batch(chunk);
        let mut g = Graph::inference();
        let pass = net.forward(&mut g, config, &patches)?;
        let logits = g.value(pass.logits);
        let classes = logits.shape()[1];
        for row in logits.data().chunks(classes) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            preds.push(best);
        }
    }
    Ok(preds)
}
