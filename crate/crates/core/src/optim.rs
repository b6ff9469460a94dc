//! Optimizers and learning-rate schedules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One trainable tensor and its gradient, as handed to an optimizer step.
pub struct ParamGrad<'a> {
    pub name: &'a str,
    pub value: &'a mut Tensor,
    pub grad: &'a Tensor,
}

fn check_grads(items: &[ParamGrad<'_>]) -> Result<()> {
    for it in items {
        if it.grad.shape() != it.value.shape() {
            return Err(Error::dim(
                "optimizer",
                format!("{}: grad {:?} vs param {:?}", it.name, it.grad.shape(), it.value.shape()),
            ));
        }
        if let Some(i) = it.grad.first_non_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of {} at flat index {i} is {}",
                it.name,
                it.grad.data()[i]
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment state: first and second moments per parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        let ok = |b: f64| b > 0.0 && b < 1.0;
        if !ok(cfg.beta1) || !ok(cfg.beta2) || cfg.eps <= 0.0 {
            return Err(Error::Config(format!("invalid Adam constants {cfg:?}")));
        }
        Ok(Adam {
            cfg,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update. Nothing is modified if any
    /// gradient is non-finite.
    pub fn step(&mut self, lr: f64, mut items: Vec<ParamGrad<'_>>) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        check_grads(&items)?;
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for it in items.iter_mut() {
            let shape = it.value.shape().to_vec();
            let m = self
                .first
                .entry(it.name.to_string())
                .or_insert_with(|| Tensor::zeros(&shape));
            let v = self
                .second
                .entry(it.name.to_string())
                .or_insert_with(|| Tensor::zeros(&shape));
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, (p, &g)) in it.value.data_mut().iter_mut().zip(it.grad.data()).enumerate() {
                md[i] = beta1 * md[i] + (1.0 - beta1) * g;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * g * g;
                let mhat = md[i] / c1;
                let vhat = vd[i] / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Plain stochastic gradient descent.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    step: u64,
}

impl Sgd {
    pub fn step(&mut self, lr: f64, mut items: Vec<ParamGrad<'_>>) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        check_grads(&items)?;
        self.step += 1;
        for it in items.iter_mut() {
            for (p, g) in it.value.data_mut().iter_mut().zip(it.grad.data()) {
                *p -= lr * g;
            }
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    Adam(Adam),
    Sgd(Sgd),
}

impl Optimizer {
    pub fn step(&mut self, lr: f64, items: Vec<ParamGrad<'_>>) -> Result<()> {
        match self {
            Optimizer::Adam(a) => a.step(lr, items),
            Optimizer::Sgd(s) => s.step(lr, items),
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<'a>(grads: impl IntoIterator<Item = &'a mut Tensor>, max_norm: f64) -> f64 {
    let mut grads: Vec<&mut Tensor> = grads.into_iter().collect();
    let norm = grads.iter().map(|g| g.norm_sq()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= k;
            }
        }
    }
    norm
}

/// Per-epoch learning-rate schedule. Epochs are 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant { initial: f64 },
    /// Constant through `start_decay_epoch`, then multiplied by `decay`
    /// every epoch.
    DecayAfter {
        initial: f64,
        start_decay_epoch: usize,
        decay: f64,
    },
    /// Multiplied by `decay` once after each listed epoch.
    Milestones {
        initial: f64,
        epochs: Vec<usize>,
        decay: f64,
    },
}

impl LrSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        match self {
            LrSchedule::Constant { initial } => *initial,
            LrSchedule::DecayAfter {
                initial,
                start_decay_epoch,
                decay,
            } => sgd_lr(*initial, epoch, *start_decay_epoch, *decay),
            LrSchedule::Milestones {
                initial,
                epochs,
                decay,
            } => {
                let passed = epochs.iter().filter(|&&e| epoch > e).count();
                initial * decay.powi(passed as i32)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (initial, decay) = match self {
            LrSchedule::Constant { initial } => (*initial, 1.0),
            LrSchedule::DecayAfter { initial, decay, .. } => (*initial, *decay),
            LrSchedule::Milestones { initial, decay, .. } => (*initial, *decay),
        };
        if !(initial > 0.0) || !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::Config(format!("invalid learning-rate schedule {self:?}")));
        }
        Ok(())
    }
}

/// Step decay: `initial` up to and including `start_decay_epoch`, then
/// `initial * decay^(epoch - start_decay_epoch)`.
pub fn sgd_lr(initial: f64, epoch: usize, start_decay_epoch: usize, decay: f64) -> f64 {
    if epoch <= start_decay_epoch {
        initial
    } else {
        initial * decay.powi((epoch - start_decay_epoch) as i32)
    }
}
