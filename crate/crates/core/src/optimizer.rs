//! LAMB with per-tensor trust ratios, a linear warmup/decay schedule and
//! gradient accumulation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, ParameterSet};
use crate::numeric::{DType, Tensor};

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("gradient of {name} is not finite")]
    NonFiniteGradient { name: String },
    #[error("{name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("invalid optimizer setting: {0}")]
    InvalidConfig(String),
}

impl From<ModelError> for OptimizerError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::ShapeMismatch { name, expected, found } => Self::ShapeMismatch { name, expected, found },
            ModelError::MissingTensor(n) => Self::MissingTensor(n),
            other => Self::InvalidConfig(other.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub trust_min: f64,
    pub trust_max: f64,
}

impl Default for LambConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-6,
            weight_decay: 0.01,
            trust_min: 0.0,
            trust_max: 10.0,
        }
    }
}

impl LambConfig {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        let unit = |name: &str, x: f64| {
            if (0.0..1.0).contains(&x) {
                Ok(())
            } else {
                Err(OptimizerError::InvalidConfig(format!("{name} {x} outside [0, 1)")))
            }
        };
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)?;
        if !(self.epsilon >= 0.0 && self.weight_decay >= 0.0 && self.epsilon.is_finite() && self.weight_decay.is_finite()) {
            return Err(OptimizerError::InvalidConfig("epsilon and weight_decay must be finite and non-negative".into()));
        }
        if !(0.0 <= self.trust_min && self.trust_min <= self.trust_max && self.trust_max.is_finite()) {
            return Err(OptimizerError::InvalidConfig(format!(
                "trust clip range [{}, {}]",
                self.trust_min, self.trust_max
            )));
        }
        Ok(())
    }
}

/// Whether weight decay is skipped for a tensor: biases and layer-norm
/// gains/offsets.
pub fn is_decay_excluded(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    last.ends_with("bias") || last == "gamma" || last == "beta"
}

/// `‖w‖/‖r‖` clipped to `[trust_min, trust_max]`; 1 when either norm is 0.
pub fn trust_ratio(w_norm: f64, r_norm: f64, cfg: &LambConfig) -> f64 {
    if w_norm > 0.0 && r_norm > 0.0 {
        (w_norm / r_norm).clamp(cfg.trust_min, cfg.trust_max)
    } else {
        1.0
    }
}

/// First and second moments per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct LambState {
    pub config: LambConfig,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: ParameterSet,
    pub v: ParameterSet,
}

impl LambState {
    pub fn new(params: &ParameterSet, config: LambConfig) -> Self {
        let dtype = params.tensors().next().map_or(DType::F32, Tensor::dtype);
        Self {
            config,
            step: 0,
            m: params.zeros_like(dtype),
            v: params.zeros_like(dtype),
        }
    }
}

/// One LAMB update of every tensor in `params`. All gradients are checked
/// before anything is modified.
pub fn lamb_step(
    params: &mut ParameterSet,
    grads: &ParameterSet,
    state: &mut LambState,
    lr: f64,
) -> Result<(), OptimizerError> {
    state.config.validate()?;
    params.check_same_layout(grads)?;
    params.check_same_layout(&state.m)?;
    params.check_same_layout(&state.v)?;
    for (name, g) in grads.iter() {
        if g.data().iter().any(|x| !x.is_finite()) {
            return Err(OptimizerError::NonFiniteGradient { name: name.to_owned() });
        }
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(OptimizerError::InvalidConfig(format!("learning rate {lr}")));
    }
    let cfg = state.config.clone();
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
    for (name, w) in params.iter_mut() {
        let g = grads.get(name).expect("layout checked");
        let m = state.m.get_mut(name).expect("layout checked");
        let dtype = w.dtype();
        let decay = if is_decay_excluded(name) { 0.0 } else { cfg.weight_decay };
        let mut r = Vec::with_capacity(w.numel());
        for (i, &gi) in g.data().iter().enumerate() {
            let mi = dtype.round(cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * gi);
            m.data_mut()[i] = mi;
            r.push(mi);
        }
        let v = state.v.get_mut(name).expect("layout checked");
        for (i, &gi) in g.data().iter().enumerate() {
            let vi = dtype.round(cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * gi * gi);
            v.data_mut()[i] = vi;
            r[i] = (r[i] / c1) / ((vi / c2).sqrt() + cfg.epsilon) + decay * w.data()[i];
        }
        let w_norm = w.l2_norm();
        let r_norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = lr * trust_ratio(w_norm, r_norm, &cfg);
        for (wi, ri) in w.data_mut().iter_mut().zip(&r) {
            *wi = dtype.round(*wi - scale * ri);
        }
        if w.data().iter().any(|x| !x.is_finite()) {
            return Err(OptimizerError::NonFiniteGradient { name: name.to_owned() });
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `peak_lr`, then linear decay to 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(peak_lr: f64, warmup_ratio: f64, total_steps: u64) -> Result<Self, OptimizerError> {
        let s = Self {
            peak_lr,
            warmup_ratio,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), OptimizerError> {
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(OptimizerError::InvalidConfig(format!("peak_lr {}", self.peak_lr)));
        }
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return Err(OptimizerError::InvalidConfig(format!(
                "warmup_ratio {} outside (0, 1)",
                self.warmup_ratio
            )));
        }
        if self.total_steps == 0 {
            return Err(OptimizerError::InvalidConfig("total_steps must be at least 1".into()));
        }
        Ok(())
    }

    /// `⌈warmup_ratio · total_steps⌉`, ignoring representation error in
    /// the product.
    pub fn warmup_steps(&self) -> u64 {
        let x = self.warmup_ratio * self.total_steps as f64;
        let nearest = x.round();
        if (x - nearest).abs() <= 1e-9 * x.max(1.0) {
            nearest as u64
        } else {
            x.ceil() as u64
        }
    }

    pub fn lr_at(&self, step: u64) -> Result<f64, OptimizerError> {
        lr_at(self, step)
    }
}

pub fn lr_at(s: &Schedule, step: u64) -> Result<f64, OptimizerError> {
    let total = s.total_steps;
    if step > total {
        return Err(OptimizerError::StepOutOfRange { step, total });
    }
    let warmup = s.warmup_steps();
    Ok(if step == total {
        0.0
    } else if step <= warmup {
        s.peak_lr * step as f64 / warmup as f64
    } else {
        s.peak_lr * (total - step) as f64 / (total - warmup) as f64
    })
}

/// Adds `micro / k_micro` into `acc`, so that `k_micro` calls leave the
/// mean of the micro-batch gradients.
pub fn accumulate(acc: &mut ParameterSet, micro: &ParameterSet, k_micro: usize) -> Result<(), OptimizerError> {
    if k_micro == 0 {
        return Err(OptimizerError::InvalidConfig("k_micro must be at least 1".into()));
    }
    acc.check_same_layout(micro)?;
    let k = k_micro as f64;
    for (name, a) in acc.iter_mut() {
        let g = micro.get(name).expect("layout checked");
        let dtype = a.dtype();
        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
            *x = dtype.round(*x + y / k);
        }
    }
    Ok(())
}

/// Running mean of micro-batch gradients, held in `f64` and rounded to the
/// parameter dtype once at the end.
#[derive(Clone, Debug)]
pub struct GradAccumulator {
    acc: ParameterSet,
    k_micro: usize,
    added: usize,
}

impl GradAccumulator {
    pub fn new(layout: &ParameterSet, k_micro: usize) -> Self {
        Self {
            acc: layout.zeros_like(DType::F64),
            k_micro,
            added: 0,
        }
    }

    pub fn add(&mut self, micro: &ParameterSet) -> Result<(), OptimizerError> {
        if self.added == self.k_micro {
            return Err(OptimizerError::InvalidConfig(format!(
                "more than {} micro-batches accumulated",
                self.k_micro
            )));
        }
        accumulate(&mut self.acc, micro, self.k_micro)?;
        self.added += 1;
        Ok(())
    }

    pub fn added(&self) -> usize {
        self.added
    }

    /// The mean gradient, in `dtype`.
    pub fn finish(self, dtype: DType) -> Result<ParameterSet, OptimizerError> {
        if self.added != self.k_micro {
            return Err(OptimizerError::InvalidConfig(format!(
                "{} of {} micro-batches accumulated",
                self.added, self.k_micro
            )));
        }
        let mut out = self.acc;
        for (_, t) in out.iter_mut() {
            *t = t.to_dtype(dtype);
        }
        Ok(out)
    }
}
