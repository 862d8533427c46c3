//! AdamW with decoupled weight decay, a warmup + cosine-annealing
//! learning-rate schedule, and global-norm gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::grads::GradientSet;

/// Maximum global gradient norm applied before every optimizer step.
pub const DEFAULT_MAX_GRAD_NORM: f64 = 0.5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient (global norm {norm})")]
    NonFiniteGradient { norm: f64 },
    #[error("step {step} outside schedule of {total_steps} steps")]
    StepOutOfRange { step: u64, total_steps: u64 },
    #[error("shape mismatch for {name}: expected {expected}, got {got}")]
    ShapeMismatch { name: String, expected: usize, got: usize },
}

fn default_lr0() -> f64 {
    1e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.01
}

/// AdamW hyperparameters. Learning rate and epsilon follow the training
/// recipe; the betas and decay are the usual defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWHyper {
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        Self {
            lr0: default_lr0(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_weight_decay(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-parameter first/second moments plus the shared step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub hyper: AdamWHyper,
    pub step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamWState {
    pub fn new(hyper: AdamWHyper) -> Self {
        Self { hyper, step: 0, moments: BTreeMap::new() }
    }

    /// Moment tensors for checkpointing, in name order.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &[f64], &[f64])> {
        self.moments.iter().map(|(n, mo)| (n.as_str(), mo.m.as_slice(), mo.v.as_slice()))
    }

    /// Restores moment tensors read back from a checkpoint.
    pub fn restore_moments(&mut self, name: &str, m: Vec<f64>, v: Vec<f64>) {
        assert_eq!(m.len(), v.len(), "moment shapes differ for {name}");
        self.moments.insert(name.to_string(), Moments { m, v });
    }
}

/// A mutable view of one named parameter tensor for the optimizer.
pub struct ParamTensor<'a> {
    pub name: &'a str,
    pub values: &'a mut [f64],
    /// Whether decoupled weight decay applies to this tensor.
    pub decayed: bool,
}

/// Rescales `grads` in place so the global l2 norm does not exceed
/// `max_norm`; gradients under the threshold are untouched. Returns the
/// pre-clip norm.
pub fn clip_global_norm(grads: &mut GradientSet, max_norm: f64) -> Result<f64, OptimError> {
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(OptimError::NonFiniteGradient { norm });
    }
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    Ok(norm)
}

/// Warmup + cosine-annealing schedule over a fixed number of steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub total_steps: u64,
    /// Fraction of training spent in linear warmup.
    pub warmup_fraction: f64,
    pub min_lr: f64,
    /// Peak learning rate reached at the end of warmup.
    pub base_lr: f64,
}

impl ScheduleConfig {
    pub fn new(total_steps: u64, base_lr: f64) -> Self {
        Self { total_steps, warmup_fraction: 0.10, min_lr: 0.0, base_lr }
    }

    /// Number of warmup steps; always at least one.
    pub fn warmup_steps(&self) -> u64 {
        ((self.warmup_fraction * self.total_steps as f64).round() as u64)
            .clamp(1, self.total_steps)
    }
}

/// Learning rate at `step`: linear ramp to `base_lr` over the warmup,
/// then a half cosine down to `min_lr` at `total_steps`.
pub fn lr_at(step: u64, cfg: &ScheduleConfig) -> Result<f64, OptimError> {
    if step > cfg.total_steps {
        return Err(OptimError::StepOutOfRange { step, total_steps: cfg.total_steps });
    }
    let warmup = cfg.warmup_steps();
    if step < warmup {
        return Ok(cfg.base_lr * (step + 1) as f64 / warmup as f64);
    }
    let decay_len = cfg.total_steps - warmup;
    if decay_len == 0 {
        return Ok(cfg.min_lr);
    }
    let progress = (step - warmup) as f64 / decay_len as f64;
    Ok(cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// One AdamW update over every tensor, with bias correction and
/// decoupled weight decay (`theta -= lr * wd * theta` before the adaptive
/// update). Gradients are expected already clipped; tensors missing from
/// `grads` are treated as zero-gradient.
pub fn adamw_step<'a>(
    tensors: impl IntoIterator<Item = ParamTensor<'a>>,
    grads: &GradientSet,
    state: &mut AdamWState,
    lr: f64,
) -> Result<(), OptimError> {
    state.step += 1;
    let t = state.step;
    let AdamWHyper { beta1, beta2, eps, weight_decay, .. } = state.hyper;
    let bias1 = 1.0 - beta1.powi(t as i32);
    let bias2 = 1.0 - beta2.powi(t as i32);

    for tensor in tensors {
        let n = tensor.values.len();
        let grad = match grads.get(tensor.name) {
            Some(g) if g.len() != n => {
                return Err(OptimError::ShapeMismatch {
                    name: tensor.name.to_string(),
                    expected: n,
                    got: g.len(),
                });
            }
            other => other,
        };
        let moments = state
            .moments
            .entry(tensor.name.to_string())
            .or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n] });
        if moments.m.len() != n {
            return Err(OptimError::ShapeMismatch {
                name: tensor.name.to_string(),
                expected: n,
                got: moments.m.len(),
            });
        }

        let wd = if tensor.decayed { weight_decay } else { 0.0 };
        for i in 0..n {
            let g = grad.map_or(0.0, |g| g[i]);
            let theta = &mut tensor.values[i];
            *theta -= lr * wd * *theta;
            moments.m[i] = beta1 * moments.m[i] + (1.0 - beta1) * g;
            moments.v[i] = beta2 * moments.v[i] + (1.0 - beta2) * g * g;
            let m_hat = moments.m[i] / bias1;
            let v_hat = moments.v[i] / bias2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
