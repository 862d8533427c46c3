//! Composite training objective.
//!
//! Three components over a batch of question/answer pairs:
//!
//! * contrastive: InfoNCE over the positive and five incorrect answers,
//!   similarities `q . c / tau` with a trainable temperature;
//! * dynamic relevance: log-likelihood pushing the positive's sigmoid
//!   score toward 1 and one sampled negative's toward 0;
//! * logit-variance regularization: negative standard deviation of the
//!   positive and negative pre-sigmoid logits.
//!
//! The total is the weighted sum `alpha L_cons + beta L_dyn + gamma L_reg`
//! with default weights (0.4, 0.4, 0.2). Every operation returns its exact
//! gradients next to the loss value.

use serde::{Deserialize, Serialize};

use crate::encoder::Embedding;
use crate::grads::GradientSet;
use crate::math::{dot, log_sum_exp};

/// Number of incorrect answers entering the contrastive sum.
pub const CONTRASTIVE_NEGATIVES: usize = 5;

/// Epsilon inside the dynamic-loss logarithms. Keeps the loss finite at
/// score 0/1 while leaving interior values untouched well past 1e-12
/// (at r = 0.5 the shift is 4e-13).
pub const DYNAMIC_EPS: f64 = 1e-13;

/// Standard deviations below this contribute zero gradient.
const STD_GUARD: f64 = 1e-8;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("item {item} has {got} contrastive negatives, expected {CONTRASTIVE_NEGATIVES}")]
    NegativeCountMismatch { item: usize, got: usize },
    #[error("score {value} at item {item} is outside [0, 1]")]
    ScoreOutOfRange { item: usize, value: f64 },
}

fn default_alpha() -> f64 {
    0.4
}
fn default_beta() -> f64 {
    0.4
}
fn default_gamma() -> f64 {
    0.2
}

/// Balancing weights of the three loss components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: default_alpha(), beta: default_beta(), gamma: default_gamma() }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !w.is_finite() || w < 0.0 {
                return Err(format!("loss weight {name} must be finite and nonnegative, got {w}"));
            }
        }
        Ok(())
    }
}

/// Trainable contrastive temperature, parameterized as `tau = exp(log_tau)`
/// so positivity holds by construction. Clamped to `[1e-3, 10]` after each
/// optimizer update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    pub log_tau: f64,
}

impl Temperature {
    pub const TAU_MIN: f64 = 1e-3;
    pub const TAU_MAX: f64 = 10.0;
    pub const TAU_INIT: f64 = 0.07;

    pub fn from_tau(tau: f64) -> Self {
        Self { log_tau: tau.ln() }
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn clamp(&mut self) {
        self.log_tau = self.log_tau.clamp(Self::TAU_MIN.ln(), Self::TAU_MAX.ln());
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self::from_tau(Self::TAU_INIT)
    }
}

/// Per-item scores and embeddings a trainer assembles for one batch.
/// Exactly one positive and one sampled negative score per item; the
/// embedding block feeds the contrastive term.
#[derive(Debug, Clone)]
pub struct BatchScores {
    pub q_embs: Vec<Embedding>,
    pub pos_embs: Vec<Embedding>,
    /// Exactly [`CONTRASTIVE_NEGATIVES`] per item.
    pub neg_embs: Vec<Vec<Embedding>>,
    pub pos_logits: Vec<f64>,
    pub pos_scores: Vec<f64>,
    pub neg_logits: Vec<f64>,
    pub neg_scores: Vec<f64>,
}

impl BatchScores {
    pub fn batch_size(&self) -> usize {
        self.q_embs.len()
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let b = self.batch_size();
        for len in [
            self.pos_embs.len(),
            self.neg_embs.len(),
            self.pos_logits.len(),
            self.pos_scores.len(),
            self.neg_logits.len(),
            self.neg_scores.len(),
        ] {
            if len != b {
                return Err(LossError::DimensionMismatch { expected: b, got: len });
            }
        }
        for (item, negs) in self.neg_embs.iter().enumerate() {
            if negs.len() != CONTRASTIVE_NEGATIVES {
                return Err(LossError::NegativeCountMismatch { item, got: negs.len() });
            }
        }
        for (item, scores) in [&self.pos_scores, &self.neg_scores].into_iter().enumerate() {
            for (i, &r) in scores.iter().enumerate() {
                if !(0.0..=1.0).contains(&r) || r.is_nan() {
                    return Err(LossError::ScoreOutOfRange {
                        item: item * self.batch_size() + i,
                        value: r,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Gradients of the contrastive loss, laid out like its inputs.
#[derive(Debug, Clone)]
pub struct ContrastiveGrads {
    pub d_q: Vec<Vec<f64>>,
    pub d_pos: Vec<Vec<f64>>,
    pub d_neg: Vec<Vec<Vec<f64>>>,
    pub d_log_tau: f64,
}

/// InfoNCE over each question, its correct answer and five incorrect
/// answers, `sim(a, b) = a . b / tau`, stabilized via log-sum-exp.
pub fn contrastive_loss(
    q_embs: &[Embedding],
    pos_embs: &[Embedding],
    neg_embs: &[Vec<Embedding>],
    temp: &Temperature,
) -> Result<(f64, ContrastiveGrads), LossError> {
    let batch = q_embs.len();
    if pos_embs.len() != batch {
        return Err(LossError::DimensionMismatch { expected: batch, got: pos_embs.len() });
    }
    if neg_embs.len() != batch {
        return Err(LossError::DimensionMismatch { expected: batch, got: neg_embs.len() });
    }
    let dim = q_embs.first().map_or(0, Embedding::dim);
    let tau = temp.tau();
    let inv_batch = 1.0 / batch as f64;

    let mut loss = 0.0;
    let mut grads = ContrastiveGrads {
        d_q: Vec::with_capacity(batch),
        d_pos: Vec::with_capacity(batch),
        d_neg: Vec::with_capacity(batch),
        d_log_tau: 0.0,
    };

    for (item, ((q, pos), negs)) in q_embs.iter().zip(pos_embs).zip(neg_embs).enumerate() {
        if negs.len() != CONTRASTIVE_NEGATIVES {
            return Err(LossError::NegativeCountMismatch { item, got: negs.len() });
        }
        for e in [q, pos].into_iter().chain(negs) {
            if e.dim() != dim {
                return Err(LossError::DimensionMismatch { expected: dim, got: e.dim() });
            }
        }

        // z_0 is the positive similarity, z_1..z_5 the negatives.
        let mut z = Vec::with_capacity(1 + CONTRASTIVE_NEGATIVES);
        z.push(dot(&q.values, &pos.values) / tau);
        for n in negs {
            z.push(dot(&q.values, &n.values) / tau);
        }
        let lse = log_sum_exp(&z);
        loss += (lse - z[0]) * inv_batch;

        // softmax weights; d z_0 gets the extra -1 from the log numerator.
        let p: Vec<f64> = z.iter().map(|zk| (zk - lse).exp()).collect();
        let mut d_z: Vec<f64> = p.iter().map(|pk| pk * inv_batch).collect();
        d_z[0] -= inv_batch;

        let mut d_q = vec![0.0; dim];
        for (k, cand) in std::iter::once(pos).chain(negs).enumerate() {
            let scale = d_z[k] / tau;
            for (g, &v) in d_q.iter_mut().zip(&cand.values) {
                *g += scale * v;
            }
            // d sim / d log_tau = -z_k
            grads.d_log_tau -= d_z[k] * z[k];
        }
        grads.d_q.push(d_q);
        grads.d_pos.push(q.values.iter().map(|&v| d_z[0] / tau * v).collect());
        grads.d_neg.push(
            (1..=CONTRASTIVE_NEGATIVES)
                .map(|j| q.values.iter().map(|&v| d_z[j] / tau * v).collect())
                .collect(),
        );
    }

    Ok((loss, grads))
}

/// Gradients of the dynamic relevance loss w.r.t. the batch scores.
#[derive(Debug, Clone)]
pub struct DynamicGrads {
    pub d_r_pos: Vec<f64>,
    pub d_r_neg: Vec<f64>,
}

/// Log-likelihood supervision on the sigmoid scores: the positive toward
/// 1, the sampled negative toward 0.
pub fn dynamic_loss(r_pos: &[f64], r_neg: &[f64]) -> Result<(f64, DynamicGrads), LossError> {
    if r_pos.len() != r_neg.len() {
        return Err(LossError::DimensionMismatch { expected: r_pos.len(), got: r_neg.len() });
    }
    for (item, &r) in r_pos.iter().chain(r_neg).enumerate() {
        if !(0.0..=1.0).contains(&r) || r.is_nan() {
            return Err(LossError::ScoreOutOfRange { item: item % r_pos.len(), value: r });
        }
    }
    let batch = r_pos.len() as f64;
    let mut loss = 0.0;
    let mut d_r_pos = Vec::with_capacity(r_pos.len());
    let mut d_r_neg = Vec::with_capacity(r_neg.len());
    for (&rp, &rn) in r_pos.iter().zip(r_neg) {
        loss -= ((rp + DYNAMIC_EPS).ln() + (1.0 - rn + DYNAMIC_EPS).ln()) / batch;
        d_r_pos.push(-1.0 / (batch * (rp + DYNAMIC_EPS)));
        d_r_neg.push(1.0 / (batch * (1.0 - rn + DYNAMIC_EPS)));
    }
    Ok((loss, DynamicGrads { d_r_pos, d_r_neg }))
}

/// Gradients of the regularization loss w.r.t. the input logits.
#[derive(Debug, Clone)]
pub struct RegGrads {
    pub d_pos: Vec<f64>,
    pub d_neg: Vec<f64>,
}

/// Negative of the population standard deviations of the positive and
/// negative logit sets. Sets with fewer than two elements contribute
/// zero; a standard deviation under the guard contributes zero gradient.
pub fn reg_loss(logits_pos: &[f64], logits_neg: &[f64]) -> (f64, RegGrads) {
    let mut loss = 0.0;
    let mut grads =
        RegGrads { d_pos: vec![0.0; logits_pos.len()], d_neg: vec![0.0; logits_neg.len()] };
    for (set, d_set) in [(logits_pos, &mut grads.d_pos), (logits_neg, &mut grads.d_neg)] {
        let n = set.len();
        if n < 2 {
            continue;
        }
        let mean = set.iter().sum::<f64>() / n as f64;
        let var = set.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        loss -= std;
        if std >= STD_GUARD {
            for (d, &x) in d_set.iter_mut().zip(set) {
                *d = -(x - mean) / (n as f64 * std);
            }
        }
    }
    (loss, grads)
}

/// Weighted total `alpha L_cons + beta L_dyn + gamma L_reg`, with the
/// parameter-space gradient sets merged by the same weights.
pub fn total_loss(
    components: [f64; 3],
    gradients: [&GradientSet; 3],
    weights: &LossWeights,
) -> (f64, GradientSet) {
    let [l_cons, l_dyn, l_reg] = components;
    let loss = weights.alpha * l_cons + weights.beta * l_dyn + weights.gamma * l_reg;
    let mut merged = GradientSet::new();
    for (g, w) in gradients.into_iter().zip([weights.alpha, weights.beta, weights.gamma]) {
        merged.add_scaled(g, w);
    }
    (loss, merged)
}
