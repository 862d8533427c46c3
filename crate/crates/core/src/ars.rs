//! Attentive relevance scoring head.
//!
//! Projects the question and candidate embeddings into a shared latent
//! space, forms an element-wise tanh interaction, and reads off a sigmoid
//! relevance score through a learned attention vector:
//!
//! ```text
//! h_q = W_q q    h_c = W_c c    v = tanh(h_q . h_c)    r = sigmoid(w_att^T v)
//! ```
//!
//! No bias terms anywhere. The backward pass is the exact chain rule
//! through those four steps.

use rand::Rng;

use crate::encoder::Embedding;
use crate::math::{dot, matvec, matvec_transpose, outer_accumulate, sigmoid};
use crate::rng::substream;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ArsError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("candidate list is empty")]
    EmptyCandidates,
}

/// Learnable state of the scoring head.
#[derive(Debug, Clone, PartialEq)]
pub struct ArsParams {
    /// Row-major `latent_dim x input_dim` question projection.
    pub w_q: Vec<f64>,
    /// Row-major `latent_dim x input_dim` candidate projection.
    pub w_c: Vec<f64>,
    /// Attention vector of length `latent_dim`.
    pub w_att: Vec<f64>,
    pub latent_dim: usize,
    pub input_dim: usize,
}

impl ArsParams {
    /// Glorot-uniform projections, zero attention vector. Zero attention
    /// starts every score at 0.5, which keeps the initial loss symmetric.
    pub fn init(latent_dim: usize, input_dim: usize, master_seed: u64) -> Self {
        let mut rng = substream(master_seed, "init.ars");
        let limit = (6.0 / (latent_dim + input_dim) as f64).sqrt();
        let mut sample = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-limit..limit)).collect()
        };
        let w_q = sample(latent_dim * input_dim);
        let w_c = sample(latent_dim * input_dim);
        Self { w_q, w_c, w_att: vec![0.0; latent_dim], latent_dim, input_dim }
    }

    pub fn validate(&self) -> Result<(), ArsError> {
        let expected = self.latent_dim * self.input_dim;
        for w in [&self.w_q, &self.w_c] {
            if w.len() != expected {
                return Err(ArsError::DimensionMismatch { expected, got: w.len() });
            }
        }
        if self.w_att.len() != self.latent_dim {
            return Err(ArsError::DimensionMismatch {
                expected: self.latent_dim,
                got: self.w_att.len(),
            });
        }
        Ok(())
    }
}

/// Intermediate values of one forward pass, reused by the backward pass.
#[derive(Debug, Clone)]
pub struct ArsForwardTrace {
    pub h_q: Vec<f64>,
    pub h_c: Vec<f64>,
    /// tanh of the element-wise product; entries lie in (-1, 1).
    pub v_int: Vec<f64>,
    /// Pre-sigmoid relevance logit.
    pub logit: f64,
    /// Sigmoid relevance score in (0, 1).
    pub score: f64,
}

/// Scores one question/candidate pair, returning the full trace.
pub fn ars_forward(
    params: &ArsParams,
    q: &Embedding,
    c: &Embedding,
) -> Result<ArsForwardTrace, ArsError> {
    for e in [q, c] {
        if e.dim() != params.input_dim {
            return Err(ArsError::DimensionMismatch { expected: params.input_dim, got: e.dim() });
        }
    }
    let (h, d) = (params.latent_dim, params.input_dim);
    let h_q = matvec(&params.w_q, h, d, &q.values);
    let h_c = matvec(&params.w_c, h, d, &c.values);
    let v_int: Vec<f64> = h_q.iter().zip(&h_c).map(|(a, b)| (a * b).tanh()).collect();
    let logit = dot(&params.w_att, &v_int);
    let score = sigmoid(logit);
    Ok(ArsForwardTrace { h_q, h_c, v_int, logit, score })
}

/// Gradients of one pair's score w.r.t. the head parameters and both
/// input embeddings.
#[derive(Debug, Clone)]
pub struct ArsGradients {
    pub w_q: Vec<f64>,
    pub w_c: Vec<f64>,
    pub w_att: Vec<f64>,
    pub input_q: Vec<f64>,
    pub input_c: Vec<f64>,
}

/// Backward pass seeded with `dL/dr` (gradient w.r.t. the sigmoid score).
pub fn ars_backward(
    params: &ArsParams,
    q: &Embedding,
    c: &Embedding,
    trace: &ArsForwardTrace,
    upstream_score: f64,
) -> Result<ArsGradients, ArsError> {
    let d_logit = upstream_score * trace.score * (1.0 - trace.score);
    ars_backward_from_logit(params, q, c, trace, d_logit)
}

/// Backward pass seeded with `dL/ds` (gradient w.r.t. the pre-sigmoid
/// logit), for losses defined directly on logits.
pub fn ars_backward_from_logit(
    params: &ArsParams,
    q: &Embedding,
    c: &Embedding,
    trace: &ArsForwardTrace,
    upstream_logit: f64,
) -> Result<ArsGradients, ArsError> {
    for e in [q, c] {
        if e.dim() != params.input_dim {
            return Err(ArsError::DimensionMismatch { expected: params.input_dim, got: e.dim() });
        }
    }
    let (h, d) = (params.latent_dim, params.input_dim);

    // s = w_att . v  =>  dv = ds * w_att,  dw_att = ds * v
    let d_w_att: Vec<f64> = trace.v_int.iter().map(|v| upstream_logit * v).collect();
    // v = tanh(z), z = h_q . h_c  =>  dz = dv * (1 - v^2)
    let d_z: Vec<f64> = params
        .w_att
        .iter()
        .zip(&trace.v_int)
        .map(|(a, v)| upstream_logit * a * (1.0 - v * v))
        .collect();
    let d_h_q: Vec<f64> = d_z.iter().zip(&trace.h_c).map(|(dz, hc)| dz * hc).collect();
    let d_h_c: Vec<f64> = d_z.iter().zip(&trace.h_q).map(|(dz, hq)| dz * hq).collect();

    let mut d_w_q = vec![0.0; h * d];
    outer_accumulate(&mut d_w_q, &d_h_q, &q.values, 1.0);
    let mut d_w_c = vec![0.0; h * d];
    outer_accumulate(&mut d_w_c, &d_h_c, &c.values, 1.0);

    let input_q = matvec_transpose(&params.w_q, h, d, &d_h_q);
    let input_c = matvec_transpose(&params.w_c, h, d, &d_h_c);

    Ok(ArsGradients { w_q: d_w_q, w_c: d_w_c, w_att: d_w_att, input_q, input_c })
}

/// Scores every candidate against the question, preserving order.
/// Returns `(logit, score)` per candidate.
pub fn score_candidates(
    params: &ArsParams,
    q: &Embedding,
    candidates: &[Embedding],
) -> Result<Vec<(f64, f64)>, ArsError> {
    if candidates.is_empty() {
        return Err(ArsError::EmptyCandidates);
    }
    candidates
        .iter()
        .map(|c| ars_forward(params, q, c).map(|t| (t.logit, t.score)))
        .collect()
}
