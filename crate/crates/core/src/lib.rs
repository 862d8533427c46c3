//! Attentive relevance scoring for multiple-choice question answering.
//!
//! The crate trains a small scoring head over question/answer embeddings
//! with a three-part composite objective (contrastive + dynamic relevance +
//! logit-variance regularization) and ranks candidate answers at inference
//! time. Embeddings come from one of two interchangeable backends: a
//! trainable desk-scale encoder or a read-only store of precomputed vectors.

pub mod ars;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod fd;
pub mod grads;
pub mod losses;
pub mod model;
pub mod optimizer;
pub mod rng;
pub mod trainer;

mod math;

pub use ars::{ArsError, ArsForwardTrace, ArsParams};
pub use dataset::{Level, McqItem, OptionLetter, TrainBatch};
pub use encoder::{Embedding, EmbeddingStore, EncoderBackend, EncoderError, ToyEncoderParams};
pub use grads::GradientSet;
pub use losses::{BatchScores, LossWeights, Temperature};
pub use model::ModelParams;
pub use optimizer::{AdamWState, ScheduleConfig};
pub use trainer::{EvalReport, TrainConfig};
