//! Desk-scale laboratory for regression-aware judge fine-tuning with
//! chain-of-thought score prediction.
//!
//! The crate contains a tiny trainable decoder-only language model, the
//! four training objectives and three score predictors used in
//! regression-aware judging, a synthetic rubric-scoring task with known
//! ground truth, the two-stage self-generated-CoT training pipeline, and
//! the correlation / shift / degeneracy evaluation machinery.

pub mod autodiff;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod predictors;
pub mod score_space;
pub mod seeds;
pub mod taskgen;

pub use error::{Error, Result};
