//! Tiny decoder-only autoregressive language model.
//!
//! Everything is f64 and deterministic: initialization is a pure function
//! of the config seed, forward/sampling/gradients are pure functions of
//! their inputs, and the optimizer is single-writer. There is no GPU path
//! and no mixed precision; the model exists to make the training
//! objectives exactly checkable against finite differences.

mod checkpoint;
mod forward;
mod optim;
mod pretrain;
mod sample;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use forward::{forward_next_token, sequence_logprob, ModelGraph};
pub use optim::{apply_update, Optimizer, OptimizerState, DEFAULT_LR};
pub use pretrain::{pretrain_seed, PretrainOutcome};
pub use sample::{sample_sequence, SampleResult, SamplingConfig, StopRule};

use crate::autodiff::NodeId;
use crate::error::{Error, Result};
use crate::seeds;
use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub type TokenId = u32;

pub const LN_EPS: f64 = 1e-5;

/// Architecture shape plus the init seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Default toy architecture: 2 layers, width 64, 4 heads, FFN 256,
    /// context 128 — the smallest shape that learns the synthetic task.
    pub fn toy(vocab_size: usize, seed: u64) -> Self {
        ModelConfig {
            vocab_size,
            context_len: 128,
            num_layers: 2,
            model_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("context_len", self.context_len),
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1, got {v}")));
            }
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

// Canonical parameter layout. Indices are fixed so gradients, optimizer
// state and checkpoints all line up without string lookups.
pub(crate) const EMBED: usize = 0;
pub(crate) const POS: usize = 1;
pub(crate) const PER_LAYER: usize = 16;
// Per-layer offsets from the layer base.
pub(crate) const LN1_G: usize = 0;
pub(crate) const LN1_B: usize = 1;
pub(crate) const WQ: usize = 2;
pub(crate) const BQ: usize = 3;
pub(crate) const WK: usize = 4;
pub(crate) const BK: usize = 5;
pub(crate) const WV: usize = 6;
pub(crate) const BV: usize = 7;
pub(crate) const WO: usize = 8;
pub(crate) const BO: usize = 9;
pub(crate) const LN2_G: usize = 10;
pub(crate) const LN2_B: usize = 11;
pub(crate) const W1: usize = 12;
pub(crate) const B1: usize = 13;
pub(crate) const W2: usize = 14;
pub(crate) const B2: usize = 15;

pub(crate) fn layer_base(layer: usize) -> usize {
    2 + layer * PER_LAYER
}

/// All learnable tensors, in the canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub(crate) arrays: Vec<Array2<f64>>,
}

/// Gradients (or optimizer moments) with the same layout as the params.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub(crate) arrays: Vec<Array2<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        ParamGrads {
            arrays: params.arrays.iter().map(|a| Array2::zeros(a.dim())).collect(),
        }
    }

    pub fn scale(&mut self, c: f64) {
        for a in &mut self.arrays {
            a.mapv_inplace(|v| v * c);
        }
    }

    pub fn add(&mut self, other: &ParamGrads) {
        for (a, b) in self.arrays.iter_mut().zip(other.arrays.iter()) {
            *a += b;
        }
    }

    pub fn array(&self, idx: usize) -> &Array2<f64> {
        &self.arrays[idx]
    }

    pub fn max_abs(&self) -> f64 {
        self.arrays
            .iter()
            .flat_map(|a| a.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Canonical (name, rows, cols) layout for a config.
pub fn param_layout(config: &ModelConfig) -> Vec<(String, usize, usize)> {
    let d = config.model_dim;
    let mut out = vec![
        ("embed".to_string(), config.vocab_size, d),
        ("pos".to_string(), config.context_len, d),
    ];
    for l in 0..config.num_layers {
        let p = |n: &str| format!("layer{l}.{n}");
        out.push((p("ln1_g"), 1, d));
        out.push((p("ln1_b"), 1, d));
        out.push((p("wq"), d, d));
        out.push((p("bq"), 1, d));
        out.push((p("wk"), d, d));
        out.push((p("bk"), 1, d));
        out.push((p("wv"), d, d));
        out.push((p("bv"), 1, d));
        out.push((p("wo"), d, d));
        out.push((p("bo"), 1, d));
        out.push((p("ln2_g"), 1, d));
        out.push((p("ln2_b"), 1, d));
        out.push((p("w1"), d, config.ffn_dim));
        out.push((p("b1"), 1, config.ffn_dim));
        out.push((p("w2"), config.ffn_dim, d));
        out.push((p("b2"), 1, d));
    }
    out.push(("lnf_g".to_string(), 1, d));
    out.push(("lnf_b".to_string(), 1, d));
    out.push(("wout".to_string(), d, config.vocab_size));
    out.push(("bout".to_string(), 1, config.vocab_size));
    out
}

const INIT_STD: f64 = 0.02;

/// Deterministic initialization from `config.seed`. Two calls with equal
/// configs produce bit-identical parameters.
pub fn init_params(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = seeds::rng(config.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    // Residual output projections are scaled down with depth, GPT-2 style.
    let resid_scale = 1.0 / (2.0 * config.num_layers as f64).sqrt();

    let layout = param_layout(config);
    let mut arrays = Vec::with_capacity(layout.len());
    for (name, rows, cols) in &layout {
        let base = name.rsplit('.').next().unwrap_or(name);
        let arr = match base {
            "ln1_g" | "ln2_g" | "lnf_g" => Array2::ones((*rows, *cols)),
            "ln1_b" | "ln2_b" | "lnf_b" | "bq" | "bk" | "bv" | "bo" | "b1" | "b2" | "bout" => {
                Array2::zeros((*rows, *cols))
            }
            "wo" | "w2" => Array2::from_shape_fn((*rows, *cols), |_| {
                normal.sample(&mut rng) * resid_scale
            }),
            _ => Array2::from_shape_fn((*rows, *cols), |_| normal.sample(&mut rng)),
        };
        arrays.push(arr);
    }
    Ok(ModelParams { config: config.clone(), arrays })
}

impl ModelParams {
    pub fn array(&self, idx: usize) -> &Array2<f64> {
        &self.arrays[idx]
    }

    pub fn array_mut(&mut self, idx: usize) -> &mut Array2<f64> {
        &mut self.arrays[idx]
    }

    pub fn num_arrays(&self) -> usize {
        self.arrays.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.iter().all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// Mutable view of every scalar, in canonical order. Used by the
    /// finite-difference harness and tests; not a training API.
    pub fn for_each_scalar_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for a in &mut self.arrays {
            for v in a.iter_mut() {
                f(v);
            }
        }
    }

    /// Canonical byte serialization of the raw values (row-major f64 LE),
    /// used for bit-identity comparisons in tests.
    pub fn value_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_scalars() * 8);
        for a in &self.arrays {
            for v in a.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Probability distribution over the vocabulary for the next token.
#[derive(Debug, Clone)]
pub struct NextTokenDist {
    pub probs: Vec<f64>,
}

impl NextTokenDist {
    pub fn validate(&self) -> Result<()> {
        if self.probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Internal("probability outside [0,1]".into()));
        }
        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Internal(format!("probabilities sum to {sum}")));
        }
        Ok(())
    }
}

/// Evaluate a scalar loss built on a fresh graph over `params` and return
/// its gradients. The builder gets a graph pre-loaded with the parameter
/// leaves; it must return a (1, 1) loss node.
pub fn compute_gradients<F>(params: &ModelParams, build: F) -> Result<(ParamGrads, f64)>
where
    F: FnOnce(&mut ModelGraph) -> Result<NodeId>,
{
    let mut graph = ModelGraph::new(params);
    let loss_node = build(&mut graph)?;
    let loss = graph.tape().scalar(loss_node);
    if !loss.is_finite() {
        return Err(Error::Numerical { example_id: u64::MAX, message: format!("loss = {loss}") });
    }
    let grads = graph.param_grads(loss_node);
    Ok((grads, loss))
}
