//! First-order parameter updates: plain SGD and Adam with bias correction.

use super::{ModelParams, ParamGrads};
use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Default learning rate for the adaptive optimizer.
pub const DEFAULT_LR: f64 = 3e-4;

#[derive(Debug, Clone)]
pub struct OptimizerState {
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        OptimizerState {
            step: 0,
            m: params.arrays.iter().map(|a| Array2::zeros(a.dim())).collect(),
            v: params.arrays.iter().map(|a| Array2::zeros(a.dim())).collect(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// In-place update of `params` from `grads`. Deterministic; a zero
/// learning rate leaves the parameters bit-identical.
pub fn apply_update(
    params: &mut ModelParams,
    grads: &ParamGrads,
    state: &mut OptimizerState,
    optimizer: &Optimizer,
    learning_rate: f64,
) -> Result<()> {
    if grads.arrays.len() != params.arrays.len() {
        return Err(Error::Internal(format!(
            "gradient count {} != parameter count {}",
            grads.arrays.len(),
            params.arrays.len()
        )));
    }
    for (p, g) in params.arrays.iter().zip(grads.arrays.iter()) {
        if p.dim() != g.dim() {
            return Err(Error::Internal(format!(
                "gradient shape {:?} != parameter shape {:?}",
                g.dim(),
                p.dim()
            )));
        }
    }

    match optimizer {
        Optimizer::Sgd => {
            for (p, g) in params.arrays.iter_mut().zip(grads.arrays.iter()) {
                p.zip_mut_with(g, |pv, &gv| *pv -= learning_rate * gv);
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            state.step += 1;
            let t = state.step as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            for ((p, g), (m, v)) in params
                .arrays
                .iter_mut()
                .zip(grads.arrays.iter())
                .zip(state.m.iter_mut().zip(state.v.iter_mut()))
            {
                m.zip_mut_with(g, |mv, &gv| *mv = beta1 * *mv + (1.0 - beta1) * gv);
                v.zip_mut_with(g, |vv, &gv| *vv = beta2 * *vv + (1.0 - beta2) * gv * gv);
                for ((pv, &mv), &vv) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                    let m_hat = mv / bc1;
                    let v_hat = vv / bc2;
                    *pv -= learning_rate * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    fn params() -> ModelParams {
        init_params(&ModelConfig {
            vocab_size: 7,
            context_len: 8,
            num_layers: 1,
            model_dim: 4,
            num_heads: 2,
            ffn_dim: 6,
            seed: 3,
        })
        .unwrap()
    }

    fn unit_grads(p: &ModelParams) -> ParamGrads {
        let mut g = ParamGrads::zeros_like(p);
        for a in &mut g.arrays {
            a.fill(0.25);
        }
        g
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = params();
        let before = p.value_bytes();
        let g = unit_grads(&p);
        let mut st = OptimizerState::new(&p);
        apply_update(&mut p, &g, &mut st, &Optimizer::default(), 0.0).unwrap();
        assert_eq!(p.value_bytes(), before);
        apply_update(&mut p, &g, &mut st, &Optimizer::Sgd, 0.0).unwrap();
        assert_eq!(p.value_bytes(), before);
    }

    #[test]
    fn sgd_is_elementwise_definition() {
        let mut p = params();
        let reference = p.clone();
        let g = unit_grads(&p);
        let mut st = OptimizerState::new(&p);
        apply_update(&mut p, &g, &mut st, &Optimizer::Sgd, 0.1).unwrap();
        for (idx, a) in reference.arrays.iter().enumerate() {
            for (new, old) in p.array(idx).iter().zip(a.iter()) {
                assert_eq!(*new, old - 0.1 * 0.25);
            }
        }
    }

    #[test]
    fn adam_runs_are_bit_identical() {
        let run = || {
            let mut p = params();
            let mut st = OptimizerState::new(&p);
            for step in 0..5 {
                let mut g = ParamGrads::zeros_like(&p);
                for a in &mut g.arrays {
                    a.fill(0.1 * (step as f64 + 1.0));
                }
                apply_update(&mut p, &g, &mut st, &Optimizer::default(), 3e-4).unwrap();
            }
            p.value_bytes()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_internal_error() {
        let mut p = params();
        let other = init_params(&ModelConfig {
            vocab_size: 9,
            context_len: 8,
            num_layers: 1,
            model_dim: 4,
            num_heads: 2,
            ffn_dim: 6,
            seed: 3,
        })
        .unwrap();
        let g = ParamGrads::zeros_like(&other);
        let mut st = OptimizerState::new(&p);
        assert!(matches!(
            apply_update(&mut p, &g, &mut st, &Optimizer::Sgd, 0.1),
            Err(Error::Internal(_))
        ));
    }
}
