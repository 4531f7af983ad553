//! First-order optimizers over a flat list of parameter tensors.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    SgdMomentum {
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
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

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), String> {
        match *self {
            OptimizerConfig::SgdMomentum { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(format!("momentum must be in [0, 1), got {momentum}"));
                }
            }
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return Err(format!("betas must be in [0, 1), got {beta1}, {beta2}"));
                }
                if !(eps > 0.0) {
                    return Err(format!("eps must be positive, got {eps}"));
                }
            }
        }
        Ok(())
    }
}

/// Per-parameter optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Sgd {
        velocity: Vec<Tensor>,
    },
    Adam {
        step: u64,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
    },
}

impl OptimizerState {
    /// Zero moments shaped like `params`.
    pub fn new(config: &OptimizerConfig, params: &[&Tensor]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.rows(), p.cols()))
                .collect()
        };
        match config {
            OptimizerConfig::SgdMomentum { .. } => OptimizerState::Sgd { velocity: zeros() },
            OptimizerConfig::Adam { .. } => OptimizerState::Adam {
                step: 0,
                m: zeros(),
                v: zeros(),
            },
        }
    }
}

/// Applies one update in place.
///
/// SGD: `v ← μv + g`, `p ← p − lr·v`. Adam: bias-corrected moments,
/// `p ← p − lr·m̂/(√v̂ + ε)`.
///
/// # Panics
///
/// If the optimizer state does not match `config` or the shapes disagree.
pub fn optimizer_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    config: &OptimizerConfig,
    learning_rate: f64,
) {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter");
    match (config, state) {
        (OptimizerConfig::SgdMomentum { momentum }, OptimizerState::Sgd { velocity }) => {
            for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity) {
                assert_eq!(p.shape(), g.shape());
                for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                    *vi = momentum * *vi + gi;
                    *pi -= learning_rate * *vi;
                }
            }
        }
        (OptimizerConfig::Adam { beta1, beta2, eps }, OptimizerState::Adam { step, m, v }) => {
            *step += 1;
            let t = *step as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            for (((p, g), mt), vt) in params.iter_mut().zip(grads).zip(m).zip(v) {
                assert_eq!(p.shape(), g.shape());
                let it = p
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(mt.data_mut())
                    .zip(vt.data_mut());
                for (((pi, &gi), mi), vi) in it {
                    *mi = beta1 * *mi + (1.0 - beta1) * gi;
                    *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                    let m_hat = *mi / c1;
                    let v_hat = *vi / c2;
                    *pi -= learning_rate * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        _ => panic!("optimizer state does not match its config"),
    }
}
