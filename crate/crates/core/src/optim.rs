//! Parameter update rules and their reward kernels.
//!
//! Each optimizer applies `θ_t = θ_{t-1} − g(∇θ)` for a rule-specific `g`. The
//! scorer's reward needs the derivative of `g` w.r.t. its gradient argument;
//! [`Optimizer::reward_kernel`] returns that derivative as a per-parameter
//! scale vector:
//!
//! * SGD: `g(x) = η x`, kernel `η`.
//! * Momentum: `g(x) = μ m + η x`, kernel `η` (the buffer does not depend on x).
//! * Adam without a first moment: kernel
//!   `η · sqrt((1 − β2^t) / (β2 v_{t−1} + ε))`, which drops the
//!   `(1 − β2) x²` term of the exact derivative. `ε` keeps the kernel finite
//!   at `t = 1` where `v_0 = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{check_finite, check_len};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_lr() -> f64 {
    0.001
}
fn default_momentum() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr,
            momentum: 0.0,
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn momentum(lr: f64, momentum: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Momentum,
            momentum,
            ..Self::sgd(lr)
        }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            ..Self::sgd(lr)
        }
    }

    /// Model default: Adam at 1e-3.
    pub fn model_default() -> Self {
        Self::adam(0.001)
    }

    /// Scorer default: Adam at 1e-4.
    pub fn scorer_default() -> Self {
        Self::adam(0.0001)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "optimizer.lr must be > 0, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "optimizer.momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::config(format!(
                "optimizer.beta2 must be in (0, 1), got {}",
                self.beta2
            )));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config(format!(
                "optimizer.eps must be > 0, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// Buffers of one optimizer instance. `m` is only used by Momentum and `v`
/// only by Adam; both have the parameter vector's length.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// `β2^t`, maintained by repeated multiplication.
    beta2_pow: f64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        OptimizerState {
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            beta2_pow: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub state: OptimizerState,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, len: usize) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            state: OptimizerState::new(len),
        })
    }

    /// One descent step `θ ← θ − g(grad)`; increments `t` exactly once.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        check_len("optimizer parameters", self.state.m.len(), params.len())?;
        check_len("optimizer gradient", params.len(), grad.len())?;
        check_finite("optimizer gradient", grad)?;
        let cfg = &self.config;
        let st = &mut self.state;
        st.t += 1;
        st.beta2_pow *= cfg.beta2;
        match cfg.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= cfg.lr * g;
                }
            }
            OptimizerKind::Momentum => {
                for ((p, m), g) in params.iter_mut().zip(st.m.iter_mut()).zip(grad) {
                    *m = cfg.momentum * *m + cfg.lr * g;
                    *p -= *m;
                }
            }
            OptimizerKind::Adam => {
                let correction = 1.0 - st.beta2_pow;
                for ((p, v), g) in params.iter_mut().zip(st.v.iter_mut()).zip(grad) {
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let v_hat = *v / correction;
                    *p -= cfg.lr * g / (v_hat + cfg.eps).sqrt();
                }
            }
        }
        check_finite("parameters after optimizer step", params)
    }

    /// Gradient ascent on an objective whose gradient is `grad`.
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        let negated: Vec<f64> = grad.iter().map(|g| -g).collect();
        self.step(params, &negated)
    }

    /// Reward kernel for the *next* step, from the current (pre-step) state.
    pub fn reward_kernel(&self) -> Vec<f64> {
        let cfg = &self.config;
        let n = self.state.v.len();
        match cfg.kind {
            OptimizerKind::Sgd | OptimizerKind::Momentum => vec![cfg.lr; n],
            OptimizerKind::Adam => {
                let correction = 1.0 - self.state.beta2_pow * cfg.beta2;
                self.state
                    .v
                    .iter()
                    .map(|v| cfg.lr * (correction / (cfg.beta2 * v + cfg.eps)).sqrt())
                    .collect()
            }
        }
    }
}
