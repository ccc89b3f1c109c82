//! SGD with Nesterov momentum and learning-rate laws.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Component, ParamStore};
use crate::tensor::{Scalar, Tensor5};

/// Polynomial decay exponent used everywhere a poly law is built.
pub const POLY_EXPONENT: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrKind {
    Poly { exponent: f64 },
    LinearWarmup,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrLaw {
    pub kind: LrKind,
    pub base_lr: f64,
    pub total_steps: u64,
}

impl LrLaw {
    pub fn poly(base_lr: f64, total_steps: u64) -> Self {
        LrLaw {
            kind: LrKind::Poly {
                exponent: POLY_EXPONENT,
            },
            base_lr,
            total_steps,
        }
    }

    pub fn linear_warmup(peak_lr: f64, total_steps: u64) -> Self {
        LrLaw {
            kind: LrKind::LinearWarmup,
            base_lr: peak_lr,
            total_steps,
        }
    }

    pub fn constant(lr: f64, total_steps: u64) -> Self {
        LrLaw {
            kind: LrKind::Constant,
            base_lr: lr,
            total_steps,
        }
    }

    /// Learning rate at `step`, for `0 <= step <= total_steps`.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        let frac = if self.total_steps == 0 {
            0.0
        } else {
            step as f64 / self.total_steps as f64
        };
        Ok(match self.kind {
            LrKind::Poly { exponent } => self.base_lr * (1.0 - frac).powf(exponent),
            LrKind::LinearWarmup => self.base_lr * frac,
            LrKind::Constant => self.base_lr,
        })
    }
}

pub fn lr_at(law: &LrLaw, step: u64) -> Result<f64> {
    law.lr_at(step)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.99,
            weight_decay: 3e-5,
            nesterov: true,
        }
    }
}

/// Momentum buffers, one per parameter, in store order.
#[derive(Clone, Debug)]
pub struct OptimizerState<T = f32> {
    pub config: SgdConfig,
    pub buffers: Vec<Tensor5<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: SgdConfig, params: &ParamStore<T>) -> Self {
        OptimizerState {
            config,
            buffers: params.iter().map(|p| Tensor5::zeros(p.value.shape())).collect(),
        }
    }

    pub fn check(&self, params: &ParamStore<T>) -> Result<()> {
        if self.buffers.len() != params.len() {
            return Err(Error::shape("OptimizerState", params.len(), self.buffers.len()));
        }
        for (b, p) in self.buffers.iter().zip(params.iter()) {
            if b.shape() != p.value.shape() {
                return Err(Error::shape("OptimizerState buffer", p.value.shape(), b.shape()));
            }
        }
        Ok(())
    }
}

/// One SGD step over every parameter whose component is not frozen.
///
/// `g += wd * p` (decayed params only), `buf = mu * buf + g`, then
/// `p -= lr * (g + mu * buf)` with Nesterov or `p -= lr * buf` without.
pub fn sgd_step<T: Scalar>(
    params: &mut ParamStore<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    frozen: &BTreeSet<Component>,
) -> Result<()> {
    state.check(params)?;
    let cfg = state.config;
    let (lr, mu, wd) = (T::from_f64(lr), T::from_f64(cfg.momentum), T::from_f64(cfg.weight_decay));
    for (p, buf) in params.iter_mut().zip(state.buffers.iter_mut()) {
        if frozen.contains(&p.component) {
            continue;
        }
        let wd = if p.decay { wd } else { T::zero() };
        let values = p.value.data_mut();
        let grads = p.grad.data();
        for ((v, &g), b) in values.iter_mut().zip(grads).zip(buf.data_mut()) {
            let g = g + wd * *v;
            *b = mu * *b + g;
            let step = if cfg.nesterov { g + mu * *b } else { *b };
            *v -= lr * step;
        }
    }
    Ok(())
}
