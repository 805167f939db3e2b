//! AdamW with decoupled weight decay, plus plain SGD for trajectory tests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

/// First and second moments for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// Optimizer state: a step counter and one `Moments` per parameter slot.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub moments: Vec<Moments>,
}

impl AdamWState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            step: 0,
            moments: params
                .iter()
                .map(|p| Moments {
                    m: Tensor::zeros(p.shape().to_vec()),
                    v: Tensor::zeros(p.shape().to_vec()),
                })
                .collect(),
        }
    }
}

/// One AdamW update. `params[i]` pairs with `grads[i]`; a `None` gradient
/// leaves that parameter and its moments untouched. All gradients are
/// checked for finiteness before anything is modified.
pub fn adamw_step(
    cfg: &AdamWConfig,
    state: &mut AdamWState,
    params: &mut [(&str, &mut Tensor)],
    grads: &[Option<Tensor>],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.moments.len() {
        return Err(Error::Config(format!(
            "optimizer slots mismatch: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.moments.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::dim("adamw", p.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for parameter {name}")));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (((_, p), g), mo) in params.iter_mut().zip(grads).zip(&mut state.moments) {
        let Some(g) = g else { continue };
        let p = p.data_mut();
        let m = mo.m.data_mut();
        let v = mo.v.data_mut();
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g.data()[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g.data()[i] * g.data()[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] = p[i] * decay - cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// `p -= lr * g` for every parameter with a gradient.
pub fn sgd_step(lr: f64, params: &mut [&mut Tensor], grads: &[Option<Tensor>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Config("sgd slots mismatch".into()));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::dim("sgd", p.shape(), g.shape()));
            }
            for (a, b) in p.data_mut().iter_mut().zip(g.data()) {
                *a -= lr * b;
            }
        }
    }
    Ok(())
}
