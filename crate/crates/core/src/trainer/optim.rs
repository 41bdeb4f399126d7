//! Learning-rate schedule, global-norm clipping and Adam.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamMap;
use crate::tensor::Tensor;

/// Linear warm-up to `peak_lr` at `warmup`, then inverse square-root decay.
pub fn lr_schedule(step: u64, peak_lr: f64, warmup: u64) -> f64 {
    let step = step.max(1) as f64;
    let warmup = warmup.max(1) as f64;
    peak_lr * (step / warmup).min((warmup / step).sqrt())
}

/// Global L2 norm over every gradient.
pub fn global_norm(grads: &ParamMap) -> f64 {
    grads.values().map(Tensor::sum_squares).sum::<f64>().sqrt()
}

/// Scales every gradient by `max_norm / norm` when the global norm exceeds
/// `max_norm`; otherwise leaves them untouched. Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut ParamMap, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::Argument(format!("clip norm must be > 0, got {max_norm}")));
    }
    for (name, g) in grads.iter() {
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {name}")));
        }
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::Numeric("gradient norm overflowed".into()));
    }
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// First and second moments of one parameter plus its own update count.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

/// Adam moments keyed by parameter name. A parameter gets moments on its
/// first update; parameters without a gradient in a step are left alone.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub moments: BTreeMap<String, Moments>,
}

/// Applies one bias-corrected Adam step to every parameter in `grads`.
pub fn adam_update(params: &mut ParamMap, grads: &ParamMap, state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
        adam_step(name, p, g, state, lr, cfg)?;
    }
    Ok(())
}

/// One Adam step for a single named parameter.
pub fn adam_step(name: &str, p: &mut Tensor, g: &Tensor, state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::dim("adam", format!("{name}: parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
    }
    let mom = state.moments.entry(name.to_string()).or_insert_with(|| Moments {
        m: Tensor::zeros(g.shape()),
        v: Tensor::zeros(g.shape()),
        step: 0,
    });
    if mom.m.shape() != g.shape() {
        return Err(Error::dim("adam", format!("{name}: moments {:?} vs gradient {:?}", mom.m.shape(), g.shape())));
    }
    mom.step += 1;
    let t = mom.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
    for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
        *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
        let m_hat = *mj / c1;
        let v_hat = *vj / c2;
        *pj -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    if !p.is_finite() {
        return Err(Error::Numeric(format!("Adam produced a non-finite value in {name}")));
    }
    Ok(())
}
