//! Adam optimizer with bias correction and the inverse-square-root warmup
//! learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::params::{GradBuffer, ParamSet};

/// Adam hyperparameters. Defaults follow the usual transformer recipe:
/// beta2 = 0.98 and a small epsilon suit the warmup schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.98, epsilon: 1e-9 }
    }
}

/// First/second moment estimates, shaped like the parameter set they track.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn zeros_like(params: &ParamSet) -> Self {
        let m: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        let v = m.clone();
        AdamState { step: 0, m, v }
    }
}

/// One Adam update over every parameter: moments are updated from the
/// gradients, bias-corrected, and applied at learning rate `lr`.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &GradBuffer,
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::Parameter(format!("adam_step: bad learning rate {lr}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let g = grads.get(id);
        let m = &mut state.m[id.0];
        let v = &mut state.v[id.0];
        let theta = &mut params.value_mut(id).data;
        if g.len() != theta.len() {
            return Err(Error::Shape(format!(
                "adam_step: gradient size {} vs parameter size {}",
                g.len(),
                theta.len()
            )));
        }
        for i in 0..theta.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        if let Some(bad) = theta.iter().find(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("adam_step: parameter became non-finite ({bad})")));
        }
    }
    Ok(())
}

/// Warmup-then-decay learning rate:
/// `d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`. Steps count from 1.
pub fn noam_lr(d_model: usize, step: u64, warmup: u64) -> Result<f64> {
    if d_model == 0 || warmup == 0 {
        return Err(Error::Parameter(format!("noam_lr: d_model {d_model} and warmup {warmup} must be positive")));
    }
    if step == 0 {
        return Err(Error::Parameter("noam_lr: steps count from 1".into()));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok((d_model as f64).powf(-0.5) * (s.powf(-0.5)).min(s * w.powf(-1.5)))
}
