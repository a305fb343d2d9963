use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

use super::network::MlpParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub config: AdamWConfig,
    pub m: MlpParams<T>,
    pub v: MlpParams<T>,
    pub step: u64,
}

impl<T: Real> AdamWState<T> {
    pub fn new(params: &MlpParams<T>, config: AdamWConfig) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update, in place:
/// `p ← p(1 − lr·λ)` followed by the bias-corrected Adam step.
pub fn adamw_step<T: Real>(params: &mut MlpParams<T>, grads: &MlpParams<T>, state: &mut AdamWState<T>) -> Result<()> {
    let shapes = |p: &MlpParams<T>| p.tensors().iter().map(|t| t.len()).collect::<Vec<_>>();
    let expected = shapes(params);
    if shapes(grads) != expected || shapes(&state.m) != expected || shapes(&state.v) != expected {
        return Err(Error::DimensionMismatch(
            "gradient or optimizer state does not match the parameters".into(),
        ));
    }
    state.step += 1;
    let c = state.config;
    let lr = T::lit(c.learning_rate);
    let b1 = T::lit(c.beta1);
    let b2 = T::lit(c.beta2);
    let eps = T::lit(c.eps);
    let decay = T::one() - lr * T::lit(c.weight_decay);
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);

    let grads = grads.tensors();
    let mut ms = state.m.tensors_mut();
    let mut vs = state.v.tensors_mut();
    for (k, p) in params.tensors_mut().into_iter().enumerate() {
        let (g, m, v) = (grads[k], &mut *ms[k], &mut *vs[k]);
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
