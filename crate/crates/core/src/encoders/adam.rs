use super::EncoderParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: super::DEFAULT_LR, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: EncoderParams,
    pub v: EncoderParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &EncoderParams) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }
}

fn shapes(p: &EncoderParams) -> Vec<(&'static str, (usize, usize))> {
    p.tensors().into_iter().map(|(n, t)| (n, t.dim())).collect()
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut EncoderParams,
    grads: &EncoderParams,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    let expected = shapes(params);
    for other in [grads, &state.m, &state.v] {
        if shapes(other) != expected {
            return Err(Error::Shape("adam: gradient/state tensors do not match parameters".into()));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let params_t = params.tensors_mut();
    let grads_t = grads.tensors();
    let m_t = state.m.tensors_mut();
    let v_t = state.v.tensors_mut();
    for (((( _, p), (_, g)), (_, m)), (_, v)) in params_t.into_iter().zip(grads_t).zip(m_t).zip(v_t) {
        ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        });
    }
    Ok(())
}
