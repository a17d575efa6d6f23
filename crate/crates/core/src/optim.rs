//! Adam, the warmup/cosine learning-rate schedule, and gradient clipping.

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Adam hyperparameters. Defaults are the optimizer's canonical
/// (0.9, 0.999, 1e-8).
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers plus the step counter, aligned with the
/// parameter store.
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn zeros_like(store: &ParamStore<S>) -> Self {
        let m = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        let v = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        AdamState { m, v, t: 0 }
    }
}

/// One bias-corrected Adam update over every trainable parameter that has a
/// gradient. Rejects the whole update (leaving parameters, moments and the
/// step counter untouched) if any gradient is non-finite.
pub fn adam_step<S: Scalar>(
    store: &mut ParamStore<S>,
    state: &mut AdamState<S>,
    grads: &Gradients<S>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (id, grad) in grads.iter() {
        if !grad.all_finite() {
            return Err(Error::NonFinite {
                op: "adam_step",
                detail: format!(
                    "gradient of '{}' is non-finite; update rejected",
                    store.get(id).name
                ),
            });
        }
    }
    state.t += 1;
    let t = state.t;
    let b1 = S::from_f64(cfg.beta1);
    let b2 = S::from_f64(cfg.beta2);
    let one_minus_b1 = S::from_f64(1.0 - cfg.beta1);
    let one_minus_b2 = S::from_f64(1.0 - cfg.beta2);
    let corr1 = S::from_f64(1.0 / (1.0 - cfg.beta1.powi(t as i32)));
    let corr2 = S::from_f64(1.0 / (1.0 - cfg.beta2.powi(t as i32)));
    let lr_s = S::from_f64(lr);
    let eps = S::from_f64(cfg.eps);

    for (id, grad) in grads.iter() {
        let idx = id.0;
        if !store.get(id).trainable {
            continue;
        }
        let m = state.m[idx].data_mut();
        let v = state.v[idx].data_mut();
        let p = store.get_mut(id).value.data_mut();
        for ((p_i, m_i), (v_i, &g_i)) in p
            .iter_mut()
            .zip(m.iter_mut())
            .zip(v.iter_mut().zip(grad.data()))
        {
            *m_i = b1 * *m_i + one_minus_b1 * g_i;
            *v_i = b2 * *v_i + one_minus_b2 * g_i * g_i;
            let m_hat = *m_i * corr1;
            let v_hat = *v_i * corr2;
            *p_i = *p_i - lr_s * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `max_lr` over `warmup_steps`, then half-cosine
/// decay to 0 at `total_steps`.
pub fn cosine_warmup_lr(step: u64, warmup_steps: u64, total_steps: u64, max_lr: f64) -> f64 {
    debug_assert!(warmup_steps < total_steps || total_steps == 0);
    if total_steps == 0 {
        return 0.0;
    }
    let step = step.min(total_steps);
    if step <= warmup_steps && warmup_steps > 0 {
        return max_lr * step as f64 / warmup_steps as f64;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    max_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// If the global L2 norm of all gradients exceeds `max_norm`, scale every
/// gradient by `max_norm / norm`. Returns the pre-clip norm.
pub fn clip_global_norm<S: Scalar>(grads: &mut Gradients<S>, max_norm: f64) -> f64 {
    debug_assert!(max_norm > 0.0);
    let mut sq_sum = 0.0f64;
    for (_, g) in grads.iter() {
        for &x in g.data() {
            let x = x.to_f64();
            sq_sum += x * x;
        }
    }
    let norm = sq_sum.sqrt();
    if norm > max_norm {
        let scale = S::from_f64(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            for x in g.data_mut() {
                *x = *x * scale;
            }
        }
    }
    norm
}
