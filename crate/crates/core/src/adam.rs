//! Adam with bias correction, plus global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// First and second moment estimates for a fixed list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    /// Zero moments shaped like `params`, default constants.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>, lr: f64) -> Self {
        let m: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            v: m.clone(),
            m,
            t: 0,
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
        }
    }
}

/// One Adam update. The step is rejected, leaving params and state
/// untouched, if any gradient element is non-finite.
pub fn adam_step<T: Real>(params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], state: &mut AdamState<T>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, ((p, g), m)) in params.iter().zip(grads).zip(&state.m).enumerate() {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::Shape(format!("adam: parameter {i} shape mismatch")));
        }
        if let Some(j) = g.first_non_finite() {
            return Err(Error::NonFinite(format!("gradient {i} element {j}")));
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::c(state.beta1), T::c(state.beta2));
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let lr = T::c(state.lr);
    let eps = T::c(state.eps);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for (i, &gi) in g.data().iter().enumerate() {
            md[i] = b1 * md[i] + (T::one() - b1) * gi;
            vd[i] = b2 * vd[i] + (T::one() - b2) * gi * gi;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Global L2 norm over all tensors.
pub fn global_norm<T: Real>(grads: &[&Tensor<T>]) -> f64 {
    grads
        .iter()
        .map(|g| g.data().iter().map(|x| x.to_f64() * x.to_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// pre-clip norm.
pub fn clip_global_norm<T: Real>(grads: &mut [&mut Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(&grads.iter().map(|g| &**g).collect::<Vec<_>>());
    if norm > max_norm && norm.is_finite() {
        let s = T::c(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
    norm
}
