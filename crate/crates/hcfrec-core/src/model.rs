//! Variational rating-row encoder: one tanh hidden layer feeding separate mean
//! and log-variance heads, plus the reparameterization and the alignment KL to
//! the standard normal.
//!
//! Forward passes take the row as sparse (index, value) entries; zeros
//! contribute nothing, so sparse and dense evaluation agree bitwise. The
//! backward pass accumulates into a same-shaped parameter struct, touching only
//! the weight rows of observed entries.

use alloc::vec;
use alloc::vec::Vec;
// Inherent f64 math is std-only; the trait supplies it (via libm) otherwise.
#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::Rng;

use crate::math::{dot, Mat};

/// Absolute bound applied to the raw log-variance head output.
pub const LOG_VAR_CLAMP: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderDims {
    pub input: usize,
    pub hidden: usize,
    pub latent: usize,
}

/// Weights are fan-in major: `w_hidden[j]` is the hidden-layer contribution of
/// input unit j, `w_mu[k]` / `w_log_var[k]` the head contributions of hidden
/// unit k.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    dims: EncoderDims,
    w_hidden: Mat,
    b_hidden: Vec<f64>,
    w_mu: Mat,
    b_mu: Vec<f64>,
    w_log_var: Mat,
    b_log_var: Vec<f64>,
}

impl EncoderParams {
    /// Weights uniform in ±sqrt(6 / (fan_in + fan_out)) per layer, biases zero.
    pub fn init(dims: EncoderDims, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(dims);
        let bound_hidden = (6.0 / (dims.input + dims.hidden) as f64).sqrt();
        let bound_head = (6.0 / (dims.hidden + dims.latent) as f64).sqrt();
        for v in p.w_hidden.as_mut_slice() {
            *v = rng.gen_range(-bound_hidden..bound_hidden);
        }
        for v in p.w_mu.as_mut_slice() {
            *v = rng.gen_range(-bound_head..bound_head);
        }
        for v in p.w_log_var.as_mut_slice() {
            *v = rng.gen_range(-bound_head..bound_head);
        }
        p
    }

    pub fn zeros(dims: EncoderDims) -> Self {
        EncoderParams {
            dims,
            w_hidden: Mat::zeros(dims.input, dims.hidden),
            b_hidden: vec![0.0; dims.hidden],
            w_mu: Mat::zeros(dims.hidden, dims.latent),
            b_mu: vec![0.0; dims.latent],
            w_log_var: Mat::zeros(dims.hidden, dims.latent),
            b_log_var: vec![0.0; dims.latent],
        }
    }

    pub fn dims(&self) -> EncoderDims {
        self.dims
    }

    /// Visits every parameter array in the fixed serialization order:
    /// hidden weights, hidden bias, mean weights, mean bias, log-var weights,
    /// log-var bias.
    pub fn visit(&self, mut f: impl FnMut(&[f64])) {
        f(self.w_hidden.as_slice());
        f(&self.b_hidden);
        f(self.w_mu.as_slice());
        f(&self.b_mu);
        f(self.w_log_var.as_slice());
        f(&self.b_log_var);
    }

    /// Mutable counterpart of [`visit`](Self::visit), same order.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        f(self.w_hidden.as_mut_slice());
        f(&mut self.b_hidden);
        f(self.w_mu.as_mut_slice());
        f(&mut self.b_mu);
        f(self.w_log_var.as_mut_slice());
        f(&mut self.b_log_var);
    }

    /// Lockstep walk of two parameter sets in visit order, e.g. parameters
    /// against their gradients. Shapes must match.
    pub fn zip_mut(&mut self, other: &EncoderParams, mut f: impl FnMut(&mut [f64], &[f64])) {
        debug_assert_eq!(self.dims, other.dims);
        f(self.w_hidden.as_mut_slice(), other.w_hidden.as_slice());
        f(&mut self.b_hidden, &other.b_hidden);
        f(self.w_mu.as_mut_slice(), other.w_mu.as_slice());
        f(&mut self.b_mu, &other.b_mu);
        f(self.w_log_var.as_mut_slice(), other.w_log_var.as_slice());
        f(&mut self.b_log_var, &other.b_log_var);
    }
}

/// Per-dimension Gaussian posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    /// Clamped to ±[`LOG_VAR_CLAMP`].
    pub log_var: Vec<f64>,
}

/// Forward activations needed by [`encode_backward`].
#[derive(Clone, Debug)]
pub struct EncoderCache {
    pub h: Vec<f64>,
    /// False where the log-variance clamp was active (gradient blocked).
    pub lv_free: Vec<bool>,
}

/// Encoder forward on a sparse row of already-scaled values.
pub fn encode_sparse(
    params: &EncoderParams,
    row: &[(u32, f64)],
) -> (GaussianParams, EncoderCache) {
    let d = params.dims;
    let mut h_pre = params.b_hidden.clone();
    for &(j, x) in row {
        crate::math::axpy(x, params.w_hidden.row(j as usize), &mut h_pre);
    }
    let h: Vec<f64> = h_pre.iter().map(|&p| p.tanh()).collect();

    let mut mu = params.b_mu.clone();
    let mut lv = params.b_log_var.clone();
    for (k, &hk) in h.iter().enumerate() {
        crate::math::axpy(hk, params.w_mu.row(k), &mut mu);
        crate::math::axpy(hk, params.w_log_var.row(k), &mut lv);
    }
    let mut lv_free = vec![true; d.latent];
    for (v, free) in lv.iter_mut().zip(lv_free.iter_mut()) {
        if *v > LOG_VAR_CLAMP {
            *v = LOG_VAR_CLAMP;
            *free = false;
        } else if *v < -LOG_VAR_CLAMP {
            *v = -LOG_VAR_CLAMP;
            *free = false;
        }
    }
    (GaussianParams { mu, log_var: lv }, EncoderCache { h, lv_free })
}

/// Encoder forward on a dense row. Zero entries contribute nothing, so this
/// agrees bitwise with the sparse path.
pub fn encode(params: &EncoderParams, row: &[f64]) -> GaussianParams {
    assert_eq!(row.len(), params.dims.input, "row length must match encoder input dim");
    let sparse: Vec<(u32, f64)> =
        row.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(j, &v)| (j as u32, v)).collect();
    encode_sparse(params, &sparse).0
}

/// Accumulates d(loss)/d(params) into `grads` given upstream gradients on mu
/// and the clamped log-var.
pub fn encode_backward(
    params: &EncoderParams,
    row: &[(u32, f64)],
    cache: &EncoderCache,
    g_mu: &[f64],
    g_log_var: &[f64],
    grads: &mut EncoderParams,
) {
    let hidden = params.dims.hidden;
    let g_lv: Vec<f64> = g_log_var
        .iter()
        .zip(&cache.lv_free)
        .map(|(&g, &free)| if free { g } else { 0.0 })
        .collect();

    let mut g_h = vec![0.0; hidden];
    for k in 0..hidden {
        let hk = cache.h[k];
        crate::math::axpy(hk, g_mu, grads.w_mu.row_mut(k));
        crate::math::axpy(hk, &g_lv, grads.w_log_var.row_mut(k));
        g_h[k] = dot(params.w_mu.row(k), g_mu) + dot(params.w_log_var.row(k), &g_lv);
    }
    crate::math::axpy(1.0, g_mu, &mut grads.b_mu);
    crate::math::axpy(1.0, &g_lv, &mut grads.b_log_var);

    // tanh'(p) = 1 - h^2
    let g_h_pre: Vec<f64> = g_h.iter().zip(&cache.h).map(|(&g, &h)| g * (1.0 - h * h)).collect();
    for &(j, x) in row {
        crate::math::axpy(x, &g_h_pre, grads.w_hidden.row_mut(j as usize));
    }
    crate::math::axpy(1.0, &g_h_pre, &mut grads.b_hidden);
}

/// z0 = mu + eps * sigma, elementwise, with sigma = exp(log_var / 2).
pub fn reparameterize(gauss: &GaussianParams, eps: &[f64]) -> Vec<f64> {
    debug_assert_eq!(gauss.mu.len(), eps.len());
    gauss
        .mu
        .iter()
        .zip(&gauss.log_var)
        .zip(eps)
        .map(|((&m, &lv), &e)| m + e * (0.5 * lv).exp())
        .collect()
}

/// KL(N(mu, sigma^2) || N(0, I)) in closed form:
/// 0.5 * sum(mu^2 + sigma^2 - log sigma^2 - 1). Non-negative, zero exactly at
/// the standard normal.
pub fn align_kl(gauss: &GaussianParams) -> f64 {
    gauss
        .mu
        .iter()
        .zip(&gauss.log_var)
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - lv - 1.0))
        .sum()
}

/// Accumulates `weight * d(align_kl)/d(mu, log_var)`.
pub fn align_kl_backward(gauss: &GaussianParams, weight: f64, g_mu: &mut [f64], g_log_var: &mut [f64]) {
    for d in 0..gauss.mu.len() {
        g_mu[d] += weight * gauss.mu[d];
        g_log_var[d] += weight * 0.5 * (gauss.log_var[d].exp() - 1.0);
    }
}
