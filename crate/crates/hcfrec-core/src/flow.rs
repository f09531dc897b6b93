//! Planar normalizing flows with a sigmoid gate, the ±1 mixture prior, and the
//! flow KL estimate.
//!
//! Each layer maps z to z + u * sigmoid(w'z + a) with the exact log-det
//! correction log|1 + u' psi|, psi = sigmoid'(w'z + a) * w. Because the
//! sigmoid's derivative peaks at 1/4, the map is invertible whenever
//! w'u > -4; [`constrain_u`] projects back into that region after every
//! optimizer step, keeping the loss itself smooth.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
// Inherent f64 math is std-only; the trait supplies it (via libm) otherwise.
#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::Rng;

use crate::math::{dot, log_add_exp, normal_logpdf, LN_2PI};
use crate::model::GaussianParams;

/// Slack delta in the invertibility constraint w'u >= -4 + delta.
pub const INVERTIBILITY_DELTA: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowLayer {
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    pub a: f64,
}

impl FlowLayer {
    /// Identity layer: u = 0 makes the map a no-op with zero log-det.
    pub fn identity(dim: usize) -> Self {
        FlowLayer { u: vec![0.0; dim], w: vec![0.0; dim], a: 0.0 }
    }

    /// u, w uniform in ±sqrt(3/D) (the symmetric scheme at fan_in = fan_out = D),
    /// a = 0, then projected feasible.
    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        let bound = (3.0 / dim as f64).sqrt();
        let mut layer = FlowLayer {
            u: (0..dim).map(|_| rng.gen_range(-bound..bound)).collect(),
            w: (0..dim).map(|_| rng.gen_range(-bound..bound)).collect(),
            a: 0.0,
        };
        layer.constrain(INVERTIBILITY_DELTA);
        layer
    }

    /// Projects u so that w'u >= -4 + delta.
    pub fn constrain(&mut self, delta: f64) {
        self.u = constrain_u(&self.u, &self.w, delta);
    }

    pub fn dim(&self) -> usize {
        self.u.len()
    }
}

/// Minimal-norm correction of u into the invertible region: if w'u is below
/// -4 + delta, returns u + ((-4 + delta) - w'u) * w / ||w||^2, which lands
/// exactly on the boundary. A zero w gates nothing and leaves u unchanged.
pub fn constrain_u(u: &[f64], w: &[f64], delta: f64) -> Vec<f64> {
    let wu = dot(w, u);
    let bound = -4.0 + delta;
    let w_norm2 = dot(w, w);
    if wu >= bound || w_norm2 == 0.0 {
        return u.to_vec();
    }
    let scale = (bound - wu) / w_norm2;
    u.iter().zip(w).map(|(&ui, &wi)| ui + scale * wi).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum FlowError {
    /// |1 + u' psi| vanished; cannot happen for constrained layers, asserted
    /// defensively.
    Singular { layer: usize },
    NonFinite,
}

impl fmt::Display for FlowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FlowError::Singular { layer } => write!(f, "flow layer {layer} is numerically singular"),
            FlowError::NonFinite => write!(f, "flow produced a non-finite value"),
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-layer forward state kept for the backward pass.
#[derive(Clone, Debug)]
pub struct StepCache {
    pub z_in: Vec<f64>,
    /// Gate value s = sigmoid(w'z + a).
    pub s: f64,
    /// Gate slope s(1 - s).
    pub sp: f64,
    /// Jacobian factor 1 + (u'w) * sp.
    pub q: f64,
}

fn step_inner(z: &[f64], layer: &FlowLayer, index: usize) -> Result<(Vec<f64>, f64, StepCache), FlowError> {
    let pre = dot(&layer.w, z) + layer.a;
    let s = sigmoid(pre);
    let sp = s * (1.0 - s);
    let q = 1.0 + dot(&layer.u, &layer.w) * sp;
    if q.abs() < 1e-12 {
        return Err(FlowError::Singular { layer: index });
    }
    let z_next: Vec<f64> = z.iter().zip(&layer.u).map(|(&zi, &ui)| zi + ui * s).collect();
    let log_det = q.abs().ln();
    if !log_det.is_finite() || z_next.iter().any(|v| !v.is_finite()) {
        return Err(FlowError::NonFinite);
    }
    Ok((z_next, log_det, StepCache { z_in: z.to_vec(), s, sp, q }))
}

/// One planar step: (z + u * sigmoid(w'z + a), log|1 + u' psi|).
pub fn flow_step(z: &[f64], layer: &FlowLayer) -> Result<(Vec<f64>, f64), FlowError> {
    let (z_next, log_det, _) = step_inner(z, layer, 0)?;
    Ok((z_next, log_det))
}

/// Endpoint and accumulated log-det of a whole stack.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowResult {
    pub zt: Vec<f64>,
    pub sum_log_det: f64,
}

pub fn flow_forward(z0: &[f64], layers: &[FlowLayer]) -> Result<FlowResult, FlowError> {
    let (result, _) = flow_forward_cached(z0, layers)?;
    Ok(result)
}

/// Forward pass that also returns the per-layer caches for [`flow_backward`].
pub fn flow_forward_cached(
    z0: &[f64],
    layers: &[FlowLayer],
) -> Result<(FlowResult, Vec<StepCache>), FlowError> {
    let mut z = z0.to_vec();
    let mut sum = 0.0;
    let mut caches = Vec::with_capacity(layers.len());
    for (t, layer) in layers.iter().enumerate() {
        let (z_next, log_det, cache) = step_inner(&z, layer, t)?;
        z = z_next;
        sum += log_det;
        caches.push(cache);
    }
    Ok((FlowResult { zt: z, sum_log_det: sum }, caches))
}

/// Reverse-mode pass through the stack.
///
/// `g_zt` is the upstream gradient on the endpoint; `log_det_weight` is the
/// loss derivative w.r.t. `sum_log_det` (e.g. -1/batch for the KL term).
/// Layer-parameter gradients accumulate into `grads` (same shapes as
/// `layers`); the return value is the gradient w.r.t. z0.
pub fn flow_backward(
    layers: &[FlowLayer],
    caches: &[StepCache],
    g_zt: &[f64],
    log_det_weight: f64,
    grads: &mut [FlowLayer],
) -> Vec<f64> {
    debug_assert_eq!(layers.len(), caches.len());
    debug_assert_eq!(layers.len(), grads.len());
    let mut g = g_zt.to_vec();
    for t in (0..layers.len()).rev() {
        let layer = &layers[t];
        let cache = &caches[t];
        let gl = &mut grads[t];
        let uw = dot(&layer.u, &layer.w);
        // sigmoid'' = sp * (1 - 2s)
        let spp = cache.sp * (1.0 - 2.0 * cache.s);
        let gu_dot = dot(&g, &layer.u);

        // Mapping z' = z + u * s.
        crate::math::axpy(cache.s, &g, &mut gl.u);
        crate::math::axpy(gu_dot * cache.sp, &cache.z_in, &mut gl.w);
        gl.a += gu_dot * cache.sp;
        let mut g_z: Vec<f64> = g.clone();
        crate::math::axpy(gu_dot * cache.sp, &layer.w, &mut g_z);

        // log|q| with q = 1 + (u'w) * sp.
        if log_det_weight != 0.0 {
            let g_q = log_det_weight / cache.q;
            crate::math::axpy(g_q * cache.sp, &layer.w, &mut gl.u);
            crate::math::axpy(g_q * cache.sp, &layer.u, &mut gl.w);
            crate::math::axpy(g_q * uw * spp, &cache.z_in, &mut gl.w);
            gl.a += g_q * uw * spp;
            crate::math::axpy(g_q * uw * spp, &layer.w, &mut g_z);
        }
        g = g_z;
    }
    g
}

/// Per-dimension equal-weight mixture of N(+1, gamma) and N(-1, gamma).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixturePriorConfig {
    pub gamma: f64,
}

impl Default for MixturePriorConfig {
    fn default() -> Self {
        MixturePriorConfig { gamma: 0.015 }
    }
}

const LN_HALF: f64 = -0.6931471805599453;

/// Sum over dimensions of log(0.5 N(z_d; +1, gamma) + 0.5 N(z_d; -1, gamma)),
/// evaluated with log-sum-exp.
pub fn mixture_log_prior(z: &[f64], cfg: &MixturePriorConfig) -> f64 {
    debug_assert!(cfg.gamma > 0.0);
    z.iter()
        .map(|&zd| {
            let la = LN_HALF + normal_logpdf(zd, 1.0, cfg.gamma);
            let lb = LN_HALF + normal_logpdf(zd, -1.0, cfg.gamma);
            log_add_exp(la, lb)
        })
        .sum()
}

/// Accumulates `weight * d(mixture_log_prior)/dz` into `g_z`.
pub fn mixture_log_prior_grad(z: &[f64], cfg: &MixturePriorConfig, weight: f64, g_z: &mut [f64]) {
    for (gd, &zd) in g_z.iter_mut().zip(z) {
        let la = LN_HALF + normal_logpdf(zd, 1.0, cfg.gamma);
        let lb = LN_HALF + normal_logpdf(zd, -1.0, cfg.gamma);
        let lse = log_add_exp(la, lb);
        let pa = (la - lse).exp();
        let pb = 1.0 - pa;
        let d = pa * (-(zd - 1.0) / cfg.gamma) + pb * (-(zd + 1.0) / cfg.gamma);
        *gd += weight * d;
    }
}

/// One sampled latent with everything the KL estimate needs.
#[derive(Clone, Debug)]
pub struct LatentState {
    pub gauss: GaussianParams,
    pub noise: Vec<f64>,
    pub z0: Vec<f64>,
    pub zt: Vec<f64>,
    pub sum_log_det: f64,
}

impl LatentState {
    /// Reparameterizes and runs the flow, so z0 = mu + eps * sigma holds by
    /// construction.
    pub fn new(gauss: GaussianParams, noise: Vec<f64>, layers: &[FlowLayer]) -> Result<Self, FlowError> {
        let z0 = crate::model::reparameterize(&gauss, &noise);
        let result = flow_forward(&z0, layers)?;
        Ok(LatentState { gauss, noise, z0, zt: result.zt, sum_log_det: result.sum_log_det })
    }
}

/// Single-sample KL estimate: log N(z0; mu, sigma^2) - sum_log_det -
/// mixture_log_prior(zT).
///
/// The base log-density is evaluated through the noise, log N = sum_d
/// -(log 2 pi + log_var_d + eps_d^2)/2, which is the same value and makes the
/// estimator's exact gradient w.r.t. mu vanish.
pub fn kl_flow(state: &LatentState, cfg: &MixturePriorConfig) -> f64 {
    let log_q0: f64 = state
        .noise
        .iter()
        .zip(&state.gauss.log_var)
        .map(|(&e, &lv)| -0.5 * (LN_2PI + lv + e * e))
        .sum();
    log_q0 - state.sum_log_det - mixture_log_prior(&state.zt, cfg)
}

/// Multi-sample diagnostic mean of [`kl_flow`] over fresh noise draws.
pub fn kl_flow_mc_mean(
    gauss: &GaussianParams,
    layers: &[FlowLayer],
    cfg: &MixturePriorConfig,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<f64, FlowError> {
    let d = gauss.mu.len();
    let mut acc = 0.0;
    for _ in 0..samples {
        let noise: Vec<f64> = (0..d).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let state = LatentState::new(gauss.clone(), noise, layers)?;
        acc += kl_flow(&state, cfg);
    }
    Ok(acc / samples as f64)
}
