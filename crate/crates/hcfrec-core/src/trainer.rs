//! Alternating user/item training of the dual-encoder flow model: Poisson
//! reconstruction on code affinity, alignment and flow KL terms, the LSH
//! consistency regularizer, and Adam updates with the invertibility
//! projection after every step.
//!
//! All stochastic choices (noise, negative pairs, LSH draws, shuffles) come
//! from named substreams of one root seed, so a run is a pure function of
//! (seed, data, hyperparameters). Loss evaluation and gradients operate on a
//! [`JointPlan`] that freezes those choices, which is what makes the analytic
//! gradients finite-difference checkable.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

// Inherent f64 math is std-only; the trait supplies it (via libm) otherwise.
#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::consistency::{
    build_similarity, bucket_stats, combined_euclid_hash, consistency_grad_code,
    consistency_grad_z, hamming_hash, pair_code_loss, pair_euclid_loss, sample_dims,
    BucketStats, EuclidProbe, LshConfig, SimilarityPairs,
};
use crate::flow::{
    flow_backward, flow_forward_cached, mixture_log_prior, mixture_log_prior_grad, FlowError,
    FlowLayer, MixturePriorConfig, StepCache, INVERTIBILITY_DELTA,
};
use crate::hashing::{binarize_st, pack, poisson_nll, HashCode, PackedCode, AFFINITY_EPS};
use crate::ingest::{RatingMatrix, SplitDataset};
use crate::math::{axpy, dot, LN_2PI};
use crate::model::{
    align_kl, align_kl_backward, encode_backward, encode_sparse, EncoderDims, EncoderParams,
};
use crate::rng::stream;

/// Which objective the run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Flows, mixture prior, straight-through codes, consistency.
    Hcfrec,
    /// Baseline: the same dual encoder trained real-valued (affinity from the
    /// latents themselves, alignment KL only), binarized with sign after the
    /// fact.
    DirectBinarize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hyperparams {
    /// Code length D.
    pub dim: usize,
    /// Encoder hidden width.
    pub hidden: usize,
    /// Flow depth T.
    pub flow_depth: usize,
    /// Mixture prior variance.
    pub gamma: f64,
    /// Consistency weight.
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Sampled unobserved pairs per observed rating.
    pub neg_ratio: f64,
    pub seed: u64,
    pub consistency_enabled: bool,
    pub lsh: LshConfig,
    pub mode: TrainMode,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            dim: 16,
            hidden: 64,
            flow_depth: 4,
            gamma: 0.015,
            lambda: 0.3,
            lr: 0.015,
            batch_size: 128,
            epochs: 30,
            neg_ratio: 1.0,
            seed: 42,
            consistency_enabled: true,
            lsh: LshConfig::default(),
            mode: TrainMode::Hcfrec,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad: Option<&'static str> = if self.dim == 0 {
            Some("dim must be positive")
        } else if self.hidden == 0 {
            Some("hidden width must be positive")
        } else if !(self.gamma > 0.0) {
            Some("gamma must be positive")
        } else if !(self.lambda >= 0.0) {
            Some("lambda must be nonnegative")
        } else if !(self.lr > 0.0) {
            Some("learning rate must be positive")
        } else if self.batch_size == 0 {
            Some("batch size must be positive")
        } else if !(self.neg_ratio >= 0.0) {
            Some("negative-sampling ratio must be nonnegative")
        } else if self.lsh.l > self.dim {
            Some("lsh rounds cannot exceed the code dimension")
        } else {
            None
        };
        match bad {
            Some(msg) => Err(TrainError::Config(msg)),
            None => Ok(()),
        }
    }

    /// The consistency term exists only when enabled with a positive weight
    /// in the full model; a zero lambda run and a disabled run are the same
    /// computation by contract.
    pub fn consistency_on(&self) -> bool {
        self.consistency_enabled && self.lambda > 0.0 && self.mode == TrainMode::Hcfrec
    }

    fn effective_flow_depth(&self) -> usize {
        match self.mode {
            TrainMode::Hcfrec => self.flow_depth,
            TrainMode::DirectBinarize => 0,
        }
    }
}

/// What the reconstruction and consistency terms treat as "the code".
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodeMode {
    /// sign(zT), gradients via the straight-through identity surrogate.
    Sign,
    /// zT itself. This is the surrogate the straight-through rule declares,
    /// so gradient checks run in this mode; it is also the baseline's
    /// real-valued affinity.
    Identity,
}

impl TrainMode {
    pub fn code_mode(self) -> CodeMode {
        match self {
            TrainMode::Hcfrec => CodeMode::Sign,
            TrainMode::DirectBinarize => CodeMode::Identity,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainError {
    NonFinite { epoch: usize, context: &'static str },
    Flow(FlowError),
    Config(&'static str),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::NonFinite { epoch, context } => {
                write!(f, "non-finite loss at epoch {epoch} ({context})")
            }
            TrainError::Flow(e) => write!(f, "{e}"),
            TrainError::Config(msg) => write!(f, "invalid hyperparameters: {msg}"),
        }
    }
}

impl From<FlowError> for TrainError {
    fn from(e: FlowError) -> Self {
        TrainError::Flow(e)
    }
}

/// One side's parameters: encoder plus flow stack.
#[derive(Clone, Debug, PartialEq)]
pub struct SideState {
    pub encoder: EncoderParams,
    pub flow: Vec<FlowLayer>,
}

impl SideState {
    pub fn init(dims: EncoderDims, flow_depth: usize, rng: &mut impl Rng) -> Self {
        SideState {
            encoder: EncoderParams::init(dims, rng),
            flow: (0..flow_depth).map(|_| FlowLayer::init(dims.latent, rng)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        SideState {
            encoder: EncoderParams::zeros(self.encoder.dims()),
            flow: self.flow.iter().map(|l| FlowLayer::identity(l.dim())).collect(),
        }
    }

    /// Parameter arrays in the fixed serialization order: the encoder's six
    /// arrays, then u, w, a per flow layer.
    pub fn visit(&self, mut f: impl FnMut(&[f64])) {
        self.encoder.visit(&mut f);
        for layer in &self.flow {
            f(&layer.u);
            f(&layer.w);
            f(core::slice::from_ref(&layer.a));
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        self.encoder.visit_mut(&mut f);
        for layer in &mut self.flow {
            f(&mut layer.u);
            f(&mut layer.w);
            f(core::slice::from_mut(&mut layer.a));
        }
    }

    /// Lockstep walk with a same-shaped structure (typically gradients).
    pub fn zip_mut(&mut self, other: &SideState, mut f: impl FnMut(&mut [f64], &[f64])) {
        self.encoder.zip_mut(&other.encoder, &mut f);
        for (layer, lo) in self.flow.iter_mut().zip(&other.flow) {
            f(&mut layer.u, &lo.u);
            f(&mut layer.w, &lo.w);
            f(core::slice::from_mut(&mut layer.a), core::slice::from_ref(&lo.a));
        }
    }

    pub fn constrain(&mut self) {
        for layer in &mut self.flow {
            layer.constrain(INVERTIBILITY_DELTA);
        }
    }

    fn array_lens(&self) -> Vec<usize> {
        let mut lens = Vec::new();
        self.visit(|a| lens.push(a.len()));
        lens
    }
}

/// Adam with per-array moment buffers, walked in visit order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, lens: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut SideState, grads: &SideState) {
        self.t += 1;
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        params.zip_mut(grads, |p, g| {
            let m = &mut m_all[idx];
            let v = &mut v_all[idx];
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
            idx += 1;
        });
    }
}

/// Full trainable state: both sides plus their optimizers.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub user: SideState,
    pub item: SideState,
    pub adam_user: Adam,
    pub adam_item: Adam,
}

impl ModelState {
    /// Seeded initialization; the two sides draw from distinct streams so
    /// adding items never perturbs user initialization.
    pub fn init(hp: &Hyperparams, n_users: usize, n_items: usize) -> Self {
        let t = hp.effective_flow_depth();
        let user_dims = EncoderDims { input: n_items, hidden: hp.hidden, latent: hp.dim };
        let item_dims = EncoderDims { input: n_users, hidden: hp.hidden, latent: hp.dim };
        let user = SideState::init(user_dims, t, &mut stream(hp.seed, "init/user"));
        let item = SideState::init(item_dims, t, &mut stream(hp.seed, "init/item"));
        let adam_user = Adam::new(hp.lr, &user.array_lens());
        let adam_item = Adam::new(hp.lr, &item.array_lens());
        ModelState { user, item, adam_user, adam_item }
    }
}

/// One rated or sampled (user, item) pair; negatives carry rating 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairSample {
    pub user: u32,
    pub item: u32,
    pub rating: f64,
}

/// Per-epoch LSH randomness for one side.
#[derive(Clone, Debug)]
pub struct ConsDraw {
    pub probes: Vec<EuclidProbe>,
    pub dims: Vec<usize>,
}

impl ConsDraw {
    pub fn draw(hp: &Hyperparams, real_rng: &mut impl Rng, code_rng: &mut impl Rng) -> Self {
        ConsDraw {
            probes: (0..hp.lsh.l).map(|_| EuclidProbe::draw(hp.dim, hp.lsh.w, real_rng)).collect(),
            dims: sample_dims(hp.dim, hp.lsh.l, code_rng),
        }
    }
}

/// Frozen similar-pair sets over one side's batch positions.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsPlan {
    /// From real-valued keys.
    pub a: SimilarityPairs,
    /// From hash-code keys.
    pub a_prime: SimilarityPairs,
}

/// Consistency inputs carried by a plan.
#[derive(Clone, Debug)]
pub enum ConsMode {
    Off,
    /// Pair sets fixed at plan-build time; evaluation is then a smooth
    /// function of the parameters (what gradient checks need).
    Frozen { user: Option<ConsPlan>, item: Option<ConsPlan> },
    /// Pairs rebuilt from the live forward pass each evaluation (training).
    Fresh { user: Option<ConsDraw>, item: Option<ConsDraw> },
}

/// Everything a loss/gradient evaluation depends on besides the parameters.
#[derive(Clone, Debug)]
pub struct JointPlan {
    pub user_rows: Vec<u32>,
    pub item_rows: Vec<u32>,
    pub observed: Vec<PairSample>,
    pub negatives: Vec<PairSample>,
    /// Reparameterization noise per entity; zero vectors mean the entity is
    /// forwarded at its posterior mean.
    pub eps_user: BTreeMap<u32, Vec<f64>>,
    pub eps_item: BTreeMap<u32, Vec<f64>>,
    pub cons: ConsMode,
}

/// Which side's parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Active {
    Both,
    User,
    Item,
}

impl Active {
    fn user(self) -> bool {
        matches!(self, Active::Both | Active::User)
    }

    fn item(self) -> bool {
        matches!(self, Active::Both | Active::Item)
    }
}

/// The five rating-loss terms plus the (already per-side-normalized)
/// consistency term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub recon: f64,
    pub align_u: f64,
    pub kl_u: f64,
    pub align_v: f64,
    pub kl_v: f64,
    pub cons: f64,
}

impl LossTerms {
    /// L_recon + L_align^U + L_KL^U + L_align^V + L_KL^V.
    pub fn rating(&self) -> f64 {
        self.recon + self.align_u + self.kl_u + self.align_v + self.kl_v
    }

    pub fn total(&self, lambda: f64) -> f64 {
        total_loss(self.rating(), self.cons, lambda)
    }

    fn accumulate(&mut self, other: &LossTerms) {
        self.recon += other.recon;
        self.align_u += other.align_u;
        self.kl_u += other.kl_u;
        self.align_v += other.align_v;
        self.kl_v += other.kl_v;
        self.cons += other.cons;
    }

    fn scale(&mut self, s: f64) {
        self.recon *= s;
        self.align_u *= s;
        self.kl_u *= s;
        self.align_v *= s;
        self.kl_v *= s;
        self.cons *= s;
    }
}

/// rating + lambda * cons.
pub fn total_loss(rating: f64, cons: f64, lambda: f64) -> f64 {
    rating + lambda * cons
}

struct EntityFwd {
    gauss: crate::model::GaussianParams,
    cache: crate::model::EncoderCache,
    zt: Vec<f64>,
    steps: Vec<StepCache>,
    sum_log_det: f64,
    /// Mode-dependent code the losses consume: sign(zT) or zT itself.
    code: Vec<f64>,
    /// Always the sign code; used for bucket keys.
    sign: HashCode,
}

fn forward_entity(
    side: &SideState,
    row: &[(u32, f64)],
    eps: &[f64],
    mode: CodeMode,
) -> Result<EntityFwd, FlowError> {
    let (gauss, cache) = encode_sparse(&side.encoder, row);
    let z0 = crate::model::reparameterize(&gauss, eps);
    let (result, steps) = flow_forward_cached(&z0, &side.flow)?;
    let sign = binarize_st(&result.zt);
    let code = match mode {
        CodeMode::Sign => sign.bits.clone(),
        CodeMode::Identity => result.zt.clone(),
    };
    Ok(EntityFwd {
        gauss,
        cache,
        zt: result.zt,
        steps,
        sum_log_det: result.sum_log_det,
        code,
        sign,
    })
}

/// Per-entity gradient accumulators feeding one backward pass.
#[derive(Clone, Debug)]
struct Accum {
    g_mu: Vec<f64>,
    g_lv: Vec<f64>,
    g_code: Vec<f64>,
    g_zt: Vec<f64>,
}

impl Accum {
    fn zeros(d: usize) -> Self {
        Accum { g_mu: vec![0.0; d], g_lv: vec![0.0; d], g_code: vec![0.0; d], g_zt: vec![0.0; d] }
    }
}

pub struct EvalOutput {
    pub terms: LossTerms,
    /// (user, item) gradients of the total loss; inactive sides are zero.
    pub grads: Option<(SideState, SideState)>,
    /// Real-key bucket diagnostics, per side, when consistency ran.
    pub user_buckets: Option<BucketStats>,
    pub item_buckets: Option<BucketStats>,
}

fn side_rows<'a>(train: &'a RatingMatrix, side_is_user: bool, idx: u32) -> &'a [(u32, f64)] {
    if side_is_user {
        train.row(idx)
    } else {
        train.col(idx)
    }
}

/// Evaluates the total objective (and optionally its gradients) on a frozen
/// plan. With `CodeMode::Identity` the result is a smooth function of every
/// parameter, which is exactly the surrogate the straight-through rule
/// declares; `CodeMode::Sign` differs only in the forward code values.
pub fn joint_eval(
    state: &ModelState,
    train: &RatingMatrix,
    plan: &JointPlan,
    hp: &Hyperparams,
    mode: CodeMode,
    active: Active,
    want_grads: bool,
    epoch: usize,
) -> Result<EvalOutput, TrainError> {
    let d = hp.dim;
    let two_d = 2.0 * d as f64;
    let prior = MixturePriorConfig { gamma: hp.gamma };
    let kl_on = hp.mode == TrainMode::Hcfrec;

    let zero_eps = vec![0.0; d];
    let mut users: BTreeMap<u32, EntityFwd> = BTreeMap::new();
    for &u in &plan.user_rows {
        let eps = plan.eps_user.get(&u).unwrap_or(&zero_eps);
        users.insert(u, forward_entity(&state.user, train.row(u), eps, mode)?);
    }
    let mut items: BTreeMap<u32, EntityFwd> = BTreeMap::new();
    for &i in &plan.item_rows {
        let eps = plan.eps_item.get(&i).unwrap_or(&zero_eps);
        items.insert(i, forward_entity(&state.item, train.col(i), eps, mode)?);
    }

    let mut acc_user: BTreeMap<u32, Accum> = BTreeMap::new();
    let mut acc_item: BTreeMap<u32, Accum> = BTreeMap::new();
    if want_grads {
        if active.user() {
            for &u in &plan.user_rows {
                acc_user.insert(u, Accum::zeros(d));
            }
        }
        if active.item() {
            for &i in &plan.item_rows {
                acc_item.insert(i, Accum::zeros(d));
            }
        }
    }

    let mut terms = LossTerms::default();

    // Reconstruction over observed plus sampled pairs.
    let n_pairs = plan.observed.len() + plan.negatives.len();
    if n_pairs > 0 {
        let inv = 1.0 / n_pairs as f64;
        let mut acc = 0.0;
        for pair in plan.observed.iter().chain(&plan.negatives) {
            let fu = &users[&pair.user];
            let fv = &items[&pair.item];
            let s_raw = (dot(&fu.code, &fv.code) + d as f64) / two_d;
            let s = s_raw.clamp(AFFINITY_EPS, 1.0);
            acc += poisson_nll(pair.rating, s);
            if want_grads && s_raw > AFFINITY_EPS && s_raw < 1.0 {
                let coeff = (1.0 - pair.rating / s) * inv;
                if let Some(a) = acc_user.get_mut(&pair.user) {
                    axpy(coeff / two_d, &fv.code, &mut a.g_code);
                }
                if let Some(a) = acc_item.get_mut(&pair.item) {
                    axpy(coeff / two_d, &fu.code, &mut a.g_code);
                }
            }
        }
        terms.recon = acc * inv;
    }

    // Alignment and flow KL, averaged per side.
    let side_kl = |rows: &Vec<u32>,
                       fwds: &BTreeMap<u32, EntityFwd>,
                       eps_map: &BTreeMap<u32, Vec<f64>>,
                       accs: &mut BTreeMap<u32, Accum>,
                       side_active: bool|
     -> (f64, f64) {
        if rows.is_empty() {
            return (0.0, 0.0);
        }
        let inv = 1.0 / rows.len() as f64;
        let mut align_sum = 0.0;
        let mut kl_sum = 0.0;
        for r in rows {
            let fwd = &fwds[r];
            align_sum += align_kl(&fwd.gauss);
            if kl_on {
                let eps = eps_map.get(r).unwrap_or(&zero_eps);
                let log_q0: f64 = eps
                    .iter()
                    .zip(&fwd.gauss.log_var)
                    .map(|(&e, &lv)| -0.5 * (LN_2PI + lv + e * e))
                    .sum();
                kl_sum += log_q0 - fwd.sum_log_det - mixture_log_prior(&fwd.zt, &prior);
            }
            if want_grads && side_active {
                let a = accs.get_mut(r).expect("accumulator for active row");
                align_kl_backward(&fwd.gauss, inv, &mut a.g_mu, &mut a.g_lv);
                if kl_on {
                    for g in a.g_lv.iter_mut() {
                        *g += -0.5 * inv;
                    }
                    mixture_log_prior_grad(&fwd.zt, &prior, -inv, &mut a.g_zt);
                }
            }
        }
        (align_sum * inv, kl_sum * inv)
    };
    let (align_u, kl_u) =
        side_kl(&plan.user_rows, &users, &plan.eps_user, &mut acc_user, active.user());
    let (align_v, kl_v) =
        side_kl(&plan.item_rows, &items, &plan.eps_item, &mut acc_item, active.item());
    terms.align_u = align_u;
    terms.kl_u = kl_u;
    terms.align_v = align_v;
    terms.kl_v = kl_v;

    // Consistency, per side, normalized by that side's batch size.
    let mut user_buckets = None;
    let mut item_buckets = None;
    {
        let run_side = |rows: &Vec<u32>,
                            fwds: &BTreeMap<u32, EntityFwd>,
                            accs: &mut BTreeMap<u32, Accum>,
                            frozen: Option<&ConsPlan>,
                            fresh: Option<&ConsDraw>,
                            side_active: bool,
                            buckets: &mut Option<BucketStats>|
         -> f64 {
            if rows.is_empty() || (frozen.is_none() && fresh.is_none()) {
                return 0.0;
            }
            let zts: Vec<Vec<f64>> = rows.iter().map(|r| fwds[r].zt.clone()).collect();
            let codes: Vec<Vec<f64>> = rows.iter().map(|r| fwds[r].code.clone()).collect();
            let built;
            let pairs: &ConsPlan = match (frozen, fresh) {
                (Some(p), _) => p,
                (None, Some(draw)) => {
                    let real_keys: Vec<i128> = rows
                        .iter()
                        .map(|r| combined_euclid_hash(&fwds[r].zt, &draw.probes, &hp.lsh))
                        .collect();
                    let code_keys: Vec<i128> =
                        rows.iter().map(|r| hamming_hash(&fwds[r].sign, &draw.dims)).collect();
                    *buckets = Some(bucket_stats(&real_keys));
                    built = ConsPlan {
                        a: build_similarity(&real_keys),
                        a_prime: build_similarity(&code_keys),
                    };
                    &built
                }
                (None, None) => unreachable!(),
            };
            let inv = 1.0 / rows.len() as f64;
            let raw = pair_euclid_loss(&zts, &pairs.a_prime) + pair_code_loss(&codes, &pairs.a);
            if want_grads && side_active {
                let weight = hp.lambda * inv;
                let mut g_z = vec![vec![0.0; d]; rows.len()];
                let mut g_c = vec![vec![0.0; d]; rows.len()];
                consistency_grad_z(&zts, &pairs.a_prime, weight, &mut g_z);
                consistency_grad_code(&codes, &pairs.a, weight, &mut g_c);
                for (pos, r) in rows.iter().enumerate() {
                    let a = accs.get_mut(r).expect("accumulator for active row");
                    axpy(1.0, &g_z[pos], &mut a.g_zt);
                    axpy(1.0, &g_c[pos], &mut a.g_code);
                }
            }
            raw * inv
        };
        match &plan.cons {
            ConsMode::Off => {}
            ConsMode::Frozen { user, item } => {
                terms.cons = run_side(
                    &plan.user_rows,
                    &users,
                    &mut acc_user,
                    user.as_ref(),
                    None,
                    active.user(),
                    &mut user_buckets,
                ) + run_side(
                    &plan.item_rows,
                    &items,
                    &mut acc_item,
                    item.as_ref(),
                    None,
                    active.item(),
                    &mut item_buckets,
                );
            }
            ConsMode::Fresh { user, item } => {
                terms.cons = run_side(
                    &plan.user_rows,
                    &users,
                    &mut acc_user,
                    None,
                    user.as_ref(),
                    active.user(),
                    &mut user_buckets,
                ) + run_side(
                    &plan.item_rows,
                    &items,
                    &mut acc_item,
                    None,
                    item.as_ref(),
                    active.item(),
                    &mut item_buckets,
                );
            }
        }
    }

    if !terms.total(hp.lambda).is_finite() {
        return Err(TrainError::NonFinite { epoch, context: "loss evaluation" });
    }

    let grads = if want_grads {
        let mut g_user = state.user.zeros_like();
        let mut g_item = state.item.zeros_like();
        let kl_rows_inv_u = if plan.user_rows.is_empty() { 0.0 } else { 1.0 / plan.user_rows.len() as f64 };
        let kl_rows_inv_v = if plan.item_rows.is_empty() { 0.0 } else { 1.0 / plan.item_rows.len() as f64 };

        let backward_side = |rows: &Vec<u32>,
                                 fwds: &BTreeMap<u32, EntityFwd>,
                                 accs: &BTreeMap<u32, Accum>,
                                 eps_map: &BTreeMap<u32, Vec<f64>>,
                                 side: &SideState,
                                 g_side: &mut SideState,
                                 is_user: bool,
                                 kl_inv: f64| {
            for r in rows {
                let fwd = &fwds[r];
                let acc = &accs[r];
                // Straight-through: the code gradient lands on zT unchanged.
                let mut g_zt = acc.g_zt.clone();
                axpy(1.0, &acc.g_code, &mut g_zt);
                let log_det_w = if kl_on { -kl_inv } else { 0.0 };
                let g_z0 =
                    flow_backward(&side.flow, &fwd.steps, &g_zt, log_det_w, &mut g_side.flow);
                let mut g_mu = acc.g_mu.clone();
                axpy(1.0, &g_z0, &mut g_mu);
                let eps = eps_map.get(r).unwrap_or(&zero_eps);
                let mut g_lv = acc.g_lv.clone();
                for k in 0..d {
                    g_lv[k] += g_z0[k] * eps[k] * 0.5 * (0.5 * fwd.gauss.log_var[k]).exp();
                }
                encode_backward(
                    &side.encoder,
                    side_rows(train, is_user, *r),
                    &fwd.cache,
                    &g_mu,
                    &g_lv,
                    &mut g_side.encoder,
                );
            }
        };
        if active.user() {
            backward_side(
                &plan.user_rows,
                &users,
                &acc_user,
                &plan.eps_user,
                &state.user,
                &mut g_user,
                true,
                kl_rows_inv_u,
            );
        }
        if active.item() {
            backward_side(
                &plan.item_rows,
                &items,
                &acc_item,
                &plan.eps_item,
                &state.item,
                &mut g_item,
                false,
                kl_rows_inv_v,
            );
        }
        Some((g_user, g_item))
    } else {
        None
    };

    Ok(EvalOutput { terms, grads, user_buckets, item_buckets })
}

/// The r-th unrated column index for a sorted observed row, uniform over the
/// complement. None when the row is complete.
fn sample_unrated(row: &[(u32, f64)], n_cols: usize, rng: &mut impl Rng) -> Option<u32> {
    let unrated = n_cols - row.len();
    if unrated == 0 {
        return None;
    }
    let mut idx = rng.gen_range(0..unrated) as u32;
    for &(o, _) in row {
        if o <= idx {
            idx += 1;
        } else {
            break;
        }
    }
    Some(idx)
}

fn draw_eps(rows: &[u32], d: usize, rng: &mut impl Rng) -> BTreeMap<u32, Vec<f64>> {
    let mut map = BTreeMap::new();
    for &r in rows {
        let eps: Vec<f64> = (0..d).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        map.insert(r, eps);
    }
    map
}

fn distinct_sorted(vals: impl Iterator<Item = u32>) -> Vec<u32> {
    let set: alloc::collections::BTreeSet<u32> = vals.collect();
    set.into_iter().collect()
}

/// One phase batch: the active side samples noise, the frozen side is
/// forwarded at its mean, negatives are drawn against the active side's rows.
pub fn build_phase_plan(
    train: &RatingMatrix,
    hp: &Hyperparams,
    side: Active,
    batch: &[u32],
    noise_rng: &mut impl Rng,
    neg_rng: &mut impl Rng,
    cons: Option<&ConsDraw>,
) -> JointPlan {
    debug_assert!(matches!(side, Active::User | Active::Item));
    let is_user = side == Active::User;
    let mut observed = Vec::new();
    for &r in batch {
        for &(other, rating) in side_rows(train, is_user, r) {
            let (user, item) = if is_user { (r, other) } else { (other, r) };
            observed.push(PairSample { user, item, rating });
        }
    }
    let mut negatives = Vec::new();
    if !observed.is_empty() {
        let n_neg = (hp.neg_ratio * observed.len() as f64).round() as usize;
        let n_cols = if is_user { train.n_items() } else { train.n_users() };
        for t in 0..n_neg {
            let base = &observed[t % observed.len()];
            let anchor = if is_user { base.user } else { base.item };
            if let Some(other) = sample_unrated(side_rows(train, is_user, anchor), n_cols, neg_rng)
            {
                let (user, item) = if is_user { (anchor, other) } else { (other, anchor) };
                negatives.push(PairSample { user, item, rating: 0.0 });
            }
        }
    }
    let all_pairs = observed.iter().chain(&negatives);
    let (user_rows, item_rows) = if is_user {
        (batch.to_vec(), distinct_sorted(all_pairs.map(|p| p.item)))
    } else {
        (distinct_sorted(all_pairs.map(|p| p.user)), batch.to_vec())
    };
    let eps_active = draw_eps(batch, hp.dim, noise_rng);
    let (eps_user, eps_item) = if is_user {
        (eps_active, BTreeMap::new())
    } else {
        (BTreeMap::new(), eps_active)
    };
    let cons = match cons {
        Some(draw) if is_user => ConsMode::Fresh { user: Some(draw.clone()), item: None },
        Some(draw) => ConsMode::Fresh { user: None, item: Some(draw.clone()) },
        None => ConsMode::Off,
    };
    JointPlan { user_rows, item_rows, observed, negatives, eps_user, eps_item, cons }
}

/// A whole-dataset plan with noise on both sides and frozen consistency
/// pairs, for loss measurement and gradient checks. `tag` namespaces the
/// random draws.
pub fn build_joint_plan(
    train: &RatingMatrix,
    hp: &Hyperparams,
    state: &ModelState,
    tag: &str,
) -> Result<JointPlan, TrainError> {
    let user_rows: Vec<u32> = (0..train.n_users() as u32).collect();
    let item_rows: Vec<u32> = (0..train.n_items() as u32).collect();
    let mut noise_rng = stream(hp.seed, &format!("joint/noise/{tag}"));
    let eps_user = draw_eps(&user_rows, hp.dim, &mut noise_rng);
    let eps_item = draw_eps(&item_rows, hp.dim, &mut noise_rng);

    let mut observed = Vec::new();
    for &u in &user_rows {
        for &(i, r) in train.row(u) {
            observed.push(PairSample { user: u, item: i, rating: r });
        }
    }
    let mut negatives = Vec::new();
    let mut neg_rng = stream(hp.seed, &format!("joint/neg/{tag}"));
    if !observed.is_empty() {
        let n_neg = (hp.neg_ratio * observed.len() as f64).round() as usize;
        for t in 0..n_neg {
            let base = &observed[t % observed.len()];
            if let Some(item) = sample_unrated(train.row(base.user), train.n_items(), &mut neg_rng)
            {
                negatives.push(PairSample { user: base.user, item, rating: 0.0 });
            }
        }
    }

    let cons = if hp.consistency_on() {
        let mode = hp.mode.code_mode();
        let freeze = |rows: &[u32], side: &SideState, is_user: bool, real_rng: &mut ChaCha8Rng, code_rng: &mut ChaCha8Rng, eps: &BTreeMap<u32, Vec<f64>>| -> Result<ConsPlan, TrainError> {
            let draw = ConsDraw::draw(hp, real_rng, code_rng);
            let mut real_keys = Vec::with_capacity(rows.len());
            let mut code_keys = Vec::with_capacity(rows.len());
            for &r in rows {
                let fwd = forward_entity(side, side_rows(train, is_user, r), &eps[&r], mode)?;
                real_keys.push(combined_euclid_hash(&fwd.zt, &draw.probes, &hp.lsh));
                code_keys.push(hamming_hash(&fwd.sign, &draw.dims));
            }
            Ok(ConsPlan { a: build_similarity(&real_keys), a_prime: build_similarity(&code_keys) })
        };
        let mut ur = stream(hp.seed, &format!("joint/lsh/real/u/{tag}"));
        let mut uc = stream(hp.seed, &format!("joint/lsh/code/u/{tag}"));
        let user = freeze(&user_rows, &state.user, true, &mut ur, &mut uc, &eps_user)?;
        let mut ir = stream(hp.seed, &format!("joint/lsh/real/v/{tag}"));
        let mut ic = stream(hp.seed, &format!("joint/lsh/code/v/{tag}"));
        let item = freeze(&item_rows, &state.item, false, &mut ir, &mut ic, &eps_item)?;
        ConsMode::Frozen { user: Some(user), item: Some(item) }
    } else {
        ConsMode::Off
    };

    Ok(JointPlan { user_rows, item_rows, observed, negatives, eps_user, eps_item, cons })
}

/// Per-epoch training summary; loss terms are running means over the epoch's
/// steps, bucket figures are per-batch peaks.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub terms: LossTerms,
    pub total: f64,
    pub steps: usize,
    /// Total loss recorded at each step, in order (user phase then item
    /// phase), before that step's update.
    pub step_totals: Vec<f64>,
    pub user_buckets: BucketStats,
    pub item_buckets: BucketStats,
}

fn merge_buckets(into: &mut BucketStats, got: Option<BucketStats>) {
    if let Some(b) = got {
        into.buckets = into.buckets.max(b.buckets);
        into.max_size = into.max_size.max(b.max_size);
    }
}

fn run_phase(
    state: &mut ModelState,
    train: &RatingMatrix,
    hp: &Hyperparams,
    epoch: usize,
    side: Active,
    sums: &mut LossTerms,
    step_totals: &mut Vec<f64>,
    buckets: &mut BucketStats,
) -> Result<(), TrainError> {
    let is_user = side == Active::User;
    let tag = if is_user { "u" } else { "v" };
    let n = if is_user { train.n_users() } else { train.n_items() };
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(&mut stream(hp.seed, &format!("shuffle/{tag}/{epoch}")));
    let mut noise_rng = stream(hp.seed, &format!("noise/{tag}/{epoch}"));
    let mut neg_rng = stream(hp.seed, &format!("neg/{tag}/{epoch}"));
    let cons_draw = if hp.consistency_on() {
        let mut real_rng = stream(hp.seed, &format!("lsh/real/{tag}/{epoch}/{}", hp.lsh.seed));
        let mut code_rng = stream(hp.seed, &format!("lsh/code/{tag}/{epoch}/{}", hp.lsh.seed));
        Some(ConsDraw::draw(hp, &mut real_rng, &mut code_rng))
    } else {
        None
    };
    for batch in order.chunks(hp.batch_size) {
        let plan =
            build_phase_plan(train, hp, side, batch, &mut noise_rng, &mut neg_rng, cons_draw.as_ref());
        let out =
            joint_eval(state, train, &plan, hp, hp.mode.code_mode(), side, true, epoch)?;
        let (g_user, g_item) = out.grads.expect("gradients requested");
        if is_user {
            state.adam_user.step(&mut state.user, &g_user);
            state.user.constrain();
            merge_buckets(buckets, out.user_buckets);
        } else {
            state.adam_item.step(&mut state.item, &g_item);
            state.item.constrain();
            merge_buckets(buckets, out.item_buckets);
        }
        sums.accumulate(&out.terms);
        step_totals.push(out.terms.total(hp.lambda));
    }
    Ok(())
}

/// One full epoch: a user phase then an item phase, shuffled batches, Adam
/// update plus invertibility projection after every step. On a non-finite
/// loss the failing update is not applied and the error propagates.
pub fn fit_epoch(
    state: &mut ModelState,
    data: &SplitDataset,
    hp: &Hyperparams,
    epoch: usize,
) -> Result<EpochReport, TrainError> {
    let mut sums = LossTerms::default();
    let mut step_totals = Vec::new();
    let mut user_buckets = BucketStats::default();
    let mut item_buckets = BucketStats::default();
    run_phase(state, &data.train, hp, epoch, Active::User, &mut sums, &mut step_totals, &mut user_buckets)?;
    run_phase(state, &data.train, hp, epoch, Active::Item, &mut sums, &mut step_totals, &mut item_buckets)?;
    let steps = step_totals.len();
    let total = if steps > 0 {
        sums.scale(1.0 / steps as f64);
        step_totals.iter().sum::<f64>() / steps as f64
    } else {
        0.0
    };
    log::debug!(
        "epoch {epoch}: user buckets {}/{} max {}, item buckets {}/{} max {}",
        user_buckets.buckets,
        data.train.n_users(),
        user_buckets.max_size,
        item_buckets.buckets,
        data.train.n_items(),
        item_buckets.max_size
    );
    Ok(EpochReport { epoch, terms: sums, total, steps, step_totals, user_buckets, item_buckets })
}

/// Deterministic codes from the posterior means: z0 = mu, flow, sign, pack.
pub fn export_codes(
    state: &ModelState,
    train: &RatingMatrix,
) -> Result<(Vec<PackedCode>, Vec<PackedCode>), TrainError> {
    let side = |is_user: bool, params: &SideState, n: usize| -> Result<Vec<PackedCode>, TrainError> {
        let mut out = Vec::with_capacity(n);
        for r in 0..n as u32 {
            let (gauss, _) = encode_sparse(&params.encoder, side_rows(train, is_user, r));
            let (result, _) = flow_forward_cached(&gauss.mu, &params.flow)?;
            out.push(pack(&binarize_st(&result.zt)));
        }
        Ok(out)
    };
    let users = side(true, &state.user, train.n_users())?;
    let items = side(false, &state.item, train.n_items())?;
    Ok((users, items))
}

/// Index of the first maximum, the checkpoint-selection rule.
pub fn first_argmax(vals: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in vals.iter().enumerate() {
        if best.map_or(true, |b| v > vals[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub report: EpochReport,
    pub val_ndcg10: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    /// Final state, rewound to the best-validation epoch.
    pub state: ModelState,
    pub log: Vec<EpochRecord>,
    /// 1-based epoch of the kept checkpoint; 0 means the initial state
    /// (epochs = 0).
    pub best_epoch: usize,
    pub best_val_ndcg10: f64,
    pub user_codes: Vec<PackedCode>,
    pub item_codes: Vec<PackedCode>,
}

/// Runs the epochs, scores validation nDCG@10 after each, keeps the first
/// best checkpoint, and exports its codes.
pub fn train(hp: &Hyperparams, data: &SplitDataset) -> Result<TrainOutput, TrainError> {
    hp.validate()?;
    let mut state = ModelState::init(hp, data.n_users(), data.n_items());
    let mut log: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(usize, f64, SideState, SideState)> = None;
    for epoch in 1..=hp.epochs {
        let report = fit_epoch(&mut state, data, hp, epoch)?;
        let (uc, ic) = export_codes(&state, &data.train)?;
        let val = crate::metrics::evaluate(&uc, &ic, &data.train, &data.val, &[10]).ndcg[0];
        log::info!(
            "epoch {epoch}: total {:.5} recon {:.5} cons {:.5} val nDCG@10 {:.5}",
            report.total,
            report.terms.recon,
            report.terms.cons,
            val
        );
        log.push(EpochRecord { report, val_ndcg10: val });
        if best.as_ref().map_or(true, |b| val > b.1) {
            best = Some((epoch, val, state.user.clone(), state.item.clone()));
        }
    }
    debug_assert_eq!(
        best.as_ref().map(|b| b.0),
        first_argmax(&log.iter().map(|r| r.val_ndcg10).collect::<Vec<_>>()).map(|i| i + 1)
    );
    let (best_epoch, best_val) = match best {
        Some((e, v, u, i)) => {
            state.user = u;
            state.item = i;
            (e, v)
        }
        None => {
            // epochs = 0: keep the initial state, score it for the record.
            let (uc, ic) = export_codes(&state, &data.train)?;
            let val = crate::metrics::evaluate(&uc, &ic, &data.train, &data.val, &[10]).ndcg[0];
            (0, val)
        }
    };
    let (user_codes, item_codes) = export_codes(&state, &data.train)?;
    Ok(TrainOutput { state, log, best_epoch, best_val_ndcg10: best_val, user_codes, item_codes })
}

/// Human-readable one-line config echo for logs and manifests.
pub fn describe(hp: &Hyperparams) -> String {
    format!(
        "mode={:?} dim={} hidden={} flow_depth={} gamma={} lambda={} lr={} batch={} epochs={} neg_ratio={} seed={} consistency={}",
        hp.mode,
        hp.dim,
        hp.hidden,
        hp.flow_depth,
        hp.gamma,
        hp.lambda,
        hp.lr,
        hp.batch_size,
        hp.epochs,
        hp.neg_ratio,
        hp.seed,
        hp.consistency_enabled
    )
}
