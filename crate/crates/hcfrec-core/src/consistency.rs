//! Locality-sensitive bucketing over real-valued latents and hash codes, and
//! the cluster-consistency loss that makes the two neighborhood structures
//! agree.
//!
//! Real-valued vectors are bucketed with the Euclidean scheme
//! h(z) = floor((a.z + c)/w), codes by reading sampled bit positions as a
//! binary number. Elements sharing a bucket key are "similar"; the loss pulls
//! the real latents of code-similar pairs together and the codes of
//! real-similar pairs together.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::fmt;
// Inherent f64 math is std-only; the trait supplies it (via libm) otherwise.
#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::Rng;

use crate::hashing::HashCode;
use crate::math::{dot, norm2};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LshConfig {
    /// Bucket width of the Euclidean hash.
    pub w: f64,
    /// Base of the combined key.
    pub b: u32,
    /// Rounds per key.
    pub l: usize,
    pub seed: u64,
}

impl Default for LshConfig {
    fn default() -> Self {
        LshConfig { w: 8.0, b: 4, l: 1, seed: 0 }
    }
}

/// One Euclidean hash draw: direction a ~ N(0, I), offset c ~ U(0, w).
#[derive(Clone, Debug)]
pub struct EuclidProbe {
    pub a: Vec<f64>,
    pub c: f64,
}

impl EuclidProbe {
    pub fn draw(dim: usize, w: f64, rng: &mut impl Rng) -> Self {
        debug_assert!(w > 0.0);
        let a = (0..dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let c = rng.gen_range(0.0..w);
        EuclidProbe { a, c }
    }
}

/// floor((a.z + c)/w) toward negative infinity.
pub fn euclid_hash(z: &[f64], probe: &EuclidProbe, w: f64) -> i64 {
    debug_assert!(w > 0.0);
    ((dot(&probe.a, z) + probe.c) / w).floor() as i64
}

/// Combined key over L probes: sum of B^l * h_l with the exponent starting
/// at 1. Wide arithmetic; overflow is a bug, not a wraparound.
pub fn combined_euclid_hash(z: &[f64], probes: &[EuclidProbe], cfg: &LshConfig) -> i128 {
    debug_assert_eq!(probes.len(), cfg.l);
    let mut key: i128 = 0;
    for (l, probe) in probes.iter().enumerate() {
        let h = euclid_hash(z, probe, cfg.w) as i128;
        let weight = (cfg.b as i128).checked_pow(l as u32 + 1).expect("lsh key base overflow");
        key = key.checked_add(weight.checked_mul(h).expect("lsh key overflow")).expect("lsh key overflow");
    }
    key
}

/// L distinct dimension indices, shared by every element of a batch.
pub fn sample_dims(dim: usize, l: usize, rng: &mut impl Rng) -> Vec<usize> {
    debug_assert!(l <= dim);
    rand::seq::index::sample(rng, dim, l).into_vec()
}

/// Key over sampled bit positions: bit l is (code[dims[l]] + 1)/2, weighted
/// positionally by 2^(l-1) for l = 1..L.
pub fn hamming_hash(code: &HashCode, dims: &[usize]) -> i128 {
    let mut key: i128 = 0;
    for (l, &d) in dims.iter().enumerate() {
        if code.bits[d] > 0.0 {
            key |= 1i128 << l;
        }
    }
    key
}

/// Unordered similar pairs within one batch; stored with i1 < i2 so each pair
/// counts once.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SimilarityPairs {
    pub n: usize,
    pairs: BTreeSet<(usize, usize)>,
}

impl SimilarityPairs {
    pub fn empty(n: usize) -> Self {
        SimilarityPairs { n, pairs: BTreeSet::new() }
    }

    /// Test helper and oracle hook; inserts normalized.
    pub fn insert(&mut self, i: usize, j: usize) {
        debug_assert!(i != j && i < self.n && j < self.n);
        self.pairs.insert((i.min(j), i.max(j)));
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.pairs.contains(&(i.min(j), i.max(j)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Marks {i, j} similar iff keys[i] == keys[j].
pub fn build_similarity(keys: &[i128]) -> SimilarityPairs {
    let mut buckets: BTreeMap<i128, Vec<usize>> = BTreeMap::new();
    for (i, &k) in keys.iter().enumerate() {
        buckets.entry(k).or_default().push(i);
    }
    let mut pairs = SimilarityPairs::empty(keys.len());
    for members in buckets.values() {
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                pairs.insert(i, j);
            }
        }
    }
    pairs
}

/// Per-epoch bucket diagnostics for the training log.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BucketStats {
    pub buckets: usize,
    pub max_size: usize,
}

pub fn bucket_stats(keys: &[i128]) -> BucketStats {
    let mut counts: BTreeMap<i128, usize> = BTreeMap::new();
    for &k in keys {
        *counts.entry(k).or_insert(0) += 1;
    }
    BucketStats { buckets: counts.len(), max_size: counts.values().copied().max().unwrap_or(0) }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchMismatch {
    pub z: usize,
    pub codes: usize,
    pub pairs_n: usize,
}

impl fmt::Display for BatchMismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "misaligned consistency batch: {} latents, {} codes, pair sets sized for {}",
            self.z, self.codes, self.pairs_n
        )
    }
}

/// Sum over `pairs` of the Euclidean distances between batch members.
pub fn pair_euclid_loss(vecs: &[Vec<f64>], pairs: &SimilarityPairs) -> f64 {
    let mut acc = 0.0;
    for (i, j) in pairs.iter() {
        let diff: Vec<f64> = vecs[i].iter().zip(&vecs[j]).map(|(&x, &y)| x - y).collect();
        acc += norm2(&diff);
    }
    acc
}

/// Sum over `pairs` of the Hamming-style distances (D - c_i'c_j)/2. For ±1
/// codes this is the exact Hamming distance; the trainer also evaluates it on
/// real-valued surrogates under the straight-through rule.
pub fn pair_code_loss(vecs: &[Vec<f64>], pairs: &SimilarityPairs) -> f64 {
    let mut acc = 0.0;
    for (i, j) in pairs.iter() {
        acc += (vecs[i].len() as f64 - dot(&vecs[i], &vecs[j])) / 2.0;
    }
    acc
}

/// Raw pair sum for one side:
/// sum over a_prime (code-bucket pairs) of ||z_i1 - z_i2||_2 plus sum over
/// a (real-bucket pairs) of (D - b_i1'b_i2)/2, each unordered pair once.
///
/// a_prime must come from hash-code keys and a from real-valued keys; the
/// cross-wiring is the point of the regularizer.
pub fn consistency_loss(
    z_batch: &[Vec<f64>],
    code_batch: &[HashCode],
    a_prime: &SimilarityPairs,
    a: &SimilarityPairs,
) -> Result<f64, BatchMismatch> {
    let n = z_batch.len();
    if code_batch.len() != n || a_prime.n != n || a.n != n {
        return Err(BatchMismatch { z: n, codes: code_batch.len(), pairs_n: a_prime.n.min(a.n) });
    }
    let codes: Vec<Vec<f64>> = code_batch.iter().map(|c| c.bits.clone()).collect();
    Ok(pair_euclid_loss(z_batch, a_prime) + pair_code_loss(&codes, a))
}

/// Gradient of the Euclidean term w.r.t. the latents, scaled by `weight` and
/// accumulated into `g_z`. Zero-distance pairs contribute nothing (the
/// norm's subgradient at 0 is taken as 0).
pub fn consistency_grad_z(
    z_batch: &[Vec<f64>],
    a_prime: &SimilarityPairs,
    weight: f64,
    g_z: &mut [Vec<f64>],
) {
    for (i, j) in a_prime.iter() {
        let diff: Vec<f64> = z_batch[i].iter().zip(&z_batch[j]).map(|(&x, &y)| x - y).collect();
        let dist = norm2(&diff);
        if dist == 0.0 {
            continue;
        }
        let scale = weight / dist;
        for (k, &dk) in diff.iter().enumerate() {
            g_z[i][k] += scale * dk;
            g_z[j][k] -= scale * dk;
        }
    }
}

/// Gradient of [`pair_code_loss`] w.r.t. the code entries, scaled by `weight`
/// and accumulated into `g_code`: d/dc_i of (D - c_i'c_j)/2 is -c_j/2. The
/// caller routes it onward through the straight-through rule.
pub fn consistency_grad_code(
    code_batch: &[Vec<f64>],
    a: &SimilarityPairs,
    weight: f64,
    g_code: &mut [Vec<f64>],
) {
    for (i, j) in a.iter() {
        for k in 0..code_batch[i].len() {
            g_code[i][k] -= weight * code_batch[j][k] / 2.0;
            g_code[j][k] -= weight * code_batch[i][k] / 2.0;
        }
    }
}
