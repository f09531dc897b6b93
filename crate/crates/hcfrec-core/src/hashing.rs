//! Sign binarization with a straight-through backward rule, bit-packed codes,
//! Hamming arithmetic, the code affinity score, the Poisson reconstruction
//! loss, and exhaustive top-k retrieval by Hamming distance.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

// Inherent f64 math is std-only; the trait supplies it (via libm) otherwise.
#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::math::dot;

/// A ±1 code. Every entry is exactly -1.0 or +1.0, which keeps inner products
/// exact integers in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct HashCode {
    pub bits: Vec<f64>,
}

impl HashCode {
    pub fn new(bits: Vec<f64>) -> Self {
        debug_assert!(bits.iter().all(|&b| b == 1.0 || b == -1.0));
        HashCode { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// Forward sign with the tie sign(0) = +1.
///
/// The backward contract is the straight-through estimator: downstream
/// gradients pass to zT unchanged ([`binarize_st_backward`]).
pub fn binarize_st(zt: &[f64]) -> HashCode {
    debug_assert!(zt.iter().all(|v| v.is_finite()));
    HashCode { bits: zt.iter().map(|&v| if v < 0.0 { -1.0 } else { 1.0 }).collect() }
}

/// Straight-through backward: adds the code gradient into the zT gradient
/// unchanged (identity surrogate).
pub fn binarize_st_backward(g_code: &[f64], g_zt: &mut [f64]) {
    debug_assert_eq!(g_code.len(), g_zt.len());
    for (g, &gc) in g_zt.iter_mut().zip(g_code) {
        *g += gc;
    }
}

/// Bit-packed code: bit k of the word stream is set iff code entry k is +1;
/// trailing bits of the last word are zero.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PackedCode {
    words: Vec<u64>,
    d: usize,
}

impl PackedCode {
    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Rebuilds from raw words, e.g. when loading a code export. Trailing
    /// bits beyond `d` are cleared to restore the packing invariant.
    pub fn from_words(mut words: Vec<u64>, d: usize) -> Self {
        debug_assert_eq!(words.len(), d.div_ceil(64));
        let rem = d % 64;
        if rem != 0 {
            if let Some(last) = words.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
        PackedCode { words, d }
    }
}

pub fn pack(code: &HashCode) -> PackedCode {
    let d = code.bits.len();
    let mut words = vec![0u64; d.div_ceil(64)];
    for (k, &b) in code.bits.iter().enumerate() {
        if b > 0.0 {
            words[k / 64] |= 1u64 << (k % 64);
        }
    }
    PackedCode { words, d }
}

pub fn unpack(pc: &PackedCode) -> HashCode {
    let bits = (0..pc.d)
        .map(|k| if pc.words[k / 64] >> (k % 64) & 1 == 1 { 1.0 } else { -1.0 })
        .collect();
    HashCode { bits }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DimMismatch {
    pub left: usize,
    pub right: usize,
}

impl fmt::Display for DimMismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "code dimensions differ: {} vs {}", self.left, self.right)
    }
}

/// Popcount of XOR across the word stream.
pub fn hamming(x: &PackedCode, y: &PackedCode) -> Result<usize, DimMismatch> {
    if x.d != y.d {
        return Err(DimMismatch { left: x.d, right: y.d });
    }
    Ok(x.words.iter().zip(&y.words).map(|(&a, &b)| (a ^ b).count_ones() as usize).sum())
}

/// (bu'bv + D) / (2D), the agreement fraction; equals 1 - hamming/D.
pub fn affinity(bu: &HashCode, bv: &HashCode) -> f64 {
    debug_assert_eq!(bu.len(), bv.len());
    let d = bu.len() as f64;
    (dot(&bu.bits, &bv.bits) + d) / (2.0 * d)
}

/// Poisson negative log-likelihood with the rate constant dropped:
/// -(r log s - s).
pub fn poisson_nll(r: f64, s: f64) -> f64 {
    -(r * s.ln() - s)
}

pub const AFFINITY_EPS: f64 = 1e-6;

/// Reconstruction loss for one rating: the affinity is clamped into
/// [eps, 1] before the Poisson term so antipodal codes cannot produce log 0.
pub fn poisson_recon_loss(r: f64, bu: &HashCode, bv: &HashCode, eps: f64) -> f64 {
    debug_assert!(r >= 0.0);
    let s = affinity(bu, bv).clamp(eps, 1.0);
    poisson_nll(r, s)
}

/// Indices of the k nearest items by Hamming distance, ties broken by
/// ascending index; excluded indices never appear. Returns min(k, eligible)
/// entries. All items must share the query's dimension.
pub fn topk_by_hamming(
    query: &PackedCode,
    items: &[PackedCode],
    k: usize,
    mut exclude: impl FnMut(usize) -> bool,
) -> Vec<usize> {
    use alloc::collections::BinaryHeap;
    if k == 0 {
        return Vec::new();
    }
    // Max-heap of the current worst keeps the scan at O(n log k).
    let mut heap: BinaryHeap<(usize, usize)> = BinaryHeap::with_capacity(k + 1);
    for (i, item) in items.iter().enumerate() {
        if exclude(i) {
            continue;
        }
        debug_assert_eq!(item.d, query.d);
        let d: usize = query.words.iter().zip(&item.words).map(|(&a, &b)| (a ^ b).count_ones() as usize).sum();
        if heap.len() < k {
            heap.push((d, i));
        } else if let Some(&worst) = heap.peek() {
            if (d, i) < worst {
                heap.pop();
                heap.push((d, i));
            }
        }
    }
    let mut out: Vec<(usize, usize)> = heap.into_vec();
    out.sort_unstable();
    out.into_iter().map(|(_, i)| i).collect()
}
