//! Ranking metrics (nDCG@k, mAP@k) and code-based evaluation over a
//! train/test split.
//!
//! Relevance is binary: an item is relevant to a user iff the test split
//! holds an interaction for the pair. Candidates are ranked by Hamming
//! distance with the retrieval tie rule (ascending index), excluding the
//! user's training items.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

// Inherent f64 math is std-only; the trait supplies it (via libm) otherwise.
#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::hashing::{topk_by_hamming, PackedCode};
use crate::ingest::RatingMatrix;

/// Default ranking cutoffs.
pub const DEFAULT_KS: [usize; 3] = [2, 6, 10];

#[inline]
fn log2(x: f64) -> f64 {
    x.ln() / core::f64::consts::LN_2
}

/// Binary-gain nDCG: DCG = sum over positions p <= k of rel_p / log2(p+1),
/// normalized by the ideal DCG of min(|relevant|, k) leading ones. Empty
/// relevant sets score 0 by convention.
pub fn ndcg_at_k(ranked: &[usize], relevant: &BTreeSet<usize>, k: usize) -> f64 {
    debug_assert!(k >= 1);
    if relevant.is_empty() {
        return 0.0;
    }
    let mut dcg = 0.0;
    for (p, item) in ranked.iter().take(k).enumerate() {
        if relevant.contains(item) {
            dcg += 1.0 / log2(p as f64 + 2.0);
        }
    }
    let ideal = relevant.len().min(k);
    let mut idcg = 0.0;
    for p in 0..ideal {
        idcg += 1.0 / log2(p as f64 + 2.0);
    }
    dcg / idcg
}

/// AP@k = (sum over hit positions p <= k of precision@p) / min(|relevant|, k);
/// 0 when relevant is empty.
pub fn map_at_k(ranked: &[usize], relevant: &BTreeSet<usize>, k: usize) -> f64 {
    debug_assert!(k >= 1);
    if relevant.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (p, item) in ranked.iter().take(k).enumerate() {
        if relevant.contains(item) {
            hits += 1;
            acc += hits as f64 / (p + 1) as f64;
        }
    }
    acc / relevant.len().min(k) as f64
}

/// One evaluated user's scores; `ndcg` is parallel to the evaluation's `ks`.
#[derive(Clone, Debug, PartialEq)]
pub struct UserMetrics {
    pub user: u32,
    pub ndcg: Vec<f64>,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub ks: Vec<usize>,
    /// Cutoff used for the mAP column (the largest of `ks`).
    pub map_k: usize,
    /// Mean nDCG per cutoff, parallel to `ks`.
    pub ndcg: Vec<f64>,
    pub map: f64,
    pub per_user: Vec<UserMetrics>,
    pub evaluated_users: usize,
    /// Users with no test interactions, skipped per the contract.
    pub skipped_users: usize,
}

/// Scores one user, or None when the user has nothing in the test split.
/// Pure; callers may fan this out across users.
pub fn evaluate_user(
    user: u32,
    user_code: &PackedCode,
    item_codes: &[PackedCode],
    train: &RatingMatrix,
    test: &RatingMatrix,
    ks: &[usize],
) -> Option<UserMetrics> {
    let relevant: BTreeSet<usize> = test.row(user).iter().map(|&(i, _)| i as usize).collect();
    if relevant.is_empty() {
        return None;
    }
    let max_k = ks.iter().copied().max().unwrap_or(1);
    let ranked = topk_by_hamming(user_code, item_codes, max_k, |i| train.has_entry(user, i as u32));
    let ndcg = ks.iter().map(|&k| ndcg_at_k(&ranked, &relevant, k)).collect();
    let ap = map_at_k(&ranked, &relevant, max_k);
    Some(UserMetrics { user, ndcg, ap })
}

/// Fixed-order reduction of per-user scores into the report; parallel and
/// sequential callers produce bitwise-identical results by feeding users in
/// ascending index order.
pub fn aggregate(ks: &[usize], per_user: Vec<UserMetrics>, skipped_users: usize) -> MetricsReport {
    let n = per_user.len();
    let mut ndcg = alloc::vec![0.0; ks.len()];
    let mut map = 0.0;
    for um in &per_user {
        for (acc, &v) in ndcg.iter_mut().zip(&um.ndcg) {
            *acc += v;
        }
        map += um.ap;
    }
    if n > 0 {
        for acc in ndcg.iter_mut() {
            *acc /= n as f64;
        }
        map /= n as f64;
    }
    MetricsReport {
        ks: ks.to_vec(),
        map_k: ks.iter().copied().max().unwrap_or(1),
        ndcg,
        map,
        per_user,
        evaluated_users: n,
        skipped_users,
    }
}

/// Ranks every user's non-training items by Hamming distance and averages
/// the metrics over users with test interactions.
pub fn evaluate(
    user_codes: &[PackedCode],
    item_codes: &[PackedCode],
    train: &RatingMatrix,
    test: &RatingMatrix,
    ks: &[usize],
) -> MetricsReport {
    debug_assert!(!ks.is_empty());
    let mut per_user = Vec::new();
    let mut skipped = 0usize;
    for (u, code) in user_codes.iter().enumerate() {
        match evaluate_user(u as u32, code, item_codes, train, test, ks) {
            Some(m) => per_user.push(m),
            None => skipped += 1,
        }
    }
    aggregate(ks, per_user, skipped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hashing::{pack, HashCode};
    use crate::ingest::RatingMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(items: &[usize]) -> BTreeSet<usize> {
        items.iter().copied().collect()
    }

    #[test]
    fn ndcg_hand_cases() {
        assert_eq!(ndcg_at_k(&[0, 1, 2], &set(&[0, 1, 2, 3]), 3), 1.0);
        assert_eq!(ndcg_at_k(&[0, 1, 2], &set(&[]), 3), 0.0);

        // Pattern (1,0,1) with two relevant: DCG = 1 + 1/2, IDCG = 1 + 1/log2(3).
        let got = ndcg_at_k(&[0, 5, 1], &set(&[0, 1]), 3);
        let idcg = 1.0 + 1.0 / 3f64.log2();
        assert!((got - 1.5 / idcg).abs() < 1e-15);
        assert!((got - 0.91972).abs() < 1e-5);
    }

    #[test]
    fn map_hand_cases() {
        assert_eq!(map_at_k(&[0, 1, 2], &set(&[0, 1, 2]), 3), 1.0);
        assert_eq!(map_at_k(&[7, 8, 9], &set(&[0, 1]), 3), 0.0);
        assert_eq!(map_at_k(&[0, 1], &set(&[]), 2), 0.0);

        // Hits at ranks 1 and 3 with two relevant: (1 + 2/3) / 2.
        let got = map_at_k(&[0, 5, 1], &set(&[0, 1]), 3);
        assert!((got - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((got - 0.83333).abs() < 1e-5);
    }

    #[test]
    fn metrics_stay_in_unit_interval_and_reward_a_relevant_top_hit() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        for _ in 0..300 {
            let n = rng.gen_range(1..12usize);
            let ranked: Vec<usize> = {
                let mut v: Vec<usize> = (0..n).collect();
                for i in (1..n).rev() {
                    v.swap(i, rng.gen_range(0..=i));
                }
                v
            };
            let relevant: BTreeSet<usize> =
                (0..n).filter(|_| rng.gen_bool(0.4)).collect();
            let k = rng.gen_range(1..=10usize);
            let nd = ndcg_at_k(&ranked, &relevant, k);
            let ap = map_at_k(&ranked, &relevant, k);
            assert!((0.0..=1.0).contains(&nd));
            assert!((0.0..=1.0).contains(&ap));

            // Marking the current top item relevant never hurts either metric.
            if !relevant.contains(&ranked[0]) {
                let mut grown = relevant.clone();
                grown.insert(ranked[0]);
                assert!(ndcg_at_k(&ranked, &grown, k) >= nd - 1e-12);
                assert!(map_at_k(&ranked, &grown, k) >= ap - 1e-12);
            }
        }
    }

    fn matrix(n_users: usize, n_items: usize, entries: &[(u32, u32)]) -> RatingMatrix {
        let triples: Vec<(u32, u32, f64)> = entries.iter().map(|&(u, i)| (u, i, 5.0)).collect();
        RatingMatrix::from_indexed(n_users, n_items, &triples).unwrap()
    }

    #[test]
    fn identical_item_codes_rank_in_index_order() {
        let code = pack(&HashCode::new(alloc::vec![1.0, -1.0, 1.0, 1.0]));
        let item_codes = alloc::vec![code.clone(); 5];
        let train = matrix(1, 5, &[(0, 0)]);
        let test = matrix(1, 5, &[(0, 3)]);
        let um = evaluate_user(0, &code, &item_codes, &train, &test, &[2, 6, 10]).unwrap();
        // Ranking is (1,2,3,4); the single relevant item sits at rank 3.
        let expect = 1.0 / 4f64.log2();
        assert!((um.ndcg[1] - expect).abs() < 1e-15);
        assert_eq!(um.ndcg[0], 0.0);
        assert!((um.ap - (1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn evaluate_skips_users_without_test_items_and_excludes_training_items() {
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let d = 8;
        let user_codes: Vec<PackedCode> = (0..3)
            .map(|_| pack(&HashCode::new((0..d).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect())))
            .collect();
        let item_codes: Vec<PackedCode> = (0..6)
            .map(|_| pack(&HashCode::new((0..d).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect())))
            .collect();
        let train = matrix(3, 6, &[(0, 0), (0, 1), (1, 2)]);
        let test = matrix(3, 6, &[(0, 3), (1, 4)]);
        let report = evaluate(&user_codes, &item_codes, &train, &test, &DEFAULT_KS);
        assert_eq!(report.evaluated_users, 2);
        assert_eq!(report.skipped_users, 1);
        assert_eq!(report.map_k, 10);

        let ranked = topk_by_hamming(&user_codes[0], &item_codes, 10, |i| train.has_entry(0, i as u32));
        assert!(!ranked.contains(&0) && !ranked.contains(&1));
        assert_eq!(ranked.len(), 4);
    }

    #[test]
    fn evaluate_matches_brute_force_on_random_instances() {
        // Naive re-implementation: full distance sort, direct metric loops.
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        for _ in 0..100 {
            let d = 8;
            let n_users = rng.gen_range(1..5usize);
            let n_items = rng.gen_range(2..9usize);
            let rand_code = |rng: &mut ChaCha8Rng| {
                pack(&HashCode::new((0..d).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect()))
            };
            let user_codes: Vec<PackedCode> = (0..n_users).map(|_| rand_code(&mut rng)).collect();
            let item_codes: Vec<PackedCode> = (0..n_items).map(|_| rand_code(&mut rng)).collect();
            let mut train_e = Vec::new();
            let mut test_e = Vec::new();
            for u in 0..n_users as u32 {
                for i in 0..n_items as u32 {
                    match rng.gen_range(0..4) {
                        0 => train_e.push((u, i)),
                        1 => test_e.push((u, i)),
                        _ => {}
                    }
                }
            }
            let train = matrix(n_users, n_items, &train_e);
            let test = matrix(n_users, n_items, &test_e);
            let got = evaluate(&user_codes, &item_codes, &train, &test, &DEFAULT_KS);

            let mut naive_users = Vec::new();
            for u in 0..n_users {
                let relevant: BTreeSet<usize> = test_e
                    .iter()
                    .filter(|&&(tu, _)| tu == u as u32)
                    .map(|&(_, i)| i as usize)
                    .collect();
                if relevant.is_empty() {
                    continue;
                }
                let mut order: Vec<(usize, usize)> = (0..n_items)
                    .filter(|&i| !train_e.contains(&(u as u32, i as u32)))
                    .map(|i| (crate::hashing::hamming(&user_codes[u], &item_codes[i]).unwrap(), i))
                    .collect();
                order.sort_unstable();
                let ranked: Vec<usize> = order.into_iter().take(10).map(|(_, i)| i).collect();
                let ndcg: Vec<f64> = DEFAULT_KS.iter().map(|&k| ndcg_at_k(&ranked, &relevant, k)).collect();
                let ap = map_at_k(&ranked, &relevant, 10);
                naive_users.push(UserMetrics { user: u as u32, ndcg, ap });
            }
            let want = aggregate(&DEFAULT_KS, naive_users, n_users - got.evaluated_users);
            assert_eq!(got, want);
        }
    }
}
