//! Parallel evaluation fan-out.
//!
//! Users are scored independently, so the per-user pass runs on a rayon
//! pool. Results are collected in user order and reduced by the core's
//! fixed-order aggregation, which makes the report bitwise identical to the
//! sequential path no matter the thread count.

use hcfrec_core::hashing::PackedCode;
use hcfrec_core::ingest::RatingMatrix;
use hcfrec_core::metrics::{aggregate, evaluate_user, MetricsReport, UserMetrics};
use rayon::prelude::*;

/// Thread-count override; unset or unparsable means rayon's default.
pub const THREADS_ENV: &str = "HCFREC_THREADS";

pub fn threads_from_env() -> Option<usize> {
    parse_threads(std::env::var(THREADS_ENV).ok().as_deref())
}

fn parse_threads(raw: Option<&str>) -> Option<usize> {
    raw?.trim().parse().ok().filter(|&n| n > 0)
}

/// [`hcfrec_core::metrics::evaluate`] distributed over users. `threads`
/// limits the pool; None uses the process-wide default.
pub fn evaluate_parallel(
    threads: Option<usize>,
    user_codes: &[PackedCode],
    item_codes: &[PackedCode],
    train: &RatingMatrix,
    test: &RatingMatrix,
    ks: &[usize],
) -> MetricsReport {
    let scan = || {
        let scored: Vec<Option<UserMetrics>> = (0..user_codes.len() as u32)
            .into_par_iter()
            .map(|u| evaluate_user(u, &user_codes[u as usize], item_codes, train, test, ks))
            .collect();
        let skipped = scored.iter().filter(|m| m.is_none()).count();
        let per_user: Vec<UserMetrics> = scored.into_iter().flatten().collect();
        aggregate(ks, per_user, skipped)
    };
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool construction only fails on resource exhaustion")
            .install(scan),
        None => scan(),
    }
}
