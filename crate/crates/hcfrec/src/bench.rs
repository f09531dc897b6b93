//! Retrieval benchmark: Hamming top-k over packed codes against dense
//! inner-product top-k over the same vectors in f64.
//!
//! Both scans run single threaded over flat row-major buffers so the
//! comparison measures the representations, not allocator layout or thread
//! scheduling. For sign codes the two rankings agree exactly (the dot
//! product of two ±1 vectors is D - 2 * hamming), and the run checks that
//! on every query before any timing starts.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};

#[derive(Clone, Debug)]
pub struct BenchConfig {
    /// Item counts to scan, one measurement point each.
    pub sizes: Vec<usize>,
    /// Code length. Timing favors neither side, but the storage ratio is
    /// exact only for multiples of 8.
    pub dim: usize,
    /// Neighbors retrieved per query.
    pub k: usize,
    /// Queries per timed scan pass.
    pub queries: usize,
    /// Trials per point; the reported time is the median.
    pub trials: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![100, 1_000, 10_000, 100_000, 200_000],
            dim: 64,
            k: 10,
            queries: 16,
            trials: 3,
            seed: 42,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BenchPoint {
    pub n: usize,
    /// Median wall time of one full scan pass (all queries), nanoseconds.
    pub hamming_ns: f64,
    pub float_ns: f64,
    pub speedup: f64,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub dim: usize,
    pub k: usize,
    pub queries: usize,
    pub points: Vec<BenchPoint>,
    /// Squared Pearson correlation of log time against log n; near 1 means
    /// the scan really is linear in n.
    pub hamming_log_r2: f64,
    pub float_log_r2: f64,
    /// Query rankings compared (and found identical) across the whole run.
    pub rankings_checked: usize,
}

/// Sign codes for `n` items, one `words_per` stripe of u64 per row, plus the
/// same vectors expanded to ±1.0 in a dense row-major buffer.
struct ScanData {
    n: usize,
    d: usize,
    words_per: usize,
    words: Vec<u64>,
    floats: Vec<f64>,
}

impl ScanData {
    fn random(n: usize, d: usize, rng: &mut impl Rng) -> Self {
        let words_per = d.div_ceil(64);
        let mut words = vec![0u64; n * words_per];
        let rem = d % 64;
        for row in words.chunks_mut(words_per) {
            for w in row.iter_mut() {
                *w = rng.gen();
            }
            if rem != 0 {
                *row.last_mut().unwrap() &= (1u64 << rem) - 1;
            }
        }
        let mut floats = vec![0.0f64; n * d];
        for i in 0..n {
            for j in 0..d {
                let bit = words[i * words_per + j / 64] >> (j % 64) & 1;
                floats[i * d + j] = if bit == 1 { 1.0 } else { -1.0 };
            }
        }
        ScanData { n, d, words_per, words, floats }
    }

    fn word_row(&self, i: usize) -> &[u64] {
        &self.words[i * self.words_per..(i + 1) * self.words_per]
    }

    fn float_row(&self, i: usize) -> &[f64] {
        &self.floats[i * self.d..(i + 1) * self.d]
    }
}

/// k nearest by Hamming distance, ties by ascending index.
fn scan_hamming(query: &[u64], data: &ScanData, k: usize) -> Vec<usize> {
    let mut heap: std::collections::BinaryHeap<(usize, usize)> =
        std::collections::BinaryHeap::with_capacity(k + 1);
    for i in 0..data.n {
        let row = data.word_row(i);
        let mut dist = 0usize;
        for (a, b) in query.iter().zip(row) {
            dist += (a ^ b).count_ones() as usize;
        }
        if heap.len() < k {
            heap.push((dist, i));
        } else if let Some(&worst) = heap.peek() {
            if (dist, i) < worst {
                heap.pop();
                heap.push((dist, i));
            }
        }
    }
    let mut out = heap.into_vec();
    out.sort_unstable();
    out.into_iter().map(|(_, i)| i).collect()
}

/// Descending dot product with the index tiebreak, as a totally ordered key.
/// All inputs are finite, so total_cmp agrees with the usual order.
#[derive(PartialEq)]
struct DotKey {
    neg_dot: f64,
    idx: usize,
}

impl Eq for DotKey {}

impl Ord for DotKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.neg_dot.total_cmp(&other.neg_dot).then(self.idx.cmp(&other.idx))
    }
}

impl PartialOrd for DotKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// k largest by inner product, ties by ascending index.
fn scan_float(query: &[f64], data: &ScanData, k: usize) -> Vec<usize> {
    let mut heap: std::collections::BinaryHeap<DotKey> =
        std::collections::BinaryHeap::with_capacity(k + 1);
    for i in 0..data.n {
        let row = data.float_row(i);
        let mut dot = 0.0;
        for (a, b) in query.iter().zip(row) {
            dot += a * b;
        }
        let key = DotKey { neg_dot: -dot, idx: i };
        if heap.len() < k {
            heap.push(key);
        } else if let Some(worst) = heap.peek() {
            if key < *worst {
                heap.pop();
                heap.push(key);
            }
        }
    }
    let mut out: Vec<DotKey> = heap.into_vec();
    out.sort_unstable_by(|a, b| a.cmp(b));
    out.into_iter().map(|key| key.idx).collect()
}

#[derive(Debug)]
pub struct RankingMismatch {
    pub n: usize,
    pub query: usize,
}

impl std::fmt::Display for RankingMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "hamming and inner-product rankings differ at n = {}, query {}",
            self.n, self.query
        )
    }
}

impl std::error::Error for RankingMismatch {}

/// Times `scan` by doubling the repetition count until one batch takes at
/// least 50ms, then returns nanoseconds per single invocation.
fn time_per_call(mut scan: impl FnMut()) -> f64 {
    const FLOOR_NS: u128 = 50_000_000;
    let mut reps: u32 = 1;
    loop {
        let start = Instant::now();
        for _ in 0..reps {
            scan();
        }
        let elapsed = start.elapsed().as_nanos();
        if elapsed >= FLOOR_NS || reps >= 1 << 24 {
            return elapsed as f64 / reps as f64;
        }
        reps *= 2;
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Squared Pearson correlation of (ln x, ln y).
fn log_log_r2(points: &[(f64, f64)]) -> f64 {
    if points.len() < 2 {
        return 1.0;
    }
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        syy += ly * ly;
        sxy += lx * ly;
    }
    let cov = sxy - sx * sy / n;
    let vx = sxx - sx * sx / n;
    let vy = syy - sy * sy / n;
    if vx <= 0.0 || vy <= 0.0 {
        return 1.0;
    }
    (cov * cov) / (vx * vy)
}

pub fn run(cfg: &BenchConfig) -> Result<BenchReport, RankingMismatch> {
    assert!(cfg.dim >= 1 && cfg.k >= 1 && cfg.queries >= 1 && cfg.trials >= 1);
    let mut points = Vec::with_capacity(cfg.sizes.len());
    let mut rankings_checked = 0;
    for (pt, &n) in cfg.sizes.iter().enumerate() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(cfg.seed.wrapping_add(pt as u64));
        let data = ScanData::random(n, cfg.dim, &mut rng);
        let queries = ScanData::random(cfg.queries, cfg.dim, &mut rng);

        // Correctness gate before any clock starts.
        for q in 0..cfg.queries {
            let by_ham = scan_hamming(queries.word_row(q), &data, cfg.k);
            let by_dot = scan_float(queries.float_row(q), &data, cfg.k);
            if by_ham != by_dot {
                return Err(RankingMismatch { n, query: q });
            }
            rankings_checked += 1;
        }

        // Interleave the two methods inside each trial so slow drift in
        // machine state biases neither side.
        let mut ham_trials = Vec::with_capacity(cfg.trials);
        let mut float_trials = Vec::with_capacity(cfg.trials);
        for _ in 0..cfg.trials {
            ham_trials.push(time_per_call(|| {
                for q in 0..cfg.queries {
                    black_box(scan_hamming(black_box(queries.word_row(q)), &data, cfg.k));
                }
            }));
            float_trials.push(time_per_call(|| {
                for q in 0..cfg.queries {
                    black_box(scan_float(black_box(queries.float_row(q)), &data, cfg.k));
                }
            }));
        }
        let hamming_ns = median(ham_trials);
        let float_ns = median(float_trials);
        points.push(BenchPoint { n, hamming_ns, float_ns, speedup: float_ns / hamming_ns });
    }
    let ham_series: Vec<(f64, f64)> = points.iter().map(|p| (p.n as f64, p.hamming_ns)).collect();
    let float_series: Vec<(f64, f64)> = points.iter().map(|p| (p.n as f64, p.float_ns)).collect();
    Ok(BenchReport {
        dim: cfg.dim,
        k: cfg.k,
        queries: cfg.queries,
        hamming_log_r2: log_log_r2(&ham_series),
        float_log_r2: log_log_r2(&float_series),
        points,
        rankings_checked,
    })
}

/// Timing table. Not byte-stable across runs; it reports measurements.
pub fn timing_csv(report: &BenchReport) -> String {
    let mut out = String::from("n,dim,hamming_ns,float_ns,speedup\n");
    for p in &report.points {
        writeln!(
            out,
            "{},{},{:.1},{:.1},{:.2}",
            p.n, report.dim, p.hamming_ns, p.float_ns, p.speedup
        )
        .unwrap();
    }
    out
}

/// Whitespace-separated columns with a comment header, ready for
/// `plot "bench.dat" using 1:2` and friends on log-log axes.
pub fn plot_data(report: &BenchReport) -> String {
    let mut out = String::from("# n hamming_ns float_ns speedup\n");
    for p in &report.points {
        writeln!(out, "{} {:.1} {:.1} {:.2}", p.n, p.hamming_ns, p.float_ns, p.speedup).unwrap();
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StorageRow {
    pub n: usize,
    pub real_bytes: u64,
    pub hash_bytes: u64,
    pub ratio: f64,
}

/// Bytes for n rows of d f64 values against the minimal byte-aligned bit
/// packing. The ratio is exactly 64 whenever d is a multiple of 8.
pub fn storage_report(sizes: &[usize], dim: usize) -> Vec<StorageRow> {
    sizes
        .iter()
        .map(|&n| {
            let real_bytes = (n as u64) * (dim as u64) * 8;
            let hash_bytes = (n as u64) * (dim.div_ceil(8) as u64);
            StorageRow { n, real_bytes, hash_bytes, ratio: real_bytes as f64 / hash_bytes as f64 }
        })
        .collect()
}

/// Deterministic, byte-stable (pure arithmetic, no measurement).
pub fn storage_csv(rows: &[StorageRow], dim: usize) -> String {
    let mut out = String::from("n,dim,real_bytes,hash_bytes,ratio\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.n, dim, r.real_bytes, r.hash_bytes, r.ratio).unwrap();
    }
    out
}
