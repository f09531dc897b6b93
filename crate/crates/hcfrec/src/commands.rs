//! Command implementations behind the CLI.
//!
//! Every command resolves its settings (CLI over config file over defaults),
//! runs, writes its outputs plus a `manifest` into the output directory, and
//! reports failures as [`CmdError`] with the process exit code:
//!
//! * 0: success
//! * 1: internal failure (usually an output write)
//! * 2: unreadable or malformed input, bad settings
//! * 3: no data left after preprocessing
//! * 4: numeric failure (non-finite loss, ranking mismatch)
//! * 5: missing, corrupt, or version-incompatible checkpoint
//!
//! The manifest is itself a config file; `--config <out>/manifest` replays
//! the run with identical settings.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use hcfrec_core::consistency::LshConfig;
use hcfrec_core::ingest::RatingsFormat;
use hcfrec_core::metrics::MetricsReport;
use hcfrec_core::trainer::{self, Hyperparams, TrainError, TrainMode, TrainOutput};

use crate::bench::{self, BenchConfig};
use crate::checkpoint::{self, Checkpoint, CheckpointError};
use crate::config::{write_manifest, ConfigError, Resolver};
use crate::dataset::{self, DataError};
use crate::par;

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_EMPTY: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_CHECKPOINT: i32 = 5;

#[derive(Debug)]
pub struct CmdError {
    pub exit: i32,
    pub msg: String,
}

impl CmdError {
    fn new(exit: i32, msg: impl Into<String>) -> Self {
        CmdError { exit, msg: msg.into() }
    }
}

impl fmt::Display for CmdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.msg)
    }
}

impl std::error::Error for CmdError {}

impl From<ConfigError> for CmdError {
    fn from(e: ConfigError) -> Self {
        CmdError::new(EXIT_PARSE, e.to_string())
    }
}

impl From<DataError> for CmdError {
    fn from(e: DataError) -> Self {
        let exit = match &e {
            DataError::Io(_) => EXIT_OTHER,
            DataError::Parse(_) | DataError::Invalid(_) => EXIT_PARSE,
            DataError::Empty(_) => EXIT_EMPTY,
        };
        CmdError::new(exit, e.to_string())
    }
}

impl From<TrainError> for CmdError {
    fn from(e: TrainError) -> Self {
        let exit = match &e {
            TrainError::Config(_) => EXIT_PARSE,
            TrainError::NonFinite { .. } | TrainError::Flow(_) => EXIT_NUMERIC,
        };
        CmdError::new(exit, e.to_string())
    }
}

/// Checkpoint problems on the read path, whatever their shape.
fn ckpt_err(e: CheckpointError) -> CmdError {
    CmdError::new(EXIT_CHECKPOINT, e.to_string())
}

/// Output-side IO: the run worked, writing its results did not.
fn write_err(e: impl fmt::Display) -> CmdError {
    CmdError::new(EXIT_OTHER, e.to_string())
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>, CmdError> {
    let out: Result<Vec<T>, _> = raw.split(',').map(|s| s.trim().parse()).collect();
    match out {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(CmdError::new(EXIT_PARSE, format!("{what} must be a comma-separated list, got {raw:?}"))),
    }
}

fn parse_mode(raw: &str) -> Result<TrainMode, CmdError> {
    match raw {
        "hcfrec" => Ok(TrainMode::Hcfrec),
        "direct" => Ok(TrainMode::DirectBinarize),
        _ => Err(CmdError::new(EXIT_PARSE, format!("mode must be hcfrec or direct, got {raw:?}"))),
    }
}

fn mode_name(mode: TrainMode) -> &'static str {
    match mode {
        TrainMode::Hcfrec => "hcfrec",
        TrainMode::DirectBinarize => "direct",
    }
}

// --- prepare -------------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct PrepareArgs {
    pub config: Option<PathBuf>,
    pub input: Option<String>,
    pub format: Option<String>,
    pub min_ratings: Option<usize>,
    pub out: Option<String>,
}

pub fn cmd_prepare(a: &PrepareArgs) -> Result<(), CmdError> {
    let mut r = Resolver::new(a.config.as_deref())?;
    let input: String = r.require("input", a.input.clone(), "path to raw ratings")?;
    let format_s: String = r.get("format", a.format.clone(), "tsv4".into(), "tsv4 or csv4")?;
    let min_ratings: usize = r.get("min_ratings", a.min_ratings, 20, "positive integer")?;
    let out: String = r.require("out", a.out.clone(), "output directory")?;
    let resolved = r.finish()?;

    let format: RatingsFormat = format_s
        .parse()
        .map_err(|_| CmdError::new(EXIT_PARSE, format!("format must be tsv4 or csv4, got {format_s:?}")))?;
    if min_ratings == 0 {
        return Err(CmdError::new(EXIT_PARSE, "min_ratings must be at least 1"));
    }

    let stats = dataset::prepare(Path::new(&input), format, min_ratings, Path::new(&out))?;
    write_manifest(Path::new(&out), "prepare", &resolved).map_err(write_err)?;
    println!(
        "users = {}, items = {}, ratings = {}, sparsity = {:.2}%",
        stats.users, stats.items, stats.ratings, stats.sparsity_pct
    );
    println!("train/val/test = {}/{}/{}", stats.train, stats.val, stats.test);
    Ok(())
}

// --- train ---------------------------------------------------------------

/// Model settings shared by `train` and `sweep`.
#[derive(Clone, Debug, Default)]
pub struct TrainKnobs {
    pub dim: Option<usize>,
    pub hidden: Option<usize>,
    pub flow_depth: Option<usize>,
    pub gamma: Option<f64>,
    pub lambda: Option<f64>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub neg_ratio: Option<f64>,
    pub seed: Option<u64>,
    pub no_consistency: bool,
    pub mode: Option<String>,
}

fn resolve_hyperparams(r: &mut Resolver, k: &TrainKnobs) -> Result<Hyperparams, CmdError> {
    let d = Hyperparams::default();
    let dim = r.get("dim", k.dim, d.dim, "positive integer")?;
    let hidden = r.get("hidden", k.hidden, d.hidden, "positive integer")?;
    let flow_depth = r.get("flow_depth", k.flow_depth, d.flow_depth, "integer")?;
    let gamma = r.get("gamma", k.gamma, d.gamma, "positive number")?;
    let lambda = r.get("lambda", k.lambda, d.lambda, "nonnegative number")?;
    let lr = r.get("lr", k.lr, d.lr, "positive number")?;
    let batch_size = r.get("batch_size", k.batch_size, d.batch_size, "positive integer")?;
    let epochs = r.get("epochs", k.epochs, d.epochs, "integer")?;
    let neg_ratio = r.get("neg_ratio", k.neg_ratio, d.neg_ratio, "nonnegative number")?;
    let seed = r.get("seed", k.seed, d.seed, "integer")?;
    let consistency_enabled = r.get_bool(
        "consistency",
        if k.no_consistency { Some(false) } else { None },
        d.consistency_enabled,
    )?;
    let mode_s: String =
        r.get("mode", k.mode.clone(), mode_name(d.mode).into(), "hcfrec or direct")?;
    let mode = parse_mode(&mode_s)?;
    Ok(Hyperparams {
        dim,
        hidden,
        flow_depth,
        gamma,
        lambda,
        lr,
        batch_size,
        epochs,
        neg_ratio,
        seed,
        consistency_enabled,
        lsh: LshConfig::default(),
        mode,
    })
}

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub data: Option<String>,
    pub out: Option<String>,
    pub knobs: TrainKnobs,
}

pub fn train_log_csv(log: &[trainer::EpochRecord]) -> String {
    let mut out = String::from("epoch,recon,alignU,klU,alignV,klV,cons,total,val_ndcg10\n");
    for rec in log {
        let t = &rec.report.terms;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            rec.report.epoch,
            t.recon,
            t.align_u,
            t.kl_u,
            t.align_v,
            t.kl_v,
            t.cons,
            rec.report.total,
            rec.val_ndcg10
        )
        .unwrap();
    }
    out
}

fn write_train_outputs(dir: &Path, hp: &Hyperparams, output: &TrainOutput) -> Result<(), CmdError> {
    fs::create_dir_all(dir).map_err(write_err)?;
    let ck = Checkpoint {
        best_epoch: output.best_epoch,
        best_val_ndcg10: output.best_val_ndcg10,
        mode: hp.mode,
        user: output.state.user.clone(),
        item: output.state.item.clone(),
    };
    checkpoint::save_checkpoint(&dir.join("checkpoint.bin"), &ck).map_err(write_err)?;
    checkpoint::save_codes(&dir.join("user_codes.bin"), &output.user_codes).map_err(write_err)?;
    checkpoint::save_codes(&dir.join("item_codes.bin"), &output.item_codes).map_err(write_err)?;
    fs::write(dir.join("train_log.csv"), train_log_csv(&output.log)).map_err(write_err)?;
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), CmdError> {
    let mut r = Resolver::new(a.config.as_deref())?;
    let data: String = r.require("data", a.data.clone(), "prepared dataset directory")?;
    let out: String = r.require("out", a.out.clone(), "output directory")?;
    let hp = resolve_hyperparams(&mut r, &a.knobs)?;
    let resolved = r.finish()?;

    let ds = dataset::load_prepared(Path::new(&data))?;
    log::info!(
        "training on {} users x {} items ({} train interactions)",
        ds.n_users(),
        ds.n_items(),
        ds.train.nnz()
    );
    let output = trainer::train(&hp, &ds)?;
    for rec in &output.log {
        log::debug!(
            "epoch {}: total = {:.6}, val nDCG@10 = {:.4}",
            rec.report.epoch,
            rec.report.total,
            rec.val_ndcg10
        );
    }

    let out_dir = Path::new(&out);
    write_train_outputs(out_dir, &hp, &output)?;
    write_manifest(out_dir, "train", &resolved).map_err(write_err)?;
    println!(
        "trained {} epochs; kept epoch {} (val nDCG@10 = {:.4})",
        output.log.len(),
        output.best_epoch,
        output.best_val_ndcg10
    );
    println!("outputs in {out}");
    Ok(())
}

// --- eval ----------------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct EvalArgs {
    pub config: Option<PathBuf>,
    pub checkpoint: Option<String>,
    pub data: Option<String>,
    pub out: Option<String>,
    pub ks: Option<String>,
}

pub fn metrics_csv(report: &MetricsReport) -> String {
    let mut out = String::from("k,ndcg,map\n");
    for (k, nd) in report.ks.iter().zip(&report.ndcg) {
        writeln!(out, "{k},{nd},{}", report.map).unwrap();
    }
    out
}

pub fn per_user_csv(report: &MetricsReport) -> String {
    let mut out = String::from("user");
    for k in &report.ks {
        write!(out, ",ndcg@{k}").unwrap();
    }
    out.push_str(",ap\n");
    for um in &report.per_user {
        write!(out, "{}", um.user).unwrap();
        for nd in &um.ndcg {
            write!(out, ",{nd}").unwrap();
        }
        writeln!(out, ",{}", um.ap).unwrap();
    }
    out
}

/// Loads a checkpoint, re-derives both code tables on the training matrix,
/// and scores the given split. Shared by `eval` and the test-split scoring
/// inside `sweep`.
fn score_checkpoint(
    ck: &Checkpoint,
    ds: &hcfrec_core::ingest::SplitDataset,
    split: &hcfrec_core::ingest::RatingMatrix,
    ks: &[usize],
) -> Result<MetricsReport, CmdError> {
    let state = ck.model_for_eval();
    let (user_codes, item_codes) = trainer::export_codes(&state, &ds.train)?;
    Ok(par::evaluate_parallel(
        par::threads_from_env(),
        &user_codes,
        &item_codes,
        &ds.train,
        split,
        ks,
    ))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(), CmdError> {
    let mut r = Resolver::new(a.config.as_deref())?;
    let ck_path: String = r.require("checkpoint", a.checkpoint.clone(), "checkpoint file")?;
    let data: String = r.require("data", a.data.clone(), "prepared dataset directory")?;
    let out: String = r.require("out", a.out.clone(), "output directory")?;
    let ks_s: String = r.get("ks", a.ks.clone(), "2,6,10".into(), "comma-separated cutoffs")?;
    let resolved = r.finish()?;

    let ks: Vec<usize> = parse_list(&ks_s, "ks")?;
    if ks.iter().any(|&k| k == 0) {
        return Err(CmdError::new(EXIT_PARSE, "ks entries must be positive"));
    }
    let ck = checkpoint::load_checkpoint(Path::new(&ck_path)).map_err(ckpt_err)?;
    let ds = dataset::load_prepared(Path::new(&data))?;
    let report = score_checkpoint(&ck, &ds, &ds.test, &ks)?;

    for (k, nd) in report.ks.iter().zip(&report.ndcg) {
        println!("nDCG@{k} = {nd:.4}");
    }
    println!("mAP@{} = {:.4}", report.map_k, report.map);
    println!("evaluated {} users ({} skipped)", report.evaluated_users, report.skipped_users);

    let out_dir = Path::new(&out);
    fs::create_dir_all(out_dir).map_err(write_err)?;
    fs::write(out_dir.join("metrics.csv"), metrics_csv(&report)).map_err(write_err)?;
    fs::write(out_dir.join("per_user.csv"), per_user_csv(&report)).map_err(write_err)?;
    write_manifest(out_dir, "eval", &resolved).map_err(write_err)?;
    Ok(())
}

// --- bench ---------------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct BenchArgs {
    pub config: Option<PathBuf>,
    pub out: Option<String>,
    pub sizes: Option<String>,
    pub dim: Option<usize>,
    pub k: Option<usize>,
    pub queries: Option<usize>,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    pub storage_sizes: Option<String>,
}

pub fn cmd_bench(a: &BenchArgs) -> Result<(), CmdError> {
    let defaults = BenchConfig::default();
    let mut r = Resolver::new(a.config.as_deref())?;
    let out: String = r.require("out", a.out.clone(), "output directory")?;
    let sizes_s: String =
        r.get("sizes", a.sizes.clone(), "100,1000,10000,100000,200000".into(), "item counts")?;
    let dim = r.get("dim", a.dim, defaults.dim, "positive integer")?;
    let k = r.get("k", a.k, defaults.k, "positive integer")?;
    let queries = r.get("queries", a.queries, defaults.queries, "positive integer")?;
    let trials = r.get("trials", a.trials, defaults.trials, "positive integer")?;
    let seed = r.get("seed", a.seed, defaults.seed, "integer")?;
    let storage_s: String = r.get(
        "storage_sizes",
        a.storage_sizes.clone(),
        "1000000,10000000,100000000,1000000000".into(),
        "row counts",
    )?;
    let resolved = r.finish()?;

    let sizes: Vec<usize> = parse_list(&sizes_s, "sizes")?;
    let storage_sizes: Vec<usize> = parse_list(&storage_s, "storage_sizes")?;
    if dim == 0 || k == 0 || queries == 0 || trials == 0 {
        return Err(CmdError::new(EXIT_PARSE, "dim, k, queries, and trials must be positive"));
    }
    if sizes.iter().any(|&n| n == 0) {
        return Err(CmdError::new(EXIT_PARSE, "sizes entries must be positive"));
    }

    let cfg = BenchConfig { sizes, dim, k, queries, trials, seed };
    let report =
        bench::run(&cfg).map_err(|e| CmdError::new(EXIT_NUMERIC, e.to_string()))?;
    for p in &report.points {
        println!(
            "n = {:>8}: hamming {:>12.1} ns, float {:>12.1} ns, speedup {:.2}x",
            p.n, p.hamming_ns, p.float_ns, p.speedup
        );
    }
    println!(
        "log-log linearity: hamming r2 = {:.4}, float r2 = {:.4} ({} rankings checked)",
        report.hamming_log_r2, report.float_log_r2, report.rankings_checked
    );

    let storage = bench::storage_report(&storage_sizes, dim);
    let out_dir = Path::new(&out);
    fs::create_dir_all(out_dir).map_err(write_err)?;
    fs::write(out_dir.join("bench.csv"), bench::timing_csv(&report)).map_err(write_err)?;
    fs::write(out_dir.join("bench.dat"), bench::plot_data(&report)).map_err(write_err)?;
    fs::write(out_dir.join("storage.csv"), bench::storage_csv(&storage, dim)).map_err(write_err)?;
    write_manifest(out_dir, "bench", &resolved).map_err(write_err)?;
    Ok(())
}

// --- sweep ---------------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct SweepArgs {
    pub config: Option<PathBuf>,
    pub data: Option<String>,
    pub out: Option<String>,
    pub param: Option<String>,
    pub grid: Option<String>,
    pub knobs: TrainKnobs,
}

fn default_grid(param: &str) -> Result<&'static str, CmdError> {
    match param {
        "gamma" => Ok("0.01,0.015,0.02,0.025,0.03"),
        "lambda" => Ok("0.01,0.1,0.3,0.5"),
        _ => Err(CmdError::new(EXIT_PARSE, format!("param must be gamma or lambda, got {param:?}"))),
    }
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<(), CmdError> {
    let mut r = Resolver::new(a.config.as_deref())?;
    let data: String = r.require("data", a.data.clone(), "prepared dataset directory")?;
    let out: String = r.require("out", a.out.clone(), "output directory")?;
    let param: String = r.get("param", a.param.clone(), "gamma".into(), "gamma or lambda")?;
    let grid_default = default_grid(&param)?;
    let grid_s: String = r.get("grid", a.grid.clone(), grid_default.into(), "comma-separated values")?;
    let base = resolve_hyperparams(&mut r, &a.knobs)?;
    let resolved = r.finish()?;

    let grid: Vec<f64> = parse_list(&grid_s, "grid")?;
    let ds = dataset::load_prepared(Path::new(&data))?;
    let out_dir = Path::new(&out);
    fs::create_dir_all(out_dir).map_err(write_err)?;

    let mut csv = String::from("param,value,status,best_epoch,val_ndcg10,test_ndcg10\n");
    for &value in &grid {
        let mut hp = base.clone();
        match param.as_str() {
            "gamma" => hp.gamma = value,
            "lambda" => hp.lambda = value,
            _ => unreachable!("param validated above"),
        }
        let run_dir = out_dir.join("runs").join(format!("{param}={value}"));
        let outcome = trainer::train(&hp, &ds).map_err(CmdError::from).and_then(|output| {
            write_train_outputs(&run_dir, &hp, &output)?;
            let ck = Checkpoint {
                best_epoch: output.best_epoch,
                best_val_ndcg10: output.best_val_ndcg10,
                mode: hp.mode,
                user: output.state.user.clone(),
                item: output.state.item.clone(),
            };
            let test = score_checkpoint(&ck, &ds, &ds.test, &[10])?;
            Ok((output.best_epoch, output.best_val_ndcg10, test.ndcg[0]))
        });
        match outcome {
            Ok((best_epoch, val, test)) => {
                println!("{param} = {value}: val nDCG@10 = {val:.4}, test nDCG@10 = {test:.4}");
                writeln!(csv, "{param},{value},ok,{best_epoch},{val},{test}").unwrap();
            }
            Err(e) => {
                // One bad point must not sink the grid; record and move on.
                log::warn!("{param} = {value} failed: {e}");
                println!("{param} = {value}: failed ({e})");
                writeln!(csv, "{param},{value},failed,,,").unwrap();
            }
        }
    }
    fs::write(out_dir.join("sweep.csv"), csv).map_err(write_err)?;
    write_manifest(out_dir, "sweep", &resolved).map_err(write_err)?;
    Ok(())
}
