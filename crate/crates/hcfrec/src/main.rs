//! CLI entry point. Argument parsing only; the work lives in
//! [`hcfrec::commands`], and every flag can instead come from a `--config`
//! file (CLI wins, then file, then defaults).

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use hcfrec::commands::{
    cmd_bench, cmd_eval, cmd_prepare, cmd_sweep, cmd_train, BenchArgs, EvalArgs, PrepareArgs,
    SweepArgs, TrainArgs, TrainKnobs,
};

#[derive(Parser)]
#[command(
    name = "hcfrec",
    version,
    about = "Binary hash codes for collaborative filtering: prepare data, train, evaluate, benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone, Debug)]
struct ModelFlags {
    /// Code length D.
    #[arg(long)]
    dim: Option<usize>,
    /// Encoder hidden width.
    #[arg(long)]
    hidden: Option<usize>,
    /// Planar flow depth T.
    #[arg(long)]
    flow_depth: Option<usize>,
    /// Mixture prior variance.
    #[arg(long)]
    gamma: Option<f64>,
    /// Cluster-consistency weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Sampled unobserved pairs per observed rating.
    #[arg(long)]
    neg_ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Drop the consistency term entirely.
    #[arg(long)]
    no_consistency: bool,
    /// Objective: `hcfrec` (flows, prior, sign codes) or `direct`
    /// (real-valued baseline binarized after training).
    #[arg(long)]
    mode: Option<String>,
}

impl From<ModelFlags> for TrainKnobs {
    fn from(f: ModelFlags) -> Self {
        TrainKnobs {
            dim: f.dim,
            hidden: f.hidden,
            flow_depth: f.flow_depth,
            gamma: f.gamma,
            lambda: f.lambda,
            lr: f.lr,
            batch_size: f.batch_size,
            epochs: f.epochs,
            neg_ratio: f.neg_ratio,
            seed: f.seed,
            no_consistency: f.no_consistency,
            mode: f.mode,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse raw ratings into a prepared train/val/test directory.
    Prepare {
        /// Settings file (flat `key = value`); flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Raw ratings file.
        #[arg(long)]
        input: Option<String>,
        /// Input layout: tsv4 or csv4 (user, item, rating, timestamp).
        #[arg(long)]
        format: Option<String>,
        /// Iteratively drop users and items below this rating count.
        #[arg(long)]
        min_ratings: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: Option<String>,
    },
    /// Train on a prepared dataset and write the best-validation checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Prepared dataset directory.
        #[arg(long)]
        data: Option<String>,
        /// Output directory.
        #[arg(long)]
        out: Option<String>,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint file from a training run.
        #[arg(long)]
        checkpoint: Option<String>,
        /// Prepared dataset directory.
        #[arg(long)]
        data: Option<String>,
        /// Output directory for metrics.csv and per_user.csv.
        #[arg(long)]
        out: Option<String>,
        /// Ranking cutoffs, e.g. 2,6,10.
        #[arg(long)]
        ks: Option<String>,
    },
    /// Time Hamming retrieval against the dense inner-product scan.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: Option<String>,
        /// Item counts to scan, e.g. 100,1000,10000.
        #[arg(long)]
        sizes: Option<String>,
        /// Code length.
        #[arg(long)]
        dim: Option<usize>,
        /// Neighbors per query.
        #[arg(long)]
        k: Option<usize>,
        /// Queries per timed pass.
        #[arg(long)]
        queries: Option<usize>,
        /// Trials per point (median reported).
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Row counts for the storage table.
        #[arg(long)]
        storage_sizes: Option<String>,
    },
    /// Train across a hyperparameter grid and tabulate test scores.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Prepared dataset directory.
        #[arg(long)]
        data: Option<String>,
        /// Output directory.
        #[arg(long)]
        out: Option<String>,
        /// Swept setting: gamma or lambda.
        #[arg(long)]
        param: Option<String>,
        /// Grid values; defaults depend on the swept setting.
        #[arg(long)]
        grid: Option<String>,
        #[command(flatten)]
        model: ModelFlags,
    },
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare { config, input, format, min_ratings, out } => {
            cmd_prepare(&PrepareArgs { config, input, format, min_ratings, out })
        }
        Command::Train { config, data, out, model } => {
            cmd_train(&TrainArgs { config, data, out, knobs: model.into() })
        }
        Command::Eval { config, checkpoint, data, out, ks } => {
            cmd_eval(&EvalArgs { config, checkpoint, data, out, ks })
        }
        Command::Bench { config, out, sizes, dim, k, queries, trials, seed, storage_sizes } => {
            cmd_bench(&BenchArgs { config, out, sizes, dim, k, queries, trials, seed, storage_sizes })
        }
        Command::Sweep { config, data, out, param, grid, model } => {
            cmd_sweep(&SweepArgs { config, data, out, param, grid, knobs: model.into() })
        }
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit);
    }
}
