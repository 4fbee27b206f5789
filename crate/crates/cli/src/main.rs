//! `tumorseg` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error.

mod commands;
mod config;
mod provenance;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use tumorseg::inference::BlendMode;
use tumorseg::postprocess::{Connectivity, Profile};

use config::{parse_blend, parse_connectivity, parse_profile, parse_shape, parse_sizes, parse_thresholds, PipelineConfig};

/// Bad flags or configuration; reported with exit code 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Parser, Debug)]
#[command(name = "tumorseg", version, about = "Brain tumor segmentation pipeline", propagate_version = true)]
struct Cli {
    /// JSON config file; flags override its fields.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Only log errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,
    /// More logging (-v debug, -vv trace).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
pub struct DataArgs {
    /// Dataset root with one directory per case.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Modality suffixes `t1n,t1c,t2w,t2f[,seg]`.
    #[arg(long, value_name = "LIST")]
    pub suffixes: Option<String>,
    /// Restrict to these case ids (repeatable).
    #[arg(long = "case", value_name = "ID")]
    pub cases: Vec<String>,
}

#[derive(Args, Debug, Default)]
pub struct InferArgs {
    /// Checkpoint directory (repeatable; several are averaged).
    #[arg(long = "checkpoint", value_name = "DIR")]
    pub checkpoints: Vec<PathBuf>,
    /// Sliding window `x,y,z`.
    #[arg(long, value_parser = parse_shape, value_name = "X,Y,Z")]
    pub window: Option<[usize; 3]>,
    /// Window overlap fraction (0.5 or 0.7 unless --allow-any-overlap).
    #[arg(long)]
    pub overlap: Option<f64>,
    #[arg(long)]
    pub allow_any_overlap: bool,
    /// `gaussian` or `uniform`.
    #[arg(long, value_parser = parse_blend)]
    pub blend: Option<BlendMode>,
}

#[derive(Args, Debug, Default)]
pub struct PostArgs {
    /// `ssa` (0.7,0.7,0.5, no size filter) or `ped` (0.5 and 50,75,250).
    #[arg(long, value_parser = parse_profile)]
    pub profile: Option<Profile>,
    /// ET,TC,WT binarization thresholds.
    #[arg(long, value_parser = parse_thresholds, value_name = "ET,TC,WT")]
    pub thresholds: Option<[f32; 3]>,
    /// ET,TC,WT minimum component sizes in voxels.
    #[arg(long = "min-size", value_parser = parse_sizes, value_name = "ET,TC,WT")]
    pub min_sizes: Option<[usize; 3]>,
    /// 6, 18 or 26.
    #[arg(long, value_parser = parse_connectivity)]
    pub connectivity: Option<Connectivity>,
}

#[derive(Args, Debug, Default)]
pub struct EvalArgs {
    /// Also compute lesion-wise Dice and HD95.
    #[arg(long)]
    pub lesionwise: bool,
    /// Ignore lesions of at most this many voxels in lesion-wise scoring.
    #[arg(long, value_name = "VOXELS")]
    pub lesion_min_volume: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic labelled cases.
    Synth {
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, value_parser = parse_shape, default_value = "32,32,32", value_name = "X,Y,Z")]
        shape: [usize; 3],
        #[arg(long, default_value = "SYN")]
        prefix: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "LIST")]
        suffixes: Option<String>,
    },
    /// Crop, normalize and optionally fit cases; writes NPY caches.
    Preprocess {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Fit to this shape (crop or pad) after cropping.
        #[arg(long, value_parser = parse_shape, value_name = "X,Y,Z")]
        patch: Option<[usize; 3]>,
    },
    /// Sliding-window prediction; writes region probabilities per case.
    Infer {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        infer: InferArgs,
        /// Read preprocessed caches from here instead of preprocessing again.
        #[arg(long, value_name = "DIR")]
        cache: Option<PathBuf>,
        #[arg(long, value_parser = parse_shape, value_name = "X,Y,Z")]
        patch: Option<[usize; 3]>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Average probability maps from several inference runs.
    Ensemble {
        /// Directories written by `infer` (at least one).
        #[arg(long = "input", value_name = "DIR", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Threshold and size-filter probabilities into label maps.
    Postprocess {
        /// A probability NPY or a directory of them.
        #[arg(long, value_name = "PATH", required = true)]
        probs: PathBuf,
        #[command(flatten)]
        post: PostArgs,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Dice, HD95 and optional lesion-wise metrics.
    Evaluate {
        /// Predicted label map, or a directory of `{case}.nii.gz`.
        #[arg(long, value_name = "PATH", required = true)]
        pred: PathBuf,
        /// Ground-truth label map, or a dataset root / directory of `{case}.nii.gz`.
        #[arg(long, value_name = "PATH", required = true)]
        gt: PathBuf,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, value_name = "LIST")]
        suffixes: Option<String>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Grid search over thresholds and minimum sizes.
    Sweep {
        #[arg(long, value_name = "DIR", required = true)]
        probs: PathBuf,
        #[arg(long, value_name = "PATH", required = true)]
        gt: PathBuf,
        /// Threshold triples to combine with the size grid (repeatable).
        #[arg(long = "thresholds", value_parser = parse_thresholds, value_name = "ET,TC,WT")]
        thresholds: Vec<[f32; 3]>,
        #[arg(long, value_parser = parse_connectivity)]
        connectivity: Option<Connectivity>,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, value_name = "LIST")]
        suffixes: Option<String>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Cross-validated micro-model training on synthetic cases.
    TrainDemo {
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        cases: usize,
        #[arg(long, value_parser = parse_shape, default_value = "32,32,32", value_name = "X,Y,Z")]
        shape: [usize; 3],
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// preprocess → infer per checkpoint → ensemble → postprocess → evaluate.
    Pipeline {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        infer: InferArgs,
        #[command(flatten)]
        post: PostArgs,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, value_parser = parse_shape, value_name = "X,Y,Z")]
        patch: Option<[usize; 3]>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

impl DataArgs {
    fn apply(&self, c: &mut PipelineConfig) {
        if let Some(d) = &self.data {
            c.data = Some(d.clone());
        }
        if let Some(s) = &self.suffixes {
            c.suffixes = s.clone();
        }
    }
}

impl InferArgs {
    fn apply(&self, c: &mut PipelineConfig) {
        if !self.checkpoints.is_empty() {
            c.checkpoints = self.checkpoints.clone();
        }
        if let Some(w) = self.window {
            c.window = w;
        }
        if let Some(o) = self.overlap {
            c.overlap = o;
        }
        c.allow_any_overlap |= self.allow_any_overlap;
        if let Some(b) = self.blend {
            c.blend = b;
        }
    }
}

impl PostArgs {
    fn apply(&self, c: &mut PipelineConfig) {
        if let Some(p) = self.profile {
            c.profile = p;
            // a profile flag resets what the config file may have customized
            c.thresholds = None;
            c.min_sizes = None;
        }
        if self.thresholds.is_some() {
            c.thresholds = self.thresholds;
        }
        if self.min_sizes.is_some() {
            c.min_sizes = self.min_sizes;
        }
        if self.connectivity.is_some() {
            c.connectivity = self.connectivity;
        }
    }
}

impl EvalArgs {
    fn apply(&self, c: &mut PipelineConfig) {
        c.metrics.lesionwise |= self.lesionwise;
        if let Some(v) = self.lesion_min_volume {
            c.metrics.lesion.min_lesion_volume = v;
        }
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(UsageError("--jobs must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow::anyhow!("cannot start {n} worker threads: {e}"))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let cases_of = |d: &DataArgs| d.cases.clone();
    match cli.command {
        Command::Synth { out, count, shape, prefix, seed, suffixes } => {
            set(&mut cfg.out, out.map(Some));
            set(&mut cfg.seed, seed);
            set(&mut cfg.suffixes, suffixes);
            commands::synth(&cfg, count, shape, &prefix)
        }
        Command::Preprocess { data, out, patch } => {
            data.apply(&mut cfg);
            set(&mut cfg.out, out.map(Some));
            set(&mut cfg.patch, patch.map(Some));
            commands::preprocess(&cfg, &cases_of(&data))
        }
        Command::Infer { data, infer, cache, patch, out } => {
            data.apply(&mut cfg);
            infer.apply(&mut cfg);
            set(&mut cfg.out, out.map(Some));
            set(&mut cfg.patch, patch.map(Some));
            commands::infer(&cfg, &cases_of(&data), cache.as_deref())
        }
        Command::Ensemble { inputs, out } => {
            set(&mut cfg.out, out.map(Some));
            commands::ensemble(&cfg, &inputs)
        }
        Command::Postprocess { probs, post, out } => {
            post.apply(&mut cfg);
            set(&mut cfg.out, out.map(Some));
            commands::postprocess(&cfg, &probs)
        }
        Command::Evaluate { pred, gt, eval, suffixes, out } => {
            eval.apply(&mut cfg);
            set(&mut cfg.suffixes, suffixes);
            set(&mut cfg.out, out.map(Some));
            if cfg.out.is_none() {
                cfg.out = Some(PathBuf::from("eval"));
            }
            commands::evaluate(&cfg, &pred, &gt, cli.quiet)
        }
        Command::Sweep { probs, gt, thresholds, connectivity, eval, suffixes, out } => {
            eval.apply(&mut cfg);
            set(&mut cfg.suffixes, suffixes);
            set(&mut cfg.out, out.map(Some));
            if connectivity.is_some() {
                cfg.connectivity = connectivity;
            }
            commands::sweep(&cfg, &probs, &gt, &thresholds, cli.quiet)
        }
        Command::TrainDemo { out, cases, shape, folds, steps, lr, batch, seed } => {
            set(&mut cfg.out, out.map(Some));
            set(&mut cfg.seed, seed);
            commands::train_demo(&cfg, cases, shape, folds, steps, lr, batch, cli.quiet)
        }
        Command::Pipeline { data, infer, post, eval, patch, out, seed } => {
            data.apply(&mut cfg);
            infer.apply(&mut cfg);
            post.apply(&mut cfg);
            eval.apply(&mut cfg);
            set(&mut cfg.patch, patch.map(Some));
            set(&mut cfg.out, out.map(Some));
            set(&mut cfg.seed, seed);
            commands::pipeline(&cfg, &cases_of(&data), cli.quiet)
        }
    }
}

/// 1 for usage/configuration problems, 2 for everything data-related.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<tumorseg::Error>() {
        Some(tumorseg::Error::Config(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "error",
        (_, 0) => "info",
        (_, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // skip causes whose text the outer message already carries
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
