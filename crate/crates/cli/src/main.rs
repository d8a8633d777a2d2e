//! `skin` — train, evaluate, and benchmark the skim/intensive long-text
//! classifier from the command line.

mod config;
mod data;
mod runs;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use config::{load_config, BenchRunConfig, EvalRunConfig, SynthRunConfig, TrainRunConfig};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "skin",
    version,
    about = "Skim/intensive long-text classifier: corpus generation, staged training, evaluation, cost benchmarks"
)]
struct Cli {
    /// TOML run config; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed override for the command's RNG streams.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Write into an existing non-empty output directory.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic planted-key corpus (train/test JSONL + vocab).
    Synth(SynthArgs),
    /// Run the training stages (1 skim, 2 select, 3 joint) or a baseline.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a held-out set.
    Eval(EvalArgs),
    /// Sweep training cost against input length across methods.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of documents before the train/test split.
    #[arg(long)]
    docs: Option<usize>,
    /// Segments per document.
    #[arg(long)]
    n: Option<usize>,
    /// Tokens per segment (divisible by 4).
    #[arg(long)]
    l: Option<usize>,
    /// Number of classes.
    #[arg(long)]
    classes: Option<usize>,
    /// Vocabulary size including reserved ids.
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Class-signal tokens planted in each key segment.
    #[arg(long)]
    signal: Option<usize>,
    /// Probability a distractor slot draws a random noise token.
    #[arg(long)]
    noise_rate: Option<f64>,
    /// Fraction of documents held out for evaluation.
    #[arg(long)]
    eval_fraction: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Model to train: skin | truncate | headtail | slidewindow.
    #[arg(long)]
    model: Option<String>,
    /// Encoder size preset: toy | full.
    #[arg(long)]
    preset: Option<String>,
    /// Run a single stage (1, 2, or 3) against existing artifacts.
    #[arg(long)]
    stage: Option<u8>,
    /// Corpus directory produced by `skin synth` (paths + geometry).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Training JSONL (overrides --data).
    #[arg(long)]
    train_data: Option<PathBuf>,
    /// Held-out JSONL (recorded for later eval).
    #[arg(long)]
    test_data: Option<PathBuf>,
    /// Vocabulary file.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    l: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Model the checkpoint holds: skin | prc | truncate | headtail | slidewindow.
    #[arg(long)]
    model: Option<String>,
    /// Checkpoint file to evaluate.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Corpus directory produced by `skin synth`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out JSONL (overrides --data).
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    l: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    /// Methods to sweep (comma-separated):
    /// bert,slidewindow,skin-invariable,skin-variable.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Input lengths in tokens, ascending (comma-separated).
    #[arg(long, value_delimiter = ',')]
    lengths: Option<Vec<usize>>,
    /// Timed trials per point (after one warm-up).
    #[arg(long)]
    trials: Option<usize>,
    /// Documents per training step.
    #[arg(long)]
    batch: Option<usize>,
    /// Encoder dims: toy | full.
    #[arg(long)]
    dims: Option<String>,
    /// Segment count for slide-window and the invariable mode.
    #[arg(long)]
    segments: Option<usize>,
    /// Segment length for the variable mode.
    #[arg(long)]
    seg_len: Option<usize>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Cmd::Synth(args) => {
            let mut cfg: SynthRunConfig = match &cli.config {
                Some(path) => load_config(path, "synth")?,
                None => SynthRunConfig::default(),
            };
            apply_synth_flags(&mut cfg, args, cli.seed);
            let out = cli.out.unwrap_or_else(|| PathBuf::from("runs/synth"));
            runs::cmd_synth(cfg, &out, cli.force)
        }
        Cmd::Train(args) => {
            let mut cfg: TrainRunConfig = match &cli.config {
                Some(path) => load_config(path, "train")?,
                None => TrainRunConfig::default(),
            };
            apply_train_flags(&mut cfg, args, cli.seed)?;
            let out = cli.out.unwrap_or_else(|| PathBuf::from("runs/train"));
            runs::cmd_train(cfg, &out, args.stage, cli.force)
        }
        Cmd::Eval(args) => {
            let mut cfg: EvalRunConfig = match &cli.config {
                Some(path) => load_config(path, "eval")?,
                None => EvalRunConfig::default(),
            };
            apply_eval_flags(&mut cfg, args)?;
            let out = cli.out.unwrap_or_else(|| PathBuf::from("runs/eval"));
            runs::cmd_eval(cfg, &out, cli.force)
        }
        Cmd::Bench(args) => {
            let mut cfg: BenchRunConfig = match &cli.config {
                Some(path) => load_config(path, "bench")?,
                None => BenchRunConfig::default(),
            };
            apply_bench_flags(&mut cfg, args, cli.seed);
            let out = cli.out.unwrap_or_else(|| PathBuf::from("runs/bench"));
            runs::cmd_bench(cfg, &out, cli.force)
        }
    }
}

fn apply_synth_flags(cfg: &mut SynthRunConfig, args: &SynthArgs, seed: Option<u64>) {
    let c = &mut cfg.corpus;
    if let Some(v) = args.docs {
        c.docs = v;
    }
    if let Some(v) = args.n {
        c.n = v;
    }
    if let Some(v) = args.l {
        c.l = v;
    }
    if let Some(v) = args.classes {
        c.classes = v;
    }
    if let Some(v) = args.vocab_size {
        c.vocab_size = v;
    }
    if let Some(v) = args.signal {
        c.signal_tokens = v;
    }
    if let Some(v) = args.noise_rate {
        c.noise_rate = v;
    }
    if let Some(v) = args.eval_fraction {
        c.eval_fraction = v;
    }
    if let Some(v) = seed {
        c.seed = v;
    }
}

fn apply_train_flags(cfg: &mut TrainRunConfig, args: &TrainArgs, seed: Option<u64>) -> Result<()> {
    if let Some(dir) = &args.data {
        data::apply_data_dir(&mut cfg.data, dir)?;
    }
    if let Some(v) = &args.model {
        cfg.model = v.clone();
    }
    if let Some(v) = &args.preset {
        cfg.preset = v.clone();
    }
    if let Some(v) = &args.train_data {
        cfg.data.train = Some(v.clone());
    }
    if let Some(v) = &args.test_data {
        cfg.data.test = Some(v.clone());
    }
    if let Some(v) = &args.vocab {
        cfg.data.vocab = Some(v.clone());
    }
    if let Some(v) = args.n {
        cfg.data.n = v;
    }
    if let Some(v) = args.l {
        cfg.data.l = v;
    }
    if let Some(v) = args.classes {
        cfg.data.classes = v;
    }
    if let Some(v) = seed {
        cfg.train.seed = v;
    }
    Ok(())
}

fn apply_eval_flags(cfg: &mut EvalRunConfig, args: &EvalArgs) -> Result<()> {
    if let Some(dir) = &args.data {
        data::apply_data_dir(&mut cfg.data, dir)?;
    }
    if let Some(v) = &args.model {
        cfg.model = v.clone();
    }
    if let Some(v) = &args.checkpoint {
        cfg.checkpoint = Some(v.clone());
    }
    if let Some(v) = &args.test_data {
        cfg.data.test = Some(v.clone());
    }
    if let Some(v) = &args.vocab {
        cfg.data.vocab = Some(v.clone());
    }
    if let Some(v) = args.n {
        cfg.data.n = v;
    }
    if let Some(v) = args.l {
        cfg.data.l = v;
    }
    if let Some(v) = args.classes {
        cfg.data.classes = v;
    }
    Ok(())
}

fn apply_bench_flags(cfg: &mut BenchRunConfig, args: &BenchArgs, seed: Option<u64>) {
    let s = &mut cfg.sweep;
    if let Some(v) = &args.methods {
        s.methods = v.clone();
    }
    if let Some(v) = &args.lengths {
        s.lengths = v.clone();
    }
    if let Some(v) = args.trials {
        s.trials = v;
    }
    if let Some(v) = args.batch {
        s.batch_size = v;
    }
    if let Some(v) = &args.dims {
        s.dims = v.clone();
    }
    if let Some(v) = args.segments {
        s.fixed_segments = v;
    }
    if let Some(v) = args.seg_len {
        s.fixed_seg_len = v;
    }
    if let Some(v) = seed {
        s.seed = v;
    }
}
