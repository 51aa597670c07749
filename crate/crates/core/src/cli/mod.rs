//! The `cartlab` command surface.
//!
//! Every command writes into one run directory (`--out`, or
//! `$CARTRIDGE_LAB_DIR/<command>`) and leaves a `RUN_MANIFEST.json` there.
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.

mod commands;
pub mod experiments;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::ablation::ScoreRule;
use crate::distill::Precision;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Environment variable naming the default output root.
pub const LAB_DIR_ENV: &str = "CARTRIDGE_LAB_DIR";

#[derive(Debug, Parser)]
#[command(name = "cartlab", version, about = "Train and dissect KV-cache cartridges on a toy transformer")]
pub struct Cli {
    /// Run directory for this command's outputs.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus and its multiple-choice items.
    GenCorpus(GenCorpusArgs),
    /// Roll out self-study traces from the teacher.
    GenTraces(GenTracesArgs),
    /// Initialize and pre-train the toy model.
    Pretrain(PretrainArgs),
    /// Build an initial cartridge.
    Init(InitArgs),
    /// Distill a cartridge against the teacher.
    Train(TrainArgs),
    /// Normalized singular-value spectra of a cartridge.
    Spectra(SpectraArgs),
    /// Checkpoint-to-checkpoint rotation of a training run.
    Rotations(RotationsArgs),
    /// Per-layer cosine similarity between two cartridges.
    Similarity(SimilarityArgs),
    /// Key-swap ablation across two tasks.
    Ablate(ExperimentArgs),
    /// Multiple-choice accuracy with or without a cartridge.
    Eval(EvalArgs),
    /// SCI versus first-k steps-to-threshold race with a paired t-test.
    Convergence(ConvergenceArgs),
    /// N-gram diversity of SCI initializer sequences across chunk sizes.
    NgramSweep(NgramArgs),
    /// Standalone statistical tests.
    #[command(subcommand)]
    Stats(StatsCommand),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long, default_value = "records")]
    pub task: String,
    #[arg(long, default_value_t = 10)]
    pub entities: usize,
    /// Keep only the first N attributes of the task.
    #[arg(long)]
    pub attributes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenTracesArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    #[arg(long, default_value_t = 0.7)]
    pub temperature: f64,
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// JSON experiment config; its `model` and `pretrain` sections are used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Rvi,
    FirstK,
    Sci,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(value_enum)]
    pub scheme: SchemeArg,
    #[arg(long)]
    pub model: PathBuf,
    /// Required for first-k and sci.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub p: usize,
    /// SCI chunk size (default p/8).
    #[arg(long)]
    pub chunk: Option<usize>,
    /// Concatenate SCI chunks in corpus order instead of draw order.
    #[arg(long)]
    pub sorted: bool,
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: PrecisionArg,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub traces: PathBuf,
    /// Initial cartridge.
    #[arg(long)]
    pub init: PathBuf,
    #[arg(long)]
    pub eval_traces: Option<PathBuf>,
    /// JSON training config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
    /// Recompute teacher logits for every batch instead of caching them.
    #[arg(long)]
    pub no_teacher_cache: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RoleArg {
    Keys,
    Values,
    Both,
}

#[derive(Debug, Args)]
pub struct SpectraArgs {
    #[arg(long)]
    pub cartridge: PathBuf,
    /// Top-k singular values (default d_head).
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_enum, default_value = "both")]
    pub role: RoleArg,
}

#[derive(Debug, Args)]
pub struct RotationsArgs {
    /// Training run directory containing `checkpoints/`.
    #[arg(long)]
    pub run: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimilarityArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScoreArg {
    Mean,
    Sum,
}

impl From<ScoreArg> for ScoreRule {
    fn from(s: ScoreArg) -> Self {
        match s {
            ScoreArg::Mean => ScoreRule::Mean,
            ScoreArg::Sum => ScoreRule::Sum,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Evaluation items (`eval.jsonl` from gen-corpus).
    #[arg(long)]
    pub items: PathBuf,
    #[arg(long)]
    pub cartridge: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "mean")]
    pub score: ScoreArg,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ConvergenceArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of paired runs.
    #[arg(long, default_value_t = 10)]
    pub seeds: usize,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Interpret the threshold as a multiple of the teacher's perplexity.
    #[arg(long)]
    pub relative: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct NgramArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub p: usize,
    /// Chunk sizes 2^1 ..= 2^max_pow.
    #[arg(long, default_value_t = 6)]
    pub max_pow: u32,
    /// Number of SCI draws per chunk size.
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    #[arg(long, default_value_t = 3)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum StatsCommand {
    /// Upper tail P(X >= k) of the hypergeometric distribution.
    Hypergeom {
        #[arg(long = "N")]
        population: u64,
        #[arg(long = "K")]
        successes: u64,
        #[arg(long = "n")]
        draws: u64,
        #[arg(long = "k")]
        observed: u64,
    },
    /// One-sided paired t-test on comma-separated samples.
    Ttest {
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        x: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        y: Vec<f64>,
        #[arg(long, default_value = "less")]
        alternative: String,
    },
}

/// A command was invoked with arguments that make no sense together.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match commands::execute(cli, &argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            if let Some(u) = e.downcast_ref::<UsageError>() {
                eprintln!("error: {u}");
                EXIT_USAGE
            } else {
                eprintln!("error: {e:#}");
                EXIT_RUNTIME
            }
        }
    }
}
