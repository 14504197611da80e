//! `polaris`: dataset generation, surrogate training, design-space
//! exploration runs, baselines, ablations and reports.
//!
//! Exit codes: 0 on success, 2 on a usage error, 1 on a runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod provenance;

#[derive(Parser, Debug)]
#[command(name = "polaris", version, about = "Multi-fidelity accelerator design-space exploration")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Directory all relative paths are resolved against and outputs go to.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Base seed.
    #[arg(long, global = true, env = "POLARIS_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for data-parallel sections (default: all cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    pub jobs: Option<u32>,
    /// Cost-model constants as JSON (default: built-in table).
    #[arg(long, global = true)]
    pub cost_model: Option<PathBuf>,
    /// Bundled workload name or path to a workload JSON file (default: all bundled).
    #[arg(long, global = true)]
    pub workload: Option<String>,
    /// Objective the surrogates model.
    #[arg(long, global = true, value_enum, default_value_t = Target::Edp)]
    pub target: Target,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Edp,
    Delay,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum FidelityArg {
    Low,
    High,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
#[value(rename_all = "snake_case")]
pub enum BaselineArg {
    OfflineRandom,
    VanillaBo,
    DklScratch,
    TransferredNn,
    FinetuneLow,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sobol-sample design points and evaluate them with an oracle.
    GenData(GenData),
    /// Train the low-fidelity VAE + predictor.
    TrainLow(TrainLow),
    /// Train the deep-kernel GP on high-fidelity data.
    TrainHigh(TrainHigh),
    /// Surrogate-guided co-design, or software-only search with --fix-hw.
    RunDse(RunDse),
    /// Run a baseline method.
    RunBaseline(RunBaseline),
    /// Surrogate accuracy vs training-set size for every model variant.
    Ablate(Ablate),
    /// Summarize run histories into CSV tables.
    Report(Report),
    /// Run the whole chain, from data generation to reports.
    MakePaperFigures(MakePaperFigures),
}

#[derive(Args, Debug)]
pub struct GenData {
    /// Oracle fidelities to sample; one dataset file per fidelity.
    #[arg(long, value_enum, value_delimiter = ',', required = true)]
    pub fidelity: Vec<FidelityArg>,
    /// Number of samples.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    /// Output file (only with a single fidelity; default data/<fidelity>.jsonl).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainLow {
    /// Low-fidelity dataset (default data/low.jsonl).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Weight of the predictor loss; 0 trains a plain VAE.
    #[arg(long, default_value_t = 1.0)]
    pub lambda_pred: f64,
    /// Checkpoint path (default models/starlight-low.json).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainHigh {
    /// High-fidelity dataset (default data/high.jsonl).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Low-fidelity checkpoint to transfer the encoder from
    /// (default models/starlight-low.json when it exists).
    #[arg(long, conflicts_with = "from_scratch")]
    pub low: Option<PathBuf>,
    /// Randomly initialized encoder instead of a transferred one.
    #[arg(long)]
    pub from_scratch: bool,
    #[arg(long, default_value_t = 1000)]
    pub epochs: usize,
    /// Epochs between test-set evaluations in the history CSV.
    #[arg(long, default_value_t = 50)]
    pub eval_interval: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr_gp: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr_encoder: f64,
    /// Checkpoint path (default models/starlight.json, or
    /// models/dkl-scratch.json with --from-scratch).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct BoArgs {
    /// Outer hardware iterations.
    #[arg(long, default_value_t = 8)]
    pub n_outer: usize,
    /// Inner software iterations per layer.
    #[arg(long, default_value_t = 6)]
    pub m_inner: usize,
    /// Inner software iterations per layer with --fix-hw.
    #[arg(long, default_value_t = 20)]
    pub m_fixed: usize,
    /// UCB exploration weight.
    #[arg(long, default_value_t = 2.0)]
    pub beta: f64,
    /// Candidate mappings scored per software step.
    #[arg(long, default_value_t = 10_000)]
    pub pool: usize,
    /// Mappings per array size used to score hardware candidates.
    #[arg(long, default_value_t = 64)]
    pub hw_mappings: usize,
    /// Surrogate refit steps after each evaluation.
    #[arg(long, default_value_t = 10)]
    pub refit_steps: usize,
    /// Independent trials, seeded seed, seed+1, ...
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub trials: u64,
}

#[derive(Args, Debug)]
pub struct RunDse {
    /// Starlight checkpoint (default models/starlight.json).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Fixed hardware "ARRAY,ACC_KB,SPAD_KB" for software-only search.
    #[arg(long)]
    pub fix_hw: Option<String>,
    /// Partial history to continue; replays its evaluations then rewrites it.
    #[arg(long, conflicts_with = "trials")]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub bo: BoArgs,
}

#[derive(Args, Debug)]
pub struct RunBaseline {
    #[arg(long, value_enum)]
    pub kind: BaselineArg,
    /// Starlight checkpoint scoring Offline Random (default models/starlight.json).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Offline Random: predicted samples per layer.
    #[arg(long, default_value_t = 48_000)]
    pub samples_per_layer: usize,
    /// Offline Random: hardware configs the samples are split across.
    #[arg(long, default_value_t = 64)]
    pub hw_groups: usize,
    /// Vanilla BO: fixed hardware "ARRAY,ACC_KB,SPAD_KB".
    #[arg(long)]
    pub fix_hw: Option<String>,
    #[command(flatten)]
    pub bo: BoArgs,
}

#[derive(Args, Debug)]
pub struct Ablate {
    /// High-fidelity dataset (default data/high.jsonl).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Low-fidelity checkpoint (default models/starlight-low.json).
    #[arg(long)]
    pub low: Option<PathBuf>,
    /// Training-set sizes.
    #[arg(long, value_delimiter = ',', default_value = "64,128,256")]
    pub sizes: Vec<usize>,
    /// Subset seeds per size.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// Epochs for every variant.
    #[arg(long, default_value_t = 1000)]
    pub epochs: usize,
    /// Variants to run (default all).
    #[arg(long, value_enum, value_delimiter = ',')]
    pub variants: Vec<VariantArg>,
    /// Output CSV (default reports/ablation.csv).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
#[value(rename_all = "snake_case")]
pub enum VariantArg {
    Starlight,
    DklScratch,
    TransferredNn,
    FinetuneLow,
}

#[derive(Args, Debug)]
pub struct Report {
    /// Directory searched recursively for run histories (default runs).
    #[arg(long)]
    pub runs: Option<PathBuf>,
    /// Methods to compare, first one is the reference column.
    #[arg(long, value_delimiter = ',')]
    pub compare: Vec<String>,
}

#[derive(Args, Debug)]
pub struct MakePaperFigures {
    /// smoke (seconds), desk (reduced budgets) or full.
    #[arg(long, default_value = "desk")]
    pub preset: String,
}

/// A bad combination of arguments that clap cannot express; exits with 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
