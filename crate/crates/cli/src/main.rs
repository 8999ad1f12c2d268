//! `bamkit`: checkpoint merging, corpus slicing and branch-and-merge runs
//! from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 runtime failure. With `--json` every command prints exactly one JSON
//! document on stdout; diagnostics always go to stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod exit;

use bam_core::merge::{AngleScope, MergeMethod};
use bam_core::slice::SliceMode;
use bam_core::toylab::Architecture;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "bamkit", version, about = "Branch-and-merge training toolkit")]
struct Cli {
    /// Print a single JSON report on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Increase log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Merge checkpoints.
    Merge(MergeArgs),
    /// Partition a weighted mixture into slice manifests.
    Slice(SliceArgs),
    /// Branch-and-merge runs.
    #[command(subcommand)]
    Bam(BamCommand),
    /// Line search over the merge coefficient (same as `bam linesearch`).
    Linesearch(LinesearchArgs),
    /// Evaluate a toy-model checkpoint on a JSON-lines sample set.
    Eval(EvalArgs),
    /// Compute the task vector of a finetuned checkpoint.
    TaskVector(TaskVectorArgs),
    /// L2 norm of the weight change between two checkpoints.
    Norm(NormArgs),
    /// Synthetic domain pair, toy trainer and Monte-Carlo checks.
    #[command(subcommand)]
    Toylab(ToylabCommand),
}

#[derive(Debug, Subcommand)]
enum BamCommand {
    /// Run (or resume) a plan.
    Run(RunArgs),
    /// Line search over the merge coefficient.
    Linesearch(LinesearchArgs),
}

#[derive(Debug, Subcommand)]
enum ToylabCommand {
    /// Generate a domain pair, pretrain a base model and write a BaM plan.
    Gen(GenArgs),
    /// Write a freshly initialized toy model.
    Init(InitArgs),
    /// Train a toy-model checkpoint on a slice manifest or sample file.
    Train(TrainArgs),
    /// Evaluate a toy-model checkpoint.
    Eval(EvalArgs),
    /// Error cancellation of averaged noisy task vectors.
    Variance(VarianceArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Linear,
    Slerp,
    ModelStock,
}

impl From<MethodArg> for MergeMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Linear => MergeMethod::Linear,
            MethodArg::Slerp => MergeMethod::Slerp,
            MethodArg::ModelStock => MergeMethod::ModelStock,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScopeArg {
    PerTensor,
    Global,
}

impl From<ScopeArg> for AngleScope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::PerTensor => AngleScope::PerTensor,
            ScopeArg::Global => AngleScope::Global,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Iid,
    Curriculum,
}

impl From<ModeArg> for SliceMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Iid => SliceMode::Iid,
            ModeArg::Curriculum => SliceMode::Curriculum,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ArchArg {
    Logistic,
    Mlp,
}

impl From<ArchArg> for Architecture {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Logistic => Architecture::Logistic,
            ArchArg::Mlp => Architecture::Mlp,
        }
    }
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

#[derive(Debug, Args)]
struct MergeArgs {
    #[arg(long, value_enum, default_value = "linear")]
    method: MethodArg,
    /// Merge coefficient c in [0, 1]; the weight of the second operand.
    #[arg(long, default_value = "0.5", value_parser = unit_interval)]
    coeff: f64,
    /// Shared base checkpoint (required for slerp and model-stock).
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "per-tensor")]
    angle_scope: ScopeArg,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoints to merge.
    #[arg(required = true)]
    operands: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct SliceArgs {
    /// Mixture config: JSON `{"datasets": [DatasetSpec, ...]}`.
    #[arg(long)]
    mix: PathBuf,
    /// Directory of JSON-lines corpus index files.
    #[arg(long)]
    corpus: PathBuf,
    /// Number of slices.
    #[arg(long)]
    n: usize,
    #[arg(long, value_enum, default_value = "iid")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replay fraction of odd slices (curriculum mode).
    #[arg(long, default_value_t = bam_core::slice::DEFAULT_REPLAY_LIGHT, value_parser = unit_interval)]
    replay_light: f64,
    /// Replay fraction of even slices (curriculum mode).
    #[arg(long, default_value_t = bam_core::slice::DEFAULT_REPLAY_HEAVY, value_parser = unit_interval)]
    replay_heavy: f64,
    /// Output directory for `plan.json` and the slice manifests.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Plan file (JSON with BamPlan fields).
    #[arg(long)]
    plan: PathBuf,
    /// Continue the run recorded in the checkpoint directory's ledger.
    #[arg(long)]
    resume: bool,
    /// Use this checkpoint directory instead of the plan's.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Stop once the ledger holds this many merges.
    #[arg(long)]
    stop_after_merges: Option<usize>,
}

#[derive(Debug, Args)]
struct LinesearchArgs {
    /// Branch checkpoints to merge.
    #[arg(long, num_args = 1.., required = true)]
    branches: Vec<PathBuf>,
    #[arg(long)]
    base: PathBuf,
    /// Comma-separated coefficients in [0, 1].
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1", value_parser = unit_interval)]
    grid: Vec<f64>,
    #[arg(long, value_enum, default_value = "slerp")]
    method: MethodArg,
    #[arg(long, value_enum, default_value = "per-tensor")]
    angle_scope: ScopeArg,
    /// Held-out JSON-lines sample set.
    #[arg(long)]
    eval_set: PathBuf,
    /// Write the merge at the best coefficient here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// JSON-lines sample set.
    #[arg(long)]
    eval_set: PathBuf,
}

#[derive(Debug, Args)]
struct TaskVectorArgs {
    #[arg(long)]
    finetuned: PathBuf,
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct NormArgs {
    #[arg(long)]
    after: PathBuf,
    #[arg(long)]
    before: PathBuf,
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Experiment config (JSON); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long, value_enum)]
    slice_mode: Option<ModeArg>,
    /// Training steps per slice.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Debug, Args)]
struct InitArgs {
    #[arg(long, value_enum, default_value = "mlp")]
    arch: ArchArg,
    #[arg(long, default_value_t = 16)]
    input_dim: usize,
    #[arg(long, default_value_t = 32)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 4)]
    n_classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    base: PathBuf,
    /// Slice manifest to train on.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    manifest: Option<PathBuf>,
    /// JSON-lines sample file to train on.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Optimizer config (JSON with OptimizerConfig fields).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    max_lr: Option<f64>,
    /// Halve the peak learning rate.
    #[arg(long)]
    half_lr: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct VarianceArgs {
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Task-vector dimension.
    #[arg(long, default_value_t = 1000)]
    d: usize,
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let (name, result) = commands::dispatch(&cli.command);
    match result {
        Ok(report) => {
            if cli.json {
                println!("{}", report.to_json(name));
            } else {
                print!("{}", report.human);
            }
            ExitCode::from(exit::OK)
        }
        Err(err) => {
            let code = exit::classify(&err);
            eprintln!("error: {err:#}");
            if cli.json {
                let doc = serde_json::json!({
                    "schema_version": SCHEMA_VERSION,
                    "command": name,
                    "ok": false,
                    "exit_code": code,
                    "error": format!("{err:#}"),
                });
                println!("{doc}");
            }
            ExitCode::from(code)
        }
    }
}
