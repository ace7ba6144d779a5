//! `forge`: generate, solve, verify and benchmark synthetic tensor programs.

mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use forge_core::BuildMode;
use serde_json::json;

use crate::config::FileConfig;

#[derive(Parser, Debug)]
#[command(name = "forge", version, about = "Synthetic tensor-program generator and toolkit")]
struct Cli {
    /// Print machine-readable JSON on standard output.
    #[arg(long, global = true)]
    json: bool,
    /// TOML settings file; flags take precedence over it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Base seed. Defaults to the config file, then FORGE_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate verified programs at one level into a directory.
    Generate {
        #[arg(long)]
        level: u32,
        #[arg(long)]
        count: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Dag)]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        solver: SolverFlags,
        /// Worker threads; defaults to one per core.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Re-check program manifests with the shape oracle and the constraint checker.
    Verify {
        /// Manifest files (`program_<id>.json`); a `.py` path selects its manifest.
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
    },
    /// List the fragments a program is split into for kernel search.
    Fragments {
        /// Number of statements in the operator body.
        #[arg(long, conflicts_with = "program", required_unless_present = "program")]
        n: Option<usize>,
        /// A program manifest or source file.
        program: Option<PathBuf>,
        #[arg(long)]
        cap: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Run fragment search with pass-through replacements and a statement-count cost.
    Search {
        /// A program manifest or source file; both must sit side by side.
        program: PathBuf,
        #[arg(long)]
        cap: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Evaluate training losses and gradients for groups of rollouts.
    Reward {
        /// JSON file holding one rollout group or an array of groups.
        #[arg(long)]
        file: PathBuf,
        #[arg(long, value_enum, default_value_t = LossArg::Drpo)]
        loss: LossArg,
        #[command(flatten)]
        params: RewardFlags,
    },
    /// Accuracy, Faster1 and geometric-mean speedup of evaluation records.
    Metrics {
        /// JSON array of `{"correct": bool, "speedup": number}` records.
        #[arg(long)]
        file: PathBuf,
    },
    /// Build a curriculum stage or the held-out benchmark.
    Dataset {
        #[command(subcommand)]
        which: DatasetCommand,
    },
    /// Time the shape solver on freshly built graphs.
    BenchSolver {
        #[arg(long)]
        level: u32,
        #[arg(long)]
        trials: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Dag)]
        mode: ModeArg,
        #[command(flatten)]
        solver: SolverFlags,
    },
    /// List the operator catalog.
    Catalog,
}

#[derive(Subcommand, Debug)]
enum DatasetCommand {
    /// One curriculum stage (1, 2 or 3), scaled down by `--scale`.
    Stage {
        #[arg(long)]
        stage: u8,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        solver: SolverFlags,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// The benchmark, avoiding every program listed in the given dataset directories.
    Benchmark {
        #[arg(long)]
        out: PathBuf,
        /// Dataset directories (holding `index.json`) whose programs are excluded.
        #[arg(long)]
        exclude: Vec<PathBuf>,
        #[command(flatten)]
        solver: SolverFlags,
        #[arg(long)]
        jobs: Option<usize>,
    },
}

#[derive(Args, Debug, Clone, Default)]
struct SolverFlags {
    /// Wall-clock solver budget per program, in seconds.
    #[arg(long)]
    time_budget: Option<f64>,
    /// Search-step budget per program; keeps results identical across machines.
    #[arg(long)]
    max_work: Option<u64>,
    /// Attempts per program slot before giving up.
    #[arg(long)]
    retries: Option<u32>,
    /// Restrict operators to those accepting their input's tensor order.
    #[arg(long)]
    order_filter: Option<bool>,
    #[arg(long)]
    min_flops: Option<u64>,
    #[arg(long)]
    max_flops: Option<u64>,
    #[arg(long)]
    max_size: Option<u64>,
    #[arg(long)]
    min_size_tensor: Option<u64>,
}

#[derive(Args, Debug, Clone, Default)]
struct RewardFlags {
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// Use the power-law speed reward with this exponent.
    #[arg(long)]
    alpha: Option<f64>,
    /// KL divergence from the reference policy.
    #[arg(long)]
    kl: Option<f64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ModeArg {
    Dag,
    Chain,
}

impl From<ModeArg> for BuildMode {
    fn from(m: ModeArg) -> BuildMode {
        match m {
            ModeArg::Dag => BuildMode::Dag,
            ModeArg::Chain => BuildMode::Chain,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum LossArg {
    Drpo,
    Grpo,
    Sft,
}

/// A command's report: JSON for `--json`, text otherwise.
pub struct Output {
    pub json: serde_json::Value,
    pub text: String,
    /// 0, or 1 when the report lists verification failures.
    pub code: u8,
}

impl Output {
    fn ok(json: serde_json::Value, text: String) -> Self {
        Output { json, text, code: 0 }
    }
}

#[derive(Debug)]
pub enum Failure {
    /// Verification failure or infeasible generation.
    Check(String),
    Usage(String),
    Internal(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Internal(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Check(m) | Failure::Usage(m) | Failure::Internal(m) => m,
        }
    }
}

/// Settings shared by every command.
pub struct Context {
    pub seed: u64,
    pub file: FileConfig,
}

fn context(cli: &Cli) -> Result<Context, Failure> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p).map_err(Failure::Usage)?,
        None => FileConfig::default(),
    };
    let env_seed = match std::env::var("FORGE_SEED") {
        Ok(v) => Some(v.trim().parse::<u64>().map_err(|e| Failure::Usage(format!("FORGE_SEED={v}: {e}")))?),
        Err(_) => None,
    };
    let seed = cli.seed.or(file.seed).or(env_seed).unwrap_or(0);
    Ok(Context { seed, file })
}

fn run(cli: Cli) -> Result<Output, Failure> {
    let ctx = context(&cli)?;
    match cli.command {
        Command::Generate { level, count, mode, out, solver, jobs } => {
            commands::generate(&ctx, level, count, mode.into(), &out, &solver, jobs)
        }
        Command::Verify { manifests } => commands::verify(&manifests),
        Command::Fragments { n, program, cap, max_len } => commands::fragments(&ctx, n, program.as_deref(), cap, max_len),
        Command::Search { program, cap, max_len } => commands::search(&ctx, &program, cap, max_len),
        Command::Reward { file, loss, params } => commands::reward(&ctx, &file, loss, &params),
        Command::Metrics { file } => commands::metrics(&file),
        Command::Dataset { which } => match which {
            DatasetCommand::Stage { stage, scale, out, solver, jobs } => commands::stage(&ctx, stage, scale, &out, &solver, jobs),
            DatasetCommand::Benchmark { out, exclude, solver, jobs } => commands::benchmark(&ctx, &out, &exclude, &solver, jobs),
        },
        Command::BenchSolver { level, trials, mode, solver } => commands::bench_solver(&ctx, level, trials, mode.into(), &solver),
        Command::Catalog => Ok(commands::catalog()),
    }
}

/// Writes a report; a reader that closed the pipe early is not an error.
fn print_stdout(body: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{body}").and_then(|()| out.flush());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json = cli.json;
    match run(cli) {
        Ok(out) => {
            let body = if json { serde_json::to_string_pretty(&out.json).expect("report serializes") } else { out.text.trim_end().to_string() };
            if !body.is_empty() {
                print_stdout(&body);
            }
            ExitCode::from(out.code)
        }
        Err(f) => {
            eprintln!("error: {}", f.message());
            if json {
                print_stdout(&json!({ "error": f.message(), "code": f.code() }).to_string());
            }
            ExitCode::from(f.code())
        }
    }
}
