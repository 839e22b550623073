mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "simplex-rank",
    version,
    about = "Rank answer generators from imperfect judge scores"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Model and sampler settings shared by fitting commands. Values come from
/// the flag, then the `--config` file, then the default.
#[derive(Args, Debug, Clone)]
pub struct FitArgs {
    /// Random-effect magnitude (0 disables judge-specific prevalence shifts).
    #[arg(long)]
    pub omega: Option<f64>,
    /// Judge-quality concentration boost.
    #[arg(long)]
    pub beta_max: Option<f64>,
    /// Drop scores a judge gave to its own model family (default true).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub self_adjust: Option<bool>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON file with any of: omega, beta_max, self_adjust, chains, warmup,
    /// samples, seed, stratify.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the Bayesian model and report posterior ranks.
    Rank {
        /// Score file (.jsonl or .tsv, optionally .gz).
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        fit: FitArgs,
        /// Fit each stratum separately and pool (default: one stratum).
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        stratify: Option<bool>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a baseline ranking method.
    Baseline {
        #[arg(value_enum)]
        method: BaselineMethod,
        #[arg(long)]
        input: PathBuf,
        /// Bootstrap replicates (bootstrap and bt).
        #[arg(long, default_value_t = 1000)]
        replicates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refit over a grid of omega and beta_max values.
    Sweep {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "0,1,2,4,8")]
        omega_grid: String,
        #[arg(long, default_value = "0")]
        beta_grid: String,
        /// Truth file for per-cell coverage.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset together with its ground truth.
    Simulate(SimulateArgs),
    /// Identifiability tools on the probability simplex.
    Identify {
        #[command(subcommand)]
        tool: IdentifyTool,
    },
    /// Collect judge scores from a chat-completion endpoint or a mock file.
    Judge(JudgeArgs),
    /// Spearman correlation and rank-interval coverage against a truth file.
    Eval {
        /// Report JSON written by rank, baseline or sweep cells.
        #[arg(long, required = true)]
        report: Vec<PathBuf>,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BaselineMethod {
    Average,
    Single,
    Bootstrap,
    Bt,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 500)]
    pub questions: usize,
    #[arg(long, default_value_t = 6)]
    pub candidates: usize,
    #[arg(long, default_value_t = 2)]
    pub judges: usize,
    /// True levels.
    #[arg(long, default_value_t = 3)]
    pub levels: usize,
    /// Assigned levels (more than --levels adds abstain categories).
    #[arg(long)]
    pub assigned_levels: Option<usize>,
    /// Concentration boost of the judge vertex prior.
    #[arg(long, default_value_t = 0.0)]
    pub beta_max: f64,
    /// Fix judge quality instead of drawing it.
    #[arg(long)]
    pub quality: Option<f64>,
    /// Judges that always report the latent level.
    #[arg(long)]
    pub perfect_judges: bool,
    /// Probability that judges share a record's uniform variate.
    #[arg(long, default_value_t = 0.0)]
    pub correlation: f64,
    /// Magnitude of judge-specific prevalence shifts.
    #[arg(long, default_value_t = 0.0)]
    pub shift: f64,
    #[arg(long, default_value_t = 1)]
    pub strata: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Score file name inside --out; the extension picks the layout.
    #[arg(long, default_value = "scores.jsonl")]
    pub scores_name: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum IdentifyTool {
    /// Rank two-level data from empirical score marginals.
    Binary {
        #[arg(long)]
        input: PathBuf,
        /// Use per-judge marginals and the common scale of a reference pair.
        #[arg(long)]
        moderate: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build two judge configurations with equal marginals and opposite
    /// orderings.
    Witness {
        /// Judge vertices: columns separated by ';', entries by ','.
        #[arg(long, default_value = "0.8,0.1,0.1;0.1,0.8,0.1;0.1,0.1,0.8")]
        vertices: String,
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Barycentric coordinates of each candidate's pooled marginal and
    /// whether it lies in the hull of the given vertices.
    Envelope {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vertices: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct JudgeArgs {
    /// Questions with candidate answers (JSON lines or a JSON array).
    #[arg(long)]
    pub questions: PathBuf,
    #[arg(long)]
    pub task: String,
    /// `id=model` or `id=model@family`; repeatable. Defaults to the model
    /// named by SIMPLEX_RANK_MODEL.
    #[arg(long = "judge")]
    pub judges: Vec<String>,
    /// Canned responses instead of an endpoint.
    #[arg(long)]
    pub mock: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
    #[arg(long, default_value_t = 4)]
    pub max_retries: u32,
    #[arg(long, default_value_t = 500)]
    pub backoff_ms: u64,
    #[arg(long, default_value_t = 120)]
    pub timeout_secs: u64,
    /// Seed of the candidate-order shuffle.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Ignore an existing checkpoint and start over.
    #[arg(long)]
    pub fresh: bool,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Rank {
            input,
            fit,
            stratify,
            out,
        } => commands::rank(&input, &fit, stratify, &out),
        Command::Baseline {
            method,
            input,
            replicates,
            seed,
            out,
        } => commands::baseline(method, &input, replicates, seed, &out),
        Command::Sweep {
            input,
            omega_grid,
            beta_grid,
            truth,
            fit,
            out,
        } => commands::sweep(&input, &omega_grid, &beta_grid, truth.as_deref(), &fit, &out),
        Command::Simulate(args) => commands::simulate(&args),
        Command::Identify { tool } => commands::identify(tool),
        Command::Judge(args) => commands::judge(&args),
        Command::Eval { report, truth, out } => commands::eval(&report, &truth, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let causes: Vec<String> = e.chain().skip(1).map(|c| c.to_string()).collect();
            let err = serde_json::json!({ "error": e.to_string(), "causes": causes });
            eprintln!("{err}");
            ExitCode::FAILURE
        }
    }
}
