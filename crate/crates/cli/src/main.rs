//! `classmatch`: config-driven pipelines over synthetic teacher-assignment
//! experiments — generation, IV estimation, diagnostics, reallocation, and
//! Bayesian-bootstrap inference.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
//! failure, 4 diagnostic alarm.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use classmatch::design::DesignError;
use classmatch::diagnostics::DiagError;
use classmatch::estimator::EstimatorError;
use classmatch::inference::InferenceError;
use classmatch::matchcore::MatchError;
use classmatch::realloc::ReallocError;
use classmatch::synth::{IoError, SynthError};

use config::{Overrides, RunConfig};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration (exit 1).
    Usage(String),
    /// Missing or malformed data (exit 2).
    Data(String),
    /// Estimation or optimization failure (exit 3).
    Numeric(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Config(m) => CliError::Usage(m),
            SynthError::Params(m) => CliError::Usage(m),
            SynthError::Io(io) => CliError::Data(io.to_string()),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DesignError> for CliError {
    fn from(e: DesignError) -> Self {
        match e {
            DesignError::BadCutoffs | DesignError::BadStudentRule => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EstimatorError> for CliError {
    fn from(e: EstimatorError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<ReallocError> for CliError {
    fn from(e: ReallocError) -> Self {
        match e {
            ReallocError::Design(d) => d.into(),
            ReallocError::SupplyMismatch { .. } | ReallocError::MixedCellCluster(_) => {
                CliError::Data(e.to_string())
            }
            ReallocError::BadPolicy(m) => CliError::Usage(m),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<DiagError> for CliError {
    fn from(e: DiagError) -> Self {
        match e {
            DiagError::Design(d) => d.into(),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::Design(d) => d.into(),
            InferenceError::Realloc(r) => r.into(),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<MatchError> for CliError {
    fn from(e: MatchError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "classmatch",
    version,
    about = "Teacher-to-classroom reallocation pipelines on synthetic experiments"
)]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for every stochastic step.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Directory with dataset files (students.csv, teachers.csv,
    /// sections.csv, blocks.csv).
    #[arg(long, global = true)]
    data: Option<PathBuf>,

    /// Number of student types.
    #[arg(long, global = true)]
    k: Option<usize>,

    /// Number of teacher levels.
    #[arg(long, global = true)]
    l: Option<usize>,

    /// Teacher practice-score cutoffs, comma separated (length L-1).
    #[arg(long, global = true, value_delimiter = ',')]
    cutoffs: Option<Vec<f64>>,

    /// Reassignment cells: district-school-type, school-type, or block.
    #[arg(long, global = true)]
    cells: Option<String>,

    /// Include teacher-by-peer interaction columns.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    include_lambda: Option<bool>,

    /// Bootstrap replications.
    #[arg(long, global = true)]
    replications: Option<usize>,

    /// Write latent/truth columns when exporting datasets.
    #[arg(long, global = true)]
    oracle_columns: bool,

    /// Log progress to stderr.
    #[arg(long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic experiment and write its dataset files.
    Synth,
    /// Fit OLS and 2SLS with cluster-robust errors and first-stage tests.
    Estimate {
        /// Also dump the absorbed design matrix as one wide table.
        #[arg(long)]
        dump_design: bool,
    },
    /// Run the four specification tests.
    Diagnose,
    /// Solve optimal/worst assignments and report reallocation effects.
    Reallocate,
    /// Bayesian-bootstrap posterior for the reallocation statistics.
    Bootstrap,
    /// Closed-form replacement-policy benchmarks.
    BenchmarkVam {
        /// Teacher value-added standard deviation for a custom row.
        #[arg(long)]
        sigma: Option<f64>,
        /// Replaced fraction for a custom row.
        #[arg(long)]
        tau: Option<f64>,
        /// Replacement quantile for a custom row.
        #[arg(long)]
        tau_tilde: Option<f64>,
    },
    /// Reproduce the discrete-type worked example exactly in rationals.
    ToyAre,
}

fn run(cli: Cli) -> Result<u8, CliError> {
    let overrides = Overrides {
        seed: cli.common.seed,
        k: cli.common.k,
        l: cli.common.l,
        cutoffs: cli.common.cutoffs.clone(),
        cells: cli.common.cells.clone(),
        include_lambda: cli.common.include_lambda,
        replications: cli.common.replications,
        dump_draws: None,
    };
    let cfg = RunConfig::load(cli.common.config.as_deref(), &overrides)?;
    let out = &cli.common.out;
    let data = cli.common.data.as_ref();

    match cli.command {
        Command::Synth => {
            commands::cmd_synth(&cfg, out, cli.common.oracle_columns)?;
            Ok(0)
        }
        Command::Estimate { dump_design } => {
            commands::cmd_estimate(&cfg, data, out, dump_design)?;
            Ok(0)
        }
        Command::Diagnose => {
            let any_reject = commands::cmd_diagnose(&cfg, data, out)?;
            Ok(if any_reject { 4 } else { 0 })
        }
        Command::Reallocate => {
            commands::cmd_reallocate(&cfg, data, out)?;
            Ok(0)
        }
        Command::Bootstrap => {
            let alarm = commands::cmd_bootstrap(&cfg, data, out)?;
            Ok(if alarm { 4 } else { 0 })
        }
        Command::BenchmarkVam {
            sigma,
            tau,
            tau_tilde,
        } => {
            let custom = match (sigma, tau, tau_tilde) {
                (None, None, None) => None,
                (Some(s), Some(t), tt) => Some((s, t, tt)),
                (None, None, Some(_)) => {
                    return Err(CliError::Usage(
                        "--tau-tilde requires --sigma and --tau".into(),
                    ))
                }
                _ => {
                    return Err(CliError::Usage(
                        "custom benchmark rows need both --sigma and --tau".into(),
                    ))
                }
            };
            commands::cmd_benchmark_vam(&cfg, out, custom)?;
            Ok(0)
        }
        Command::ToyAre => {
            commands::cmd_toy_are(&cfg, out)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successful exits.
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    let level = if cli.common.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            log::error!("{e}");
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
