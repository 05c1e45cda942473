mod commands;
mod io;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sing_core::curvilinear::{StepConfig, StepRule};
use sing_core::{CovarianceScaling, SingConfig, SingError};

use crate::io::Format;

/// Simultaneous non-Gaussian component analysis of two datasets observed on
/// the same subjects.
#[derive(Parser, Debug)]
#[command(name = "sing", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic pair of datasets with known joint structure.
    Simulate(SimulateArgs),
    /// Joint and individual decomposition of two datasets.
    Decompose(DecomposeArgs),
    /// Non-Gaussian components of one dataset.
    Lngca(LngcaArgs),
    /// Pair the components of two datasets by chordal distance of their scores.
    Match(MatchArgs),
    /// Permutation test for the number of joint components.
    Permtest(PermtestArgs),
    /// Reshape loadings or scores into plot-ready tables.
    #[command(subcommand)]
    Export(ExportCommand),
}

#[derive(Args, Debug)]
struct OutArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Debug, Clone, Copy, Default, ValueEnum)]
enum Covariance {
    /// Divide by the number of features.
    #[default]
    P,
    /// Divide by the number of features minus one.
    PMinusOne,
}

#[derive(Debug, Clone, Copy, Default, ValueEnum)]
enum StepArg {
    /// Barzilai-Borwein trial steps after the first iteration.
    #[default]
    Bb,
    /// Always start backtracking from the initial step.
    Fixed,
}

#[derive(Args, Debug)]
struct SolverArgs {
    /// Weight of squared skewness in the JB statistic.
    #[arg(long, default_value_t = sing_core::nongauss::DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = 20)]
    restarts: usize,
    #[arg(long, default_value_t = 1500)]
    max_iter: usize,
    /// Relative objective change that counts as converged.
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Standardize feature columns before whitening.
    #[arg(long)]
    standardize: bool,
    #[arg(long, value_enum, default_value_t)]
    covariance: Covariance,
    #[arg(long, value_enum, default_value_t)]
    step_rule: StepArg,
    /// First trial step of the line search.
    #[arg(long, default_value_t = 0.01)]
    initial_step: f64,
}

impl SolverArgs {
    fn config(&self) -> SingConfig {
        SingConfig {
            alpha: self.alpha,
            restarts: self.restarts,
            max_iter: self.max_iter,
            tol: self.tol,
            seed: self.seed,
            standardize: self.standardize,
            covariance: match self.covariance {
                Covariance::P => CovarianceScaling::Features,
                Covariance::PMinusOne => CovarianceScaling::FeaturesMinusOne,
            },
            step: StepConfig {
                initial_step: self.initial_step,
                rule: match self.step_rule {
                    StepArg::Bb => StepRule::BarzilaiBorwein,
                    StepArg::Fixed => StepRule::Fixed,
                },
                ..StepConfig::default()
            },
            ..SingConfig::default()
        }
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, default_value_t = 48)]
    n: usize,
    /// Side of the square image grid for X.
    #[arg(long, default_value_t = 33)]
    grid: usize,
    /// Network nodes for Y.
    #[arg(long, default_value_t = 100)]
    nodes: usize,
    #[arg(long, default_value_t = 2)]
    joint_rank: usize,
    #[arg(long, default_value_t = 2)]
    individual_rank: usize,
    #[arg(long, default_value_t = 1.0)]
    noise_sd: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct DecomposeArgs {
    #[arg(long)]
    x: PathBuf,
    #[arg(long)]
    y: PathBuf,
    /// Number of non-Gaussian components of X.
    #[arg(long)]
    rank_x: Option<usize>,
    #[arg(long)]
    rank_y: Option<usize>,
    /// Penalty weight: small, medium, large or a positive number.
    #[arg(long, default_value = "small")]
    rho: String,
    #[arg(long, default_value_t = sing_core::matcher::DEFAULT_N_PERM)]
    n_perm: usize,
    #[arg(long, default_value_t = sing_core::matcher::DEFAULT_ALPHA_LEVEL)]
    alpha_level: f64,
    /// Skip writing individual components.
    #[arg(long)]
    no_individual: bool,
    /// Report scores as least-squares fits on the final loadings.
    #[arg(long)]
    ols_scores: bool,
    /// Directory from `sing match` with matched Ux and Uy; skips extraction,
    /// matching and the permutation test.
    #[arg(long, requires = "joint_rank")]
    init_from: Option<PathBuf>,
    /// Joint rank to use with --init-from.
    #[arg(long, requires = "init_from")]
    joint_rank: Option<usize>,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct LngcaArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    rank: usize,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct MatchArgs {
    #[arg(long)]
    mx: PathBuf,
    #[arg(long)]
    my: PathBuf,
    #[arg(long)]
    ux: PathBuf,
    #[arg(long)]
    uy: PathBuf,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct PermtestArgs {
    #[arg(long)]
    mx: PathBuf,
    #[arg(long)]
    my: PathBuf,
    #[arg(long, default_value_t = sing_core::matcher::DEFAULT_N_PERM)]
    n_perm: usize,
    #[arg(long, default_value_t = sing_core::matcher::DEFAULT_ALPHA_LEVEL)]
    alpha_level: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum ExportCommand {
    /// One loading row as a symmetric node×node matrix.
    Net {
        #[arg(long)]
        loadings: PathBuf,
        #[arg(long, default_value_t = 0)]
        component: usize,
        /// Diagonal value; NaN when omitted.
        #[arg(long)]
        diag: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// One loading row as a square image grid (column-major pixels).
    Image {
        #[arg(long)]
        loadings: PathBuf,
        #[arg(long, default_value_t = 0)]
        component: usize,
        /// Grid side; inferred from the row length when omitted.
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// One score column of each dataset side by side.
    Scatter {
        #[arg(long)]
        x: PathBuf,
        #[arg(long)]
        y: PathBuf,
        #[arg(long, default_value_t = 0)]
        component: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err
        .chain()
        .filter_map(|e| e.downcast_ref::<SingError>())
        .any(SingError::is_numeric);
    if numeric {
        EXIT_NUMERIC
    } else {
        EXIT_VALIDATION
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var("SING_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .map_err(|_| anyhow::anyhow!("SING_THREADS must be a positive integer, got {value:?}"))?;
    anyhow::ensure!(
        threads > 0,
        "SING_THREADS must be a positive integer, got {value:?}"
    );
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Simulate(args) => commands::simulate(args),
        Command::Decompose(args) => commands::decompose(args),
        Command::Lngca(args) => commands::lngca(args),
        Command::Match(args) => commands::match_components(args),
        Command::Permtest(args) => commands::permtest(args),
        Command::Export(cmd) => commands::export(cmd),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
