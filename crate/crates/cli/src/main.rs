//! `pi-certify`: solve, certify and verify discounted control problems by
//! policy iteration.

mod commands;
mod load;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "pi-certify", version, about, long_about = None)]
#[command(after_help = "Environment:\n  PI_CERTIFY_THREADS  worker threads (default: all cores)\n\n\
Exit codes: 0 success, 1 verification or certification failure, 2 usage or configuration error.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run policy iteration; writes pirun.json, values.csv and policy.csv.
    Solve(Common),
    /// Build the certificate bundle; writes certificates.json.
    Certify(Common),
    /// Check every inequality along the iterates; writes report.json,
    /// report.csv and plotdata/.
    Verify(VerifyArgs),
    /// Run a bundled example end to end and print its constant table.
    Reproduce(ReproduceArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Problem file (JSON with a "backend" field: finite, lq or grid).
    #[arg(long)]
    problem: PathBuf,
    /// Discount factor in (0, 1); overrides the problem file.
    #[arg(long, value_parser = parse_gamma)]
    gamma: Option<f64>,
    /// Discount sweep LO,HI,N for certificate tables.
    #[arg(long, value_parser = parse_sweep)]
    gamma_sweep: Option<Sweep>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Selects the window of sampled initial states.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Tolerance for Bellman residuals and every checked inequality.
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    /// Trajectory horizon of the stability checks.
    #[arg(long, default_value_t = 200)]
    horizon: usize,
    /// Grid points per axis (grid backend).
    #[arg(long)]
    grid_points: Option<usize>,
    /// Cap on policy-iteration steps.
    #[arg(long)]
    max_iters: Option<usize>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// Iterates from a previous `solve` instead of re-running PI.
    #[arg(long)]
    pirun: Option<PathBuf>,
    /// Certificates from a previous `certify` instead of rebuilding them.
    #[arg(long)]
    certificates: Option<PathBuf>,
    /// Iteration whose policy drives the trajectory checks (default: the threshold).
    #[arg(long)]
    iteration: Option<usize>,
    /// Sampled initial states (LQ and grid).
    #[arg(long, default_value_t = 100)]
    samples: usize,
}

#[derive(Args, Debug)]
struct ReproduceArgs {
    example: Example,
    #[arg(long, value_parser = parse_gamma)]
    gamma: Option<f64>,
    #[arg(long, value_parser = parse_sweep)]
    gamma_sweep: Option<Sweep>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long, default_value_t = 200)]
    horizon: usize,
    #[arg(long)]
    grid_points: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Example {
    Lq,
    Nonholonomic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Sweep {
    lo: f64,
    hi: f64,
    n: usize,
}

fn parse_gamma(s: &str) -> Result<f64, String> {
    let g: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if g > 0.0 && g < 1.0 {
        Ok(g)
    } else {
        Err(format!("discount {g} must lie in (0, 1)"))
    }
}

fn parse_sweep(s: &str) -> Result<Sweep, String> {
    let parts: Vec<&str> = s.split(',').collect();
    let [lo, hi, n] = parts.as_slice() else {
        return Err("expected LO,HI,N".into());
    };
    let lo = parse_gamma(lo.trim())?;
    let hi = parse_gamma(hi.trim())?;
    let n: usize = n.trim().parse().map_err(|e| format!("N: {e}"))?;
    if lo > hi || n == 0 {
        return Err("need LO <= HI and N >= 1".into());
    }
    Ok(Sweep { lo, hi, n })
}

/// A failure with its exit code.
#[derive(Debug)]
enum Failure {
    Config(String),
    Check(String),
}

impl From<picert::Error> for Failure {
    fn from(e: picert::Error) -> Self {
        use picert::Error as E;
        match e {
            E::InvalidProblem(_)
            | E::DiscountRange { .. }
            | E::Json(_)
            | E::Io(_)
            | E::Shape(_)
            | E::Backend(_)
            | E::Admissibility { .. } => Failure::Config(e.to_string()),
            other => Failure::Check(other.to_string()),
        }
    }
}

fn threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("PI_CERTIFY_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().map_err(|_| Failure::Config(format!("PI_CERTIFY_THREADS={v} is not a thread count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Config(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = threads().and_then(|()| match cli.command {
        Command::Solve(c) => commands::solve(&c),
        Command::Certify(c) => commands::certify(&c),
        Command::Verify(v) => commands::verify(&v),
        Command::Reproduce(r) => commands::reproduce(&r),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
