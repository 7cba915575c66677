//! `rhls`: constants reports, minimization runs, phase diagrams, evolutions
//! and external-model queries.
//!
//! Exit codes: 0 success, 1 invalid input, 2 numerical non-convergence.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "rhls",
    version,
    about = "Numerical laboratory for reverse Hardy-Littlewood-Sobolev inequalities"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone, Copy)]
struct Model {
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    lambda: f64,
    #[arg(long)]
    q: f64,
}

#[derive(Debug, Args, Clone, Copy)]
struct GridArgs {
    /// Outer radius of the stretched grid.
    #[arg(long, default_value_t = 10.0)]
    rmax: f64,
    #[arg(long, default_value_t = 512)]
    grid_size: usize,
    /// Geometric cell ratio (default: first cell ≈ 1e-4 rmax).
    #[arg(long)]
    stretch: Option<f64>,
}

#[derive(Debug, Args, Clone, Copy)]
struct SolverArgs {
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 20_000)]
    max_iter: usize,
    #[arg(long, default_value_t = 0.5)]
    damping: f64,
    /// Allow a Dirac mass at the origin (`--relaxed false` holds it at zero).
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    relaxed: bool,
    /// Number of starting profiles (1 to 4).
    #[arg(long, default_value_t = 4)]
    restarts: usize,
    /// Nodes of the power-tail closure beyond rmax; 0 cuts the domain.
    #[arg(long, default_value_t = rhls::radial::TAIL_NODES)]
    tail_nodes: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Report the (N, λ) constants, plus α, regime and the interpolation
    /// constant when q is given.
    Constants {
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        lambda: f64,
        #[arg(long)]
        q: Option<f64>,
    },
    /// Minimize the relaxed quotient; JSON to stdout, profile CSV with --out.
    Minimize {
        #[command(flatten)]
        model: Model,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        solver: SolverArgs,
        /// Directory for minimize.json and profile.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep a (λ, q) rectangle at fixed N; CSV rows plus an optional SVG.
    PhaseDiagram {
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 0.5)]
        lambda_min: f64,
        #[arg(long, default_value_t = 20.0)]
        lambda_max: f64,
        #[arg(long, default_value_t = 0.02)]
        q_min: f64,
        #[arg(long, default_value_t = 0.98)]
        q_max: f64,
        /// Samples per axis (at least 8).
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        /// Run the minimizer in every valid cell (slow).
        #[arg(long)]
        with_minimization: bool,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        solver: SolverArgs,
        /// CSV destination (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Run the aggregation-diffusion flow and write trace.csv, snapshots and
    /// summary.json into --out.
    Evolve {
        #[command(flatten)]
        model: Model,
        #[command(flatten)]
        grid: GridArgs,
        /// `gaussian`, `minimizer` (free-energy minimizer at --mass) or an
        /// `r,rho` CSV file (its nodes become the grid).
        #[arg(long, default_value = "gaussian")]
        init: String,
        /// Mass of the initial profile (file inputs keep their own when absent).
        #[arg(long)]
        mass: Option<f64>,
        /// Width of the gaussian initial profile.
        #[arg(long, default_value_t = 1.0)]
        width: f64,
        /// Drift by the fixed potential 1 + r²/2 + r^λ/λ instead of W_λ∗ρ.
        #[arg(long)]
        external: bool,
        #[arg(long, default_value_t = 1.0)]
        t_final: f64,
        /// Target relative change of ρ per step.
        #[arg(long, default_value_t = 0.05)]
        cfl: f64,
        #[arg(long, default_value_t = 0.0)]
        snapshot_every: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mass M(μ) of the external-model profile and the critical mass M(−1).
    External {
        #[command(flatten)]
        model: Model,
        #[arg(long, allow_negative_numbers = true)]
        mu: f64,
    },
    /// Radial interaction energy against the Cartesian quasi-Monte Carlo
    /// estimate (N ≤ 3).
    Oracle {
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        lambda: f64,
        /// `gaussian`, `ball` or `annulus`.
        #[arg(long, default_value = "gaussian")]
        profile: String,
        #[arg(long, default_value_t = 4.0)]
        rmax: f64,
        #[arg(long, default_value_t = 256)]
        grid_size: usize,
        #[arg(long, default_value_t = 1 << 16)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
