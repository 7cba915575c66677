use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::{json, Value};
use thiserror::Error;

use rhls::constants::ConstantsReport;
use rhls::flow::{
    evolve, evolve_external, external_mass, external_window, minimize_free_energy, EvolutionTrace, EvolveOptions,
};
use rhls::kernel::{interaction_energy, interaction_energy_oracle, KernelTable};
use rhls::minimize::{minimize_relaxed, GridSpec, MinimizeOptions};
use rhls::params::classify;
use rhls::phase::{self, PhaseSpec};
use rhls::radial::{sample_profile, stretch_for_first_step, ProfileKind};
use rhls::{Params, RadialDensity, RadialGrid};

use crate::{Command, GridArgs, Model, SolverArgs};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] rhls::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use rhls::Error as E;
        match self {
            CliError::Core(E::NotConverged { .. } | E::StepUnderflow { .. } | E::NonPositiveMultiplier { .. }) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn cache_dir() -> Option<PathBuf> {
    std::env::var_os("RHLS_CACHE_DIR").map(PathBuf::from)
}

fn emit(value: &Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

/// Finite numbers as JSON numbers, the rest as the strings "inf", "-inf", "nan".
fn number(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else if x.is_nan() {
        json!("nan")
    } else if x > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

fn params(m: &Model) -> Result<Params> {
    Ok(Params::new(m.dim, m.lambda, m.q)?)
}

fn grid_spec(g: &GridArgs, tail_nodes: usize) -> GridSpec {
    GridSpec {
        r_max: g.rmax,
        size: g.grid_size,
        stretch: g.stretch,
        tail_nodes,
    }
}

fn solver_options(s: &SolverArgs) -> MinimizeOptions {
    MinimizeOptions {
        tol: s.tol,
        max_iter: s.max_iter,
        damping: s.damping,
        restarts: s.restarts,
        relaxed: s.relaxed,
    }
}

pub fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Constants { dim, lambda, q } => constants(dim, lambda, q),
        Command::Minimize {
            model,
            grid,
            solver,
            out,
        } => minimize(&model, &grid, &solver, out.as_deref()),
        Command::PhaseDiagram {
            dim,
            lambda_min,
            lambda_max,
            q_min,
            q_max,
            resolution,
            with_minimization,
            grid,
            solver,
            out,
            svg,
        } => {
            let mut spec = PhaseSpec::new(dim, (lambda_min, lambda_max), (q_min, q_max), resolution)?;
            if with_minimization {
                spec.minimize = Some((grid_spec(&grid, solver.tail_nodes), solver_options(&solver)));
            }
            phase_diagram(&spec, out.as_deref(), svg.as_deref())
        }
        Command::Evolve {
            model,
            grid,
            init,
            mass,
            width,
            external,
            t_final,
            cfl,
            snapshot_every,
            out,
        } => {
            let opts = EvolveOptions {
                t_final,
                cfl,
                snapshot_every,
                ..Default::default()
            };
            evolve_cmd(&model, &grid, &init, mass, width, external, &opts, &out)
        }
        Command::External { model, mu } => external(&model, mu),
        Command::Oracle {
            dim,
            lambda,
            profile,
            rmax,
            grid_size,
            samples,
            seed,
        } => oracle(dim, lambda, &profile, rmax, grid_size, samples, seed),
    }
}

fn constants(dim: usize, lambda: f64, q: Option<f64>) -> Result<u8> {
    let report = ConstantsReport::compute(dim, lambda, q)?;
    let mut value = serde_json::to_value(&report)?;
    if let Some(q) = q {
        let p = Params::new(dim, lambda, q)?;
        value["regime"] = serde_json::to_value(classify(&p))?;
        if !p.is_valid() {
            value["note"] = json!(format!(
                "q = {q} does not exceed N/(N+lambda) = {}; the inequality fails",
                p.validity_threshold()
            ));
        }
    }
    emit(&value)?;
    Ok(0)
}

fn minimize(model: &Model, grid: &GridArgs, solver: &SolverArgs, out: Option<&Path>) -> Result<u8> {
    let p = params(model)?;
    p.require_valid()?;
    let table = grid_spec(grid, solver.tail_nodes).table(&p, cache_dir().as_deref())?;
    let result = minimize_relaxed(&p, &table, &solver_options(solver))?;
    let mut profile_csv = None;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("profile.csv");
        result.state.rho.write_csv(BufWriter::new(File::create(&path)?))?;
        profile_csv = Some(path.display().to_string());
    }
    let mut value = serde_json::to_value(result.summary(profile_csv))?;
    value["sandwich_holds"] = json!(result.sandwich_holds());
    if let Some(dir) = out {
        write_json(&dir.join("minimize.json"), &value)?;
    }
    emit(&value)?;
    if !result.converged {
        eprintln!(
            "warning: minimization did not converge (residual {:e} after {} iterations)",
            result.residual, result.iterations
        );
        return Ok(2);
    }
    Ok(0)
}

fn phase_diagram(spec: &PhaseSpec, out: Option<&Path>, svg: Option<&Path>) -> Result<u8> {
    let points = phase::sweep(spec, cache_dir().as_deref())?;
    match out {
        Some(path) => phase::write_csv(spec.dim, &points, BufWriter::new(File::create(path)?))?,
        None => phase::write_csv(spec.dim, &points, std::io::stdout().lock())?,
    }
    if let Some(path) = svg {
        phase::write_svg(spec, &points, BufWriter::new(File::create(path)?))?;
    }
    let failed = points.iter().filter(|p| p.converged == Some(false)).count();
    if failed > 0 {
        eprintln!("warning: {failed} cells did not converge");
        return Ok(2);
    }
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn evolve_cmd(
    model: &Model,
    grid: &GridArgs,
    init: &str,
    mass: Option<f64>,
    width: f64,
    external: bool,
    opts: &EvolveOptions,
    out: &Path,
) -> Result<u8> {
    let p = params(model)?;
    if let Some(m) = mass {
        if !(m > 0.0 && m.is_finite()) {
            return Err(CliError::Usage(format!("--mass must be > 0, got {m}")));
        }
    }
    let builtin_grid = || -> Result<Arc<RadialGrid>> {
        let spec = grid_spec(grid, 0);
        Ok(Arc::new(spec.grid(&p)?))
    };
    let rescale = |rho: RadialDensity| -> Result<RadialDensity> {
        if rho.is_zero() {
            return Err(rhls::Error::ZeroDensity.into());
        }
        Ok(match mass {
            Some(m) => {
                let m0 = rho.mass();
                rho.scaled(m / m0)
            }
            None => rho,
        })
    };
    let gaussian = |g: Arc<RadialGrid>| -> Result<RadialDensity> {
        let rho = sample_profile(ProfileKind::Gaussian(width), &p, g)?;
        let m0 = rho.mass();
        Ok(rho.scaled(mass.unwrap_or(1.0) / m0))
    };
    let table_for = |g: &Arc<RadialGrid>| KernelTable::load_or_build(cache_dir().as_deref(), g.clone(), p.lambda());
    let trace = if external {
        let rho0 = match init {
            "gaussian" => gaussian(builtin_grid()?)?,
            "minimizer" => {
                return Err(CliError::Usage(
                    "--init minimizer needs the interaction drift; drop --external".into(),
                ))
            }
            path => rescale(RadialDensity::read_csv(p.dim(), BufReader::new(File::open(path)?))?)?,
        };
        evolve_external(&rho0, &p, opts)?
    } else {
        let (rho0, table) = match init {
            "gaussian" => {
                let g = builtin_grid()?;
                let t = table_for(&g)?;
                (gaussian(g)?, t)
            }
            "minimizer" => {
                let g = builtin_grid()?;
                let t = table_for(&g)?;
                let start = gaussian(g)?;
                let fm = minimize_free_energy(&start, start.mass(), &t, &p, 1e-10, 5000)?;
                if !fm.converged {
                    eprintln!("warning: free-energy minimizer residual {:e}", fm.residual);
                }
                (fm.state, t)
            }
            path => {
                let rho = rescale(RadialDensity::read_csv(p.dim(), BufReader::new(File::open(path)?))?)?;
                let t = table_for(rho.grid())?;
                (rho, t)
            }
        };
        evolve(&rho0, &p, &table, opts)?
    };
    trace.write_dir(out)?;
    let summary = evolution_summary(&trace, external);
    write_json(&out.join("summary.json"), &summary)?;
    emit(&summary)?;
    if let Some(msg) = &trace.aborted {
        eprintln!("warning: evolution aborted: {msg}");
        return Ok(2);
    }
    Ok(0)
}

fn evolution_summary(trace: &EvolutionTrace, external: bool) -> Value {
    json!({
        "drift": if external { "external" } else { "interaction" },
        "t_end": trace.times.last().copied().unwrap_or(0.0),
        "steps": trace.times.len() - 1,
        "rejected_steps": trace.rejected_steps,
        "mass_initial": trace.mass_series[0],
        "mass_drift": trace.mass_drift(),
        "free_energy_initial": trace.free_energy_series[0],
        "free_energy_final": trace.free_energy_series.last().copied(),
        "worst_energy_increase": number(trace.worst_energy_increase()),
        "rho0_final": trace.origin_value_series.last().copied(),
        "concentration_flag": trace.concentration_flag,
        "aborted": trace.aborted,
        "snapshots": trace.snapshots.len(),
    })
}

fn external(model: &Model, mu: f64) -> Result<u8> {
    let p = params(model)?;
    let m = external_mass(&p, mu)?;
    let crit = external_mass(&p, -1.0)?;
    let n = p.dim() as f64;
    let mut warnings = Vec::new();
    if !external_window(&p) {
        warnings.push(format!(
            "(lambda, q) outside the window lambda > 2, {} < q < {}",
            1.0 - p.lambda() / n,
            1.0 - 2.0 / n
        ));
    }
    if m.is_infinite() {
        warnings.push(format!(
            "M(mu) is infinite: q <= 1 - lambda/N = {}",
            1.0 - p.lambda() / n
        ));
    }
    if crit.is_infinite() && !m.is_infinite() {
        warnings.push("M(-1) is infinite".into());
    }
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    emit(&json!({
        "dim": p.dim(),
        "lambda": p.lambda(),
        "q": p.q(),
        "mu": mu,
        "M_of_mu": number(m),
        "critical_mass": number(crit),
        "warnings": warnings,
    }))?;
    Ok(0)
}

fn oracle(dim: usize, lambda: f64, profile: &str, rmax: f64, size: usize, samples: usize, seed: u64) -> Result<u8> {
    let kind = match profile {
        "gaussian" => ProfileKind::Gaussian(1.0),
        "ball" => ProfileKind::BallIndicator(1.0),
        "annulus" => ProfileKind::AnnulusTrial(2.0),
        other => return Err(CliError::Usage(format!("unknown profile {other:?}"))),
    };
    if size < 2 {
        return Err(CliError::Usage(format!("--grid-size must be >= 2, got {size}")));
    }
    // q does not enter the interaction energy; any admissible value works
    let p = Params::new(dim, lambda, 0.99)?;
    let g = Arc::new(RadialGrid::new(dim, rmax, size, stretch_for_first_step(size, 1e-3))?);
    let rho = sample_profile(kind, &p, g.clone())?;
    let table = KernelTable::load_or_build(cache_dir().as_deref(), g, lambda)?;
    let radial = interaction_energy(&rho, &table)?;
    let est = interaction_energy_oracle(&rho, dim, lambda, samples, seed)?;
    emit(&json!({
        "dim": dim,
        "lambda": lambda,
        "profile": profile,
        "seed": seed,
        "samples": samples,
        "radial": radial,
        "oracle": est.value,
        "std_error": est.std_error,
        "relative_difference": (radial - est.value) / est.value,
    }))?;
    Ok(0)
}
