//! Free energy, optimal dilations and the aggregation–diffusion flow
//! ∂_t ρ = Δρ^q + ∇·(ρ∇P), with P = W_λ∗ρ (W_λ = |x|^λ/λ) or the external
//! potential V = 1 + r²/2 + r^λ/λ.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kernel::KernelTable;
use crate::params::Params;
use crate::quad;
use crate::radial::{dot, sample_profile, ProfileKind, RadialDensity, RadialGrid};

fn check_inputs(rho: &RadialDensity, table: &KernelTable, p: &Params) -> Result<()> {
    if rho.grid().dim() != p.dim() {
        return Err(Error::DimensionMismatch {
            grid: rho.grid().dim(),
            params: p.dim(),
        });
    }
    if table.lambda() != p.lambda() {
        return Err(invalid(format!(
            "kernel table built for lambda = {}, parameters have {}",
            table.lambda(),
            p.lambda()
        )));
    }
    if !(Arc::ptr_eq(rho.grid(), table.grid()) || **rho.grid() == **table.grid()) {
        return Err(Error::GridMismatch);
    }
    Ok(())
}

/// I/(2λ) − lq/(1−q).
pub fn free_energy(rho: &RadialDensity, table: &KernelTable, p: &Params) -> Result<f64> {
    check_inputs(rho, table, p)?;
    let conv = table.convolve(rho)?;
    let w = rho.grid().weights();
    let interaction: f64 = rho.values().iter().zip(w).zip(&conv).map(|((r, w), c)| r * w * c).sum();
    Ok(interaction / (2.0 * p.lambda()) - rho.lq(p.q()) / (1.0 - p.q()))
}

/// External potential 1 + r²/2 + r^λ/λ.
pub fn external_potential(r: f64, lambda: f64) -> f64 {
    1.0 + 0.5 * r * r + r.powf(lambda) / lambda
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dilation {
    /// Minimizer of τ ↦ F[τ^N ρ(τ·)].
    pub tau0: f64,
    #[serde(rename = "F_at_tau0")]
    pub f_at_tau0: f64,
    /// −κ (C·mass^α)^{−N(1−q)/(λ−N(1−q))}, when a constant estimate is supplied.
    pub lower_bound: Option<f64>,
}

/// Optimal dilation of ρ for the free energy and the resulting lower bounds.
pub fn optimal_dilation(
    rho: &RadialDensity,
    table: &KernelTable,
    p: &Params,
    c_estimate: Option<f64>,
) -> Result<Dilation> {
    check_inputs(rho, table, p)?;
    let (n, l, q) = (p.dim() as f64, p.lambda(), p.q());
    let a = n * (1.0 - q);
    if !(l > a) {
        return Err(invalid(format!("optimal dilation needs lambda > N(1-q) = {a}")));
    }
    let conv = table.convolve(rho)?;
    let w = rho.grid().weights();
    let interaction: f64 = rho.values().iter().zip(w).zip(&conv).map(|((r, w), c)| r * w * c).sum();
    let lq = rho.lq(q);
    if !(interaction > 0.0 && lq > 0.0) {
        return Err(Error::ZeroDensity);
    }
    let tau0 = (interaction / (2.0 * n * lq)).powf(1.0 / (l - a));
    let kappa = (1.0 / (1.0 - q) - n / l) * (2.0 * n).powf(a / (l - a));
    let f_at_tau0 = -kappa * lq.powf(l / (l - a)) / interaction.powf(a / (l - a));
    let lower_bound = c_estimate.map(|c| -kappa * (c * rho.mass().powf(p.alpha())).powf(-a / (l - a)));
    Ok(Dilation {
        tau0,
        f_at_tau0,
        lower_bound,
    })
}

/// τ^N c ρ(τ r) on the grid with nodes r_i/τ: exact node values, no interpolation.
pub fn dilate_exact(rho: &RadialDensity, tau: f64, c: f64) -> Result<RadialDensity> {
    let g = rho.grid().dilated(1.0 / tau)?;
    let f = c * tau.powi(rho.grid().dim() as i32);
    RadialDensity::new(Arc::new(g), rho.values().iter().map(|v| v * f).collect())
}

/// Driving potential of the flow.
#[derive(Debug, Clone, Copy)]
pub enum Drift<'a> {
    /// P = W_λ∗ρ from the kernel table, recomputed every step.
    Interaction(&'a KernelTable),
    /// P = V, fixed.
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvolveOptions {
    pub t_final: f64,
    /// Largest relative change of ρ aimed for in one step.
    pub cfl: f64,
    /// Time between stored snapshots; 0 stores none besides the final state.
    pub snapshot_every: f64,
    pub max_steps: usize,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self {
            t_final: 1.0,
            cfl: 0.05,
            snapshot_every: 0.0,
            max_steps: 1_000_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvolutionTrace {
    pub times: Vec<f64>,
    pub mass_series: Vec<f64>,
    pub free_energy_series: Vec<f64>,
    /// ρ at r_0.
    pub origin_value_series: Vec<f64>,
    pub snapshots: Vec<(f64, RadialDensity)>,
    pub concentration_flag: bool,
    /// Set when the step size underflowed; the trace ends there.
    pub aborted: Option<String>,
    pub final_state: RadialDensity,
    pub rejected_steps: usize,
}

impl EvolutionTrace {
    /// CSV with header `t,mass,free_energy,rho0`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "mass", "free_energy", "rho0"])?;
        for i in 0..self.times.len() {
            w.write_record([
                self.times[i].to_string(),
                self.mass_series[i].to_string(),
                self.free_energy_series[i].to_string(),
                self.origin_value_series[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `trace.csv` plus `snapshot_<k>.csv` profiles into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<String>> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join("trace.csv"))?)?;
        let mut names = vec!["trace.csv".to_string()];
        for (k, (_, s)) in self.snapshots.iter().enumerate() {
            let name = format!("snapshot_{k:04}.csv");
            s.write_csv(std::fs::File::create(dir.join(&name))?)?;
            names.push(name);
        }
        Ok(names)
    }

    /// Largest relative deviation of the mass from its initial value.
    pub fn mass_drift(&self) -> f64 {
        let m0 = self.mass_series[0];
        self.mass_series
            .iter()
            .map(|m| ((m - m0) / m0).abs())
            .fold(0.0, f64::max)
    }

    /// Largest single-step increase of F, relative to max(|F|, 1e−300).
    pub fn worst_energy_increase(&self) -> f64 {
        self.free_energy_series
            .windows(2)
            .map(|w| (w[1] - w[0]) / w[0].abs().max(1e-300))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Node-to-node quantities of a grid used by the finite-volume fluxes.
struct Stencil {
    weights: Vec<f64>,
    /// Area and node spacing of face k between cells k−1 and k (index 0 unused).
    area: Vec<f64>,
    spacing: Vec<f64>,
}

impl Stencil {
    fn new(g: &RadialGrid) -> Self {
        let n = g.len();
        let r = g.nodes();
        let mut area = vec![0.0; n];
        let mut spacing = vec![1.0; n];
        for k in 1..n {
            area[k] = g.face_area(k);
            spacing[k] = r[k] - r[k - 1];
        }
        Self {
            weights: g.weights().to_vec(),
            area,
            spacing,
        }
    }
}

/// Face density m(a, b) with m·Δ(q/(1−q))ρ^{q−1} = −Δρ^q, so the flux
/// −(Δρ^q + m ΔP)/h equals −m ∂(δF/δρ); with its partial derivatives.
fn face_mean(a: f64, b: f64, q: f64) -> (f64, f64, f64) {
    if !(a > 0.0 && b > 0.0) {
        return (0.0, 0.0, 0.0);
    }
    let s = a + b;
    let eps = (b - a) / s;
    if eps.abs() < 1e-3 {
        // m = ((a+b)/2)(1 + (q−2)ε²/3 + O(ε⁴))
        let m = 0.5 * s * (1.0 + (q - 2.0) * eps * eps / 3.0);
        return (m, 0.5, 0.5);
    }
    let c = (1.0 - q) / q;
    let num = b.powf(q) - a.powf(q);
    let den = a.powf(q - 1.0) - b.powf(q - 1.0);
    let m = c * num / den;
    let da = c * (-q * a.powf(q - 1.0) * den - num * (q - 1.0) * a.powf(q - 2.0)) / (den * den);
    let db = c * (q * b.powf(q - 1.0) * den + num * (q - 1.0) * b.powf(q - 2.0)) / (den * den);
    (m, da, db)
}

/// Solves a tridiagonal system in place (Thomas); `None` on a zero pivot.
fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64]) -> Option<()> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut beta = diag[0];
    if beta == 0.0 || !beta.is_finite() {
        return None;
    }
    rhs[0] /= beta;
    for i in 1..n {
        c[i - 1] = upper[i - 1] / beta;
        beta = diag[i] - lower[i] * c[i - 1];
        if beta == 0.0 || !beta.is_finite() {
            return None;
        }
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c[i] * rhs[i + 1];
    }
    rhs.iter().all(|v| v.is_finite()).then_some(())
}

struct Flow<'a> {
    drift: Drift<'a>,
    grid: Arc<RadialGrid>,
    stencil: Stencil,
    q: f64,
    lambda: f64,
    external: Vec<f64>,
}

impl Flow<'_> {
    fn potential(&self, rho: &[f64]) -> Vec<f64> {
        match self.drift {
            Drift::Interaction(t) => {
                let wr: Vec<f64> = rho.iter().zip(&self.stencil.weights).map(|(r, w)| r * w).collect();
                t.apply(&wr).into_iter().map(|c| c / self.lambda).collect()
            }
            Drift::External => self.external.clone(),
        }
    }

    /// F for the interaction drift (½∫ρP), the external one (∫ρV).
    fn energy(&self, rho: &[f64], pot: &[f64]) -> f64 {
        let half = match self.drift {
            Drift::Interaction(_) => 0.5,
            Drift::External => 1.0,
        };
        let w = &self.stencil.weights;
        let mut e = 0.0;
        let mut lq = 0.0;
        for i in 0..rho.len() {
            e += w[i] * rho[i] * pot[i];
            if rho[i] > 0.0 {
                lq += w[i] * rho[i].powf(self.q);
            }
        }
        half * e - lq / (1.0 - self.q)
    }

    /// Backward Euler step with the potential frozen at `pot`; Newton on the
    /// tridiagonal system. `None` if Newton fails or leaves the positive cone.
    fn implicit_step(&self, old: &[f64], pot: &[f64], dt: f64) -> Option<Vec<f64>> {
        let n = old.len();
        let st = &self.stencil;
        let q = self.q;
        let mut rho = old.to_vec();
        let mut lower = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut upper = vec![0.0; n];
        let mut res = vec![0.0; n];
        for _ in 0..60 {
            for i in 0..n {
                diag[i] = st.weights[i] / dt;
                res[i] = st.weights[i] * (rho[i] - old[i]) / dt;
                lower[i] = 0.0;
                upper[i] = 0.0;
            }
            for k in 1..n {
                let (a, b) = (rho[k - 1], rho[k]);
                let dp = pot[k] - pot[k - 1];
                let (m, ma, mb) = face_mean(a, b, q);
                let h = st.spacing[k];
                let flux = -(b.powf(q) - a.powf(q) + m * dp) / h;
                let ja = -(-q * a.powf(q - 1.0) + ma * dp) / h;
                let jb = -(q * b.powf(q - 1.0) + mb * dp) / h;
                let ar = st.area[k];
                // outward flux through face k leaves cell k−1 and enters cell k
                res[k - 1] += ar * flux;
                res[k] -= ar * flux;
                diag[k - 1] += ar * ja;
                upper[k - 1] += ar * jb;
                lower[k] -= ar * ja;
                diag[k] -= ar * jb;
            }
            let mut delta: Vec<f64> = res.iter().map(|r| -r).collect();
            solve_tridiagonal(&lower, &diag, &upper, &mut delta)?;
            let mut scale: f64 = 1.0;
            for i in 0..n {
                if rho[i] + delta[i] <= 0.0 {
                    scale = scale.min(0.5 * rho[i] / -delta[i]);
                }
            }
            if scale < 1e-6 {
                return None;
            }
            let mut change: f64 = 0.0;
            for i in 0..n {
                let d = scale * delta[i];
                rho[i] += d;
                change = change.max((d / rho[i]).abs());
            }
            if change < 1e-12 && scale == 1.0 {
                return Some(rho);
            }
        }
        None
    }

    fn explicit_bound(&self, rho: &[f64], pot: &[f64]) -> f64 {
        let st = &self.stencil;
        (1..rho.len())
            .map(|k| {
                let h = st.spacing[k];
                let lo = rho[k - 1].min(rho[k]).max(f64::MIN_POSITIVE);
                let d = self.q * lo.powf(self.q - 1.0);
                h * h / (2.0 * d + (pot[k] - pot[k - 1]).abs())
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn run(&self, rho0: &RadialDensity, opts: &EvolveOptions) -> Result<EvolutionTrace> {
        if !(opts.t_final > 0.0 && opts.cfl > 0.0 && opts.snapshot_every >= 0.0) {
            return Err(invalid("t_final > 0, cfl > 0 and snapshot_every >= 0 required"));
        }
        if rho0.is_zero() {
            return Err(Error::ZeroDensity);
        }
        let g = &self.grid;
        let max = rho0.max_value();
        // fast diffusion fills empty cells instantly; start them at a tiny floor
        let mut rho: Vec<f64> = rho0.values().iter().map(|v| v.max(1e-30 * max)).collect();
        let mut pot = self.potential(&rho);
        let mut energy = self.energy(&rho, &pot);
        let mass = dot(&rho, &self.stencil.weights);
        let mut trace = EvolutionTrace {
            times: vec![0.0],
            mass_series: vec![mass],
            free_energy_series: vec![energy],
            origin_value_series: vec![rho[0]],
            snapshots: Vec::new(),
            concentration_flag: false,
            aborted: None,
            final_state: rho0.clone(),
            rejected_steps: 0,
        };
        let mut t = 0.0;
        let mut dt = opts.cfl * self.explicit_bound(&rho, &pot);
        let mut next_snapshot = opts.snapshot_every;
        let mut steps = 0;
        while t < opts.t_final * (1.0 - 1e-14) && steps < opts.max_steps {
            dt = dt.min(opts.t_final - t);
            let accepted = self.implicit_step(&rho, &pot, dt).and_then(|new| {
                let new_pot = self.potential(&new);
                let new_energy = self.energy(&new, &new_pot);
                let floor = 1e-10 * max;
                let change = rho
                    .iter()
                    .zip(&new)
                    .filter(|(a, _)| **a > floor)
                    .map(|(a, b)| ((b - a) / a).abs())
                    .fold(0.0, f64::max);
                let descent = new_energy <= energy + 1e-11 * energy.abs();
                (descent && change <= 4.0 * opts.cfl).then_some((new, new_pot, new_energy, change))
            });
            match accepted {
                Some((new, new_pot, new_energy, change)) => {
                    steps += 1;
                    t += dt;
                    rho = new;
                    pot = new_pot;
                    energy = new_energy;
                    trace.times.push(t);
                    trace.mass_series.push(dot(&rho, &self.stencil.weights));
                    trace.free_energy_series.push(energy);
                    trace.origin_value_series.push(rho[0]);
                    if !trace.concentration_flag {
                        trace.concentration_flag = concentrating(&trace, &rho, &self.stencil.weights);
                    }
                    if opts.snapshot_every > 0.0 && t >= next_snapshot {
                        trace.snapshots.push((t, RadialDensity::new(g.clone(), rho.clone())?));
                        next_snapshot += opts.snapshot_every;
                    }
                    let grow = if change > 0.0 { opts.cfl / change } else { 2.0 };
                    dt *= grow.clamp(0.5, 2.0);
                }
                None => {
                    trace.rejected_steps += 1;
                    dt *= 0.5;
                    if dt < 1e-14 * opts.t_final {
                        trace.aborted = Some(Error::StepUnderflow { t, dt }.to_string());
                        break;
                    }
                }
            }
        }
        trace.final_state = RadialDensity::new(g.clone(), rho)?;
        Ok(trace)
    }
}

/// ρ(r_0) up ×10³ against one decade earlier, or more than 10% of the mass
/// in the innermost cell.
fn concentrating(trace: &EvolutionTrace, rho: &[f64], weights: &[f64]) -> bool {
    let mass = dot(rho, weights);
    if weights[0] * rho[0] > 0.1 * mass {
        return true;
    }
    let t = *trace.times.last().unwrap();
    let k = trace.times.partition_point(|&s| s <= 0.1 * t);
    let earlier = trace.origin_value_series[k.saturating_sub(1)];
    rho[0] >= 1e3 * earlier
}

fn flow_grid(rho0: &RadialDensity, p: &Params) -> Result<Arc<RadialGrid>> {
    let g = rho0.grid();
    if g.dim() != p.dim() {
        return Err(Error::DimensionMismatch {
            grid: g.dim(),
            params: p.dim(),
        });
    }
    if g.has_tail() {
        return Err(invalid("the flow needs a grid without tail closure"));
    }
    Ok(g.clone())
}

/// Evolves ρ under the interaction drift W_λ∗ρ.
pub fn evolve(rho0: &RadialDensity, p: &Params, table: &KernelTable, opts: &EvolveOptions) -> Result<EvolutionTrace> {
    check_inputs(rho0, table, p)?;
    let grid = flow_grid(rho0, p)?;
    Flow {
        drift: Drift::Interaction(table),
        stencil: Stencil::new(&grid),
        grid,
        q: p.q(),
        lambda: p.lambda(),
        external: Vec::new(),
    }
    .run(rho0, opts)
}

/// Evolves ρ under the fixed external potential V; F = ∫Vρ − lq/(1−q).
pub fn evolve_external(rho0: &RadialDensity, p: &Params, opts: &EvolveOptions) -> Result<EvolutionTrace> {
    let grid = flow_grid(rho0, p)?;
    let external = grid
        .nodes()
        .iter()
        .map(|&r| external_potential(r, p.lambda()))
        .collect();
    Flow {
        drift: Drift::External,
        stencil: Stencil::new(&grid),
        grid,
        q: p.q(),
        lambda: p.lambda(),
        external,
    }
    .run(rho0, opts)
}

/// Stationary profile for a potential and multiplier μ:
/// ((1−q)/q·(μ + P))^{−1/(1−q)}, the zero-flux state of the flow.
fn stationary_profile(pot: &[f64], mu: f64, q: f64) -> std::result::Result<Vec<f64>, (usize, f64)> {
    let c = (1.0 - q) / q;
    pot.iter()
        .enumerate()
        .map(|(i, v)| {
            let base = mu + v;
            if base > 0.0 {
                Ok((c * base).powf(-1.0 / (1.0 - q)))
            } else {
                Err((i, base))
            }
        })
        .collect()
}

/// sup over nodes of |ρ − ((1−q)/q·(μ + W_λ∗ρ))^{−1/(1−q)}|.
pub fn stationary_residual(rho: &RadialDensity, table: &KernelTable, p: &Params, mu: f64) -> Result<f64> {
    check_inputs(rho, table, p)?;
    let pot: Vec<f64> = table.convolve(rho)?.into_iter().map(|c| c / p.lambda()).collect();
    let target = stationary_profile(&pot, mu, p.q()).map_err(|(node, value)| Error::NonPositiveBase { node, value })?;
    Ok(rho
        .values()
        .iter()
        .zip(&target)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// μ minimizing Σ_i (ρ_i − stationary_i(μ))² over μ > −min P (golden section).
pub fn fit_stationary_mu(rho: &RadialDensity, table: &KernelTable, p: &Params) -> Result<f64> {
    check_inputs(rho, table, p)?;
    let q = p.q();
    let pot: Vec<f64> = table.convolve(rho)?.into_iter().map(|c| c / p.lambda()).collect();
    let c = (1.0 - q) / q;
    // pointwise multipliers ρ^{q−1}/c − P bracket the fit
    let pointwise: Vec<f64> = rho
        .values()
        .iter()
        .zip(&pot)
        .filter(|(r, _)| **r > 0.0)
        .map(|(r, v)| r.powf(q - 1.0) / c - v)
        .collect();
    if pointwise.is_empty() {
        return Err(Error::ZeroDensity);
    }
    let floor = -pot.iter().cloned().fold(f64::INFINITY, f64::min);
    let lo0 = pointwise
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
        .max(floor + 1e-300);
    let hi0 = pointwise.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(lo0);
    let cost = |mu: f64| -> f64 {
        match stationary_profile(&pot, mu, q) {
            Ok(t) => rho.values().iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum(),
            Err(_) => f64::INFINITY,
        }
    };
    let (mut a, mut b) = (lo0, hi0);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let (mut f1, mut f2) = (cost(x1), cost(x2));
    for _ in 0..200 {
        if (b - a).abs() <= 1e-15 * (a.abs() + b.abs()) {
            break;
        }
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = cost(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = cost(x2);
        }
    }
    Ok(0.5 * (a + b))
}

#[derive(Debug, Clone)]
pub struct FreeEnergyMinimum {
    pub state: RadialDensity,
    pub mu: f64,
    pub free_energy: f64,
    /// sup of |(ρ/ρ̂)^{1−q} − 1| against the stationary profile at the fitted μ.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes F at fixed mass by damped fixed-point iteration on the
/// stationary equation. Every target has the prescribed mass and the blend
/// direction is a descent direction for F, so steps are accepted when F
/// decreases. The result is a zero-flux state of the discrete flow.
pub fn minimize_free_energy(
    init: &RadialDensity,
    mass: f64,
    table: &KernelTable,
    p: &Params,
    tol: f64,
    max_iter: usize,
) -> Result<FreeEnergyMinimum> {
    check_inputs(init, table, p)?;
    if !(mass > 0.0) {
        return Err(invalid(format!("mass must be > 0, got {mass}")));
    }
    let grid = init.grid().clone();
    let flow = Flow {
        drift: Drift::Interaction(table),
        stencil: Stencil::new(&grid),
        grid: grid.clone(),
        q: p.q(),
        lambda: p.lambda(),
        external: Vec::new(),
    };
    let w = grid.weights();
    let m0 = init.mass();
    if !(m0 > 0.0) {
        return Err(Error::ZeroDensity);
    }
    let mut rho: Vec<f64> = init.values().iter().map(|v| v * mass / m0).collect();
    let q = p.q();
    let target_of = |pot: &[f64]| -> Option<(Vec<f64>, f64)> {
        // mass of the stationary profile falls from +∞ to 0 as μ grows past −min P
        let floor = -pot.iter().cloned().fold(f64::INFINITY, f64::min);
        let mass_at =
            |x: f64| -> f64 { stationary_profile(pot, floor + x.exp(), q).map_or(f64::INFINITY, |t| dot(&t, w)) };
        let scale = pot.iter().cloned().fold(0.0, |a: f64, v| a.max(v.abs())).max(1.0);
        let (mut lo, mut hi) = (scale.ln() - 60.0, scale.ln() + 5.0);
        while mass_at(hi) > mass {
            hi += 5.0;
            if hi > 700.0 {
                return None;
            }
        }
        if mass_at(lo) < mass {
            return None;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mass_at(mid) > mass {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-15 {
                break;
            }
        }
        let mu = floor + (0.5 * (lo + hi)).exp();
        let t = stationary_profile(pot, mu, q).ok()?;
        let c = mass / dot(&t, w);
        Some((t.into_iter().map(|v| v * c).collect(), mu))
    };
    let residual_of = |rho: &[f64], t: &[f64]| -> f64 {
        rho.iter()
            .zip(t)
            .map(|(a, b)| ((a / b).powf(1.0 - q) - 1.0).abs())
            .fold(0.0, f64::max)
    };
    let pot = flow.potential(&rho);
    let mut energy = flow.energy(&rho, &pot);
    let (mut target, mut mu) = target_of(&pot).ok_or(Error::NotConverged {
        best_residual: f64::INFINITY,
    })?;
    let mut residual = residual_of(&rho, &target);
    let mut beta: f64 = 0.5;
    let mut iterations = 0;
    while residual >= tol && iterations < max_iter {
        iterations += 1;
        let trial: Vec<f64> = rho
            .iter()
            .zip(&target)
            .map(|(a, b)| (1.0 - beta) * a + beta * b)
            .collect();
        let trial_pot = flow.potential(&trial);
        let trial_energy = flow.energy(&trial, &trial_pot);
        if trial_energy <= energy + 1e-15 * energy.abs() {
            let Some((t, m)) = target_of(&trial_pot) else {
                beta *= 0.5;
                continue;
            };
            rho = trial;
            energy = trial_energy;
            target = t;
            mu = m;
            residual = residual_of(&rho, &target);
            beta = (beta * 1.5).min(1.0);
        } else {
            beta *= 0.5;
            if beta < 1e-14 {
                break;
            }
        }
    }
    Ok(FreeEnergyMinimum {
        state: RadialDensity::new(grid, rho)?,
        mu,
        free_energy: energy,
        residual,
        iterations,
        converged: residual < tol,
    })
}

#[derive(Debug, Clone)]
pub struct ExternalModel {
    /// u_μ = (μ + V)^{−1/(1−q)} on the grid (cell average at a singular origin).
    pub profile: RadialDensity,
    pub mass_of_mu: f64,
    pub critical_mass: f64,
}

/// Whether (λ, q) lies in the window λ > 2, 1 − λ/N < q < 1 − 2/N.
pub fn external_window(p: &Params) -> bool {
    let n = p.dim() as f64;
    p.lambda() > 2.0 && p.q() > 1.0 - p.lambda() / n && p.q() < 1.0 - 2.0 / n
}

/// M(μ) = ∫(μ + V)^{−1/(1−q)} dx; infinite when the integral diverges.
pub fn external_mass(p: &Params, mu: f64) -> Result<f64> {
    if !(mu >= -1.0) {
        return Err(invalid(format!("mu must be >= -1, got {mu}")));
    }
    let (n, l, q) = (p.dim() as f64, p.lambda(), p.q());
    let e = 1.0 / (1.0 - q);
    if l * e <= n || (mu == -1.0 && 2.0 * e >= n) {
        return Ok(f64::INFINITY);
    }
    let sphere = crate::radial::sphere_area(p.dim());
    let f = |r: f64| {
        let base = if mu == -1.0 {
            0.5 * r * r + r.powf(l) / l
        } else {
            mu + external_potential(r, l)
        };
        r.powf(n - 1.0) * base.powf(-e)
    };
    Ok(quad::integrate_half_line(1.0, &f).map_or(f64::INFINITY, |v| sphere * v))
}

pub fn external_model(p: &Params, mu: f64, grid: Arc<RadialGrid>) -> Result<ExternalModel> {
    let mass_of_mu = external_mass(p, mu)?;
    let critical_mass = external_mass(p, -1.0)?;
    let profile = sample_profile(ProfileKind::ExternalBarenblatt(mu), p, grid)?;
    Ok(ExternalModel {
        profile,
        mass_of_mu,
        critical_mass,
    })
}

/// ∫|a − b| over nodes with r > r_cut.
pub fn l1_distance_beyond(a: &RadialDensity, b: &RadialDensity, r_cut: f64) -> Result<f64> {
    if !(Arc::ptr_eq(a.grid(), b.grid()) || **a.grid() == **b.grid()) {
        return Err(Error::GridMismatch);
    }
    let g = a.grid();
    Ok(g.nodes()
        .iter()
        .zip(g.weights())
        .zip(a.values().iter().zip(b.values()))
        .filter(|((r, _), _)| **r > r_cut)
        .map(|((_, w), (x, y))| w * (x - y).abs())
        .sum())
}
