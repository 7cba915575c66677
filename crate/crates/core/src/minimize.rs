//! Relaxed minimization of the quotient over radial non-increasing densities
//! plus an atom at the origin, by damped Picard iteration on the
//! Euler–Lagrange equation.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::{conformal_constant, interpolation_constant, InterpolationMode};
use crate::error::{invalid, Error, Result};
use crate::kernel::KernelTable;
use crate::params::{trichotomy_lambda, Params};
use crate::quad::{integrate_to_origin, GaussLegendre};
use crate::radial::{dot, profile_value, ProfileKind, RadialDensity, RadialGrid};

/// Density on the grid together with an atom of mass `atom` at the origin.
#[derive(Debug, Clone)]
pub struct RelaxedState {
    pub rho: RadialDensity,
    pub atom: f64,
}

impl RelaxedState {
    pub fn new(rho: RadialDensity, atom: f64) -> Result<Self> {
        if !(atom >= 0.0 && atom.is_finite()) {
            return Err(invalid(format!("atom mass must be >= 0, got {atom}")));
        }
        if rho.is_zero() {
            return Err(Error::ZeroDensity);
        }
        Ok(Self { rho, atom })
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            rho: self.rho.scaled(c),
            atom: self.atom * c,
        }
    }
}

/// The pieces of the relaxed quotient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuotientBreakdown {
    #[serde(rename = "I")]
    pub interaction: f64,
    pub mass: f64,
    pub lq: f64,
    pub moment: f64,
    #[serde(rename = "M")]
    pub atom: f64,
    #[serde(rename = "Q")]
    pub quotient: f64,
}

impl QuotientBreakdown {
    fn compose(interaction: f64, mass: f64, lq: f64, moment: f64, atom: f64, p: &Params) -> Self {
        let a = p.alpha();
        let quotient = (interaction + 2.0 * atom * moment) / ((mass + atom).powf(a) * lq.powf((2.0 - a) / p.q()));
        Self {
            interaction,
            mass,
            lq,
            moment,
            atom,
            quotient,
        }
    }
}

fn check_table(table: &KernelTable, p: &Params) -> Result<()> {
    if table.grid().dim() != p.dim() {
        return Err(Error::DimensionMismatch {
            grid: table.grid().dim(),
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
    Ok(())
}

/// (I + 2M·moment) / ((mass + M)^α lq^{(2−α)/q}) with its ingredients.
pub fn quotient(state: &RelaxedState, table: &KernelTable, p: &Params) -> Result<QuotientBreakdown> {
    check_table(table, p)?;
    let conv = table.convolve(&state.rho)?;
    let it = Iterate::from_parts(state.rho.values().to_vec(), state.atom, conv, table, p)?;
    Ok(it.b)
}

/// Minimizer over M ≥ 0 of (A + M)/(B + M)^α with A = I/(2·moment), B = mass.
pub fn optimal_mass_step(interaction: f64, moment: f64, mass: f64, alpha: f64) -> Result<f64> {
    if !(alpha < 1.0) {
        return Err(invalid(format!("alpha must be < 1, got {alpha}")));
    }
    if !(interaction > 0.0 && moment > 0.0 && mass > 0.0) {
        return Err(invalid("I, moment and mass must be > 0"));
    }
    let a = interaction / (2.0 * moment);
    if alpha <= 0.0 || alpha * a <= mass {
        Ok(0.0)
    } else {
        Ok((alpha * a - mass) / (1.0 - alpha))
    }
}

/// Solver-internal iterate: node values, atom, cached W-potential and integrals.
#[derive(Debug, Clone)]
struct Iterate {
    rho: Vec<f64>,
    atom: f64,
    conv: Vec<f64>,
    b: QuotientBreakdown,
}

impl Iterate {
    fn from_parts(rho: Vec<f64>, atom: f64, conv: Vec<f64>, table: &KernelTable, p: &Params) -> Result<Self> {
        let g = table.grid();
        let w = g.weights();
        let lq: f64 = rho
            .iter()
            .zip(w)
            .map(|(r, w)| if *r > 0.0 { w * r.powf(p.q()) } else { 0.0 })
            .sum();
        if !(lq > 0.0) {
            return Err(Error::ZeroDensity);
        }
        let wr: Vec<f64> = rho.iter().zip(w).map(|(r, w)| r * w).collect();
        let mass: f64 = wr.iter().sum();
        let moment: f64 = wr.iter().zip(g.nodes()).map(|(v, r)| v * r.powf(p.lambda())).sum();
        let interaction = dot(&wr, &conv);
        let b = QuotientBreakdown::compose(interaction, mass, lq, moment, atom, p);
        Ok(Self { rho, atom, conv, b })
    }

    fn normalized(mut self, p: &Params) -> Self {
        let c = 1.0 / (self.b.mass + self.b.atom);
        self.rho.iter_mut().for_each(|v| *v *= c);
        self.conv.iter_mut().for_each(|v| *v *= c);
        self.atom *= c;
        let b = self.b;
        self.b = QuotientBreakdown::compose(
            b.interaction * c * c,
            b.mass * c,
            b.lq * c.powf(p.q()),
            b.moment * c,
            self.atom,
            p,
        );
        self
    }

    fn state(&self, grid: &Arc<RadialGrid>) -> RelaxedState {
        let rho = RadialDensity::new(grid.clone(), self.rho.clone())
            .unwrap_or_else(|_| RadialDensity::profile(grid.clone(), self.rho.clone()));
        RelaxedState { rho, atom: self.atom }
    }
}

/// D(r_i) = 2(Φ_i + M r_i^λ)/(I + 2M·moment) − α/(mass + M), with Φ = |·|^λ ∗ ρ.
fn multiplier(it: &Iterate, grid: &RadialGrid, p: &Params) -> Vec<f64> {
    let b = &it.b;
    let den = b.interaction + 2.0 * b.atom * b.moment;
    let shift = p.alpha() / (b.mass + b.atom);
    grid.nodes()
        .iter()
        .zip(&it.conv)
        .map(|(r, c)| 2.0 * (c + b.atom * r.powf(p.lambda())) / den - shift)
        .collect()
}

/// Profile implied by the Euler–Lagrange equation at the current iterate:
/// ρ̂ = [D·lq/(2−α)]^{−1/(1−q)}. When D_0 is comparable to the curvature
/// term C f_1² over the origin cell (an atom is forming), the origin node takes
/// the cell average of (D_0 + C r²)^{−1/(1−q)}, which stays finite at D_0 = 0.
fn el_target(it: &Iterate, grid: &RadialGrid, p: &Params) -> Result<Vec<f64>> {
    let d = multiplier(it, grid, p);
    let e = 1.0 / (1.0 - p.q());
    let scale = it.b.lq / (2.0 - p.alpha());
    let r = grid.nodes();
    let mut out = Vec::with_capacity(d.len());
    for (i, &di) in d.iter().enumerate() {
        if i == 0 && r[0] == 0.0 {
            out.push(0.0);
            continue;
        }
        if !(di > 0.0) {
            return Err(Error::NonPositiveMultiplier { node: i, value: di });
        }
        out.push((scale * di).powf(-e));
    }
    if r[0] == 0.0 {
        let den = it.b.interaction + 2.0 * it.b.atom * it.b.moment;
        let tiny = 1e-10 * 2.0 * it.conv[0].abs().max(it.b.moment) / den;
        if d[0] < -tiny {
            return Err(Error::NonPositiveMultiplier { node: 0, value: d[0] });
        }
        let d0 = d[0].max(0.0);
        let c = (d[1] - d0) / (r[1] * r[1]);
        let f1 = grid.faces()[1];
        let n = grid.dim() as f64;
        if d0 > c * f1 * f1 {
            // regular origin: the pointwise value keeps Σ wρD = 2 − α exact
            out[0] = (scale * d0).powf(-e);
            return Ok(out);
        }
        let avg = if d0 == 0.0 {
            if c <= 0.0 || 2.0 * e >= n {
                return Err(Error::NonPositiveMultiplier { node: 0, value: d[0] });
            }
            n / (n - 2.0 * e) * (c * f1 * f1).powf(-e)
        } else {
            let dim = grid.dim() as i32;
            let c = c.max(0.0);
            n / f1.powi(dim) * integrate_to_origin(f1, &|s: f64| s.powi(dim - 1) * (d0 + c * s * s).powf(-e))
        };
        out[0] = scale.powf(-e) * avg;
    }
    Ok(out)
}

fn residual_against(rho: &[f64], target: &[f64], q: f64) -> f64 {
    let max = rho.iter().cloned().fold(0.0, f64::max);
    rho.iter()
        .zip(target)
        .filter(|(r, _)| **r > 1e-12 * max)
        .map(|(r, t)| ((r / t).powf(1.0 - q) - 1.0).abs())
        .fold(0.0, |a: f64, d| if d.is_nan() { f64::INFINITY } else { a.max(d) })
}

/// Weighted pool-adjacent-violators projection onto non-increasing sequences.
pub fn isotonic_nonincreasing(values: &[f64], weights: &[f64]) -> Vec<f64> {
    // blocks of (weighted mean, total weight, length)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        let w = w.max(f64::MIN_POSITIVE);
        blocks.push((v, w, 1));
        while blocks.len() > 1 {
            let (m2, w2, l2) = blocks[blocks.len() - 1];
            let (m1, w1, l1) = blocks[blocks.len() - 2];
            if m1 >= m2 {
                break;
            }
            blocks.truncate(blocks.len() - 2);
            blocks.push(((m1 * w1 + m2 * w2) / (w1 + w2), w1 + w2, l1 + l2));
        }
    }
    blocks
        .into_iter()
        .flat_map(|(m, _, l)| std::iter::repeat_n(m, l))
        .collect()
}

/// Node values of 2(Φ + M r^λ), the first variation of the numerator.
fn numerator_gradient(it: &Iterate, grid: &RadialGrid, p: &Params) -> Vec<f64> {
    grid.nodes()
        .iter()
        .zip(&it.conv)
        .map(|(r, c)| 2.0 * (c + it.atom * r.powf(p.lambda())))
        .collect()
}

/// N ∫_0^1 u^{N−1} (d + z u²)^{−e} du: the origin-cell average of the
/// profile when the gradient grows like d + C r² across the cell (z = C f_1²).
fn origin_cell_average(d: f64, z: f64, dim: usize, e: f64) -> f64 {
    let n = dim as f64;
    if z <= 0.0 {
        return d.powf(-e);
    }
    if d <= 0.0 {
        return if 2.0 * e < n {
            n / (n - 2.0 * e) * z.powf(-e)
        } else {
            f64::INFINITY
        };
    }
    let y = z / d;
    let rule = GaussLegendre::get(20);
    let f = |u: f64| n * u.powi(dim as i32 - 1) * (1.0 + y * u * u).powf(-e);
    let h = if y <= 1.0 {
        rule.integrate(0.0, 1.0, f)
    } else {
        // smooth below u = y^{−1/2}, power-like above: dyadic panels there
        let mut lo = y.sqrt().recip();
        let mut total = rule.integrate(0.0, lo, f);
        while lo < 1.0 {
            let hi = (2.0 * lo).min(1.0);
            total += rule.integrate(lo, hi, f);
            lo = hi;
        }
        total
    };
    d.powf(-e) * h
}

/// Profiles (E − min E + t)^{−1/(1−q)} for a gap t ≥ 0, the origin node
/// taking its cell average when it sits at r = 0.
struct Shape<'a> {
    excess: Vec<f64>,
    weights: &'a [f64],
    origin_curvature: Option<f64>,
    dim: usize,
    e: f64,
    q: f64,
}

impl Shape<'_> {
    fn values(&self, t: f64) -> Vec<f64> {
        self.excess
            .iter()
            .enumerate()
            .map(|(i, x)| match (i, self.origin_curvature) {
                (0, Some(z)) => origin_cell_average(x + t, z, self.dim, self.e),
                _ => (x + t).powf(-self.e),
            })
            .collect()
    }

    /// mass / lq^{1/q} of the unscaled shape: the mass it carries at lq = 1.
    fn mass_at_unit_lq(&self, t: f64) -> f64 {
        let (m, l) = self.integrals(t);
        if !m.is_finite() {
            return f64::INFINITY;
        }
        m / l.powf(1.0 / self.q)
    }

    fn integrals(&self, t: f64) -> (f64, f64) {
        self.values(t)
            .iter()
            .zip(self.weights)
            .fold((0.0, 0.0), |(m, l), (v, w)| (m + w * v, l + w * v.powf(self.q)))
    }
}

/// Root of a decreasing function on [a, b] with f(a) > 0 > f(b) (Illinois).
fn decreasing_root(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let (mut fa, mut fb) = (f(a), f(b));
    let mut c = b;
    for _ in 0..200 {
        c = if fa.is_finite() && fb.is_finite() {
            (a * fb - b * fa) / (fb - fa)
        } else {
            0.5 * (a + b)
        };
        let fc = f(c);
        if fc == 0.0 || (b - a).abs() < 1e-15 * (1.0 + c.abs()) {
            break;
        }
        if (fc > 0.0) == (fb > 0.0) {
            fa *= 0.5;
        } else {
            a = b;
            fa = fb;
        }
        b = c;
        fb = fc;
    }
    c
}

/// Minimizer of Σ w ρ' E + M'·E(0) over mass(ρ') + M' = 1, lq(ρ') ≥ L,
/// M' ≥ 0 (M' = 0 when not relaxed), with E = 2(Φ + M r^λ) the first
/// variation of the numerator and L the iterate's own lq. The profile has
/// the form ((E − shift)/level)^{−1/(1−q)} with shift ≤ min E = E(0). Either
/// lq = L and shift < E(0) with no atom, or shift = E(0) and the atom takes
/// the mass that the singular profile cannot carry at lq = L. Fixing mass and
/// lq removes the dilation freedom, which a cut at r_max would otherwise turn
/// into a slow drift of the profile toward the origin. Since the iterate lies
/// in the set and lq is concave, blending toward the target lowers Q to first
/// order; a fixed level L = 1 loses that once the iterate's lq exceeds 1.
#[derive(Debug, Clone)]
struct GaugeTarget {
    rho: Vec<f64>,
    atom: f64,
    level: f64,
    /// Point value at r = 0 (infinite when shift = E(0)); node 0 holds the
    /// average over its cell.
    origin_point: f64,
}

fn gauge_target(it: &Iterate, grid: &RadialGrid, p: &Params, relaxed: bool) -> Result<GaugeTarget> {
    let grad = numerator_gradient(it, grid, p);
    let lowest = grad.iter().cloned().fold(f64::INFINITY, f64::min);
    if !lowest.is_finite() {
        return Err(invalid("non-finite potential"));
    }
    let excess: Vec<f64> = grad.iter().map(|v| v - lowest).collect();
    let r = grid.nodes();
    let origin_curvature = (r[0] == 0.0).then(|| {
        let f1 = grid.faces()[1];
        (excess[1] - excess[0]) / (r[1] * r[1]) * f1 * f1
    });
    let shape = Shape {
        excess,
        weights: grid.weights(),
        origin_curvature,
        dim: grid.dim(),
        e: 1.0 / (1.0 - p.q()),
        q: p.q(),
    };
    let floor = it.b.lq;
    if !(floor > 0.0 && floor.is_finite()) {
        return Err(Error::ZeroDensity);
    }
    // the shape carries mass (mass at unit lq)·L^{1/q} at lq = L
    let cap = floor.powf(-1.0 / p.q());
    let at_zero = shape.mass_at_unit_lq(0.0);
    let (gap, atom) = if at_zero <= cap {
        (0.0, if relaxed { 1.0 - at_zero / cap } else { 0.0 })
    } else {
        // mass at unit lq falls from at_zero to |B|^{1−1/q} as the gap grows
        let spread = shape.excess.iter().cloned().fold(0.0, f64::max).max(lowest.abs());
        let mut hi = spread.max(f64::MIN_POSITIVE);
        while shape.mass_at_unit_lq(hi) >= cap {
            hi *= 4.0;
            if hi > 1e300 {
                return Err(invalid(
                    "ball volume too small to carry unit mass at unit lq; increase r_max",
                ));
            }
        }
        let mut lo = hi;
        while shape.mass_at_unit_lq(lo) <= cap {
            lo *= 1e-2;
            if lo < 1e-300 {
                break;
            }
        }
        let f = |x: f64| (shape.mass_at_unit_lq(x.exp()) / cap).ln();
        (decreasing_root(f, lo.ln(), hi.ln()).exp(), 0.0)
    };
    let values = shape.values(gap);
    let (m, l) = shape.integrals(gap);
    // with an atom the singular profile sits at lq = L; without one the
    // mass is exact and lq = L up to the root tolerance (or above if gap = 0)
    let amp = if atom > 0.0 {
        (floor / l).powf(1.0 / p.q())
    } else {
        1.0 / m
    };
    Ok(GaugeTarget {
        rho: values.iter().map(|v| v * amp).collect(),
        atom,
        level: amp.powf(1.0 - p.q()),
        origin_point: if r[0] == 0.0 {
            amp * gap.powf(-shape.e)
        } else {
            f64::NAN
        },
    })
}

fn gauge_residual(it: &Iterate, target: &GaugeTarget, q: f64) -> f64 {
    residual_against(&it.rho, &target.rho, q).max((it.atom - target.atom).abs())
}

/// The relaxed numerator I + 2M·moment.
fn objective(b: &QuotientBreakdown) -> f64 {
    b.interaction + 2.0 * b.atom * b.moment
}

/// Blend profile and atom toward the target, project onto non-increasing
/// profiles, renormalize to mass + M = 1.
fn gauge_step(it: &Iterate, target: &GaugeTarget, damping: f64, table: &KernelTable, p: &Params) -> Result<Iterate> {
    let g = table.grid();
    let blended: Vec<f64> = it
        .rho
        .iter()
        .zip(&target.rho)
        .map(|(r, t)| (1.0 - damping) * r + damping * t)
        .collect();
    let rho = isotonic_nonincreasing(&blended, g.weights());
    let wr: Vec<f64> = rho.iter().zip(g.weights()).map(|(r, w)| r * w).collect();
    let conv = table.apply(&wr);
    let atom = (1.0 - damping) * it.atom + damping * target.atom;
    Ok(Iterate::from_parts(rho, atom, conv, table, p)?.normalized(p))
}

fn iterate_of(state: &RelaxedState, table: &KernelTable, p: &Params) -> Result<Iterate> {
    Ok(Iterate::from_parts(
        state.rho.values().to_vec(),
        state.atom,
        table.convolve(&state.rho)?,
        table,
        p,
    )?
    .normalized(p))
}

/// One damped step toward the normalized Euler–Lagrange profile followed by
/// the optimal atom for the blended profile; the state is first scaled to
/// mass + M = 1.
pub fn el_fixed_point_step(
    state: &RelaxedState,
    table: &KernelTable,
    p: &Params,
    damping: f64,
) -> Result<RelaxedState> {
    p.require_valid()?;
    check_table(table, p)?;
    if !(damping > 0.0 && damping <= 1.0) {
        return Err(invalid(format!("damping must lie in (0, 1], got {damping}")));
    }
    let it = iterate_of(state, table, p)?;
    let target = gauge_target(&it, table.grid(), p, true)?;
    Ok(gauge_step(&it, &target, damping, table, p)?.state(table.grid()))
}

/// Euler–Lagrange defect with both normalization multipliers fitted: after
/// scaling to mass + M = 1, the sup over nodes with ρ > 1e−12·max ρ of
/// |(ρ/ρ̂)^{1−q} − 1|, where ρ̂ solves the equation with mass 1 − M and unit
/// lq. Zero exactly at critical points that satisfy the normalization;
/// invariant under ρ → cρ, M → cM.
pub fn el_residual(state: &RelaxedState, table: &KernelTable, p: &Params) -> Result<f64> {
    p.require_valid()?;
    check_table(table, p)?;
    let it = iterate_of(state, table, p)?;
    let target = gauge_target(&it, table.grid(), p, true)?;
    Ok(gauge_residual(&it, &target, p.q()))
}

/// The same defect with the multipliers α/(mass + M) and (2−α)/lq of the
/// untruncated problem. On a grid cut at r_max it levels off at a value set
/// by the missing tail, which makes it a truncation diagnostic.
pub fn free_el_residual(state: &RelaxedState, table: &KernelTable, p: &Params) -> Result<f64> {
    p.require_valid()?;
    check_table(table, p)?;
    let it = iterate_of(state, table, p)?;
    let target = el_target(&it, table.grid(), p)?;
    Ok(residual_against(&it.rho, &target, p.q()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinimizeOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
    /// Up to four starting profiles.
    pub restarts: usize,
    /// When false the atom is held at zero.
    pub relaxed: bool,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 20_000,
            damping: 0.5,
            restarts: 4,
            relaxed: true,
        }
    }
}

/// Grid used for a minimization run: stretched bulk on [0, r_max] plus the
/// power-tail closure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub r_max: f64,
    pub size: usize,
    /// Geometric cell ratio; `None` picks r_1 ≈ 10^-4 r_max.
    pub stretch: Option<f64>,
    /// Tail nodes beyond r_max; 0 cuts the domain there.
    pub tail_nodes: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            r_max: 10.0,
            size: 512,
            stretch: None,
            tail_nodes: crate::radial::TAIL_NODES,
        }
    }
}

impl GridSpec {
    pub fn grid(&self, p: &Params) -> Result<RadialGrid> {
        if self.size < 2 {
            return Err(invalid(format!("grid size must be >= 2, got {}", self.size)));
        }
        let stretch = self
            .stretch
            .unwrap_or_else(|| crate::radial::stretch_for_first_step(self.size, 1e-4));
        let g = RadialGrid::new(p.dim(), self.r_max, self.size, stretch)?;
        if self.tail_nodes > 0 {
            g.with_tail_for(p, self.tail_nodes)
        } else {
            Ok(g)
        }
    }

    /// Kernel table on this grid, through the on-disk cache when `cache` is set.
    pub fn table(&self, p: &Params, cache: Option<&std::path::Path>) -> Result<KernelTable> {
        KernelTable::load_or_build(cache, Arc::new(self.grid(p)?), p.lambda())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaseLabel {
    BoundedNoMass,
    UnboundedNoMass,
    PositiveMass,
    ConformalKnown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// ρ(0) implied by the EL equation when there is no atom.
    pub origin_value_prediction: Option<f64>,
    pub origin_value: f64,
    /// Slope of log ρ against log r on [r_1, 10 r_1].
    pub origin_exponent_fit: Option<f64>,
    pub origin_exponent_expected: f64,
    /// (α I − 2·moment·mass)/(2(1−α)·moment); negative means no atom.
    #[serde(rename = "M_star_prediction")]
    pub m_star_prediction: f64,
    /// (mass − (α/2) I/moment)/mass: the sign test deciding the case.
    pub sign_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub start: String,
    pub converged: bool,
    pub residual: f64,
    pub iterations: usize,
    #[serde(rename = "Q")]
    pub quotient: f64,
    pub stalled: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    /// Applicable rigorous lower bound on the constant, when one is known.
    pub lower: Option<f64>,
    pub lower_source: String,
    /// Quotients of the trial profiles evaluated on the same grid.
    pub trials: Vec<(String, f64)>,
}

#[derive(Debug, Clone)]
pub struct MinimizeResult {
    pub params: Params,
    pub state: RelaxedState,
    pub breakdown: QuotientBreakdown,
    pub c_estimate: f64,
    /// Defect with fitted normalization multipliers; the convergence test.
    pub residual: f64,
    /// Defect with the untruncated multipliers; set by the tail beyond r_max.
    pub free_residual: f64,
    /// Relative mismatch between the fitted lq multiplier and (2−α)/lq.
    pub dilation_defect: f64,
    /// Change of M (at mass + M = 1) when the atom was re-optimized for the
    /// final profile.
    pub atom_adjustment: f64,
    /// ρ(0) of the Euler–Lagrange profile at the final potential, or NaN
    /// when node 0 is not at the origin; node 0 itself stores a cell average.
    pub origin_point_value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub case: Option<CaseLabel>,
    pub diagnostics: Option<Diagnostics>,
    pub restarts: Vec<RestartSummary>,
    pub bounds: Bounds,
}

/// Serializable view of a result; the profile goes to a CSV sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimizeSummary {
    pub dim: usize,
    pub lambda: f64,
    pub q: f64,
    pub alpha: f64,
    #[serde(rename = "C_estimate")]
    pub c_estimate: f64,
    #[serde(rename = "M")]
    pub atom: f64,
    pub residual: f64,
    pub free_residual: f64,
    pub dilation_defect: f64,
    pub atom_adjustment: f64,
    pub iterations: usize,
    pub converged: bool,
    pub case: Option<CaseLabel>,
    pub breakdown: QuotientBreakdown,
    pub diagnostics: Option<Diagnostics>,
    pub restarts: Vec<RestartSummary>,
    pub bounds: Bounds,
    pub grid_size: usize,
    pub r_max: f64,
    pub profile_csv: Option<String>,
}

impl MinimizeResult {
    pub fn summary(&self, profile_csv: Option<String>) -> MinimizeSummary {
        let p = &self.params;
        MinimizeSummary {
            dim: p.dim(),
            lambda: p.lambda(),
            q: p.q(),
            alpha: p.alpha(),
            c_estimate: self.c_estimate,
            atom: self.state.atom,
            residual: self.residual,
            free_residual: self.free_residual,
            dilation_defect: self.dilation_defect,
            atom_adjustment: self.atom_adjustment,
            iterations: self.iterations,
            converged: self.converged,
            case: self.case,
            breakdown: self.breakdown,
            diagnostics: self.diagnostics.clone(),
            restarts: self.restarts.clone(),
            bounds: self.bounds.clone(),
            grid_size: self.state.rho.grid().len(),
            r_max: self.state.rho.grid().r_max(),
            profile_csv,
        }
    }

    pub fn write_json<W: Write>(&self, out: W, profile_csv: Option<String>) -> Result<()> {
        serde_json::to_writer_pretty(out, &self.summary(profile_csv))?;
        Ok(())
    }

    /// Whether the converged value respects the lower bound (relative slack 1e−3
    /// for discretization) and lies below every trial quotient.
    pub fn sandwich_holds(&self) -> bool {
        let lower_ok = self.bounds.lower.is_none_or(|l| self.c_estimate >= l * (1.0 - 1e-3));
        let upper_ok = self
            .bounds
            .trials
            .iter()
            .all(|(_, t)| self.c_estimate <= t * (1.0 + 1e-12));
        lower_ok && upper_ok
    }

    /// Largest relative spread between converged restarts.
    pub fn restart_spread(&self) -> f64 {
        let qs: Vec<f64> = self
            .restarts
            .iter()
            .filter(|r| r.converged)
            .map(|r| r.quotient)
            .collect();
        if qs.len() < 2 {
            return 0.0;
        }
        let lo = qs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = qs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (hi - lo) / lo
    }
}

struct RunOutcome {
    it: Iterate,
    target: GaugeTarget,
    residual: f64,
    iterations: usize,
    converged: bool,
    stalled: bool,
}

fn run(init: Iterate, table: &KernelTable, p: &Params, opts: &MinimizeOptions) -> Result<RunOutcome> {
    let grid = table.grid();
    let mut it = init;
    let mut target = gauge_target(&it, grid, p, opts.relaxed)?;
    let mut beta = opts.damping;
    let mut streak = 0;
    let mut residual = gauge_residual(&it, &target, p.q());
    let mut iterations = 0;
    let mut stalled = false;
    while iterations < opts.max_iter && residual >= opts.tol {
        iterations += 1;
        let current = it.b.quotient;
        let accepted = gauge_step(&it, &target, beta, table, p)
            .ok()
            .and_then(|t| gauge_target(&t, grid, p, opts.relaxed).ok().map(|tg| (t, tg)))
            .map(|(t, tg)| {
                let r = gauge_residual(&t, &tg, p.q());
                (t, tg, r)
            })
            .filter(|(t, _, _)| t.b.quotient <= current * (1.0 + 1e-14));
        match accepted {
            Some((t, tg, r)) => {
                it = t;
                target = tg;
                residual = r;
                streak += 1;
                if streak >= 5 {
                    beta = (beta * 1.2).min(1.0);
                    streak = 0;
                }
            }
            None => {
                beta *= 0.5;
                streak = 0;
                if beta < 1e-12 {
                    stalled = true;
                    break;
                }
            }
        }
    }
    Ok(RunOutcome {
        converged: residual < opts.tol,
        it,
        target,
        residual,
        iterations,
        stalled,
    })
}

/// Typical length scale for trial profiles on a grid.
fn start_scale(grid: &RadialGrid) -> f64 {
    grid.r_max() / 20.0
}

fn starting_profiles(relaxed: bool) -> Vec<(&'static str, ProfileKind, f64)> {
    let mut starts = vec![
        ("interpolation", ProfileKind::InterpolationOptimizer, 0.0),
        ("gaussian", ProfileKind::Gaussian(1.0), 0.0),
        ("ball", ProfileKind::BallIndicator(2.0), 0.0),
    ];
    if relaxed {
        starts.push(("interpolation+atom", ProfileKind::InterpolationOptimizer, 0.5));
    }
    starts
}

fn initial_iterate(rho: Vec<f64>, atom_share: f64, table: &KernelTable, p: &Params) -> Result<Iterate> {
    let g = table.grid();
    let mass = dot(&rho, g.weights());
    if !(mass > 0.0) {
        return Err(Error::ZeroDensity);
    }
    // mass share (1 − atom_share) in ρ, atom_share in the atom
    let rho: Vec<f64> = rho.iter().map(|v| v * (1.0 - atom_share) / mass).collect();
    let conv = table.apply(&rho.iter().zip(g.weights()).map(|(r, w)| r * w).collect::<Vec<_>>());
    Iterate::from_parts(rho, atom_share, conv, table, p)
}

/// Starting iterate sampled at the dilation where lq just exceeds 1 at
/// mass + M = 1, so that it lies in the constraint set of the iteration.
fn dilated_start(kind: ProfileKind, atom_share: f64, table: &KernelTable, p: &Params) -> Result<Iterate> {
    let g = table.grid();
    let power = g.dim() as f64 * (1.0 - p.q());
    let sample = |s: f64| -> Vec<f64> { g.nodes().iter().map(|&r| profile_value(kind, p, r / s)).collect() };
    let mut s = 1.0;
    for _ in 0..60 {
        let it = initial_iterate(sample(s), atom_share, table, p)?;
        let lq = it.b.lq;
        if (1.0..1.02).contains(&lq) {
            return Ok(it);
        }
        // continuum scaling lq ∝ s^{N(1−q)}, aimed slightly above 1
        s *= (1.01 / lq).powf(1.0 / power);
        if !(s.is_finite() && s > 0.0) {
            break;
        }
    }
    Err(invalid("could not place the starting profile at unit lq on this grid"))
}

/// Simple trial profiles as normalized iterates (atom re-optimized when
/// relaxed); each quotient is an upper bound on the constant.
fn trial_iterates(table: &KernelTable, p: &Params, relaxed: bool) -> Vec<(String, Iterate)> {
    let g = table.grid();
    let s = start_scale(g);
    let kinds = [
        ("interpolation x0.5", ProfileKind::InterpolationOptimizer, 0.5),
        ("interpolation x1", ProfileKind::InterpolationOptimizer, 1.0),
        ("interpolation x2", ProfileKind::InterpolationOptimizer, 2.0),
        ("gaussian x1", ProfileKind::Gaussian(1.0), 1.0),
        ("gaussian x3", ProfileKind::Gaussian(1.0), 3.0),
        ("ball x1", ProfileKind::BallIndicator(1.0), 1.0),
        ("ball x4", ProfileKind::BallIndicator(1.0), 4.0),
    ];
    kinds
        .iter()
        .filter_map(|(name, kind, f)| {
            let rho: Vec<f64> = g
                .nodes()
                .iter()
                .map(|&r| profile_value(*kind, p, r / (s * f)))
                .collect();
            let it = initial_iterate(rho.clone(), 0.0, table, p).ok()?;
            let b = it.b;
            if !relaxed {
                return Some((name.to_string(), it));
            }
            let m = optimal_mass_step(b.interaction, b.moment, b.mass, p.alpha()).ok()?;
            let it = initial_iterate(rho, m / (b.mass + m), table, p).ok()?;
            Some((name.to_string(), it))
        })
        .collect()
}

fn lower_bound(p: &Params) -> (Option<f64>, String) {
    let a = p.alpha();
    if a > 0.0 && a < 1.0 {
        match interpolation_constant(p, InterpolationMode::ExplicitOptimizer) {
            Ok(c) => (Some(c.powf(2.0 - a)), "interpolation constant c^(2-alpha)".into()),
            Err(_) => (None, "unavailable".into()),
        }
    } else if a <= 0.0 {
        match conformal_constant(p.dim(), p.lambda()) {
            Ok(f) if f.reliable => (Some(f.value), "conformal Gamma expression".into()),
            _ => (None, "conformal Gamma expression flagged unreliable".into()),
        }
    } else {
        (None, "outside validity".into())
    }
}

/// Runs the damped EL iteration from each starting profile and keeps the
/// converged run with the lowest quotient (or the best residual if none
/// converged, with `converged = false`).
pub fn minimize_relaxed(p: &Params, table: &KernelTable, opts: &MinimizeOptions) -> Result<MinimizeResult> {
    p.require_valid()?;
    check_table(table, p)?;
    if !(opts.tol > 0.0 && opts.damping > 0.0 && opts.damping <= 1.0 && opts.restarts >= 1) {
        return Err(invalid("tol > 0, damping in (0, 1] and restarts >= 1 required"));
    }
    let grid = table.grid().clone();
    let starts: Vec<_> = starting_profiles(opts.relaxed)
        .into_iter()
        .take(opts.restarts)
        .collect();
    let outcomes: Vec<(String, Result<RunOutcome>)> = starts
        .into_par_iter()
        .map(|(name, kind, atom)| {
            let out = dilated_start(kind, atom, table, p).and_then(|init| run(init, table, p, opts));
            (name.to_string(), out)
        })
        .collect();
    let trials = trial_iterates(table, p, opts.relaxed);
    let mut outcomes = outcomes;
    // The discrete quotient is not exactly dilation invariant, so a run can
    // settle at a scale slightly worse than a trial profile. Restarting from
    // the best trial cannot end above it, since no step raises the quotient.
    let best_q = outcomes
        .iter()
        .filter_map(|(_, o)| o.as_ref().ok().filter(|o| o.converged).map(|o| o.it.b.quotient))
        .fold(f64::INFINITY, f64::min);
    if let Some((name, start)) = trials.iter().min_by(|a, b| a.1.b.quotient.total_cmp(&b.1.b.quotient)) {
        if best_q.is_finite() && start.b.quotient < best_q {
            outcomes.push((format!("trial {name}"), run(start.clone(), table, p, opts)));
        }
    }
    let restarts: Vec<RestartSummary> = outcomes
        .iter()
        .map(|(name, o)| match o {
            Ok(o) => RestartSummary {
                start: name.clone(),
                converged: o.converged,
                residual: o.residual,
                iterations: o.iterations,
                quotient: o.it.b.quotient,
                stalled: o.stalled,
                error: None,
            },
            Err(e) => RestartSummary {
                start: name.clone(),
                converged: false,
                residual: f64::INFINITY,
                iterations: 0,
                quotient: f64::NAN,
                stalled: true,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let best = outcomes
        .into_iter()
        .filter_map(|(_, o)| o.ok())
        .min_by(|a, b| {
            // converged first, then lowest quotient; unconverged by residual
            match (a.converged, b.converged) {
                (true, false) => std::cmp::Ordering::Less,
                (false, true) => std::cmp::Ordering::Greater,
                (true, true) => a.it.b.quotient.total_cmp(&b.it.b.quotient),
                (false, false) => a.residual.total_cmp(&b.residual),
            }
        })
        .ok_or(Error::NotConverged {
            best_residual: f64::INFINITY,
        })?;
    let (lower, lower_source) = lower_bound(p);
    let dilation_defect = best.target.level * best.it.b.lq / ((2.0 - p.alpha()) * objective(&best.it.b)) - 1.0;
    // The optimal atom for the final profile; it differs from the iterate's
    // atom by the dilation defect and can only lower the quotient.
    let final_it = if opts.relaxed {
        let b = best.it.b;
        let atom = optimal_mass_step(b.interaction, b.moment, b.mass, p.alpha())?;
        Iterate::from_parts(best.it.rho.clone(), atom, best.it.conv.clone(), table, p)?.normalized(p)
    } else {
        best.it.clone()
    };
    let atom_adjustment = final_it.atom - best.it.atom;
    let state = final_it.state(&grid);
    let free_residual = free_el_residual(&state, table, p).unwrap_or(f64::INFINITY);
    let b = final_it.b;
    let result = MinimizeResult {
        params: *p,
        state,
        breakdown: b,
        c_estimate: b.quotient,
        residual: best.residual,
        free_residual,
        dilation_defect,
        atom_adjustment,
        origin_point_value: best.target.origin_point * final_it.b.mass / best.it.b.mass,
        iterations: best.iterations,
        converged: best.converged,
        case: None,
        diagnostics: None,
        restarts,
        bounds: Bounds {
            lower,
            lower_source,
            trials: trials.iter().map(|(n, it)| (n.clone(), it.b.quotient)).collect(),
        },
    };
    if result.converged {
        classify_dichotomy(result, table, p)
    } else {
        Ok(result)
    }
}

/// Least-squares slope of log ρ against log r over nodes in [r_1, 10 r_1].
pub fn origin_exponent(rho: &RadialDensity) -> Option<f64> {
    let r = rho.grid().nodes();
    let first = r.iter().position(|&x| x > 0.0)?;
    let r1 = r[first];
    let pts: Vec<(f64, f64)> = r
        .iter()
        .zip(rho.values())
        .skip(first)
        .take_while(|(x, _)| **x <= 10.0 * r1 * (1.0 + 1e-12))
        .filter(|(_, v)| **v > 0.0)
        .map(|(x, v)| (x.ln(), v.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// Fills the case label and the origin diagnostics of a converged result.
pub fn classify_dichotomy(mut result: MinimizeResult, table: &KernelTable, p: &Params) -> Result<MinimizeResult> {
    if !result.converged {
        return Err(Error::NotConverged {
            best_residual: result.residual,
        });
    }
    let b = quotient(&RelaxedState::new(result.state.rho.clone(), 0.0)?, table, p)?;
    let a = p.alpha();
    let (i, m, mu, lq) = (b.interaction, b.mass, b.moment, b.lq);
    let e = 1.0 / (1.0 - p.q());
    let sign_gap = (m - 0.5 * a * i / mu) / m;
    let m_star = (a * i - 2.0 * mu * m) / (2.0 * (1.0 - a) * mu);
    let bounded_prediction = {
        let den = lq * (2.0 * mu * m - a * i);
        (den > 0.0).then(|| ((2.0 - a) * i * m / den).powf(e))
    };
    let in_trichotomy = a > 0.0 && a < 1.0;
    let case = if p.is_conformal() {
        CaseLabel::ConformalKnown
    } else if !in_trichotomy || sign_gap > 1e-6 {
        CaseLabel::BoundedNoMass
    } else if sign_gap >= -1e-6 {
        CaseLabel::UnboundedNoMass
    } else {
        CaseLabel::PositiveMass
    };
    let exponent_applies = trichotomy_lambda(p.dim()).is_some_and(|l| p.lambda() > l)
        || matches!(case, CaseLabel::UnboundedNoMass | CaseLabel::PositiveMass);
    let origin_exponent_fit = match case {
        CaseLabel::UnboundedNoMass | CaseLabel::PositiveMass if exponent_applies => origin_exponent(&result.state.rho),
        _ => None,
    };
    result.case = Some(case);
    result.diagnostics = Some(Diagnostics {
        origin_value_prediction: match case {
            CaseLabel::PositiveMass => None,
            _ => bounded_prediction,
        },
        origin_value: if result.origin_point_value.is_finite() {
            result.origin_point_value
        } else {
            result.state.rho.values()[0]
        },
        origin_exponent_fit,
        origin_exponent_expected: -2.0 * e,
        m_star_prediction: m_star,
        sign_gap,
    });
    Ok(result)
}

/// Origin curvature of the potential: least-squares C in Φ(r) − Φ(0) ≈ C r²
/// over [r_1, 10 r_1], where Φ = |·|^λ ∗ ρ.
pub fn origin_curvature(rho: &RadialDensity, table: &KernelTable) -> Result<f64> {
    let conv = table.convolve(rho)?;
    let r = rho.grid().nodes();
    if r[0] != 0.0 {
        return Err(invalid("grid must start at the origin"));
    }
    let r1 = r[1];
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (k, &x) in r.iter().enumerate().skip(1) {
        if x > 10.0 * r1 * (1.0 + 1e-12) {
            break;
        }
        let x2 = x * x;
        sxy += x2 * (conv[k] - conv[0]);
        sxx += x2 * x2;
    }
    Ok(sxy / sxx)
}

/// The two candidate closed forms for that curvature: the one-dimensional
/// second derivative ½λ(λ−1)∫|y|^{λ−2}ρ and the spherical average
/// (λ/2)(1 + (λ−2)/N)∫|y|^{λ−2}ρ. They coincide for N = 1.
pub fn curvature_constants(rho: &RadialDensity, lambda: f64) -> (f64, f64) {
    let n = rho.grid().dim() as f64;
    let m = rho.moment(lambda - 2.0);
    (
        0.5 * lambda * (lambda - 1.0) * m,
        0.5 * lambda * (1.0 + (lambda - 2.0) / n) * m,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radial::sample_profile;
    use proptest::prelude::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    fn setup(dim: usize, lambda: f64, q: f64, r_max: f64, n: usize) -> (Params, KernelTable) {
        let p = Params::new(dim, lambda, q).unwrap();
        let g = Arc::new(RadialGrid::new(dim, r_max, n, 1.01).unwrap());
        (p, KernelTable::build(g, lambda).unwrap())
    }

    fn setup_closed(dim: usize, lambda: f64, q: f64, r_max: f64, n: usize) -> (Params, KernelTable) {
        let p = Params::new(dim, lambda, q).unwrap();
        let s = crate::radial::stretch_for_first_step(n, 1e-4);
        let g = RadialGrid::new(dim, r_max, n, s)
            .unwrap()
            .with_tail_for(&p, 32)
            .unwrap();
        (p, KernelTable::build(Arc::new(g), lambda).unwrap())
    }

    #[test]
    fn mass_step_examples() {
        // A = I/(2 moment) = 2, B = 1
        assert!(rel(optimal_mass_step(4.0, 1.0, 1.0, 0.75).unwrap(), 2.0) < 1e-14);
        assert_eq!(optimal_mass_step(2.0, 1.0, 1.0, 0.5).unwrap(), 0.0);
        assert_eq!(optimal_mass_step(2.0, 1.0, 0.1, -0.3).unwrap(), 0.0);
        assert!(optimal_mass_step(2.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn mass_step_matches_scan() {
        let f = |m: f64| (2.0 + m) / (1.0 + m).powf(0.75);
        let best = (0..200_000)
            .map(|k| k as f64 * 1e-4)
            .min_by(|a, b| f(*a).total_cmp(&f(*b)))
            .unwrap();
        assert!((best - 2.0).abs() < 1e-3);
    }

    #[test]
    fn isotonic_projection_pools_violators() {
        let v = isotonic_nonincreasing(&[3.0, 1.0, 2.0, 0.5], &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(v, vec![3.0, 1.5, 1.5, 0.5]);
        let v = isotonic_nonincreasing(&[1.0, 2.0], &[3.0, 1.0]);
        assert_eq!(v, vec![1.25, 1.25]);
        let mono = [5.0, 4.0, 4.0, 1.0];
        assert_eq!(isotonic_nonincreasing(&mono, &[1.0; 4]), mono.to_vec());
    }

    #[test]
    fn quotient_scalar_invariance_and_no_atom_form() {
        let (p, t) = setup(2, 3.0, 0.6, 10.0, 128);
        let rho = sample_profile(ProfileKind::Gaussian(1.5), &p, t.grid().clone()).unwrap();
        let s = RelaxedState::new(rho.clone(), 0.3).unwrap();
        let b = quotient(&s, &t, &p).unwrap();
        let b2 = quotient(&s.scaled(7.3), &t, &p).unwrap();
        assert!(rel(b2.quotient, b.quotient) < 1e-13);
        let z = quotient(&RelaxedState::new(rho, 0.0).unwrap(), &t, &p).unwrap();
        let a = p.alpha();
        assert!(
            rel(
                z.quotient,
                z.interaction / (z.mass.powf(a) * z.lq.powf((2.0 - a) / p.q()))
            ) < 1e-15
        );
        assert!(RelaxedState::new(RadialDensity::zeros(t.grid().clone()), 0.0).is_err());
    }

    #[test]
    fn residual_is_scale_free_and_detects_non_critical_profiles() {
        let (p, t) = setup(3, 4.0, 0.55, 20.0, 192);
        let rho = sample_profile(ProfileKind::InterpolationOptimizer, &p, t.grid().clone()).unwrap();
        let s = RelaxedState::new(rho, 0.0).unwrap();
        let r1 = el_residual(&s, &t, &p).unwrap();
        let r2 = el_residual(&s.scaled(11.0), &t, &p).unwrap();
        assert!((r1 - r2).abs() < 1e-12 * r1.max(1.0));
        assert!(r1 > 1e-8);
    }

    #[test]
    fn conformal_step_never_rejects() {
        let (p, t) = setup(1, 2.0, 0.5, 10.0, 128);
        let rho = sample_profile(ProfileKind::BallIndicator(1.0), &p, t.grid().clone()).unwrap();
        let mut s = RelaxedState::new(rho, 0.0).unwrap();
        for _ in 0..20 {
            s = el_fixed_point_step(&s, &t, &p, 1.0).unwrap();
            assert!(s.rho.is_monotone());
            assert_eq!(s.atom, 0.0);
        }
    }

    #[test]
    fn optimizer_profile_is_fixed_point_of_interpolation_step() {
        // With I replaced by mass·moment the quotient is m^{1−θ}μ^θ/lq^{1/q} and
        // its EL equation (1−θ)/m + θ r^λ/μ = ρ^{q−1}/lq must hold at (1 + r^λ)^{−1/(1−q)}.
        let p = Params::new(2, 3.0, 0.6).unwrap();
        let g = Arc::new(RadialGrid::new(2, 30.0, 2000, 1.003).unwrap());
        let rho = sample_profile(ProfileKind::InterpolationOptimizer, &p, g.clone()).unwrap();
        let th = p.theta();
        let (m, mu, lq) = (rho.mass(), rho.moment(3.0), rho.lq(0.6));
        let mut worst: f64 = 0.0;
        for (r, v) in g.nodes().iter().zip(rho.values()) {
            let lhs = (1.0 - th) / m + th * r.powf(3.0) / mu;
            let rhs = v.powf(p.q() - 1.0) / lq;
            worst = worst.max((lhs / rhs - 1.0).abs());
        }
        assert!(worst < 2e-3, "{worst}");
    }

    #[test]
    fn one_dimensional_minimizer_has_no_atom() {
        let (p, t) = setup_closed(1, 3.0, 0.5, 40.0, 256);
        let res = minimize_relaxed(&p, &t, &MinimizeOptions::default()).unwrap();
        assert!(res.converged, "{:?}", res.restarts);
        assert_eq!(res.state.atom, 0.0);
        assert_eq!(res.case, Some(CaseLabel::BoundedNoMass));
        assert!(res.sandwich_holds(), "{:?} {}", res.bounds, res.c_estimate);
        assert!(res.state.rho.values().iter().all(|&v| v > 0.0));
        assert!(res.restart_spread() < 1e-2);
        let d = res.diagnostics.unwrap();
        assert!(rel(d.origin_value, d.origin_value_prediction.unwrap()) < 1e-2);
    }

    #[test]
    fn atom_case_is_self_consistent() {
        let (p, t) = setup_closed(3, 10.0, 0.25, 10.0, 256);
        let res = minimize_relaxed(
            &p,
            &t,
            &MinimizeOptions {
                restarts: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(res.converged, "{:?}", res.restarts);
        assert_eq!(res.case, Some(CaseLabel::PositiveMass));
        let d = res.diagnostics.clone().unwrap();
        assert!(d.sign_gap < 0.0);
        assert!(rel(res.state.atom, d.m_star_prediction) < 1e-10);
        assert!(res.atom_adjustment.abs() < 1e-3 * res.state.atom);
        let fit = d.origin_exponent_fit.unwrap();
        assert!(rel(fit, d.origin_exponent_expected) < 5e-3, "{fit}");
        assert!(res.dilation_defect.abs() < 1e-3);
        assert!(res.sandwich_holds());
    }

    #[test]
    fn fixed_point_is_stable() {
        let (p, t) = setup_closed(1, 3.0, 0.5, 40.0, 256);
        let res = minimize_relaxed(
            &p,
            &t,
            &MinimizeOptions {
                tol: 1e-10,
                ..Default::default()
            },
        )
        .unwrap();
        let next = el_fixed_point_step(&res.state, &t, &p, 0.5).unwrap();
        let change = res
            .state
            .rho
            .values()
            .iter()
            .zip(next.rho.values())
            .map(|(a, b)| ((a - b) / a).abs())
            .fold(0.0, f64::max);
        assert!(change < 1e-9, "{change}");
    }

    #[test]
    fn curvature_constant_depends_on_dimension() {
        let p = Params::new(3, 5.0, 0.5).unwrap();
        let g = Arc::new(RadialGrid::new(3, 12.0, 400, 1.01).unwrap());
        let t = KernelTable::build(g.clone(), 5.0).unwrap();
        let rho = sample_profile(ProfileKind::Gaussian(1.0), &p, g).unwrap();
        let fit = origin_curvature(&rho, &t).unwrap();
        let (line, sphere) = curvature_constants(&rho, 5.0);
        assert!(rel(fit, sphere) < 1e-2, "{fit} vs {sphere}");
        assert!(rel(fit, line) > 0.3);
    }

    #[test]
    fn summary_json_round_trips() {
        let (p, t) = setup(1, 3.0, 0.4, 40.0, 128);
        let res = minimize_relaxed(
            &p,
            &t,
            &MinimizeOptions {
                restarts: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let s = res.summary(Some("profile.csv".into()));
        let text = serde_json::to_string(&s).unwrap();
        let back: MinimizeSummary = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        assert!(text.contains("\"C_estimate\""));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn mass_step_minimizes(a in 0.01f64..10.0, b in 0.01f64..10.0, alpha in -2.0f64..0.99) {
            let m = optimal_mass_step(2.0 * a, 1.0, b, alpha).unwrap();
            let f = |m: f64| (a + m) / (b + m).powf(alpha);
            for probe in [0.0, m * 0.9, m * 1.1 + 1e-3, m + 1.0, 10.0 * m + 5.0] {
                prop_assert!(f(m) <= f(probe) * (1.0 + 1e-12));
            }
        }

        #[test]
        fn isotonic_output_is_monotone_and_mass_preserving(v in prop::collection::vec(0.0f64..10.0, 1..40)) {
            let w: Vec<f64> = (0..v.len()).map(|i| 1.0 + i as f64).collect();
            let out = isotonic_nonincreasing(&v, &w);
            prop_assert!(out.windows(2).all(|x| x[0] >= x[1] - 1e-12));
            let s0: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
            let s1: f64 = out.iter().zip(&w).map(|(a, b)| a * b).sum();
            prop_assert!((s0 - s1).abs() < 1e-9 * s0.max(1.0));
        }
    }
}
