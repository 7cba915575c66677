//! Radial grids on R^N, radial densities and their basic integrals.
//!
//! A grid stores nodes `0 = r_0 < r_1 < … < r_{n−1} = r_max` together with
//! dual cells `[f_i, f_{i+1}]` (faces at node midpoints, `f_0 = 0`,
//! `f_n = r_max`). The weight of node `i` is the exact volume of the shell
//! spanned by its cell, so the weights of any grid sum to `|B_{r_max}|`.

use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{invalid, Error, Result};
use crate::params::Params;
use crate::quad;

/// |S^{N−1}| = 2π^{N/2}/Γ(N/2); equals 2 for N = 1.
pub fn sphere_area(dim: usize) -> f64 {
    let h = dim as f64 / 2.0;
    2.0 * std::f64::consts::PI.powf(h) / gamma(h)
}

/// Default number of tail-closure nodes used by the minimizer.
pub const TAIL_NODES: usize = 48;

/// λq/(1−q) − N: ∫_{|x|>R} ρ^q decays like R^{−decay} for profiles falling
/// off like |x|^{−λ/(1−q)}.
pub fn tail_decay(p: &Params) -> f64 {
    p.lambda() * p.q() / (1.0 - p.q()) - p.dim() as f64
}

/// |B_1| = |S^{N−1}|/N.
pub fn unit_ball_volume(dim: usize) -> f64 {
    sphere_area(dim) / dim as f64
}

#[derive(Debug, Clone)]
pub struct RadialGrid {
    dim: usize,
    nodes: Vec<f64>,
    faces: Vec<f64>,
    weights: Vec<f64>,
    sphere: f64,
    /// Nodes up to and including r_max; any further nodes form a tail closure.
    bulk: usize,
}

impl PartialEq for RadialGrid {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.nodes == other.nodes && self.weights == other.weights
    }
}

/// Stretch factor `s` for which an `n`-node geometric grid has first spacing
/// `first_ratio · r_max`.
pub fn stretch_for_first_step(n: usize, first_ratio: f64) -> f64 {
    let cells = (n - 1) as f64;
    if first_ratio * cells >= 1.0 {
        return 1.0;
    }
    // (s^cells − 1)/(s − 1) = 1/first_ratio, monotone in s.
    let target = 1.0 / first_ratio;
    let g = |s: f64| ((s.ln() * cells).exp_m1()) / (s - 1.0);
    let (mut lo, mut hi) = (1.0 + 1e-12, 2.0);
    while g(hi) < target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

impl RadialGrid {
    /// Geometric-stretched grid with `n` nodes on [0, r_max]; uniform when
    /// `stretch == 1`.
    pub fn new(dim: usize, r_max: f64, n: usize, stretch: f64) -> Result<Self> {
        if n < 16 {
            return Err(invalid(format!("grid needs at least 16 nodes, got {n}")));
        }
        if !(r_max.is_finite() && r_max > 0.0) {
            return Err(invalid(format!("r_max must be > 0, got {r_max}")));
        }
        if !(stretch >= 1.0 && stretch.is_finite()) {
            return Err(invalid(format!("stretch must be >= 1, got {stretch}")));
        }
        let cells = n - 1;
        let mut steps: Vec<f64> = (0..cells).map(|k| stretch.powi(k as i32)).collect();
        let total: f64 = steps.iter().sum();
        steps.iter_mut().for_each(|h| *h *= r_max / total);
        let mut nodes = Vec::with_capacity(n);
        let mut r = 0.0;
        nodes.push(0.0);
        for h in &steps {
            r += h;
            nodes.push(r);
        }
        nodes[cells] = r_max;
        Self::from_nodes(dim, nodes)
    }

    /// The default resolution: 512 nodes with r_1 ≈ 10^-4 r_max.
    pub fn default_for(dim: usize, r_max: f64) -> Result<Self> {
        let n = 512;
        Self::new(dim, r_max, n, stretch_for_first_step(n, 1e-4))
    }

    /// Grid through the given nodes; they must start at r_0 ≥ 0 and increase.
    pub fn from_nodes(dim: usize, nodes: Vec<f64>) -> Result<Self> {
        if dim < 1 {
            return Err(invalid("dimension must be >= 1"));
        }
        if nodes.len() < 2 {
            return Err(invalid("grid needs at least two nodes"));
        }
        if !(nodes[0] >= 0.0) || nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("grid nodes must be >= 0 and strictly increasing"));
        }
        let n = nodes.len();
        let mut faces = Vec::with_capacity(n + 1);
        faces.push(0.0);
        for w in nodes.windows(2) {
            faces.push(0.5 * (w[0] + w[1]));
        }
        faces.push(nodes[n - 1]);
        let sphere = sphere_area(dim);
        let nf = dim as f64;
        let weights = faces
            .windows(2)
            .map(|f| sphere * (f[1].powi(dim as i32) - f[0].powi(dim as i32)) / nf)
            .collect();
        Ok(Self {
            dim,
            nodes,
            faces,
            weights,
            sphere,
            bulk: n,
        })
    }

    /// Appends `count` quadrature nodes on (r_max, ∞) for densities decaying
    /// like r^{−N−decay−…}: with r = r_max v^{−1/decay} the integrals of ρ^q and
    /// |x|^λρ of an exact power tail ρ ∝ r^{−λ/(1−q)} have constant
    /// integrands in v, where `decay` = λq/(1−q) − N. Gauss–Legendre nodes in
    /// v are cut where r^λ would approach overflow or r exceeds 10^12 r_max.
    /// Faces beyond r_max are node midpoints and do not bound tail cells.
    pub fn with_tail(&self, decay: f64, lambda: f64, count: usize) -> Result<Self> {
        if !(decay > 0.0 && decay.is_finite()) {
            return Err(invalid(format!("tail decay rate must be > 0, got {decay}")));
        }
        let mut out = self.bulk_only();
        if count == 0 {
            return Ok(out);
        }
        let big_r = out.r_max();
        let cap = (1e12 * big_r).min(10f64.powf(250.0 / lambda));
        if cap <= 1.01 * big_r {
            return Ok(out);
        }
        let v_min = (big_r / cap).powf(decay);
        let rule = quad::GaussLegendre::get(count);
        let (mid, half) = (0.5 * (1.0 + v_min), 0.5 * (1.0 - v_min));
        let nf = self.dim as f64;
        // ascending r means descending v
        for (x, w) in rule.nodes.iter().zip(&rule.weights).rev() {
            let v = mid + half * x;
            out.nodes.push(big_r * v.powf(-1.0 / decay));
            out.weights
                .push(out.sphere * half * w * big_r.powf(nf) / decay * v.powf(-nf / decay - 1.0));
        }
        out.faces.pop();
        for w in out.nodes[out.bulk - 1..].windows(2) {
            out.faces.push(0.5 * (w[0] + w[1]));
        }
        out.faces.push(*out.nodes.last().unwrap());
        Ok(out)
    }

    /// Tail closure matched to the decay of Euler–Lagrange profiles at `p`.
    pub fn with_tail_for(&self, p: &Params, count: usize) -> Result<Self> {
        self.with_tail(tail_decay(p), p.lambda(), count)
    }

    /// The grid without its tail closure.
    pub fn bulk_only(&self) -> Self {
        let b = self.bulk;
        let mut faces = self.faces[..b].to_vec();
        faces.push(self.nodes[b - 1]);
        Self {
            dim: self.dim,
            nodes: self.nodes[..b].to_vec(),
            faces,
            weights: self.weights[..b].to_vec(),
            sphere: self.sphere,
            bulk: b,
        }
    }

    /// The grid with every radius multiplied by `factor`.
    pub fn dilated(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(invalid(format!("dilation factor must be > 0, got {factor}")));
        }
        let vol = factor.powi(self.dim as i32);
        Ok(Self {
            dim: self.dim,
            nodes: self.nodes.iter().map(|r| r * factor).collect(),
            faces: self.faces.iter().map(|r| r * factor).collect(),
            weights: self.weights.iter().map(|w| w * vol).collect(),
            sphere: self.sphere,
            bulk: self.bulk,
        })
    }

    /// Number of nodes in [0, r_max].
    pub fn bulk_len(&self) -> usize {
        self.bulk
    }

    pub fn has_tail(&self) -> bool {
        self.bulk < self.nodes.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Cell boundaries; `faces()[i]` and `faces()[i+1]` bound node `i`.
    pub fn faces(&self) -> &[f64] {
        &self.faces
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn r_max(&self) -> f64 {
        self.nodes[self.bulk - 1]
    }

    pub fn sphere_area(&self) -> f64 {
        self.sphere
    }

    /// Area of the sphere through face `k`.
    pub fn face_area(&self, k: usize) -> f64 {
        self.sphere * self.faces[k].powi(self.dim as i32 - 1)
    }

    /// Stable content hash of (N, nodes), used to key cached kernel tables.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        for r in &self.nodes {
            h.update(r.to_le_bytes());
        }
        if self.has_tail() {
            for w in &self.weights[self.bulk..] {
                h.update(w.to_le_bytes());
            }
        }
        h.finalize().iter().take(12).map(|b| format!("{b:02x}")).collect()
    }
}

/// A nonnegative radial profile sampled at the nodes of a grid.
#[derive(Debug, Clone)]
pub struct RadialDensity {
    grid: Arc<RadialGrid>,
    values: Vec<f64>,
    monotone: bool,
}

/// The three scalar integrals entering every quotient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Integrals {
    /// ∫ρ dx
    pub mass: f64,
    /// ∫ρ^q dx
    pub lq: f64,
    /// ∫|x|^λ ρ dx
    pub moment: f64,
}

impl RadialDensity {
    /// Wraps nonnegative values; the monotone flag is derived from the data.
    pub fn new(grid: Arc<RadialGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(invalid(format!(
                "{} values for a grid of {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(invalid(format!(
                "density must be finite and >= 0 (node {i}: {})",
                values[i]
            )));
        }
        let monotone = values.windows(2).all(|w| w[0] >= w[1]);
        Ok(Self { grid, values, monotone })
    }

    /// Profile-shaped data that is not necessarily a density (potentials may
    /// be negative); the monotone flag is left unset.
    pub fn profile(grid: Arc<RadialGrid>, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.len());
        Self {
            grid,
            values,
            monotone: false,
        }
    }

    pub fn zeros(grid: Arc<RadialGrid>) -> Self {
        let n = grid.len();
        Self {
            grid,
            values: vec![0.0; n],
            monotone: true,
        }
    }

    /// Samples `f` at every node.
    pub fn from_fn(grid: Arc<RadialGrid>, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = grid.nodes().iter().map(|&r| f(r)).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &Arc<RadialGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_monotone(&self) -> bool {
        self.monotone
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v * c).collect(),
            monotone: self.monotone,
        }
    }

    /// ∫ρ dx
    pub fn mass(&self) -> f64 {
        dot(self.grid.weights(), &self.values)
    }

    /// ∫ρ^q dx
    pub fn lq(&self, q: f64) -> f64 {
        self.grid
            .weights()
            .iter()
            .zip(&self.values)
            .map(|(w, v)| if *v > 0.0 { w * v.powf(q) } else { 0.0 })
            .sum()
    }

    /// ∫|x|^s ρ dx with node-sampled |x|^s, matching the kernel discretization.
    pub fn moment(&self, s: f64) -> f64 {
        self.grid
            .weights()
            .iter()
            .zip(self.grid.nodes())
            .zip(&self.values)
            .map(|((w, r), v)| if *v > 0.0 { w * v * r.powf(s) } else { 0.0 })
            .sum()
    }

    pub fn integrals_raw(&self, lambda: f64, q: f64) -> Integrals {
        Integrals {
            mass: self.mass(),
            lq: self.lq(q),
            moment: self.moment(lambda),
        }
    }

    /// Piecewise-linear interpolant, zero beyond the last node.
    pub fn value_at(&self, r: f64) -> f64 {
        let nodes = self.grid.nodes();
        if r > *nodes.last().unwrap() {
            return 0.0;
        }
        if r <= nodes[0] {
            return self.values[0];
        }
        let k = nodes.partition_point(|&x| x <= r);
        if k >= nodes.len() {
            return *self.values.last().unwrap();
        }
        let (r0, r1) = (nodes[k - 1], nodes[k]);
        let t = (r - r0) / (r1 - r0);
        self.values[k - 1] * (1.0 - t) + self.values[k] * t
    }

    /// Mass beyond the last node extrapolated from the decay bound ρ ≤ C r^{−N/q}.
    pub fn tail_mass_estimate(&self, q: f64) -> f64 {
        let n = self.grid.dim() as f64;
        let rm = *self.grid.nodes().last().unwrap();
        let last = *self.values.last().unwrap();
        self.grid.sphere_area() * last * rm.powf(n) * q / (n * (1.0 - q))
    }

    /// Writes the `r,rho` CSV representation.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_profile_csv(out, self.grid.nodes(), &self.values)
    }

    /// Reads an `r,rho` CSV file onto a grid through its nodes.
    pub fn read_csv<R: Read>(dim: usize, input: R) -> Result<Self> {
        let (r, rho) = read_profile_csv(input)?;
        let grid = Arc::new(RadialGrid::from_nodes(dim, r)?);
        Self::new(grid, rho)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Checks the grid dimension and returns the three integrals.
pub fn integrals(rho: &RadialDensity, p: &Params) -> Result<Integrals> {
    if rho.grid().dim() != p.dim() {
        return Err(Error::DimensionMismatch {
            grid: rho.grid().dim(),
            params: p.dim(),
        });
    }
    Ok(rho.integrals_raw(p.lambda(), p.q()))
}

/// Builtin radial profiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ProfileKind {
    /// (1 + r^λ)^{−1/(1−q)}
    InterpolationOptimizer,
    /// r^{−(N+λ)} on 1 ≤ r ≤ R
    AnnulusTrial(f64),
    /// 1 on r ≤ R
    BallIndicator(f64),
    /// exp(−r²/(2s²))
    Gaussian(f64),
    /// (μ + 1 + r²/2 + r^λ/λ)^{−1/(1−q)}
    ExternalBarenblatt(f64),
}

/// Evaluates the profile at a single radius (no grid checks).
pub fn profile_value(kind: ProfileKind, p: &Params, r: f64) -> f64 {
    let (n, l, q) = (p.dim() as f64, p.lambda(), p.q());
    match kind {
        ProfileKind::InterpolationOptimizer => (1.0 + r.powf(l)).powf(-1.0 / (1.0 - q)),
        ProfileKind::AnnulusTrial(big_r) => {
            if (1.0..=big_r).contains(&r) {
                r.powf(-(n + l))
            } else {
                0.0
            }
        }
        ProfileKind::BallIndicator(big_r) => {
            if r <= big_r {
                1.0
            } else {
                0.0
            }
        }
        ProfileKind::Gaussian(s) => (-0.5 * r * r / (s * s)).exp(),
        ProfileKind::ExternalBarenblatt(mu) => (mu + 1.0 + 0.5 * r * r + r.powf(l) / l).powf(-1.0 / (1.0 - q)),
    }
}

pub fn sample_profile(kind: ProfileKind, p: &Params, grid: Arc<RadialGrid>) -> Result<RadialDensity> {
    if grid.dim() != p.dim() {
        return Err(Error::DimensionMismatch {
            grid: grid.dim(),
            params: p.dim(),
        });
    }
    match kind {
        ProfileKind::AnnulusTrial(r) if !(r > 1.0) => {
            return Err(invalid(format!("annulus trial needs R > 1, got {r}")))
        }
        ProfileKind::ExternalBarenblatt(mu) if !(mu >= -1.0) => {
            return Err(invalid(format!("external profile needs mu >= -1, got {mu}")))
        }
        ProfileKind::BallIndicator(r) | ProfileKind::Gaussian(r) if !(r > 0.0) => {
            return Err(invalid(format!("profile radius must be > 0, got {r}")))
        }
        _ => {}
    }
    let mut values: Vec<f64> = grid.nodes().iter().map(|&r| profile_value(kind, p, r)).collect();
    if !values[0].is_finite() {
        // Integrable singularity at the origin: store the cell average.
        let f1 = grid.faces()[1];
        let dim = grid.dim() as i32;
        let avg = quad::integrate_to_origin(f1, &|r: f64| r.powi(dim - 1) * profile_value(kind, p, r)) * dim as f64
            / f1.powi(dim);
        if !avg.is_finite() {
            return Err(invalid("profile is not integrable at the origin"));
        }
        values[0] = avg;
    }
    RadialDensity::new(grid, values)
}

pub fn write_profile_csv<W: Write>(out: W, r: &[f64], rho: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["r", "rho"])?;
    for (a, b) in r.iter().zip(rho) {
        w.write_record([format!("{a:e}"), format!("{b:e}")])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_profile_csv<R: Read>(input: R) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rd.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "r" || &headers[1] != "rho" {
        return Err(invalid("profile CSV must have header `r,rho`"));
    }
    let mut r = Vec::new();
    let mut rho = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| invalid(format!("not a number in profile CSV: {s:?}")))
        };
        r.push(parse(&rec[0])?);
        rho.push(parse(&rec[1])?);
    }
    Ok((r, rho))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{E, PI};

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn grid_volumes() {
        let g = RadialGrid::new(1, 1.0, 100, 1.0).unwrap();
        assert!(rel(g.weights().iter().sum(), 2.0) < 1e-14);
        let g = RadialGrid::new(3, 1.0, 200, 1.0).unwrap();
        assert!(rel(g.weights().iter().sum(), 4.0 * PI / 3.0) < 1e-12);
        let g = RadialGrid::new(2, 2.0, 64, 1.05).unwrap();
        assert!(rel(g.weights().iter().sum(), 4.0 * PI) < 1e-10);
        assert!(g.weights().iter().all(|&w| w > 0.0));
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(RadialGrid::new(2, 1.0, 15, 1.0).is_err());
        assert!(RadialGrid::new(2, 0.0, 64, 1.0).is_err());
        assert!(RadialGrid::new(2, -1.0, 64, 1.0).is_err());
        assert!(RadialGrid::from_nodes(2, vec![0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn default_grid_first_step() {
        let g = RadialGrid::default_for(3, 50.0).unwrap();
        assert_eq!(g.len(), 512);
        assert!(rel(g.nodes()[1], 50.0 * 1e-4) < 1e-6);
        assert_eq!(g.r_max(), 50.0);
    }

    #[test]
    fn sphere_areas() {
        assert!(rel(sphere_area(1), 2.0) < 1e-14);
        assert!(rel(sphere_area(2), 2.0 * PI) < 1e-14);
        assert!(rel(sphere_area(3), 4.0 * PI) < 1e-14);
        assert!(rel(sphere_area(4), 2.0 * PI * PI) < 1e-14);
    }

    #[test]
    fn ball_integrals() {
        let p = Params::new(3, 2.0, 0.7).unwrap();
        let g = Arc::new(RadialGrid::new(3, 1.0, 2000, 1.0).unwrap());
        let rho = sample_profile(ProfileKind::BallIndicator(1.0), &p, g).unwrap();
        let i = integrals(&rho, &p).unwrap();
        assert!(rel(i.mass, 4.0 * PI / 3.0) < 1e-12);
        assert!(rel(i.lq, 4.0 * PI / 3.0) < 1e-12);
        assert!(rel(i.moment, 4.0 * PI / 5.0) < 1e-5);
    }

    #[test]
    fn annulus_trial_log_integrals() {
        // N = 2, q = N/(N+λ): both integrals equal |S^1| log R.
        let p = Params::new(2, 2.0, 0.5).unwrap();
        let g = Arc::new(RadialGrid::new(2, E, 20000, 1.0).unwrap());
        let rho = sample_profile(ProfileKind::AnnulusTrial(E), &p, g).unwrap();
        let i = integrals(&rho, &p).unwrap();
        assert!(rel(i.moment, 2.0 * PI) < 1e-3, "{}", i.moment);
        assert!(rel(i.lq, 2.0 * PI) < 1e-3, "{}", i.lq);
    }

    #[test]
    fn interpolation_profile_mass_matches_quadrature() {
        let p = Params::new(1, 4.0, 0.6).unwrap();
        let f = |r: f64| (1.0 + r.powi(4)).powf(-2.5);
        // independent oracle: dyadic-panel Gauss–Legendre on (0, ∞)
        let oracle = 2.0 * quad::integrate_half_line(1.0, &f).unwrap();
        let g = Arc::new(RadialGrid::new(1, 60.0, 20000, 1.0).unwrap());
        let rho = sample_profile(ProfileKind::InterpolationOptimizer, &p, g).unwrap();
        assert!(rel(rho.mass(), oracle) < 1e-6, "{} vs {}", rho.mass(), oracle);
    }

    #[test]
    fn sample_profile_values() {
        let p = Params::new(3, 4.0, 0.5).unwrap();
        let g = Arc::new(RadialGrid::new(3, 2.0, 64, 1.0).unwrap());
        let lf = sample_profile(ProfileKind::InterpolationOptimizer, &p, g.clone()).unwrap();
        assert_eq!(lf.values()[0], 1.0);
        let eb = sample_profile(ProfileKind::ExternalBarenblatt(0.0), &p, g.clone()).unwrap();
        assert_eq!(eb.values()[0], 1.0);
        let p1 = Params::new(1, 1.0, 0.5).unwrap();
        let g1 = Arc::new(RadialGrid::from_nodes(1, vec![0.0, 0.5, 1.5]).unwrap());
        let b = sample_profile(ProfileKind::BallIndicator(1.0), &p1, g1).unwrap();
        assert_eq!(b.values(), &[1.0, 1.0, 0.0]);
        assert!(sample_profile(ProfileKind::AnnulusTrial(1.0), &p, g.clone()).is_err());
        assert!(sample_profile(ProfileKind::ExternalBarenblatt(-1.5), &p, g).is_err());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = Params::new(3, 4.0, 0.5).unwrap();
        let g = Arc::new(RadialGrid::new(2, 2.0, 64, 1.0).unwrap());
        let rho = RadialDensity::zeros(g);
        assert!(matches!(integrals(&rho, &p), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn homogeneity_of_integrals() {
        let p = Params::new(3, 2.5, 0.6).unwrap();
        let g = Arc::new(RadialGrid::new(3, 10.0, 256, 1.01).unwrap());
        let rho = sample_profile(ProfileKind::InterpolationOptimizer, &p, g).unwrap();
        let a = integrals(&rho, &p).unwrap();
        let c = 3.7;
        let b = integrals(&rho.scaled(c), &p).unwrap();
        assert!(rel(b.mass, c * a.mass) < 1e-14);
        assert!(rel(b.moment, c * a.moment) < 1e-14);
        assert!(rel(b.lq, c.powf(0.6) * a.lq) < 1e-14);
    }

    #[test]
    fn dilation_covariance() {
        // ρ_τ(x) = τ^N ρ(τx): mass fixed, moment × τ^−λ, lq × τ^{−N(1−q)}
        let p = Params::new(2, 3.0, 0.7).unwrap();
        let g = Arc::new(RadialGrid::new(2, 400.0, 4000, 1.002).unwrap());
        let rho = sample_profile(ProfileKind::InterpolationOptimizer, &p, g.clone()).unwrap();
        let tau: f64 = 1.6;
        let dil = RadialDensity::from_fn(g, |r| {
            tau.powi(2) * profile_value(ProfileKind::InterpolationOptimizer, &p, tau * r)
        })
        .unwrap();
        let a = integrals(&rho, &p).unwrap();
        let b = integrals(&dil, &p).unwrap();
        assert!(rel(b.mass, a.mass) < 1e-4);
        assert!(rel(b.moment, a.moment * tau.powf(-3.0)) < 1e-4);
        assert!(rel(b.lq, a.lq * tau.powf(-2.0 * 0.3)) < 1e-4);
    }

    #[test]
    fn refinement_is_second_order() {
        let p = Params::new(3, 2.0, 0.5).unwrap();
        let exact = {
            // ∫ exp(−r²/2) d^3x = (2π)^{3/2}, minus the negligible tail beyond 12
            (2.0 * PI).powf(1.5)
        };
        let err = |n: usize| {
            let g = Arc::new(RadialGrid::new(3, 12.0, n, 1.0).unwrap());
            let rho = sample_profile(ProfileKind::Gaussian(1.0), &p, g).unwrap();
            (rho.mass() - exact).abs()
        };
        let (e1, e2) = (err(100), err(200));
        let order = (e1 / e2).log2();
        assert!((1.7..2.3).contains(&order), "observed order {order}");
    }

    #[test]
    fn csv_round_trip_and_scientific_input() {
        let p = Params::new(2, 2.0, 0.7).unwrap();
        let g = Arc::new(RadialGrid::new(2, 5.0, 32, 1.1).unwrap());
        let rho = sample_profile(ProfileKind::Gaussian(0.7), &p, g).unwrap();
        let mut buf = Vec::new();
        rho.write_csv(&mut buf).unwrap();
        let back = RadialDensity::read_csv(2, buf.as_slice()).unwrap();
        assert_eq!(back.values(), rho.values());
        assert_eq!(back.grid().nodes(), rho.grid().nodes());

        let text = "r,rho\n0,1E0\n5e-1,2.5e-1\n1.0,0.0\n";
        let (r, v) = read_profile_csv(text.as_bytes()).unwrap();
        assert_eq!(r, vec![0.0, 0.5, 1.0]);
        assert_eq!(v, vec![1.0, 0.25, 0.0]);
        assert!(read_profile_csv("x,y\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn tail_mass_estimate_of_power_law() {
        // ρ = r^{−N/q} beyond r_max: tail mass = |S| r_max^{N−N/q} q/(N(1−q)).
        let q = 0.5;
        let g = Arc::new(RadialGrid::new(3, 10.0, 64, 1.0).unwrap());
        let rho = RadialDensity::from_fn(g, |r| if r > 0.0 { r.powf(-6.0) } else { 1.0 }).unwrap();
        let expected = 4.0 * PI * 10f64.powf(-3.0) * q / (3.0 * (1.0 - q));
        assert!(rel(rho.tail_mass_estimate(q), expected) < 1e-12);
    }

    #[test]
    fn tail_closure_integrates_power_tails() {
        // ρ = (1 + r²)^{−β/2}, β = λ/(1−q): mass, lq and moment over R^N
        let (dim, lambda, q) = (4, 12.0, 0.3);
        let beta: f64 = lambda / (1.0 - q);
        let decay = lambda * q / (1.0 - q) - dim as f64;
        let bulk = RadialGrid::default_for(dim, 10.0).unwrap();
        let g = Arc::new(bulk.with_tail(decay, lambda, 48).unwrap());
        assert_eq!(g.r_max(), 10.0);
        assert_eq!(g.bulk_len(), 512);
        assert!(g.has_tail());
        assert_eq!(g.bulk_only(), bulk);
        let rho = RadialDensity::from_fn(g.clone(), |r| (1.0 + r * r).powf(-beta / 2.0)).unwrap();
        let exact = |power: f64, s: f64| {
            crate::quad::integrate_half_line(1.0, &|r: f64| {
                sphere_area(dim) * r.powf(dim as f64 - 1.0 + s) * (1.0 + r * r).powf(-power * beta / 2.0)
            })
            .unwrap()
        };
        let closed = rho.lq(q);
        let cut = RadialDensity::from_fn(Arc::new(bulk), |r| (1.0 + r * r).powf(-beta / 2.0)).unwrap();
        let lq = exact(q, 0.0);
        assert!(rel(closed, lq) < 2e-4, "{closed} vs {lq}");
        assert!(rel(cut.lq(q), lq) > 1e-3);
        assert!(rel(rho.moment(lambda), exact(1.0, lambda)) < 2e-4);
        assert!(rel(rho.mass(), exact(1.0, 0.0)) < 2e-4);
    }
}
