//! Spherical averages of |x−y|^λ and the bilinear objects built on them.
//!
//! For |x| = r and |y| = s the average of |x−y|^λ over the relative angle is
//! homogeneous of degree λ, so it is written as `c^λ κ(x)` with
//! `c = max(r, s)` and `x = min(r, s)/c`. Substituting the distance
//! `t = |x−y| = c(1 + x cos θ)` for the angle turns the angular integral into
//!
//! ```text
//! κ(x) = 2^{3−N}/W_N ∫_0^π τ^{λ+1} ((τ+1)² − x²)^{(N−3)/2} sin^{N−2}θ dθ,   τ = 1 + x cos θ,
//! ```
//!
//! whose integrand stays smooth on the diagonal r = s where the original
//! angular integrand has a non-smooth endpoint.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{invalid, Error, Result};
use crate::quad::GaussLegendre;
use crate::radial::{RadialDensity, RadialGrid};

const QUAD_RTOL: f64 = 1e-11;
const QUAD_START: usize = 64;
const QUAD_MAX: usize = 4096;

/// Wallis integral W_N = ∫_0^π sin^{N−2}φ dφ (N ≥ 2).
pub fn wallis(dim: usize) -> f64 {
    let n = dim as f64;
    std::f64::consts::PI.sqrt() * gamma((n - 1.0) / 2.0) / gamma(n / 2.0)
}

/// κ(x) for N = 3: ((1+x)^{λ+2} − (1−x)^{λ+2}) / (2x(λ+2)), cancellation-free.
fn kappa_three(lambda: f64, x: f64) -> f64 {
    if x == 0.0 {
        return 1.0;
    }
    let e = lambda + 2.0;
    let up = (e * x.ln_1p()).exp_m1();
    let down = (e * (-x).ln_1p()).exp_m1();
    (up - down) / (2.0 * x * e)
}

fn kappa_one(lambda: f64, x: f64) -> f64 {
    0.5 * ((1.0 + x).powf(lambda) + (1.0 - x).powf(lambda))
}

fn kappa_rule(dim: usize, lambda: f64, x: f64, rule: &GaussLegendre) -> f64 {
    let beta_twice = dim as i32 - 3;
    let half = std::f64::consts::FRAC_PI_2;
    let mut acc = 0.0;
    for (u, w) in rule.nodes.iter().zip(&rule.weights) {
        let theta = half * (1.0 + u);
        let (s, c) = theta.sin_cos();
        let tau = 1.0 + x * c;
        let base = (tau + 1.0) * (tau + 1.0) - x * x;
        let weight_term = match beta_twice {
            -1 => 1.0 / base.sqrt(),
            0 => 1.0,
            b if b % 2 == 0 => base.powi(b / 2),
            b => base.powi(b / 2) * base.sqrt(),
        };
        acc += w * tau.powf(lambda + 1.0) * weight_term * s.powi(dim as i32 - 2);
    }
    acc * half * 2f64.powi(3 - dim as i32) / wallis(dim)
}

/// κ(x) by Gauss–Legendre in θ, doubling the node count until two successive
/// results agree to 1e−11 relative. Valid for every N ≥ 2.
pub fn kappa_quadrature(dim: usize, lambda: f64, x: f64) -> f64 {
    assert!(dim >= 2, "angular quadrature needs N >= 2");
    let mut n = QUAD_START;
    let mut prev = kappa_rule(dim, lambda, x, &GaussLegendre::get(n));
    while n < QUAD_MAX {
        n *= 2;
        let next = kappa_rule(dim, lambda, x, &GaussLegendre::get(n));
        if (next - prev).abs() <= QUAD_RTOL * next.abs() {
            return next;
        }
        prev = next;
    }
    prev
}

/// κ(x) = k_λ(1, x) for 0 ≤ x ≤ 1, closed form for N = 1, 3.
pub fn kappa(dim: usize, lambda: f64, x: f64) -> f64 {
    match dim {
        1 => kappa_one(lambda, x),
        3 => kappa_three(lambda, x),
        _ => kappa_quadrature(dim, lambda, x),
    }
}

fn split(r: f64, s: f64) -> (f64, f64) {
    let (c, h) = if r >= s { (r, s) } else { (s, r) };
    (c, h / c)
}

/// Spherical average of |x−y|^λ over directions with |x| = r, |y| = s.
pub fn angular_kernel(dim: usize, lambda: f64, r: f64, s: f64) -> Result<f64> {
    if !(r >= 0.0 && s >= 0.0) {
        return Err(invalid(format!("radii must be >= 0, got ({r}, {s})")));
    }
    if dim < 1 {
        return Err(invalid("dimension must be >= 1"));
    }
    if r == 0.0 || s == 0.0 {
        return Ok(r.max(s).powf(lambda));
    }
    let (c, x) = split(r, s);
    Ok(c.powf(lambda) * kappa(dim, lambda, x))
}

/// Same as [`angular_kernel`] but always through the θ quadrature (N ≥ 2);
/// used to cross-check the closed forms.
pub fn angular_kernel_quadrature(dim: usize, lambda: f64, r: f64, s: f64) -> f64 {
    if r == 0.0 || s == 0.0 {
        return r.max(s).powf(lambda);
    }
    let (c, x) = split(r, s);
    c.powf(lambda) * kappa_quadrature(dim, lambda, x)
}

/// Dense symmetric table K[i][j] = k_λ(r_i, r_j) on a grid.
#[derive(Debug, Clone)]
pub struct KernelTable {
    grid: Arc<RadialGrid>,
    lambda: f64,
    entries: Vec<f64>,
}

impl KernelTable {
    /// Builds the table; rows are filled in parallel and mirrored.
    pub fn build(grid: Arc<RadialGrid>, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(invalid(format!("lambda must be > 0, got {lambda}")));
        }
        let n = grid.len();
        let dim = grid.dim();
        let nodes = grid.nodes().to_vec();
        let upper: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                (i..n)
                    .map(|j| {
                        let (r, s) = (nodes[i], nodes[j]);
                        if r == 0.0 || s == 0.0 {
                            r.max(s).powf(lambda)
                        } else {
                            let (c, x) = split(r, s);
                            c.powf(lambda) * kappa(dim, lambda, x)
                        }
                    })
                    .collect()
            })
            .collect();
        let mut entries = vec![0.0; n * n];
        for (i, row) in upper.into_iter().enumerate() {
            for (off, v) in row.into_iter().enumerate() {
                let j = i + off;
                entries[i * n + j] = v;
                entries[j * n + i] = v;
            }
        }
        Ok(Self { grid, lambda, entries })
    }

    pub fn grid(&self) -> &Arc<RadialGrid> {
        &self.grid
    }

    /// Table on the grid dilated by `factor`, by homogeneity of degree λ.
    pub fn dilated(&self, factor: f64) -> Result<Self> {
        let grid = Arc::new(self.grid.dilated(factor)?);
        let s = factor.powf(self.lambda);
        Ok(Self {
            grid,
            lambda: self.lambda,
            entries: self.entries.iter().map(|v| v * s).collect(),
        })
    }

    /// The block of the table on the nodes up to r_max.
    pub fn bulk_only(&self) -> Self {
        let b = self.grid.bulk_len();
        let n = self.len();
        let mut entries = Vec::with_capacity(b * b);
        for i in 0..b {
            entries.extend_from_slice(&self.entries[i * n..i * n + b]);
        }
        Self {
            grid: Arc::new(self.grid.bulk_only()),
            lambda: self.lambda,
            entries,
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.len() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.len();
        &self.entries[i * n..(i + 1) * n]
    }

    fn check_grid(&self, rho: &RadialDensity) -> Result<()> {
        if Arc::ptr_eq(rho.grid(), &self.grid) || **rho.grid() == *self.grid {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    /// Σ_j K[i][j] v_j for every i, where `v` already carries cell weights.
    pub fn apply(&self, weighted: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .into_par_iter()
            .map(|i| crate::radial::dot(self.row(i), weighted))
            .collect()
    }

    /// ∫|x−y|^λ ρ(y) dy at every node.
    pub fn convolve(&self, rho: &RadialDensity) -> Result<Vec<f64>> {
        self.check_grid(rho)?;
        Ok(self.apply(&weighted(rho)))
    }

    /// Checks symmetry, the origin row and the triangle-inequality bounds.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.len();
        let r = self.grid.nodes();
        let l = self.lambda;
        for i in 0..n {
            for j in 0..n {
                let k = self.get(i, j);
                if k != self.get(j, i) {
                    return Err(Error::InvalidCache(format!("asymmetric at ({i}, {j})")));
                }
                let lo = (r[i] - r[j]).abs().powf(l);
                let hi = (r[i] + r[j]).powf(l);
                let slack = 1e-12 * hi;
                if !(k >= lo - slack && k <= hi + slack) {
                    return Err(Error::InvalidCache(format!(
                        "entry ({i}, {j}) = {k} outside [{lo}, {hi}]"
                    )));
                }
            }
            if r[0] == 0.0 && self.get(i, 0) != r[i].powf(l) {
                return Err(Error::InvalidCache(format!("origin row differs at {i}")));
            }
        }
        Ok(())
    }

    const MAGIC: &'static [u8; 8] = b"RHLSKT01";

    /// Binary dump: magic, N, λ, n, nodes, entries (little endian).
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(Self::MAGIC)?;
        out.write_all(&(self.grid.dim() as u64).to_le_bytes())?;
        out.write_all(&self.lambda.to_le_bytes())?;
        out.write_all(&(self.len() as u64).to_le_bytes())?;
        for r in self.grid.nodes() {
            out.write_all(&r.to_le_bytes())?;
        }
        for e in &self.entries {
            out.write_all(&e.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a dump and validates it against the expected grid and λ.
    pub fn read_from<R: Read>(mut input: R, grid: Arc<RadialGrid>, lambda: f64) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::InvalidCache("bad magic".into()));
        }
        let mut b8 = [0u8; 8];
        let mut next = |input: &mut R| -> Result<[u8; 8]> {
            input.read_exact(&mut b8)?;
            Ok(b8)
        };
        let dim = u64::from_le_bytes(next(&mut input)?) as usize;
        let lam = f64::from_le_bytes(next(&mut input)?);
        let n = u64::from_le_bytes(next(&mut input)?) as usize;
        if dim != grid.dim() || lam != lambda || n != grid.len() {
            return Err(Error::InvalidCache("header does not match (N, lambda, n)".into()));
        }
        for &r in grid.nodes() {
            if f64::from_le_bytes(next(&mut input)?) != r {
                return Err(Error::InvalidCache("grid nodes differ".into()));
            }
        }
        let mut entries = Vec::with_capacity(n * n);
        for _ in 0..n * n {
            entries.push(f64::from_le_bytes(next(&mut input)?));
        }
        let table = Self { grid, lambda, entries };
        table.check_invariants()?;
        Ok(table)
    }

    /// Cache file name keyed by (N, λ, grid hash).
    pub fn cache_path(dir: &Path, grid: &RadialGrid, lambda: f64) -> PathBuf {
        dir.join(format!(
            "kernel_N{}_l{:016x}_{}.bin",
            grid.dim(),
            lambda.to_bits(),
            grid.content_hash()
        ))
    }

    /// Loads from `dir` when a valid dump exists, otherwise builds and stores.
    pub fn load_or_build(dir: Option<&Path>, grid: Arc<RadialGrid>, lambda: f64) -> Result<Self> {
        let Some(dir) = dir else {
            return Self::build(grid, lambda);
        };
        let path = Self::cache_path(dir, &grid, lambda);
        if let Ok(f) = std::fs::File::open(&path) {
            if let Ok(t) = Self::read_from(std::io::BufReader::new(f), grid.clone(), lambda) {
                return Ok(t);
            }
        }
        let table = Self::build(grid, lambda)?;
        std::fs::create_dir_all(dir)?;
        let f = std::fs::File::create(&path)?;
        table.write_to(std::io::BufWriter::new(f))?;
        Ok(table)
    }
}

pub(crate) fn weighted(rho: &RadialDensity) -> Vec<f64> {
    rho.grid()
        .weights()
        .iter()
        .zip(rho.values())
        .map(|(w, v)| w * v)
        .collect()
}

pub fn build_table(grid: Arc<RadialGrid>, lambda: f64) -> Result<KernelTable> {
    KernelTable::build(grid, lambda)
}

/// I_λ[ρ] = Σ_{i,j} w_i w_j ρ_i ρ_j K[i][j].
pub fn interaction_energy(rho: &RadialDensity, table: &KernelTable) -> Result<f64> {
    let conv = table.convolve(rho)?;
    Ok(crate::radial::dot(&weighted(rho), &conv))
}

/// (W_λ ∗ ρ)(r_i) = (1/λ) Σ_j w_j ρ_j K[i][j].
pub fn potential(rho: &RadialDensity, table: &KernelTable) -> Result<RadialDensity> {
    let conv = table.convolve(rho)?;
    let inv = 1.0 / table.lambda();
    Ok(RadialDensity::profile(
        rho.grid().clone(),
        conv.into_iter().map(|v| v * inv).collect(),
    ))
}

/// Estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleEstimate {
    pub value: f64,
    pub std_error: f64,
}

const PRIMES: [u32; 6] = [2, 3, 5, 7, 11, 13];

fn radical_inverse(mut i: u64, base: u32) -> f64 {
    let b = base as u64;
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut out = 0.0;
    while i > 0 {
        out += (i % b) as f64 * f;
        i /= b;
        f *= inv;
    }
    out
}

/// Estimates I_λ[ρ] in Cartesian coordinates, bypassing the angular reduction.
///
/// N = 1 uses composite tensor Gauss–Legendre (error estimated from a halved
/// rule); N = 2, 3 use randomly shifted Halton points in [−R, R]^{2N} with 16
/// independent shifts drawn from `seed`.
pub fn interaction_energy_oracle(
    rho: &RadialDensity,
    dim: usize,
    lambda: f64,
    samples: usize,
    seed: u64,
) -> Result<OracleEstimate> {
    if dim > 3 || dim == 0 {
        return Err(invalid(format!("Cartesian oracle supports N <= 3, got {dim}")));
    }
    if rho.grid().dim() != dim {
        return Err(Error::DimensionMismatch {
            grid: rho.grid().dim(),
            params: dim,
        });
    }
    if rho.is_zero() {
        return Ok(OracleEstimate {
            value: 0.0,
            std_error: 0.0,
        });
    }
    let big_r = rho.grid().r_max();
    if dim == 1 {
        let panels = ((samples as f64).sqrt() / 8.0).max(4.0) as usize;
        let fine = tensor_gauss_1d(rho, lambda, big_r, panels);
        let coarse = tensor_gauss_1d(rho, lambda, big_r, panels / 2);
        return Ok(OracleEstimate {
            value: fine,
            std_error: (fine - coarse).abs(),
        });
    }
    let shifts = 16;
    let per = (samples / shifts).max(64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let volume = (2.0 * big_r).powi(2 * dim as i32);
    let estimates: Vec<f64> = (0..shifts)
        .map(|_| {
            let shift: Vec<f64> = (0..2 * dim).map(|_| rng.random::<f64>()).collect();
            let mut acc = 0.0;
            let mut x = [0.0f64; 3];
            let mut y = [0.0f64; 3];
            for k in 1..=per as u64 {
                for d in 0..2 * dim {
                    let u = (radical_inverse(k, PRIMES[d]) + shift[d]).fract();
                    let c = big_r * (2.0 * u - 1.0);
                    if d < dim {
                        x[d] = c;
                    } else {
                        y[d - dim] = c;
                    }
                }
                let rx = x[..dim].iter().map(|v| v * v).sum::<f64>().sqrt();
                let ry = y[..dim].iter().map(|v| v * v).sum::<f64>().sqrt();
                let (fx, fy) = (rho.value_at(rx), rho.value_at(ry));
                if fx == 0.0 || fy == 0.0 {
                    continue;
                }
                let d2: f64 = (0..dim).map(|d| (x[d] - y[d]).powi(2)).sum();
                acc += fx * fy * d2.powf(0.5 * lambda);
            }
            volume * acc / per as f64
        })
        .collect();
    let mean = estimates.iter().sum::<f64>() / shifts as f64;
    let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (shifts - 1) as f64;
    Ok(OracleEstimate {
        value: mean,
        std_error: (var / shifts as f64).sqrt(),
    })
}

fn tensor_gauss_1d(rho: &RadialDensity, lambda: f64, big_r: f64, panels: usize) -> f64 {
    let rule = GaussLegendre::get(8);
    let h = 2.0 * big_r / panels as f64;
    let mut pts = Vec::with_capacity(panels * 8);
    for p in 0..panels {
        let a = -big_r + p as f64 * h;
        for (u, w) in rule.nodes.iter().zip(&rule.weights) {
            let x = a + 0.5 * h * (1.0 + u);
            pts.push((x, 0.5 * h * w * rho.value_at(x.abs())));
        }
    }
    let mut acc = 0.0;
    for &(x, wx) in &pts {
        if wx == 0.0 {
            continue;
        }
        for &(y, wy) in &pts {
            acc += wx * wy * (x - y).abs().powf(lambda);
        }
    }
    acc
}
