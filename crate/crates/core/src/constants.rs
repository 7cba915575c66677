//! Closed-form and semi-closed-form constants of the inequality.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma, ln_gamma};

use crate::error::{invalid, Result};
use crate::kernel::kappa;
use crate::params::{conformal_q, validity_threshold, Params};
use crate::quad::GaussLegendre;
use crate::radial::{sphere_area, unit_ball_volume};

/// Distance to a Gamma pole below which an evaluation is not trusted.
const POLE_GAP: f64 = 1e-8;

/// A value that may be untrustworthy, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flagged {
    pub value: f64,
    pub reliable: bool,
    pub note: Option<String>,
}

fn near_pole(x: f64) -> bool {
    x <= 0.0 && (x - x.round()).abs() < POLE_GAP
}

/// The Gamma-function expression for the sharp constant on the conformal
/// line, π^{λ/2} Γ(N/2 − λ/2)/Γ(N − λ/2) (Γ(N)/Γ(N/2))^{1−λ/N}, evaluated as
/// printed. Pole-adjacent or non-positive evaluations are flagged.
pub fn conformal_constant(dim: usize, lambda: f64) -> Result<Flagged> {
    if !(lambda > 0.0 && lambda.is_finite()) || dim == 0 {
        return Err(invalid(format!("need N >= 1 and lambda > 0, got ({dim}, {lambda})")));
    }
    let n = dim as f64;
    let args = [0.5 * n - 0.5 * lambda, n - 0.5 * lambda, n, 0.5 * n];
    if let Some(a) = args.iter().find(|&&a| near_pole(a)) {
        return Ok(Flagged {
            value: f64::NAN,
            reliable: false,
            note: Some(format!("Gamma argument {a} sits on a pole")),
        });
    }
    let value = std::f64::consts::PI.powf(0.5 * lambda) * gamma(args[0]) / gamma(args[1])
        * (gamma(n) / gamma(0.5 * n)).powf(1.0 - lambda / n);
    if !(value > 0.0 && value.is_finite()) {
        return Ok(Flagged {
            value,
            reliable: false,
            note: Some("expression is not a positive number".into()),
        });
    }
    Ok(Flagged {
        value,
        reliable: true,
        note: None,
    })
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// ∫_0^∞ r^{N−1+k} (1 + r^s)^{−e} dr = B((N+k)/s, e − (N+k)/s)/s.
fn power_profile_integral(dim: usize, k: f64, s: f64, e: f64) -> f64 {
    let a = (dim as f64 + k) / s;
    (ln_beta(a, e - a)).exp() / s
}

/// Quotient I/lq^{2/q} of the profile (1+r²)^{−(2N+λ)/2} at q = 2N/(2N+λ).
/// Closed form only for λ = 2, where I = 2·mass·moment.
pub fn conformal_trial_quotient(dim: usize, lambda: f64) -> Option<f64> {
    if lambda != 2.0 {
        return None;
    }
    let s = sphere_area(dim);
    let e = dim as f64 + 1.0;
    let mass = s * power_profile_integral(dim, 0.0, 2.0, e);
    let moment = s * power_profile_integral(dim, 2.0, 2.0, e);
    let q = conformal_q(dim, lambda);
    let lq = s * power_profile_integral(dim, 0.0, 2.0, e * q);
    Some(2.0 * mass * moment / lq.powf(2.0 / q))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InterpolationMode {
    /// Best constant the splitting argument yields, optimized over the radius.
    OptimizeR,
    /// Quotient at the equality profile (1 + r^λ)^{−1/(1−q)}.
    ExplicitOptimizer,
}

/// Constant c in mass^{1−θ} moment^θ ≥ c lq^{1/q}, θ = N(1−q)/(λq).
pub fn interpolation_constant(p: &Params, mode: InterpolationMode) -> Result<f64> {
    p.require_valid()?;
    let (n, l, q) = (p.dim() as f64, p.lambda(), p.q());
    let theta = p.theta();
    match mode {
        InterpolationMode::OptimizeR => {
            let a = n * (1.0 - q);
            let b = l * q;
            let c1 = unit_ball_volume(p.dim()).powf(1.0 - q);
            let c2 = (sphere_area(p.dim()) * (1.0 - q) / (b - a)).powf(1.0 - q);
            let k = b / (b - a) * ((b - a) / a).powf(theta) * c1.powf(1.0 - theta) * c2.powf(theta);
            Ok(k.powf(-1.0 / q))
        }
        InterpolationMode::ExplicitOptimizer => {
            let e = 1.0 / (1.0 - q);
            let s = sphere_area(p.dim());
            let mass = s * power_profile_integral(p.dim(), 0.0, l, e);
            let moment = s * power_profile_integral(p.dim(), l, l, e);
            let lq = s * power_profile_integral(p.dim(), 0.0, l, e * q);
            Ok(mass.powf(1.0 - theta) * moment.powf(theta) / lq.powf(1.0 / q))
        }
    }
}

/// Breakpoints on [a, b] ⊂ [0, 1] graded geometrically away from `a` and
/// toward 1, where κ loses smoothness.
fn graded_panels(a: f64, b: f64) -> Vec<f64> {
    let mut pts = vec![a, b];
    if a > 0.0 {
        let mut x = 2.0 * a;
        while x < b.min(0.5) {
            pts.push(x);
            x *= 2.0;
        }
    }
    for k in 1..48 {
        let x = 1.0 - 0.5f64.powi(k);
        if x > a && x < b {
            pts.push(x);
        }
    }
    pts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    pts.dedup();
    pts
}

fn integrate_graded(a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
    let rule = GaussLegendre::get(20);
    graded_panels(a, b)
        .windows(2)
        .map(|w| rule.integrate(w[0], w[1], &f))
        .sum()
}

/// Ball-pair ratio F(R, S) for fixed (N, λ), with the S-independent piece
/// G = ∫_0^1 v^{N−1}κ(v) dv precomputed.
///
/// For σ = S/R ≤ 1 the double integral over B_R × B_S reduces to
/// R^{2N+λ}|S|²/(2N+λ) · [σ^{2N+λ}G + ∫_0^σ v^{N−1}κ + σ^{2N+λ}∫_σ^1 v^{−N−λ−1}κ].
#[derive(Debug, Clone)]
pub struct BallPairs {
    dim: usize,
    lambda: f64,
    g: f64,
    /// Fixed breakpoints on [0, 1], dyadic toward both ends, with the running
    /// integrals ∫_0^{p_k} v^{N−1}κ and ∫_{p_k}^1 v^{−N−λ−1}κ.
    panels: Vec<f64>,
    inner_cum: Vec<f64>,
    outer_cum: Vec<f64>,
}

const DYADIC_DEPTH: i32 = 24;

impl BallPairs {
    pub fn new(dim: usize, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) || dim == 0 {
            return Err(invalid(format!("need N >= 1 and lambda > 0, got ({dim}, {lambda})")));
        }
        let n = dim as f64;
        let nm1 = dim as i32 - 1;
        let mut panels = vec![0.0, 1.0];
        for k in 1..=DYADIC_DEPTH {
            panels.push(0.5f64.powi(k));
        }
        for k in 2..48 {
            panels.push(1.0 - 0.5f64.powi(k));
        }
        panels.sort_by(f64::total_cmp);
        let rule = GaussLegendre::get(20);
        let mut inner_cum = vec![0.0; panels.len()];
        let mut outer_cum = vec![0.0; panels.len()];
        for k in 1..panels.len() {
            inner_cum[k] =
                inner_cum[k - 1] + rule.integrate(panels[k - 1], panels[k], |v| v.powi(nm1) * kappa(dim, lambda, v));
        }
        for k in (1..panels.len() - 1).rev() {
            outer_cum[k] = outer_cum[k + 1]
                + rule.integrate(panels[k], panels[k + 1], |v| {
                    v.powf(-n - lambda - 1.0) * kappa(dim, lambda, v)
                });
        }
        // panel 0 reaches the origin, where the outer integrand is not integrable
        outer_cum[0] = f64::NAN;
        let g = inner_cum[panels.len() - 1];
        Ok(Self {
            dim,
            lambda,
            g,
            panels,
            inner_cum,
            outer_cum,
        })
    }

    /// The two σ-dependent integrals from the running sums plus one partial
    /// panel each, or `None` when σ is below the tabulated range or the outer
    /// integral would overflow.
    fn tabulated(&self, sigma: f64) -> Option<(f64, f64)> {
        let (dim, l) = (self.dim, self.lambda);
        let n = dim as f64;
        if sigma < self.panels[1] || sigma.powf(-n - l) > 1e250 {
            return None;
        }
        let j = self.panels.partition_point(|&p| p <= sigma) - 1;
        if j + 1 == self.panels.len() {
            return Some((self.g, 0.0));
        }
        let (a, b) = (self.panels[j], self.panels[j + 1]);
        let rule = GaussLegendre::get(20);
        let nm1 = dim as i32 - 1;
        let inner = self.inner_cum[j] + rule.integrate(a, sigma, |v| v.powi(nm1) * kappa(dim, l, v));
        let outer = self.outer_cum[j + 1] + rule.integrate(sigma, b, |v| v.powf(-n - l - 1.0) * kappa(dim, l, v));
        Some((inner, outer))
    }

    /// The same integrals on panels graded toward σ.
    fn direct(&self, sigma: f64) -> (f64, f64) {
        let (dim, l) = (self.dim, self.lambda);
        let n = dim as f64;
        let nm1 = dim as i32 - 1;
        let inner = integrate_graded(0.0, sigma, |v| v.powi(nm1) * kappa(dim, l, v));
        let outer = if sigma < 1.0 {
            integrate_graded(sigma, 1.0, |v| v.powf(-n - l - 1.0) * kappa(dim, l, v))
        } else {
            0.0
        };
        (inner, outer)
    }

    fn ratio_from(&self, sigma: f64, inner: f64, outer: f64) -> f64 {
        let n = self.dim as f64;
        let l = self.lambda;
        let e = 2.0 * n + l;
        let se = sigma.powf(e);
        let num = se * self.g + inner + se * outer;
        let den = sigma.powf(n) * (1.0 + sigma.powf(l));
        n * (n + l) / e * num / den
    }

    /// F at σ = S/R ∈ (0, 1].
    fn ratio_unit(&self, sigma: f64) -> f64 {
        let (inner, outer) = self.tabulated(sigma).unwrap_or_else(|| self.direct(sigma));
        self.ratio_from(sigma, inner, outer)
    }

    /// F(R, S) for R, S > 0.
    pub fn ratio(&self, big_r: f64, big_s: f64) -> Result<f64> {
        if !(big_r > 0.0 && big_s > 0.0 && big_r.is_finite() && big_s.is_finite()) {
            return Err(invalid(format!("ball radii must be > 0, got ({big_r}, {big_s})")));
        }
        let sigma = big_r.min(big_s) / big_r.max(big_s);
        Ok(self.ratio_unit(sigma))
    }

    /// sup_s F(1, s): grid in log₁₀ s over [−6, 0] (F is symmetric under
    /// s ↔ 1/s) followed by golden-section refinement to 1e−6 in log₁₀ s.
    pub fn sup(&self) -> (f64, f64) {
        if self.lambda == 2.0 {
            return (1.0, 1.0);
        }
        let f = |t: f64| self.ratio_unit(10f64.powf(t).min(1.0));
        let steps = 60;
        let ts: Vec<f64> = (0..=steps).map(|k| -6.0 + 6.0 * k as f64 / steps as f64).collect();
        let vals: Vec<f64> = ts.iter().map(|&t| f(t)).collect();
        let (best, _) = vals.iter().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
        );
        let mut lo = ts[best.saturating_sub(1)];
        let mut hi = ts[(best + 1).min(steps)];
        let phi = 0.5 * (5f64.sqrt() - 1.0);
        let mut x1 = hi - phi * (hi - lo);
        let mut x2 = lo + phi * (hi - lo);
        let (mut f1, mut f2) = (f(x1), f(x2));
        while hi - lo > 1e-6 {
            if f1 < f2 {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + phi * (hi - lo);
                f2 = f(x2);
            } else {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - phi * (hi - lo);
                f1 = f(x1);
            }
        }
        let candidates = [(vals[best], ts[best]), (f1, x1), (f2, x2)];
        let (v, t) = candidates
            .into_iter()
            .fold((f64::NEG_INFINITY, 0.0), |a, c| if c.0 > a.0 { c } else { a });
        (v, 10f64.powf(t))
    }
}

/// F(1, s) for the ball pair B_1 × B_s.
pub fn ratio_f(dim: usize, lambda: f64, s: f64) -> Result<f64> {
    BallPairs::new(dim, lambda)?.ratio(1.0, s)
}

/// sup over ball pairs of F; exactly 1 when λ = 2.
pub fn layercake_constant(dim: usize, lambda: f64) -> Result<f64> {
    Ok(BallPairs::new(dim, lambda)?.sup().0)
}

/// (N+λ)/(2N) (2N/(N+2))^{λ/2}, a lower bound on the layer-cake constant for λ ≥ 2.
pub fn jensen_bound(dim: usize, lambda: f64) -> Result<f64> {
    if !(lambda >= 2.0 && lambda.is_finite()) {
        return Err(invalid(format!("Jensen bound needs lambda >= 2, got {lambda}")));
    }
    let n = dim as f64;
    Ok((n + lambda) / (2.0 * n) * (2.0 * n / (n + 2.0)).powf(0.5 * lambda))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QbarMode {
    LayerCake,
    /// The cruder curve 2N(1−2^{−λ})/(2N(1−2^{−λ})+λ).
    Crude,
}

fn qbar_from(dim: usize, lambda: f64, one_minus: f64) -> f64 {
    let n = dim as f64;
    2.0 * n * one_minus / (2.0 * n * one_minus + lambda)
}

/// Threshold above which Dirac masses are excluded. Returns 0 when the
/// layer-cake constant does not exceed 1.
pub fn qbar(dim: usize, lambda: f64, mode: QbarMode) -> Result<f64> {
    match mode {
        QbarMode::LayerCake => {
            let a = layercake_constant(dim, lambda)?;
            Ok(if a <= 1.0 {
                0.0
            } else {
                qbar_from(dim, lambda, 1.0 - 1.0 / a)
            })
        }
        QbarMode::Crude => {
            if !(lambda > 0.0 && lambda.is_finite()) {
                return Err(invalid(format!("lambda must be > 0, got {lambda}")));
            }
            Ok(qbar_from(dim, lambda, 1.0 - 2f64.powf(-lambda)))
        }
    }
}

/// Process-wide memo of the layer-cake threshold, keyed by (N, λ bits).
pub fn qbar_cached(dim: usize, lambda: f64) -> f64 {
    static CACHE: OnceLock<Mutex<HashMap<(usize, u64), f64>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (dim, lambda.to_bits());
    if let Some(v) = cache.lock().expect("qbar cache poisoned").get(&key) {
        return *v;
    }
    let v = qbar(dim, lambda, QbarMode::LayerCake).unwrap_or(0.0);
    cache.lock().expect("qbar cache poisoned").insert(key, v);
    v
}

/// Everything that depends on (N, λ), plus the q-dependent pieces when q is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantsReport {
    pub dim: usize,
    pub lambda: f64,
    pub q: Option<f64>,
    pub alpha: Option<f64>,
    pub conformal_q: f64,
    pub validity_threshold: f64,
    pub conformal_constant: Flagged,
    /// Quotient of the conformal trial profile, when available in closed form.
    pub conformal_trial_quotient: Option<f64>,
    pub interpolation_constant: Option<f64>,
    pub interpolation_constant_sharp: Option<f64>,
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "A_argmax_s")]
    pub a_argmax: f64,
    #[serde(rename = "B_jensen")]
    pub b_jensen: Option<f64>,
    pub qbar: f64,
    pub qbar_crude: f64,
}

impl ConstantsReport {
    pub fn compute(dim: usize, lambda: f64, q: Option<f64>) -> Result<Self> {
        let pairs = BallPairs::new(dim, lambda)?;
        let (a, a_argmax) = pairs.sup();
        let params = q.map(|q| Params::new(dim, lambda, q)).transpose()?;
        let interp = |mode| {
            params
                .as_ref()
                .filter(|p| p.is_valid())
                .map(|p| interpolation_constant(p, mode))
                .transpose()
        };
        Ok(Self {
            dim,
            lambda,
            q,
            alpha: params.map(|p| p.alpha()),
            conformal_q: conformal_q(dim, lambda),
            validity_threshold: validity_threshold(dim, lambda),
            conformal_constant: conformal_constant(dim, lambda)?,
            conformal_trial_quotient: conformal_trial_quotient(dim, lambda),
            interpolation_constant: interp(InterpolationMode::OptimizeR)?,
            interpolation_constant_sharp: interp(InterpolationMode::ExplicitOptimizer)?,
            a,
            a_argmax,
            b_jensen: jensen_bound(dim, lambda).ok(),
            qbar: if a <= 1.0 {
                0.0
            } else {
                qbar_from(dim, lambda, 1.0 - 1.0 / a)
            },
            qbar_crude: qbar(dim, lambda, QbarMode::Crude)?,
        })
    }
}
