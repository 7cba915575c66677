//! Gauss–Legendre rules and a few one-dimensional integrators built on them.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

/// Nodes and weights of an `n`-point Gauss–Legendre rule on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    fn compute(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            // Tricomi initial guess, then Newton on P_n.
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            dp = if d != 0.0 { d } else { dp };
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    /// Cached rule; rules are immutable so they are shared across threads.
    pub fn get(n: usize) -> Arc<GaussLegendre> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<GaussLegendre>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().expect("quadrature cache poisoned");
        guard
            .entry(n)
            .or_insert_with(|| Arc::new(GaussLegendre::compute(n)))
            .clone()
    }

    /// Integrates `f` over [a, b].
    pub fn integrate(&self, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mid + half * x);
        }
        acc * half
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let nf = n as f64;
    let d = nf * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Integrates `f` over (0, `b`] on dyadic panels [b 2^-k-1, b 2^-k], which
/// handles integrable power singularities at the origin.
pub fn integrate_to_origin(b: f64, f: &impl Fn(f64) -> f64) -> f64 {
    let rule = GaussLegendre::get(20);
    let mut total = 0.0;
    let mut hi = b;
    for _ in 0..1100 {
        let lo = 0.5 * hi;
        let part = rule.integrate(lo, hi, f);
        total += part;
        if part.abs() <= 1e-17 * total.abs() && lo < 1e-12 * b {
            break;
        }
        if lo < f64::MIN_POSITIVE * 1e10 {
            break;
        }
        hi = lo;
    }
    total
}

/// Integrates `f` over [`a`, ∞) on dyadic panels [a 2^k, a 2^k+1].
/// Returns `None` when the panel contributions fail to decay.
pub fn integrate_to_infinity(a: f64, f: &impl Fn(f64) -> f64) -> Option<f64> {
    let rule = GaussLegendre::get(20);
    let mut total = 0.0;
    let mut lo = a;
    let mut small_run = 0;
    for _ in 0..1000 {
        let hi = 2.0 * lo;
        let part = rule.integrate(lo, hi, f);
        if !part.is_finite() {
            return None;
        }
        total += part;
        if part.abs() <= 1e-17 * total.abs() {
            small_run += 1;
            if small_run >= 3 {
                return Some(total);
            }
        } else {
            small_run = 0;
        }
        lo = hi;
        if !lo.is_finite() {
            break;
        }
    }
    None
}

/// Integrates over (0, ∞) with a power-law-safe split at `split`.
pub fn integrate_half_line(split: f64, f: &impl Fn(f64) -> f64) -> Option<f64> {
    let inner = integrate_to_origin(split, f);
    let outer = integrate_to_infinity(split, f)?;
    Some(inner + outer)
}
