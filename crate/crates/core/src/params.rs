//! The parameter triple (N, λ, q), the scaling exponent α and the regions of
//! the (λ, q) plane.

use serde::{Deserialize, Serialize};

use crate::constants;
use crate::error::{invalid, Result};

/// Relative tolerance used to decide whether a point lies on the conformal line.
pub const CONFORMAL_RTOL: f64 = 1e-12;

/// Dimension `N`, kernel exponent `λ` and diffusion exponent `q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Params {
    dim: usize,
    lambda: f64,
    q: f64,
}

impl Params {
    pub fn new(dim: usize, lambda: f64, q: f64) -> Result<Self> {
        if dim < 1 {
            return Err(invalid(format!("dimension must be >= 1, got {dim}")));
        }
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(invalid(format!("lambda must be > 0, got {lambda}")));
        }
        if !(q > 0.0 && q < 1.0) {
            return Err(invalid(format!("q must lie in (0, 1), got {q}")));
        }
        Ok(Self { dim, lambda, q })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    /// α = (2N − q(2N+λ)) / (N(1−q)), evaluated as 2 − qλ/(N(1−q)).
    pub fn alpha(&self) -> f64 {
        let n = self.dim as f64;
        2.0 - self.q * self.lambda / (n * (1.0 - self.q))
    }

    /// N/(N+λ): the inequality holds with a positive constant iff q exceeds it.
    pub fn validity_threshold(&self) -> f64 {
        validity_threshold(self.dim, self.lambda)
    }

    /// 2N/(2N+λ), the line α = 0.
    pub fn conformal_q(&self) -> f64 {
        conformal_q(self.dim, self.lambda)
    }

    pub fn is_valid(&self) -> bool {
        self.q > self.validity_threshold()
    }

    pub fn is_conformal(&self) -> bool {
        let qc = self.conformal_q();
        (self.q - qc).abs() <= CONFORMAL_RTOL * qc
    }

    /// θ = N(1−q)/(λq), the moment exponent of the interpolation inequality.
    pub fn theta(&self) -> f64 {
        self.dim as f64 * (1.0 - self.q) / (self.lambda * self.q)
    }

    /// Returns an error naming the threshold when q ≤ N/(N+λ).
    pub fn require_valid(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(invalid(format!(
                "q = {} must exceed N/(N+lambda) = {}",
                self.q,
                self.validity_threshold()
            )))
        }
    }
}

pub fn validity_threshold(dim: usize, lambda: f64) -> f64 {
    let n = dim as f64;
    n / (n + lambda)
}

pub fn conformal_q(dim: usize, lambda: f64) -> f64 {
    let n = dim as f64;
    2.0 * n / (2.0 * n + lambda)
}

/// 1 − 2/N, the fast-diffusion regularity threshold (−∞ encoded as 0 for N ≤ 2).
pub fn regularity_q(dim: usize) -> f64 {
    (1.0 - 2.0 / dim as f64).max(0.0)
}

/// λ above which the trichotomy region opens (N ≥ 3 only).
pub fn trichotomy_lambda(dim: usize) -> Option<f64> {
    (dim >= 3).then(|| 2.0 * dim as f64 / (dim as f64 - 2.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Validity {
    Invalid,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignClass {
    /// 0 < α < 1
    SubConformal,
    /// α = 0
    Conformal,
    /// α < 0
    SuperConformal,
    /// α ≥ 1
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Existence {
    /// An optimizer without Dirac mass is known to exist.
    MinimizerGuaranteed,
    /// Only the relaxed minimizer is known to exist; the threshold curve was
    /// not evaluated (see [`classify_fast`]).
    RelaxedOnly,
    /// Dirac masses are not excluded.
    OpenRegion,
    /// Inequality fails; nothing to minimize.
    NotApplicable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Regime {
    pub validity: Validity,
    pub sign_class: SignClass,
    pub existence: Existence,
}

fn sign_class(p: &Params) -> SignClass {
    if p.is_conformal() {
        return SignClass::Conformal;
    }
    let a = p.alpha();
    if !p.is_valid() || a >= 1.0 {
        SignClass::Degenerate
    } else if a > 0.0 {
        SignClass::SubConformal
    } else {
        SignClass::SuperConformal
    }
}

/// Existence without q̄: decides everything that needs no layer-cake constant.
fn existence_explicit(p: &Params) -> Option<Existence> {
    if !p.is_valid() {
        return Some(Existence::NotApplicable);
    }
    let n = p.dim();
    if n <= 2 {
        return Some(Existence::MinimizerGuaranteed);
    }
    let explicit = regularity_q(n).min(p.conformal_q());
    if p.q() >= explicit {
        return Some(Existence::MinimizerGuaranteed);
    }
    match trichotomy_lambda(n) {
        Some(lc) if p.lambda() > lc => None,
        // Below 2N/(N−2) the validity threshold already exceeds 1 − 2/N.
        _ => Some(Existence::MinimizerGuaranteed),
    }
}

/// Full classification; evaluates (and caches) q̄(λ, N) when needed.
pub fn classify(p: &Params) -> Regime {
    let existence = existence_explicit(p).unwrap_or_else(|| {
        let qbar = constants::qbar_cached(p.dim(), p.lambda());
        if p.q() > qbar.max(p.validity_threshold()) {
            Existence::MinimizerGuaranteed
        } else {
            Existence::OpenRegion
        }
    });
    regime_with(p, existence)
}

/// Classification that never evaluates q̄: points that would need it are
/// reported as [`Existence::RelaxedOnly`].
pub fn classify_fast(p: &Params) -> Regime {
    regime_with(p, existence_explicit(p).unwrap_or(Existence::RelaxedOnly))
}

fn regime_with(p: &Params, existence: Existence) -> Regime {
    Regime {
        validity: if p.is_valid() {
            Validity::Valid
        } else {
            Validity::Invalid
        },
        sign_class: sign_class(p),
        existence,
    }
}
