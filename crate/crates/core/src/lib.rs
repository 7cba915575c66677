//! Numerical laboratory for reverse Hardy–Littlewood–Sobolev inequalities on
//! radial densities: kernel tables, constants, a relaxed minimizer and the
//! associated aggregation–diffusion flow.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod constants;
pub mod error;
pub mod flow;
pub mod kernel;
pub mod minimize;
pub mod params;
pub mod phase;
pub mod quad;
pub mod radial;

pub use error::{Error, Result};
pub use params::Params;
pub use radial::{RadialDensity, RadialGrid};
