//! WebAssembly bindings for the browser demo in `www/`. Every operation
//! returns a JSON or SVG string; the plain functions are what the native
//! tests exercise and the `#[wasm_bindgen]` wrappers only convert errors.

use rhls::constants::ConstantsReport;
use rhls::minimize::{minimize_relaxed, GridSpec, MinimizeOptions};
use rhls::params::{classify, Params};
use rhls::phase::{self, PhaseSpec};
use serde_json::json;
use wasm_bindgen::prelude::*;

#[derive(Debug, thiserror::Error)]
pub enum WebError {
    #[error(transparent)]
    Core(#[from] rhls::Error),
    #[error("serialization failed: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Limit(String),
}

pub type Result<T> = std::result::Result<T, WebError>;

/// Largest grid the page may request; the kernel table is O(n²).
pub const MAX_GRID: usize = 256;
pub const MAX_RESOLUTION: usize = 96;

/// Constants report for (N, λ) plus the regime of (N, λ, q) when q is given.
pub fn constants_json(dim: usize, lambda: f64, q: Option<f64>) -> Result<String> {
    let report = ConstantsReport::compute(dim, lambda, q)?;
    let mut value = serde_json::to_value(&report)?;
    if let Some(q) = q {
        let (validity, sign, existence) = phase::regime_labels(&classify(&Params::new(dim, lambda, q)?));
        value["regime"] = json!({ "validity": validity, "sign_class": sign, "existence": existence });
    }
    Ok(serde_json::to_string(&value)?)
}

/// Phase diagram of a (λ, q) rectangle as an SVG document.
pub fn phase_svg(dim: usize, lambda: (f64, f64), q: (f64, f64), resolution: usize) -> Result<String> {
    if resolution > MAX_RESOLUTION {
        return Err(WebError::Limit(format!("resolution is capped at {MAX_RESOLUTION}")));
    }
    let spec = PhaseSpec::new(dim, lambda, q, resolution)?;
    let points = phase::sweep(&spec, None)?;
    let mut svg = Vec::new();
    phase::write_svg(&spec, &points, &mut svg)?;
    Ok(String::from_utf8_lossy(&svg).into_owned())
}

/// Relaxed minimization on a small grid. The summary JSON gains `r` and
/// `rho` arrays (bulk nodes only) for plotting.
pub fn minimize_json(dim: usize, lambda: f64, q: f64, grid_size: usize) -> Result<String> {
    if grid_size > MAX_GRID {
        return Err(WebError::Limit(format!("grid size is capped at {MAX_GRID}")));
    }
    let p = Params::new(dim, lambda, q)?;
    p.require_valid()?;
    let spec = GridSpec {
        size: grid_size,
        tail_nodes: 24,
        ..GridSpec::default()
    };
    let table = spec.table(&p, None)?;
    let opts = MinimizeOptions {
        restarts: 2,
        ..MinimizeOptions::default()
    };
    let result = minimize_relaxed(&p, &table, &opts)?;
    let rho = &result.state.rho;
    let r_max = rho.grid().r_max();
    let (r, v): (Vec<f64>, Vec<f64>) = rho
        .grid()
        .nodes()
        .iter()
        .zip(rho.values())
        .filter(|(r, _)| **r <= r_max)
        .map(|(r, v)| (*r, *v))
        .unzip();
    let mut value = serde_json::to_value(result.summary(None))?;
    value["r"] = json!(r);
    value["rho"] = json!(v);
    Ok(serde_json::to_string(&value)?)
}

fn js(e: WebError) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn constants(dim: usize, lambda: f64, q: Option<f64>) -> std::result::Result<String, JsError> {
    constants_json(dim, lambda, q).map_err(js)
}

#[wasm_bindgen(js_name = phaseDiagram)]
pub fn phase_diagram(
    dim: usize,
    lambda_min: f64,
    lambda_max: f64,
    q_min: f64,
    q_max: f64,
    resolution: usize,
) -> std::result::Result<String, JsError> {
    phase_svg(dim, (lambda_min, lambda_max), (q_min, q_max), resolution).map_err(js)
}

#[wasm_bindgen]
pub fn minimize(dim: usize, lambda: f64, q: f64, grid_size: usize) -> std::result::Result<String, JsError> {
    minimize_json(dim, lambda, q, grid_size).map_err(js)
}
