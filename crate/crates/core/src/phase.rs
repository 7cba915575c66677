//! (λ, q) phase diagrams at fixed dimension: regimes, boundary curves and,
//! optionally, a minimization per cell. CSV is the primary artifact; the SVG
//! is a plain rendering of the same rows.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::{qbar, qbar_cached, QbarMode};
use crate::error::{invalid, Result};
use crate::minimize::{minimize_relaxed, CaseLabel, GridSpec, MinimizeOptions};
use crate::params::{classify, conformal_q, validity_threshold, Existence, Params, Regime};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub dim: usize,
    pub lambda_range: (f64, f64),
    pub q_range: (f64, f64),
    /// Samples per axis, endpoints included.
    pub resolution: usize,
    /// Minimize in every valid cell (slow).
    pub minimize: Option<(GridSpec, MinimizeOptions)>,
}

impl PhaseSpec {
    pub fn new(dim: usize, lambda_range: (f64, f64), q_range: (f64, f64), resolution: usize) -> Result<Self> {
        let (l0, l1) = lambda_range;
        let (q0, q1) = q_range;
        if dim < 1 {
            return Err(invalid("dimension must be >= 1"));
        }
        if !(l0 > 0.0 && l1 > l0 && l1.is_finite()) {
            return Err(invalid(format!(
                "lambda range must satisfy 0 < lo < hi, got {l0}..{l1}"
            )));
        }
        if !(q0 > 0.0 && q1 > q0 && q1 < 1.0) {
            return Err(invalid(format!("q range must satisfy 0 < lo < hi < 1, got {q0}..{q1}")));
        }
        if resolution < 8 {
            return Err(invalid(format!("resolution must be >= 8, got {resolution}")));
        }
        Ok(Self {
            dim,
            lambda_range,
            q_range,
            resolution,
            minimize: None,
        })
    }

    fn axis(range: (f64, f64), k: usize, n: usize) -> f64 {
        if k + 1 == n {
            return range.1;
        }
        range.0 + (range.1 - range.0) * k as f64 / (n - 1) as f64
    }

    pub fn lambdas(&self) -> Vec<f64> {
        (0..self.resolution)
            .map(|k| Self::axis(self.lambda_range, k, self.resolution))
            .collect()
    }

    pub fn qs(&self) -> Vec<f64> {
        (0..self.resolution)
            .map(|k| Self::axis(self.q_range, k, self.resolution))
            .collect()
    }
}

/// Boundary curves of the diagram at one λ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    /// N/(N+λ)
    pub validity: f64,
    /// 2N/(2N+λ)
    pub conformal: f64,
    /// min{1 − 2/N, 2N/(2N+λ)}
    pub explicit: f64,
    /// Layer-cake threshold (0 where the constant does not exceed 1).
    pub qbar: f64,
    pub qbar_crude: f64,
    /// 1 − λ/N
    pub dotted: f64,
}

impl Curves {
    pub fn at(dim: usize, lambda: f64) -> Result<Self> {
        let n = dim as f64;
        let conformal = conformal_q(dim, lambda);
        Ok(Self {
            validity: validity_threshold(dim, lambda),
            conformal,
            explicit: (1.0 - 2.0 / n).min(conformal),
            qbar: qbar_cached(dim, lambda),
            qbar_crude: qbar(dim, lambda, QbarMode::Crude)?,
            dotted: 1.0 - lambda / n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub lambda: f64,
    pub q: f64,
    pub regime: Regime,
    pub curves: Curves,
    #[serde(rename = "C_estimate")]
    pub c_estimate: Option<f64>,
    #[serde(rename = "M_star")]
    pub m_star: Option<f64>,
    pub case_label: Option<CaseLabel>,
    /// Whether the cell's minimization converged, when one was run.
    pub converged: Option<bool>,
}

/// Evaluates every (λ, q) cell; rows come back in (λ, q) lexicographic order.
pub fn sweep(spec: &PhaseSpec, cache: Option<&Path>) -> Result<Vec<PhasePoint>> {
    let lambdas = spec.lambdas();
    let qs = spec.qs();
    let curves: Vec<Curves> = lambdas
        .par_iter()
        .map(|&l| Curves::at(spec.dim, l))
        .collect::<Result<_>>()?;
    let cells: Vec<(usize, f64)> = (0..lambdas.len())
        .flat_map(|i| qs.iter().map(move |&q| (i, q)))
        .collect();
    cells
        .par_iter()
        .map(|&(i, q)| {
            let p = Params::new(spec.dim, lambdas[i], q)?;
            let mut point = PhasePoint {
                lambda: lambdas[i],
                q,
                regime: classify(&p),
                curves: curves[i],
                c_estimate: None,
                m_star: None,
                case_label: None,
                converged: None,
            };
            if let Some((grid, opts)) = &spec.minimize {
                if p.is_valid() {
                    let table = grid.table(&p, cache)?;
                    // a failed cell is reported, not fatal for the sweep
                    if let Ok(r) = minimize_relaxed(&p, &table, opts) {
                        point.c_estimate = Some(r.c_estimate);
                        point.m_star = Some(r.state.atom);
                        point.case_label = r.case;
                        point.converged = Some(r.converged);
                    } else {
                        point.converged = Some(false);
                    }
                }
            }
            Ok(point)
        })
        .collect()
}

const HEADER: [&str; 17] = [
    "lambda",
    "q",
    "validity",
    "sign_class",
    "existence",
    "q_validity",
    "q_conformal",
    "q_explicit",
    "qbar",
    "qbar_crude",
    "q_dotted",
    "C_estimate",
    "M_star",
    "case_label",
    "converged",
    "alpha",
    "dim",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn label<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// One row per cell; floats in shortest round-trip form, empty fields for
/// values that were not computed.
pub fn write_csv<W: Write>(dim: usize, points: &[PhasePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    for pt in points {
        let c = &pt.curves;
        let alpha = Params::new(dim, pt.lambda, pt.q)?.alpha();
        w.write_record([
            pt.lambda.to_string(),
            pt.q.to_string(),
            label(&pt.regime.validity),
            label(&pt.regime.sign_class),
            label(&pt.regime.existence),
            c.validity.to_string(),
            c.conformal.to_string(),
            c.explicit.to_string(),
            c.qbar.to_string(),
            c.qbar_crude.to_string(),
            c.dotted.to_string(),
            opt(pt.c_estimate),
            opt(pt.m_star),
            pt.case_label.map(|l| label(&l)).unwrap_or_default(),
            opt(pt.converged),
            alpha.to_string(),
            dim.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// A parsed CSV row: (λ, q, validity, sign class, existence, curves).
pub type CsvRow = (f64, f64, String, String, String, Curves);

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| invalid(format!("bad number in column {}", HEADER[k])))
        };
        rows.push((
            f(0)?,
            f(1)?,
            rec[2].to_string(),
            rec[3].to_string(),
            rec[4].to_string(),
            Curves {
                validity: f(5)?,
                conformal: f(6)?,
                explicit: f(7)?,
                qbar: f(8)?,
                qbar_crude: f(9)?,
                dotted: f(10)?,
            },
        ));
    }
    Ok(rows)
}

/// The row's labels as written, for round-trip checks.
pub fn regime_labels(regime: &Regime) -> (String, String, String) {
    (
        label(&regime.validity),
        label(&regime.sign_class),
        label(&regime.existence),
    )
}

/// Shaded regions (white: inequality fails, light grey: minimizer without
/// Dirac mass, dark grey: Dirac mass not excluded) with the boundary curves.
pub fn write_svg<W: Write>(spec: &PhaseSpec, points: &[PhasePoint], mut out: W) -> Result<()> {
    let (w, h, pad) = (640.0, 480.0, 50.0);
    let (l0, l1) = spec.lambda_range;
    let (q0, q1) = spec.q_range;
    let x = |l: f64| pad + (l - l0) / (l1 - l0) * (w - 2.0 * pad);
    let y = |q: f64| h - pad - (q - q0) / (q1 - q0) * (h - 2.0 * pad);
    let n = spec.resolution as f64;
    let (cw, ch) = ((w - 2.0 * pad) / (n - 1.0), (h - 2.0 * pad) / (n - 1.0));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<g stroke="none">"#);
    for pt in points {
        let fill = match pt.regime.existence {
            Existence::NotApplicable => continue,
            Existence::MinimizerGuaranteed => "#d9d9d9",
            Existence::OpenRegion | Existence::RelaxedOnly => "#8c8c8c",
        };
        let (cx, cy) = (x(pt.lambda) - 0.5 * cw, y(pt.q) - 0.5 * ch);
        let _ = writeln!(
            s,
            r#"<rect x="{cx:.2}" y="{cy:.2}" width="{:.2}" height="{:.2}" fill="{fill}"/>"#,
            cw + 0.5,
            ch + 0.5
        );
        if pt.case_label == Some(CaseLabel::PositiveMass) {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="black"/>"#,
                x(pt.lambda),
                y(pt.q)
            );
        }
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(
        s,
        r#"<clipPath id="plot"><rect x="{pad}" y="{pad}" width="{}" height="{}"/></clipPath>"#,
        w - 2.0 * pad,
        h - 2.0 * pad
    );
    let lambdas: Vec<f64> = (0..=200).map(|k| l0 + (l1 - l0) * k as f64 / 200.0).collect();
    let column: Vec<Curves> = spec
        .lambdas()
        .iter()
        .map(|&l| Curves::at(spec.dim, l))
        .collect::<Result<_>>()?;
    let mut polyline = |pts: Vec<(f64, f64)>, style: &str| {
        let path: Vec<String> = pts.iter().map(|(l, q)| format!("{:.2},{:.2}", x(*l), y(*q))).collect();
        let _ = writeln!(
            s,
            r#"<polyline clip-path="url(#plot)" fill="none" {style} points="{}"/>"#,
            path.join(" ")
        );
    };
    let d = spec.dim as f64;
    let dense = |f: &dyn Fn(f64) -> f64| lambdas.iter().map(|&l| (l, f(l))).collect::<Vec<_>>();
    polyline(dense(&|l| d / (d + l)), r#"stroke="black" stroke-width="1.5""#);
    polyline(
        dense(&|l| 2.0 * d / (2.0 * d + l)),
        r#"stroke="black" stroke-width="1""#,
    );
    polyline(
        dense(&|l| {
            let c = 1.0 - 2f64.powf(-l);
            2.0 * d * c / (2.0 * d * c + l)
        }),
        r#"stroke="black" stroke-dasharray="6,4""#,
    );
    polyline(dense(&|l| 1.0 - l / d), r#"stroke="black" stroke-dasharray="1,3""#);
    if d > 2.0 {
        polyline(
            vec![(l0, 1.0 - 2.0 / d), (l1, 1.0 - 2.0 / d)],
            r##"stroke="#555" stroke-width="0.75""##,
        );
    }
    polyline(
        spec.lambdas()
            .iter()
            .zip(&column)
            .filter(|(_, c)| c.qbar > c.validity)
            .map(|(l, c)| (*l, c.qbar))
            .collect(),
        r##"stroke="#1f4e99" stroke-width="1.5""##,
    );
    let _ = writeln!(
        s,
        r#"<rect x="{pad}" y="{pad}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - 2.0 * pad,
        h - 2.0 * pad
    );
    for k in 0..=4 {
        let l = l0 + (l1 - l0) * k as f64 / 4.0;
        let q = q0 + (q1 - q0) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{l:.3}</text>"#,
            x(l),
            h - pad + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{q:.3}</text>"#,
            pad - 4.0,
            y(q) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle">λ (N = {})</text>"#,
        0.5 * w,
        h - 12.0,
        spec.dim
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" font-size="13" transform="rotate(-90 14 {:.2})" text-anchor="middle">q</text>"#,
        0.5 * h,
        0.5 * h
    );
    let _ = writeln!(s, "</svg>");
    out.write_all(s.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig_spec() -> PhaseSpec {
        PhaseSpec::new(4, (0.5, 20.0), (0.05, 0.95), 24).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(PhaseSpec::new(4, (0.0, 1.0), (0.1, 0.9), 8).is_err());
        assert!(PhaseSpec::new(4, (2.0, 1.0), (0.1, 0.9), 8).is_err());
        assert!(PhaseSpec::new(4, (1.0, 2.0), (0.1, 1.0), 8).is_err());
        assert!(PhaseSpec::new(4, (1.0, 2.0), (0.1, 0.9), 7).is_err());
        let s = PhaseSpec::new(4, (1.0, 2.0), (0.1, 0.9), 8).unwrap();
        assert_eq!(s.lambdas().first(), Some(&1.0));
        assert_eq!(s.lambdas().last(), Some(&2.0));
        assert_eq!(s.qs().len(), 8);
    }

    #[test]
    fn rows_are_ordered_and_match_classification() {
        let spec = fig_spec();
        let pts = sweep(&spec, None).unwrap();
        assert_eq!(pts.len(), 24 * 24);
        for w in pts.windows(2) {
            let a = (w[0].lambda, w[0].q);
            let b = (w[1].lambda, w[1].q);
            assert!(a.0 < b.0 || (a.0 == b.0 && a.1 < b.1));
        }
        for pt in &pts {
            let p = Params::new(4, pt.lambda, pt.q).unwrap();
            assert_eq!(pt.regime, classify(&p));
            let c = &pt.curves;
            // region boundaries sit at the curves
            assert_eq!(pt.regime.existence == Existence::NotApplicable, pt.q <= c.validity);
            let open = pt.q > c.validity && pt.q < c.explicit && pt.q <= c.qbar && pt.lambda > 4.0;
            assert_eq!(
                pt.regime.existence == Existence::OpenRegion,
                open,
                "{} {}",
                pt.lambda,
                pt.q
            );
        }
    }

    #[test]
    fn csv_round_trip() {
        let spec = PhaseSpec::new(4, (1.0, 12.0), (0.1, 0.9), 8).unwrap();
        let pts = sweep(&spec, None).unwrap();
        let mut buf = Vec::new();
        write_csv(4, &pts, &mut buf).unwrap();
        let rows = read_csv(buf.as_slice()).unwrap();
        assert_eq!(rows.len(), pts.len());
        for (row, pt) in rows.iter().zip(&pts) {
            assert_eq!(row.0.to_bits(), pt.lambda.to_bits());
            assert_eq!(row.1.to_bits(), pt.q.to_bits());
            let (v, sc, e) = regime_labels(&classify(&Params::new(4, row.0, row.1).unwrap()));
            assert_eq!((&row.2, &row.3, &row.4), (&v, &sc, &e));
            assert_eq!(row.5, pt.curves);
        }
    }

    #[test]
    fn svg_has_regions_and_curves() {
        let spec = PhaseSpec::new(4, (1.0, 20.0), (0.05, 0.95), 10).unwrap();
        let pts = sweep(&spec, None).unwrap();
        let mut buf = Vec::new();
        write_svg(&spec, &pts, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.trim_end().ends_with("</svg>"));
        assert!(text.contains("#d9d9d9") && text.contains("#8c8c8c"));
        assert!(text.contains("stroke-dasharray=\"6,4\""));
        assert_eq!(text.matches("<polyline").count(), 6);
    }

    #[test]
    fn crude_curve_hugs_conformal_curve() {
        for k in 0..=160 {
            let l = 4.0 + 16.0 * k as f64 / 160.0;
            let c = Curves::at(4, l).unwrap();
            assert!(c.conformal - c.qbar_crude < 0.02 && c.conformal > c.qbar_crude);
        }
    }
}
