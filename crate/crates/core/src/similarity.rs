//! Fingerprint distances. Every metric is oriented so that smaller means
//! more similar.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::Fingerprint;
use crate::grid::Grid;

/// Allowed deviation from unit mass for distribution-valued metrics.
pub const MASS_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "js")]
    Js,
    #[serde(rename = "norm-mean")]
    NormMean,
    #[serde(rename = "emd")]
    Emd,
    #[serde(rename = "cosine")]
    Cosine,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Js, Metric::NormMean, Metric::Emd, Metric::Cosine];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Js => "js",
            Metric::NormMean => "norm-mean",
            Metric::Emd => "emd",
            Metric::Cosine => "cosine",
        }
    }

    /// `spacing` is the node step used by gradient-based metrics.
    pub fn distance(self, a: &Grid, b: &Grid, spacing: f64) -> Result<f64> {
        match self {
            Metric::Js => js_distance(a, b),
            Metric::NormMean => norm_mean(a, b, spacing),
            Metric::Emd => marginal_emd(a, b, spacing),
            Metric::Cosine => cosine_distance(a, b),
        }
    }

    pub fn between(self, a: &Fingerprint, b: &Fingerprint) -> Result<f64> {
        self.distance(&a.grid, &b.grid, a.meta.spacing())
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown metric `{s}` (expected js, norm-mean, emd or cosine)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FingerprintDistance {
    pub metric: Metric,
    pub value: f64,
}

fn as_distribution(g: &Grid) -> Result<Vec<f64>> {
    if let Some(v) = g.data().iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::InvalidGrid(format!("entry {v} is negative or not finite")));
    }
    let total = g.sum();
    if (total - 1.0).abs() > MASS_TOLERANCE {
        return Err(Error::InvalidGrid(format!("mass {total} is not 1 within {MASS_TOLERANCE}")));
    }
    Ok(g.data().iter().map(|v| v / total).collect())
}

/// Square root of the base-2 Jensen-Shannon divergence; lies in `[0, 1]`.
pub fn js_distance(a: &Grid, b: &Grid) -> Result<f64> {
    a.check_same_shape(b)?;
    let p = as_distribution(a)?;
    let q = as_distribution(b)?;
    let mut div = 0.0;
    for (&pk, &qk) in p.iter().zip(&q) {
        let m = 0.5 * (pk + qk);
        let term = |x: f64| if x > 0.0 { x * (x / m).log2() } else { 0.0 };
        // one commutative addition per cell keeps d(a, b) == d(b, a) bit for bit
        div += 0.5 * (term(pk) + term(qk));
    }
    Ok(div.clamp(0.0, 1.0).sqrt())
}

/// Unit surface normal of the height field at an interior cell.
fn normal(g: &Grid, i: usize, j: usize, spacing: f64) -> [f64; 3] {
    let fx = (g.get(i, j + 1) - g.get(i, j - 1)) / (2.0 * spacing);
    let fy = (g.get(i + 1, j) - g.get(i - 1, j)) / (2.0 * spacing);
    let len = (fx * fx + fy * fy + 1.0).sqrt();
    [-fx / len, -fy / len, 1.0 / len]
}

/// Angle between unit vectors; `atan2` keeps it exact near zero where
/// `acos` of the dot product loses half the digits.
fn angle(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let cross = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    let sin = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    sin.atan2(dot)
}

/// Mean angle (radians) between the surface normals of two height fields,
/// averaged over interior cells where central differences exist.
pub fn norm_mean(a: &Grid, b: &Grid, spacing: f64) -> Result<f64> {
    a.check_same_shape(b)?;
    if !a.is_square() {
        return Err(Error::InvalidGrid(format!("norm-mean needs a square grid, got {:?}", a.shape())));
    }
    let n = a.rows();
    if n < 3 {
        return Err(Error::InvalidGrid(format!("norm-mean needs at least 3x3, got {n}x{n}")));
    }
    if !(spacing.is_finite() && spacing > 0.0) {
        return Err(Error::InvalidParameter(format!("grid spacing must be > 0, got {spacing}")));
    }
    let mut total = 0.0;
    for i in 1..n - 1 {
        for j in 1..n - 1 {
            let na = normal(a, i, j, spacing);
            let nb = normal(b, i, j, spacing);
            total += angle(na, nb);
        }
    }
    Ok(total / ((n - 2) * (n - 2)) as f64)
}

fn w1_1d(p: &[f64], q: &[f64], spacing: f64) -> f64 {
    let mut cp = 0.0;
    let mut cq = 0.0;
    let mut acc = 0.0;
    for (x, y) in p.iter().zip(q) {
        cp += x;
        cq += y;
        acc += (cp - cq).abs();
    }
    acc * spacing
}

/// Sum of the 1-D Wasserstein-1 distances between the row marginals and
/// between the column marginals.
pub fn marginal_emd(a: &Grid, b: &Grid, spacing: f64) -> Result<f64> {
    a.check_same_shape(b)?;
    let p = as_distribution(a)?;
    let q = as_distribution(b)?;
    let (rows, cols) = a.shape();
    let row_marg = |d: &[f64]| (0..rows).map(|r| d[r * cols..(r + 1) * cols].iter().sum()).collect::<Vec<f64>>();
    let col_marg = |d: &[f64]| (0..cols).map(|c| (0..rows).map(|r| d[r * cols + c]).sum()).collect::<Vec<f64>>();
    Ok(w1_1d(&row_marg(&p), &row_marg(&q), spacing) + w1_1d(&col_marg(&p), &col_marg(&q), spacing))
}

/// `1 - cos(a, b)` over the flattened grids.
pub fn cosine_distance(a: &Grid, b: &Grid) -> Result<f64> {
    a.check_same_shape(b)?;
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidGrid("cosine distance of a zero grid".into()));
    }
    Ok((1.0 - dot / (na * nb)).clamp(0.0, 2.0))
}
