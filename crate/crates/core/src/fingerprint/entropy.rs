//! Entropy-transition fingerprints: a bivariate Gaussian KDE over consecutive
//! entropy pairs, evaluated on a `G x G` lattice spanning `[0, ln |V|]`.
//!
//! Grid rows follow the current entropy `e[i]` (the y axis) and columns the
//! previous entropy `e[i-1]` (the x axis), as produced by `meshgrid(x, y)`.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scorestream::ScoreStream;

/// Kernels are skipped beyond this squared Mahalanobis distance (`exp(-69)`).
const CUTOFF_SQ: f64 = 138.0;
/// Isotropic fallback bandwidth as a fraction of the grid range.
pub const FALLBACK_BANDWIDTH_FRACTION: f64 = 0.01;
const CHUNK: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    /// Data covariance scaled by `n^(-1/3)` (Scott's factor `n^(-1/6)`, squared).
    Scott,
    /// Isotropic kernel with standard deviation `h` in nats.
    Fixed(f64),
}

impl Default for BandwidthRule {
    fn default() -> Self {
        BandwidthRule::Scott
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyFingerprint {
    pub grid: Grid,
    pub grid_size: usize,
    pub range_max: f64,
    pub bandwidth_rule: BandwidthRule,
    /// Set when the Scott rule hit a singular covariance and the isotropic
    /// fallback was used instead.
    pub fallback_used: bool,
    pub point_count: usize,
}

/// Consecutive pairs `(e[i-1], e[i])`.
pub fn entropy_pairs(entropies: &[f64]) -> Result<Vec<[f64; 2]>> {
    if entropies.len() < 2 {
        return Err(Error::TooShort {
            needed: 2,
            got: entropies.len(),
        });
    }
    Ok(entropies.windows(2).map(|w| [w[0], w[1]]).collect())
}

/// `G` evenly spaced nodes over `[0, range_max]`, both endpoints included.
pub fn linspace(range_max: f64, grid_size: usize) -> Vec<f64> {
    let step = range_max / (grid_size - 1) as f64;
    (0..grid_size)
        .map(|i| if i + 1 == grid_size { range_max } else { i as f64 * step })
        .collect()
}

/// A fitted Gaussian mixture with one equal-weight component per point.
#[derive(Clone, Debug)]
pub struct GaussianKde {
    /// Distinct points with their multiplicities.
    points: Vec<([f64; 2], f64)>,
    n: f64,
    /// Bandwidth covariance `H`.
    covariance: [[f64; 2]; 2],
    inverse: [[f64; 2]; 2],
    norm: f64,
    pub fallback_used: bool,
}

impl GaussianKde {
    pub fn fit(points: &[[f64; 2]], rule: BandwidthRule, range_max: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("KDE needs at least one point"));
        }
        let fallback = FALLBACK_BANDWIDTH_FRACTION * range_max;
        let (covariance, fallback_used) = match rule {
            BandwidthRule::Fixed(h) => {
                if !(h.is_finite() && h > 0.0) {
                    return Err(Error::InvalidParameter(format!("fixed bandwidth must be > 0, got {h}")));
                }
                (isotropic(h), false)
            }
            BandwidthRule::Scott => match scott_covariance(points) {
                Some(c) => (c, false),
                None => (isotropic(fallback), true),
            },
        };
        let det = covariance[0][0] * covariance[1][1] - covariance[0][1] * covariance[1][0];
        let inverse = [
            [covariance[1][1] / det, -covariance[0][1] / det],
            [-covariance[1][0] / det, covariance[0][0] / det],
        ];
        Ok(GaussianKde {
            points: dedup(points),
            n: points.len() as f64,
            covariance,
            inverse,
            norm: 1.0 / (2.0 * PI * det.sqrt()),
            fallback_used,
        })
    }

    pub fn covariance(&self) -> [[f64; 2]; 2] {
        self.covariance
    }

    /// Mixture density at `(x, y)`.
    pub fn density(&self, x: f64, y: f64) -> f64 {
        let mut acc = 0.0;
        for &([px, py], w) in &self.points {
            let q = self.quad(x - px, y - py);
            if q <= CUTOFF_SQ {
                acc += w * (-0.5 * q).exp();
            }
        }
        acc * self.norm / self.n
    }

    #[inline]
    fn quad(&self, dx: f64, dy: f64) -> f64 {
        let a = &self.inverse;
        a[0][0] * dx * dx + (a[0][1] + a[1][0]) * dx * dy + a[1][1] * dy * dy
    }

    /// Unnormalised density at every lattice node: `grid[(row, col)] = density(x[col], y[row])`.
    pub fn density_grid(&self, grid_size: usize, range_max: f64) -> Grid {
        let nodes = linspace(range_max, grid_size);
        let step = range_max / (grid_size - 1) as f64;
        let a = self.inverse[0][0];
        let b = 0.5 * (self.inverse[0][1] + self.inverse[1][0]);
        let d = self.inverse[1][1];
        // Along a row the exponent is quadratic in the column, so successive
        // kernel values differ by a ratio that itself shrinks by `kappa`.
        let kappa = (-a * step * step).exp();
        let half_y = (CUTOFF_SQ * self.covariance[1][1]).sqrt();
        let last = grid_size as i64 - 1;
        // Fixed-size chunks summed in order keep the result independent of the thread count.
        let partials: Vec<Vec<f64>> = self
            .points
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut acc = vec![0.0; grid_size * grid_size];
                for &([px, py], w) in chunk {
                    let r0 = ((py - half_y) / step).ceil().max(0.0) as i64;
                    let r1 = (((py + half_y) / step).floor() as i64).min(last);
                    for r in r0..=r1 {
                        let r = r as usize;
                        let dy = nodes[r] - py;
                        // q(x) = a (x - px)^2 + 2 b (x - px) dy + d dy^2, minimal at x_min.
                        let x_min = px - b * dy / a;
                        let q_min = (d - b * b / a) * dy * dy;
                        if q_min > CUTOFF_SQ {
                            continue;
                        }
                        let half_x = ((CUTOFF_SQ - q_min) / a).sqrt();
                        let c0 = ((x_min - half_x) / step).ceil().max(0.0) as i64;
                        let c1 = (((x_min + half_x) / step).floor() as i64).min(last);
                        if c1 < c0 {
                            continue;
                        }
                        let row = &mut acc[r * grid_size..(r + 1) * grid_size];
                        let dx = nodes[c0 as usize] - px;
                        let mut f = w * (-0.5 * (a * dx * dx + 2.0 * b * dx * dy + d * dy * dy)).exp();
                        let mut ratio = (-0.5 * (a * (2.0 * step * dx + step * step) + 2.0 * b * step * dy)).exp();
                        for cell in &mut row[c0 as usize..=c1 as usize] {
                            *cell += f;
                            f *= ratio;
                            ratio *= kappa;
                        }
                    }
                }
                acc
            })
            .collect();
        let mut total = vec![0.0; grid_size * grid_size];
        for part in partials {
            for (t, p) in total.iter_mut().zip(part) {
                *t += p;
            }
        }
        let scale = self.norm / self.n;
        for v in &mut total {
            *v *= scale;
        }
        Grid::from_vec(grid_size, grid_size, total).expect("square buffer")
    }
}

fn isotropic(h: f64) -> [[f64; 2]; 2] {
    [[h * h, 0.0], [0.0, h * h]]
}

/// Unbiased sample covariance times `n^(-1/3)`; `None` when it is singular.
fn scott_covariance(points: &[[f64; 2]]) -> Option<[[f64; 2]; 2]> {
    let n = points.len();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let mx = points.iter().map(|p| p[0]).sum::<f64>() / nf;
    let my = points.iter().map(|p| p[1]).sum::<f64>() / nf;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let dx = p[0] - mx;
        let dy = p[1] - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let (sxx, sxy, syy) = (sxx / (nf - 1.0), sxy / (nf - 1.0), syy / (nf - 1.0));
    let det = sxx * syy - sxy * sxy;
    if !(det.is_finite() && sxx > 0.0 && syy > 0.0 && det > 1e-12 * sxx * syy) {
        return None;
    }
    let factor = nf.powf(-1.0 / 3.0);
    Some([[sxx * factor, sxy * factor], [sxy * factor, syy * factor]])
}

fn dedup(points: &[[f64; 2]]) -> Vec<([f64; 2], f64)> {
    let mut sorted: Vec<[f64; 2]> = points.to_vec();
    sorted.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    let mut out: Vec<([f64; 2], f64)> = Vec::new();
    for p in sorted {
        match out.last_mut() {
            Some((q, w)) if q[0].to_bits() == p[0].to_bits() && q[1].to_bits() == p[1].to_bits() => *w += 1.0,
            _ => out.push((p, 1.0)),
        }
    }
    out
}

/// Evaluates the KDE of `points` on the lattice and normalises node values to sum 1.
pub fn kde_grid(
    points: &[[f64; 2]],
    grid_size: usize,
    range_max: f64,
    rule: BandwidthRule,
) -> Result<EntropyFingerprint> {
    if grid_size < 2 {
        return Err(Error::InvalidParameter(format!("grid size must be >= 2, got {grid_size}")));
    }
    if !(range_max.is_finite() && range_max > 0.0) {
        return Err(Error::InvalidParameter(format!("range_max must be > 0, got {range_max}")));
    }
    let kde = GaussianKde::fit(points, rule, range_max)?;
    let mut grid = kde.density_grid(grid_size, range_max);
    grid.normalize();
    Ok(EntropyFingerprint {
        grid,
        grid_size,
        range_max,
        bandwidth_rule: rule,
        fallback_used: kde.fallback_used,
        point_count: points.len(),
    })
}

/// Entropy fingerprint of a stream over `[0, ln |V|]`. Entropies are clamped
/// into that range first.
pub fn entropy_fingerprint(
    stream: &ScoreStream,
    grid_size: usize,
    rule: BandwidthRule,
) -> Result<EntropyFingerprint> {
    let range_max = stream.max_entropy();
    let entropies: Vec<f64> = stream
        .entropies
        .iter()
        .map(|&e| f64::from(e).clamp(0.0, range_max))
        .collect();
    let points = entropy_pairs(&entropies)?;
    kde_grid(&points, grid_size, range_max, rule)
}
