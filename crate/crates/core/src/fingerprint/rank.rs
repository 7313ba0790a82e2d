//! Rank-transition fingerprints.
//!
//! The vocabulary rank axis is compressed into clusters that each carry about
//! `1/C` of a Zipf-shaped probability mass, and consecutive cluster ids are
//! counted into a `K x K` transition grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Relative slack on the `cum >= 1/C` test, so mass that lands on a cluster
/// boundary in exact arithmetic (e.g. the full mass at the last rank)
/// advances the counter regardless of rounding.
pub const BOUNDARY_EPS: f64 = 1e-9;

pub const DEFAULT_POWER_LAW_SAMPLES: u64 = 100_000;
const POWER_LAW_SEED: u64 = 0x7452_4143_4521;

/// How rank probabilities are approximated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerLaw {
    /// `p(i) = i^-alpha / sum_j j^-alpha`.
    Analytic,
    /// Empirical frequencies of `samples` Zipf draws from a fixed-seed generator.
    Sampled { samples: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterMap {
    pub vocab_size: u32,
    pub alpha: f64,
    pub requested_clusters: u32,
    pub power_law: PowerLaw,
    /// `assignment[i - 1]` is the 1-based cluster of rank `i`.
    assignment: Vec<u32>,
    /// Final counter value; the grid dimension `K`.
    pub used_clusters: u32,
}

impl ClusterMap {
    /// 1-based cluster of a 1-based rank.
    #[inline]
    pub fn cluster(&self, rank: u32) -> u32 {
        self.assignment[(rank - 1) as usize]
    }

    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    /// Number of clusters that actually received ranks.
    pub fn occupied_clusters(&self) -> usize {
        let mut n = 0;
        let mut last = 0;
        for &c in &self.assignment {
            if c != last {
                n += 1;
                last = c;
            }
        }
        n
    }
}

/// Normalised Zipf weights over ranks `1..=vocab_size`.
pub fn power_law_probabilities(vocab_size: u32, alpha: f64) -> Vec<f64> {
    let weights: Vec<f64> = (1..=vocab_size).map(|i| f64::from(i).powf(-alpha)).collect();
    // Neumaier summation keeps the total within a few ulps for large vocabularies.
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &w in &weights {
        let t = sum + w;
        if sum.abs() >= w.abs() {
            comp += (sum - t) + w;
        } else {
            comp += (w - t) + sum;
        }
        sum = t;
    }
    let total = sum + comp;
    weights.into_iter().map(|w| w / total).collect()
}

fn sampled_probabilities(vocab_size: u32, alpha: f64, samples: u64) -> Result<Vec<f64>> {
    if samples == 0 {
        return Err(Error::InvalidParameter("power-law sample count must be positive".into()));
    }
    let zipf = Zipf::new(u64::from(vocab_size), alpha)
        .map_err(|e| Error::InvalidParameter(format!("zipf({vocab_size}, {alpha}): {e:?}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_LAW_SEED);
    let mut counts = vec![0u64; vocab_size as usize];
    for _ in 0..samples {
        let draw = zipf.sample(&mut rng) as usize;
        counts[draw.clamp(1, vocab_size as usize) - 1] += 1;
    }
    Ok(counts.into_iter().map(|c| c as f64 / samples as f64).collect())
}

/// Equal-probability binning of the rank axis.
///
/// Walks ranks in order, assigning the current counter `k` and adding `p(i)`
/// to a running mass; every time the mass reaches `1/C` it is reduced by
/// `1/C` and `k` advances. When a single rank carries more than `1/C` the
/// counter jumps and the skipped cluster ids stay empty. `used_clusters` is
/// the counter after the last rank.
pub fn build_cluster_map(vocab_size: u32, alpha: f64, requested_clusters: u32) -> Result<ClusterMap> {
    build_cluster_map_with(vocab_size, alpha, requested_clusters, PowerLaw::Analytic)
}

pub fn build_cluster_map_with(
    vocab_size: u32,
    alpha: f64,
    requested_clusters: u32,
    power_law: PowerLaw,
) -> Result<ClusterMap> {
    if vocab_size < 2 {
        return Err(Error::InvalidParameter(format!("vocab_size must be >= 2, got {vocab_size}")));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::InvalidParameter(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    if requested_clusters == 0 || requested_clusters > vocab_size {
        return Err(Error::InvalidParameter(format!(
            "clusters must lie in [1, {vocab_size}], got {requested_clusters}"
        )));
    }
    let probs = match power_law {
        PowerLaw::Analytic => power_law_probabilities(vocab_size, alpha),
        PowerLaw::Sampled { samples } => sampled_probabilities(vocab_size, alpha, samples)?,
    };

    let delta = 1.0 / f64::from(requested_clusters);
    let threshold = delta * (1.0 - BOUNDARY_EPS);
    let mut cum = 0.0f64;
    let mut k: u32 = 1;
    let mut assignment = Vec::with_capacity(vocab_size as usize);
    for p in probs {
        assignment.push(k);
        cum += p;
        while cum >= threshold {
            cum -= delta;
            k += 1;
        }
    }
    Ok(ClusterMap {
        vocab_size,
        alpha,
        requested_clusters,
        power_law,
        assignment,
        used_clusters: k,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankFingerprint {
    /// `K x K` for order 2, `K^2 x K` for order 3; normalised to sum 1.
    pub grid: Grid,
    pub transition_count: u64,
    pub order: u8,
}

/// Counts cluster transitions of `ranks` and normalises the counts.
///
/// Order 2 indexes `[cluster(r[i-1]), cluster(r[i])]`. Order 3 uses row
/// `cluster(r[i-2]) * K + cluster(r[i-1])` and column `cluster(r[i])`, with
/// 0-based cluster indices.
pub fn rank_fingerprint(ranks: &[u32], cmap: &ClusterMap, order: u8) -> Result<RankFingerprint> {
    if !(2..=3).contains(&order) {
        return Err(Error::InvalidParameter(format!("transition order must be 2 or 3, got {order}")));
    }
    if ranks.len() < order as usize {
        return Err(Error::TooShort {
            needed: order as usize,
            got: ranks.len(),
        });
    }
    if let Some((index, &rank)) = ranks
        .iter()
        .enumerate()
        .find(|(_, &r)| r == 0 || r > cmap.vocab_size)
    {
        return Err(Error::RankOutOfRange {
            index,
            rank,
            vocab_size: cmap.vocab_size,
        });
    }
    let k = cmap.used_clusters as usize;
    let ids: Vec<usize> = ranks.iter().map(|&r| cmap.cluster(r) as usize - 1).collect();
    let mut grid = match order {
        2 => {
            let mut g = Grid::zeros(k, k);
            for w in ids.windows(2) {
                g.add(w[0], w[1], 1.0);
            }
            g
        }
        _ => {
            let mut g = Grid::zeros(k * k, k);
            for w in ids.windows(3) {
                g.add(w[0] * k + w[1], w[2], 1.0);
            }
            g
        }
    };
    let total = grid.normalize();
    Ok(RankFingerprint {
        grid,
        transition_count: total as u64,
        order,
    })
}
