//! Fingerprint construction and the `TRFP` container shared by both variants.
//!
//! `TRFP` layout, all little-endian:
//!
//! ```text
//! "TRFP" | version u16 = 1 | variant u8 (0 = RANK, 1 = ENTROPY) | order u8
//! | vocab_size u32 | count u64 | evaluator_id (u16 len + UTF-8) | doc_id (u16 len + UTF-8)
//! RANK:    alpha f64 | requested_clusters u32 | used_clusters u32
//!          | power_law u8 (0 analytic, 1 sampled) | samples u64
//! ENTROPY: grid_size u32 | range_max f64 | bandwidth u8 (0 scott, 1 fixed) | h f64
//!          | fallback u8
//! rows u32 | cols u32 | rows*cols f64 row-major | CRC32 of every preceding byte
//! ```

pub mod entropy;
pub mod rank;

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scorestream::{put_str, write_atomic, Reader, ScoreStream};

pub use entropy::{entropy_fingerprint, kde_grid, BandwidthRule, EntropyFingerprint};
pub use rank::{build_cluster_map, rank_fingerprint, ClusterMap, PowerLaw, RankFingerprint};

pub const FINGERPRINT_MAGIC: [u8; 4] = *b"TRFP";
pub const FINGERPRINT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Rank,
    Entropy,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Rank => "rank",
            Variant::Entropy => "entropy",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank" => Ok(Variant::Rank),
            "entropy" => Ok(Variant::Entropy),
            other => Err(Error::InvalidParameter(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum FingerprintParams {
    Rank {
        alpha: f64,
        requested_clusters: u32,
        used_clusters: u32,
        power_law: PowerLaw,
    },
    Entropy {
        grid_size: u32,
        range_max: f64,
        bandwidth: BandwidthRule,
        fallback_used: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FingerprintMeta {
    pub doc_id: String,
    pub evaluator_id: String,
    pub vocab_size: u32,
    pub order: u8,
    /// Transitions (rank) or points (entropy) behind the grid.
    pub count: u64,
    pub params: FingerprintParams,
}

impl FingerprintMeta {
    pub fn variant(&self) -> Variant {
        match self.params {
            FingerprintParams::Rank { .. } => Variant::Rank,
            FingerprintParams::Entropy { .. } => Variant::Entropy,
        }
    }

    /// Node spacing used for finite differences: 1 for rank grids, the
    /// lattice step for entropy grids.
    pub fn spacing(&self) -> f64 {
        match self.params {
            FingerprintParams::Rank { .. } => 1.0,
            FingerprintParams::Entropy {
                grid_size, range_max, ..
            } => range_max / f64::from(grid_size - 1),
        }
    }

    /// Digest of everything that must agree for two fingerprints to be comparable.
    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{}|order={}|V={}|eval={}|", self.variant(), self.order, self.vocab_size, self.evaluator_id));
        match &self.params {
            FingerprintParams::Rank {
                alpha,
                requested_clusters,
                used_clusters,
                power_law,
            } => h.update(format!(
                "alpha={:016x}|C={requested_clusters}|K={used_clusters}|pl={power_law:?}",
                alpha.to_bits()
            )),
            FingerprintParams::Entropy {
                grid_size,
                range_max,
                bandwidth,
                ..
            } => {
                let bw = match bandwidth {
                    BandwidthRule::Scott => "scott".to_string(),
                    BandwidthRule::Fixed(v) => format!("fixed:{:016x}", v.to_bits()),
                };
                h.update(format!("G={grid_size}|range={:016x}|bw={bw}", range_max.to_bits()))
            }
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fingerprint {
    pub meta: FingerprintMeta,
    pub grid: Grid,
}

impl Fingerprint {
    pub fn variant(&self) -> Variant {
        self.meta.variant()
    }

    pub fn config_hash(&self) -> String {
        self.meta.config_hash()
    }

    pub fn from_rank(stream: &ScoreStream, cmap: &ClusterMap, fp: RankFingerprint) -> Self {
        Fingerprint {
            meta: FingerprintMeta {
                doc_id: stream.doc_id.clone(),
                evaluator_id: stream.evaluator_id.clone(),
                vocab_size: stream.vocab_size,
                order: fp.order,
                count: fp.transition_count,
                params: FingerprintParams::Rank {
                    alpha: cmap.alpha,
                    requested_clusters: cmap.requested_clusters,
                    used_clusters: cmap.used_clusters,
                    power_law: cmap.power_law,
                },
            },
            grid: fp.grid,
        }
    }

    pub fn from_entropy(stream: &ScoreStream, fp: EntropyFingerprint) -> Self {
        Fingerprint {
            meta: FingerprintMeta {
                doc_id: stream.doc_id.clone(),
                evaluator_id: stream.evaluator_id.clone(),
                vocab_size: stream.vocab_size,
                order: 2,
                count: fp.point_count as u64,
                params: FingerprintParams::Entropy {
                    grid_size: fp.grid_size as u32,
                    range_max: fp.range_max,
                    bandwidth: fp.bandwidth_rule,
                    fallback_used: fp.fallback_used,
                },
            },
            grid: fp.grid,
        }
    }
}

/// What to build from a stream.
#[derive(Clone, Debug)]
pub enum FingerprintSpec {
    Rank { cmap: ClusterMap, order: u8 },
    Entropy { grid_size: usize, bandwidth: BandwidthRule },
}

impl FingerprintSpec {
    pub fn variant(&self) -> Variant {
        match self {
            FingerprintSpec::Rank { .. } => Variant::Rank,
            FingerprintSpec::Entropy { .. } => Variant::Entropy,
        }
    }

    pub fn build(&self, stream: &ScoreStream) -> Result<Fingerprint> {
        match self {
            FingerprintSpec::Rank { cmap, order } => {
                if stream.vocab_size != cmap.vocab_size {
                    return Err(Error::ConfigMismatch(format!(
                        "stream `{}` has |V| = {} but the cluster map was built for {}",
                        stream.doc_id, stream.vocab_size, cmap.vocab_size
                    )));
                }
                let fp = rank_fingerprint(&stream.ranks, cmap, *order)?;
                Ok(Fingerprint::from_rank(stream, cmap, fp))
            }
            FingerprintSpec::Entropy { grid_size, bandwidth } => {
                let fp = entropy_fingerprint(stream, *grid_size, *bandwidth)?;
                Ok(Fingerprint::from_entropy(stream, fp))
            }
        }
    }
}

pub fn encode_fingerprint(fp: &Fingerprint) -> Result<Vec<u8>> {
    let m = &fp.meta;
    for (field, s) in [("evaluator_id", &m.evaluator_id), ("doc_id", &m.doc_id)] {
        if s.len() > u16::MAX as usize {
            return Err(Error::InvalidParameter(format!("{field} longer than 65535 bytes")));
        }
    }
    let mut buf = Vec::with_capacity(96 + 8 * fp.grid.data().len());
    buf.extend_from_slice(&FINGERPRINT_MAGIC);
    buf.extend_from_slice(&FINGERPRINT_VERSION.to_le_bytes());
    buf.push(match m.variant() {
        Variant::Rank => 0,
        Variant::Entropy => 1,
    });
    buf.push(m.order);
    buf.extend_from_slice(&m.vocab_size.to_le_bytes());
    buf.extend_from_slice(&m.count.to_le_bytes());
    put_str(&mut buf, &m.evaluator_id);
    put_str(&mut buf, &m.doc_id);
    match &m.params {
        FingerprintParams::Rank {
            alpha,
            requested_clusters,
            used_clusters,
            power_law,
        } => {
            buf.extend_from_slice(&alpha.to_le_bytes());
            buf.extend_from_slice(&requested_clusters.to_le_bytes());
            buf.extend_from_slice(&used_clusters.to_le_bytes());
            let (tag, samples) = match power_law {
                PowerLaw::Analytic => (0u8, 0u64),
                PowerLaw::Sampled { samples } => (1, *samples),
            };
            buf.push(tag);
            buf.extend_from_slice(&samples.to_le_bytes());
        }
        FingerprintParams::Entropy {
            grid_size,
            range_max,
            bandwidth,
            fallback_used,
        } => {
            buf.extend_from_slice(&grid_size.to_le_bytes());
            buf.extend_from_slice(&range_max.to_le_bytes());
            let (tag, h) = match bandwidth {
                BandwidthRule::Scott => (0u8, 0.0f64),
                BandwidthRule::Fixed(h) => (1, *h),
            };
            buf.push(tag);
            buf.extend_from_slice(&h.to_le_bytes());
            buf.push(u8::from(*fallback_used));
        }
    }
    buf.extend_from_slice(&(fp.grid.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(fp.grid.cols() as u32).to_le_bytes());
    for v in fp.grid.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn decode_fingerprint(bytes: &[u8]) -> Result<Fingerprint> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("missing magic".into()));
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != FINGERPRINT_MAGIC {
        return Err(Error::BadMagic {
            expected: FINGERPRINT_MAGIC,
            found,
        });
    }
    let mut r = Reader::new(bytes, 4);
    let version = r.u16()?;
    if version != FINGERPRINT_VERSION {
        return Err(Error::Version {
            expected: FINGERPRINT_VERSION,
            found: version,
        });
    }
    let variant = r.u8()?;
    let order = r.u8()?;
    let vocab_size = r.u32()?;
    let count = r.u64()?;
    let evaluator_id = r.string()?;
    let doc_id = r.string()?;
    let params = match variant {
        0 => {
            let alpha = r.f64()?;
            let requested_clusters = r.u32()?;
            let used_clusters = r.u32()?;
            let tag = r.u8()?;
            let samples = r.u64()?;
            let power_law = match tag {
                0 => PowerLaw::Analytic,
                1 => PowerLaw::Sampled { samples },
                t => return Err(Error::InvalidParameter(format!("unknown power-law tag {t}"))),
            };
            FingerprintParams::Rank {
                alpha,
                requested_clusters,
                used_clusters,
                power_law,
            }
        }
        1 => {
            let grid_size = r.u32()?;
            let range_max = r.f64()?;
            let tag = r.u8()?;
            let h = r.f64()?;
            let fallback_used = r.u8()? != 0;
            let bandwidth = match tag {
                0 => BandwidthRule::Scott,
                1 => BandwidthRule::Fixed(h),
                t => return Err(Error::InvalidParameter(format!("unknown bandwidth tag {t}"))),
            };
            FingerprintParams::Entropy {
                grid_size,
                range_max,
                bandwidth,
                fallback_used,
            }
        }
        t => return Err(Error::InvalidParameter(format!("unknown variant tag {t}"))),
    };
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let cells = rows
        .checked_mul(cols)
        .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
        .ok_or_else(|| Error::Truncated(format!("{rows}x{cols} grid does not fit in the file")))?;
    let mut data = Vec::with_capacity(cells);
    for _ in 0..cells {
        data.push(r.f64()?);
    }
    let body_end = r.pos;
    let stored = r.u32()?;
    if r.remaining() != 0 {
        return Err(Error::InvalidParameter(format!("{} trailing bytes after checksum", r.remaining())));
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(Fingerprint {
        meta: FingerprintMeta {
            doc_id,
            evaluator_id,
            vocab_size,
            order,
            count,
            params,
        },
        grid: Grid::from_vec(rows, cols, data)?,
    })
}

pub fn write_fingerprint(fp: &Fingerprint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_fingerprint(fp)?)
}

pub fn read_fingerprint(path: impl AsRef<Path>) -> Result<Fingerprint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_fingerprint(&bytes)
}

/// One grid row per line, comma separated, full round-trip precision.
pub fn grid_to_csv(grid: &Grid) -> String {
    let mut out = String::new();
    for r in 0..grid.rows() {
        let row: Vec<String> = (0..grid.cols()).map(|c| format!("{:?}", grid.get(r, c))).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeatmapScale {
    Linear,
    Log,
}

impl HeatmapScale {
    /// Rank grids are rendered in log scale, entropy grids linearly.
    pub fn default_for(variant: Variant) -> Self {
        match variant {
            Variant::Rank => HeatmapScale::Log,
            Variant::Entropy => HeatmapScale::Linear,
        }
    }
}

impl FromStr for HeatmapScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(HeatmapScale::Linear),
            "log" => Ok(HeatmapScale::Log),
            other => Err(Error::InvalidParameter(format!("unknown heatmap scale `{other}`"))),
        }
    }
}

/// Binary 8-bit PGM (`P5`), row-major, min-max scaled after optional `log1p`.
/// A constant grid renders as a uniform black image.
pub fn grid_to_pgm(grid: &Grid, scale: HeatmapScale) -> Vec<u8> {
    let values = match scale {
        HeatmapScale::Linear => grid.clone(),
        HeatmapScale::Log => grid.map(|v| v.max(0.0).ln_1p()),
    };
    let (lo, hi) = (values.min(), values.max());
    let span = hi - lo;
    let mut out = Vec::with_capacity(values.data().len() + 32);
    write!(out, "P5\n{} {}\n255\n", grid.cols(), grid.rows()).unwrap();
    for &v in values.data() {
        let level = if span > 0.0 { ((v - lo) / span * 255.0).round() } else { 0.0 };
        out.push(level.clamp(0.0, 255.0) as u8);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rank_fp() -> Fingerprint {
        let stream = ScoreStream {
            doc_id: "doc-1".into(),
            evaluator_id: "gpt2".into(),
            vocab_size: 4,
            context_window: 1024,
            ranks: vec![1, 3, 1, 3],
            entropies: vec![0.1; 4],
        };
        let cmap = build_cluster_map(4, 0.0, 2).unwrap();
        FingerprintSpec::Rank { cmap, order: 2 }.build(&stream).unwrap()
    }

    #[test]
    fn header_starts_with_magic() {
        let bytes = encode_fingerprint(&rank_fp()).unwrap();
        assert_eq!(&bytes[..4], b"TRFP");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 0);
        assert_eq!(bytes[7], 2);
    }

    #[test]
    fn corrupt_fingerprint_detected() {
        let mut bytes = encode_fingerprint(&rank_fp()).unwrap();
        let n = bytes.len();
        bytes[n - 10] ^= 1;
        assert!(matches!(decode_fingerprint(&bytes), Err(Error::Checksum { .. })));
        assert!(matches!(decode_fingerprint(&bytes[..n - 3]), Err(Error::Truncated(_))));
    }

    #[test]
    fn config_hash_tracks_parameters() {
        let a = rank_fp();
        let mut b = a.clone();
        b.meta.doc_id = "other".into();
        b.meta.count = 99;
        assert_eq!(a.config_hash(), b.config_hash());
        if let FingerprintParams::Rank { alpha, .. } = &mut b.meta.params {
            *alpha = 1.5;
        }
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn vocab_mismatch_rejected() {
        let stream = ScoreStream {
            doc_id: "d".into(),
            evaluator_id: "e".into(),
            vocab_size: 10,
            context_window: 8,
            ranks: vec![1, 2],
            entropies: vec![0.0, 0.0],
        };
        let cmap = build_cluster_map(4, 0.0, 2).unwrap();
        assert!(FingerprintSpec::Rank { cmap, order: 2 }.build(&stream).is_err());
    }

    #[test]
    fn pgm_shapes() {
        let g = Grid::from_fn(50, 50, |r, c| (r * c) as f64);
        let pgm = grid_to_pgm(&g, HeatmapScale::Linear);
        let header = b"P5\n50 50\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(pgm.len(), header.len() + 2500);
        assert_eq!(*pgm.last().unwrap(), 255);

        let flat = grid_to_pgm(&Grid::from_fn(4, 4, |_, _| 0.25), HeatmapScale::Log);
        assert!(flat[flat.len() - 16..].iter().all(|&b| b == flat[flat.len() - 1]));
    }

    #[test]
    fn csv_round_trip_precision() {
        let g = Grid::from_vec(1, 2, vec![0.1, 1.0 / 3.0]).unwrap();
        let csv = grid_to_csv(&g);
        let parsed: Vec<f64> = csv.trim().split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(parsed, g.data());
    }

    proptest! {
        #[test]
        fn trfp_round_trip(rows in 1usize..8, cols in 1usize..8, seed in any::<u64>(), entropy in any::<bool>(), fixed in any::<bool>()) {
            let grid = Grid::from_fn(rows, cols, |r, c| {
                let x = seed.wrapping_mul(6364136223846793005).wrapping_add((r * 31 + c) as u64);
                (x >> 11) as f64 / (1u64 << 53) as f64
            });
            let params = if entropy {
                FingerprintParams::Entropy {
                    grid_size: rows as u32 + 1,
                    range_max: 10.8,
                    bandwidth: if fixed { BandwidthRule::Fixed(0.3) } else { BandwidthRule::Scott },
                    fallback_used: fixed,
                }
            } else {
                FingerprintParams::Rank {
                    alpha: 1.5,
                    requested_clusters: 50,
                    used_clusters: 51,
                    power_law: if fixed { PowerLaw::Sampled { samples: 100_000 } } else { PowerLaw::Analytic },
                }
            };
            let fp = Fingerprint {
                meta: FingerprintMeta {
                    doc_id: format!("doc-{seed}"),
                    evaluator_id: "gpt2".into(),
                    vocab_size: 50257,
                    order: 2,
                    count: seed % 100_000,
                    params,
                },
                grid,
            };
            let bytes = encode_fingerprint(&fp).unwrap();
            let back = decode_fingerprint(&bytes).unwrap();
            prop_assert_eq!(&back, &fp);
            prop_assert_eq!(encode_fingerprint(&back).unwrap(), bytes);
        }
    }
}
