//! Run configuration shared by every CLI command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::DEFAULT_HEAD_TAIL_TRIM;
use crate::error::{Error, Result};
use crate::fingerprint::rank::build_cluster_map_with;
use crate::fingerprint::{BandwidthRule, FingerprintSpec, PowerLaw, Variant};
use crate::similarity::Metric;

pub const DEFAULT_ALPHA: f64 = 1.5;
pub const DEFAULT_CLUSTERS: u32 = 50;
pub const DEFAULT_GRID: usize = 50;
pub const DEFAULT_ORDER: u8 = 2;
pub const DEFAULT_CONTEXT_WINDOW: u32 = 1024;
pub const DEFAULT_EVALUATOR: &str = "gpt2";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunPaths {
    pub manifest: Option<PathBuf>,
    pub streams: Option<PathBuf>,
    pub pool: Option<PathBuf>,
    pub reports: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    pub metric: Metric,
    pub alpha: f64,
    pub clusters: u32,
    pub grid: usize,
    pub order: u8,
    pub max_tokens: Option<usize>,
    pub evaluator_id: String,
    pub context_window: u32,
    pub bandwidth: BandwidthRule,
    pub power_law: PowerLaw,
    pub head_tail_trim: usize,
    pub paths: RunPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::Entropy,
            metric: Metric::Js,
            alpha: DEFAULT_ALPHA,
            clusters: DEFAULT_CLUSTERS,
            grid: DEFAULT_GRID,
            order: DEFAULT_ORDER,
            max_tokens: None,
            evaluator_id: DEFAULT_EVALUATOR.to_string(),
            context_window: DEFAULT_CONTEXT_WINDOW,
            bandwidth: BandwidthRule::Scott,
            power_law: PowerLaw::Analytic,
            head_tail_trim: DEFAULT_HEAD_TAIL_TRIM,
            paths: RunPaths::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if self.clusters == 0 {
            return bad("clusters must be >= 1".into());
        }
        if self.grid < 2 {
            return bad(format!("grid must be >= 2, got {}", self.grid));
        }
        match (self.variant, self.order) {
            (_, 2) | (Variant::Rank, 3) => {}
            (v, o) => return bad(format!("order {o} is not supported for the {v} variant")),
        }
        if self.context_window < 2 {
            return bad(format!("context window must be >= 2, got {}", self.context_window));
        }
        if self.evaluator_id.is_empty() {
            return bad("evaluator id must not be empty".into());
        }
        if self.max_tokens == Some(0) {
            return bad("max_tokens must be positive".into());
        }
        if let BandwidthRule::Fixed(h) = self.bandwidth {
            if !(h.is_finite() && h > 0.0) {
                return bad(format!("fixed bandwidth must be > 0, got {h}"));
            }
        }
        Ok(())
    }

    /// Fingerprint builder for streams over a vocabulary of `vocab_size`.
    pub fn fingerprint_spec(&self, vocab_size: u32) -> Result<FingerprintSpec> {
        self.validate()?;
        Ok(match self.variant {
            Variant::Rank => FingerprintSpec::Rank {
                cmap: build_cluster_map_with(vocab_size, self.alpha, self.clusters, self.power_law)?,
                order: self.order,
            },
            Variant::Entropy => FingerprintSpec::Entropy {
                grid_size: self.grid,
                bandwidth: self.bandwidth,
            },
        })
    }

    /// Digest of the inputs that determine score streams.
    pub fn scoring_hash(&self) -> String {
        short_digest(&format!(
            "eval={}|ctx={}|trim={}",
            self.evaluator_id, self.context_window, self.head_tail_trim
        ))
    }

    /// Digest of every parameter that shapes fingerprints or decisions. Paths
    /// are excluded.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.paths = RunPaths::default();
        short_digest(&serde_json::to_string(&c).expect("config serializes"))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn short_digest(s: &str) -> String {
    Sha256::digest(s.as_bytes())[..8].iter().map(|b| format!("{b:02x}")).collect()
}
