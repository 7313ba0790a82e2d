use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use trace_core::fingerprint::{BandwidthRule, PowerLaw, Variant};
use trace_core::{Metric, RunConfig};

/// Parameter flags shared by every command that builds or compares fingerprints.
#[derive(Args, Debug, Clone, Default)]
pub struct ParamArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub metric: Option<Metric>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub clusters: Option<u32>,
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub order: Option<u8>,
    /// Keep only the first N scored tokens of every stream.
    #[arg(long)]
    pub max_tokens: Option<usize>,
    /// `scott` or a fixed kernel width in nats.
    #[arg(long)]
    pub bandwidth: Option<String>,
    /// `analytic` or `sampled[:N]`.
    #[arg(long)]
    pub power_law: Option<String>,
}

/// Scoring flags.
#[derive(Args, Debug, Clone, Default)]
pub struct ScoringArgs {
    #[arg(long)]
    pub evaluator: Option<String>,
    #[arg(long)]
    pub context: Option<u32>,
    /// Whitespace tokens dropped from each end of a cleaned document.
    #[arg(long)]
    pub trim: Option<usize>,
}

fn parse_bandwidth(s: &str) -> Result<BandwidthRule> {
    if s == "scott" {
        return Ok(BandwidthRule::Scott);
    }
    let h: f64 = s.parse().with_context(|| format!("bandwidth `{s}` is neither `scott` nor a number"))?;
    Ok(BandwidthRule::Fixed(h))
}

fn parse_power_law(s: &str) -> Result<PowerLaw> {
    match s.split_once(':') {
        None if s == "analytic" => Ok(PowerLaw::Analytic),
        None if s == "sampled" => Ok(PowerLaw::Sampled {
            samples: trace_core::fingerprint::rank::DEFAULT_POWER_LAW_SAMPLES,
        }),
        Some(("sampled", n)) => Ok(PowerLaw::Sampled {
            samples: n.parse().with_context(|| format!("bad sample count `{n}`"))?,
        }),
        _ => bail!("power law `{s}` is not `analytic`, `sampled` or `sampled:N`"),
    }
}

impl ParamArgs {
    pub fn resolve(&self, scoring: Option<&ScoringArgs>) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident <- $value:expr),* $(,)?) => {
                $(if let Some(v) = $value { c.$field = v; })*
            };
        }
        set! {
            variant <- self.variant,
            metric <- self.metric,
            alpha <- self.alpha,
            clusters <- self.clusters,
            grid <- self.grid,
            order <- self.order,
        }
        if self.max_tokens.is_some() {
            c.max_tokens = self.max_tokens;
        }
        if let Some(b) = &self.bandwidth {
            c.bandwidth = parse_bandwidth(b)?;
        }
        if let Some(p) = &self.power_law {
            c.power_law = parse_power_law(p)?;
        }
        if let Some(s) = scoring {
            set! {
                evaluator_id <- s.evaluator.clone(),
                context_window <- s.context,
                head_tail_trim <- s.trim,
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_defaults() {
        let p = ParamArgs {
            variant: Some(Variant::Rank),
            grid: Some(20),
            power_law: Some("sampled:500".into()),
            ..Default::default()
        };
        let c = p.resolve(None).unwrap();
        assert_eq!(c.variant, Variant::Rank);
        assert_eq!(c.grid, 20);
        assert_eq!(c.power_law, PowerLaw::Sampled { samples: 500 });
        assert_eq!(c.clusters, 50);
    }

    #[test]
    fn bad_values() {
        assert!(parse_bandwidth("wide").is_err());
        assert_eq!(parse_bandwidth("0.5").unwrap(), BandwidthRule::Fixed(0.5));
        assert!(parse_power_law("zipf").is_err());
        let p = ParamArgs {
            order: Some(3),
            ..Default::default()
        };
        assert!(p.resolve(None).is_err());
    }
}
