//! Transition fingerprints for attributing long-form machine-generated text
//! to the language model that wrote it.
//!
//! A document is first scored by a small evaluator model into a
//! [`ScoreStream`] of per-token ranks and entropies. Consecutive score pairs
//! are then summarised into a square grid (a *fingerprint*), either by binning
//! ranks into equal-probability clusters ([`fingerprint::rank`]) or by
//! smoothing entropy pairs with a Gaussian KDE ([`fingerprint::entropy`]).
//! A test fingerprint is attributed to the author of its nearest reference
//! fingerprint, or rejected when even the nearest one is too far away.

pub mod attribution;
pub mod baselines;
pub mod config;
pub mod corpus;
mod error;
pub mod evaluation;
pub mod fingerprint;
pub mod grid;
pub mod scorestream;
pub mod similarity;

pub use attribution::{AttributionResult, ReferencePool, ThresholdConfig};
pub use config::RunConfig;
pub use corpus::{DatasetManifest, DocumentRecord, SplitPlan, SplitRole};
pub use error::{Error, Result};
pub use evaluation::{EvaluationReport, Label, Protocol};
pub use fingerprint::{Fingerprint, FingerprintMeta, Variant};
pub use grid::Grid;
pub use scorestream::ScoreStream;
pub use similarity::Metric;
