//! `trace`: scoring dispatch, fingerprinting, pools, calibration,
//! attribution, evaluation and heatmap export.

mod commands;
mod jobs;
mod params;
mod score;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;
use trace_core::corpus::load_manifest;
use trace_core::fingerprint::HeatmapScale;
use trace_core::{DatasetManifest, Protocol};

use commands::{EvaluateArgs, MethodChoice};
use jobs::{DocError, Tally};
use params::{ParamArgs, ScoringArgs};

#[derive(Parser)]
#[command(name = "trace", version, about = "Score-transition fingerprints for attributing generated text")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Clean each manifest document and run the scorer from TRACE_SCORER_CMD on it.
    Score {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for `.trsc` streams.
        #[arg(long)]
        streams: PathBuf,
        #[arg(long, env = score::SCORER_ENV, hide_env_values = true)]
        scorer_cmd: String,
        #[command(flatten)]
        scoring: ScoringArgs,
    },
    /// Build one `.trfp` fingerprint per stream.
    Fingerprint {
        /// Restrict to the manifest's documents (default: every stream in --streams).
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        streams: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        params: ParamArgs,
    },
    /// Build a reference pool from the manifest's training fingerprints.
    Pool {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        fingerprints: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        params: ParamArgs,
    },
    /// Choose a rejection threshold on the manifest's dev fingerprints.
    Calibrate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        fingerprints: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        /// Threshold file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Attribute fingerprints (files or directories) against a pool.
    Attribute {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        threshold_file: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        /// JSON results file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Run an evaluation protocol over one or more manifests (one per split).
    Evaluate {
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        #[arg(long, default_value = "id")]
        protocol: Protocol,
        /// trace, baseline-rank, baseline-entropy or baseline-gltr.
        #[arg(long, default_value = "trace")]
        method: MethodChoice,
        #[arg(long)]
        streams: Option<PathBuf>,
        /// Precomputed fingerprints (trace only); otherwise built from --streams.
        #[arg(long)]
        fingerprints: Option<PathBuf>,
        /// JSON map from author to the genres held out for it.
        #[arg(long)]
        ood_genres: Option<PathBuf>,
        /// Fixed threshold instead of dev calibration.
        #[arg(long)]
        threshold: Option<f64>,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        params: ParamArgs,
    },
    /// Render a fingerprint as a PGM image.
    ExportHeatmap {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// linear or log (default: log for rank, linear for entropy).
        #[arg(long)]
        scale: Option<HeatmapScale>,
        /// Also write the raw grid as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print the effective run configuration.
    Config {
        #[command(flatten)]
        params: ParamArgs,
        #[command(flatten)]
        scoring: ScoringArgs,
    },
}

fn manifest(path: &Path) -> Result<DatasetManifest> {
    load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn summarize(what: &str, t: Tally) -> Vec<DocError> {
    eprintln!("{what}: {} done, {} up to date, {} failed", t.done, t.skipped, t.errors.len());
    t.errors
}

fn run(cli: Cli) -> Result<Vec<DocError>> {
    match cli.command {
        Cmd::Score {
            manifest: m,
            streams,
            scorer_cmd,
            scoring,
        } => {
            let cfg = ParamArgs::default().resolve(Some(&scoring))?;
            let m = manifest(&m)?;
            Ok(summarize("score", score::run(&m, &streams, &scorer_cmd, &cfg)?))
        }
        Cmd::Fingerprint {
            manifest: m,
            streams,
            out,
            params,
        } => {
            let cfg = params.resolve(None)?;
            let m = m.as_deref().map(manifest).transpose()?;
            Ok(summarize("fingerprint", commands::fingerprint(m.as_ref(), &streams, &out, &cfg)?))
        }
        Cmd::Pool {
            manifest: m,
            fingerprints,
            out,
            params,
        } => {
            let cfg = params.resolve(None)?;
            commands::pool(&manifest(&m)?, &fingerprints, &out, &cfg)
        }
        Cmd::Calibrate {
            manifest: m,
            fingerprints,
            pool,
            out,
        } => commands::calibrate(&manifest(&m)?, &fingerprints, &pool, &out),
        Cmd::Attribute {
            pool,
            threshold_file,
            threshold,
            out,
            inputs,
        } => {
            let files = commands::expand_inputs(&inputs)?;
            commands::attribute_files(&pool, threshold_file.as_deref(), threshold, &files, out.as_deref())
        }
        Cmd::Evaluate {
            manifest: paths,
            protocol,
            method,
            streams,
            fingerprints,
            ood_genres,
            threshold,
            out,
            params,
        } => {
            let cfg = params.resolve(None)?;
            let manifests = paths.iter().map(|p| manifest(p)).collect::<Result<Vec<_>>>()?;
            let args = EvaluateArgs {
                manifests: &manifests,
                protocol,
                method,
                streams: streams.as_deref(),
                fingerprints: fingerprints.as_deref(),
                ood_genres: commands::load_ood_genres(ood_genres.as_deref())?,
                threshold,
                out: &out,
            };
            let done = commands::evaluate(&args, &cfg)?;
            let r = &done.report;
            println!(
                "{} {}: macro-F1 {:.4} ± {:.4} over {} split(s)",
                r.protocol,
                r.method,
                r.mean_f1,
                r.std_f1,
                r.per_split_f1.len()
            );
            if let Some(rate) = r.rejection_rate {
                println!("held-out rejection rate {rate:.4}");
            }
            if let Some(fc) = r.family_credit_f1 {
                println!("family credit {fc:.4}");
            }
            Ok(done.errors)
        }
        Cmd::ExportHeatmap { input, out, scale, csv } => {
            commands::export_heatmap(&input, &out, scale, csv.as_deref())?;
            Ok(Vec::new())
        }
        Cmd::Config { params, scoring } => {
            let cfg = params.resolve(Some(&scoring))?;
            let mut v = serde_json::to_value(&cfg)?;
            v["config_hash"] = json!(cfg.config_hash());
            println!("{}", serde_json::to_string_pretty(&v)?);
            Ok(Vec::new())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("warning: could not size the thread pool: {e}");
        }
    }
    let errors = match run(cli) {
        Ok(errors) => errors,
        Err(e) => vec![DocError {
            doc_id: None,
            error: format!("{e:#}"),
        }],
    };
    if errors.is_empty() {
        return ExitCode::SUCCESS;
    }
    eprintln!("{}", json!({ "errors": errors }));
    ExitCode::FAILURE
}
