use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use trace_core::attribution::{
    attribute, best_threshold, build_pool, calibration_observations, leave_one_author_out, DevGold, PoolEntry,
};
use trace_core::baselines::{extract_features, BaselineMethod, FeatureSet, FeatureVector, TrainConfig};
use trace_core::corpus::{make_author_holdout_splits, make_domain_split, make_id_split, DatasetManifest, SplitPlan, SplitRole};
use trace_core::evaluation::{run_protocol, AttributionMethod, FingerprintMethod, SplitOutcome};
use trace_core::fingerprint::{
    grid_to_csv, grid_to_pgm, read_fingerprint, write_fingerprint, FingerprintSpec, HeatmapScale,
};
use trace_core::scorestream::{read_stream, truncate_stream, ScoreStream};
use trace_core::{EvaluationReport, Fingerprint, Protocol, ReferencePool, RunConfig, ThresholdConfig};

use crate::jobs::{digest, for_each_doc, is_fresh, write_stamp, DocError, Step, Tally};

fn stream_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.trsc"))
}

fn fingerprint_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.trfp"))
}

fn load_stream(dir: &Path, id: &str, cfg: &RunConfig) -> Result<ScoreStream> {
    let path = stream_path(dir, id);
    let s = read_stream(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(match cfg.max_tokens {
        Some(n) => truncate_stream(&s, n),
        None => s,
    })
}

/// Document ids from the manifest, or every `.trsc` stem in `streams`.
pub fn stream_ids(manifest: Option<&DatasetManifest>, streams: &Path) -> Result<Vec<String>> {
    if let Some(m) = manifest {
        return Ok(m.records.iter().map(|r| r.doc_id.clone()).collect());
    }
    let mut ids = Vec::new();
    for entry in fs::read_dir(streams).with_context(|| format!("listing {}", streams.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "trsc") {
            if let Some(stem) = path.file_stem() {
                ids.push(stem.to_string_lossy().into_owned());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

fn vocab_of(manifest: Option<&DatasetManifest>, streams: &Path, ids: &[String]) -> Result<u32> {
    if let Some(m) = manifest {
        return Ok(m.vocab_size);
    }
    let first = ids.first().context("no streams found")?;
    Ok(read_stream(stream_path(streams, first))?.vocab_size)
}

pub fn fingerprint(manifest: Option<&DatasetManifest>, streams: &Path, out: &Path, cfg: &RunConfig) -> Result<Tally> {
    let ids = stream_ids(manifest, streams)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    if ids.is_empty() {
        return Ok(Tally::default());
    }
    let spec = cfg.fingerprint_spec(vocab_of(manifest, streams, &ids)?)?;
    let settings = format!("{}|{:?}", cfg.config_hash(), cfg.max_tokens);
    Ok(for_each_doc("fingerprint", &ids, |id| {
        let input = stream_path(streams, id);
        let bytes = fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
        let target = fingerprint_path(out, id);
        let key = digest(&[&bytes, settings.as_bytes()]);
        if is_fresh(&target, &key) {
            return Ok(Step::Skipped);
        }
        let stream = load_stream(streams, id, cfg)?;
        let fp = spec.build(&stream)?;
        write_fingerprint(&fp, &target)?;
        write_stamp(&target, &key)?;
        Ok(Step::Done)
    }))
}

fn load_fingerprints(dir: &Path, ids: &[String]) -> (BTreeMap<String, Fingerprint>, Vec<DocError>) {
    let loaded: Vec<(String, Result<Fingerprint>)> = ids
        .par_iter()
        .map(|id| {
            let path = fingerprint_path(dir, id);
            let r = read_fingerprint(&path).with_context(|| format!("reading {}", path.display()));
            (id.clone(), r)
        })
        .collect();
    split_results(loaded)
}

fn split_results<T>(items: Vec<(String, Result<T>)>) -> (BTreeMap<String, T>, Vec<DocError>) {
    let mut ok = BTreeMap::new();
    let mut errors = Vec::new();
    for (id, r) in items {
        match r {
            Ok(v) => {
                ok.insert(id, v);
            }
            Err(e) => errors.push(DocError::new(&id, format!("{e:#}"))),
        }
    }
    (ok, errors)
}

fn role_ids(manifest: &DatasetManifest, role: SplitRole) -> Vec<String> {
    manifest
        .records
        .iter()
        .filter(|r| r.split_role == role)
        .map(|r| r.doc_id.clone())
        .collect()
}

pub fn pool(manifest: &DatasetManifest, fingerprints: &Path, out: &Path, cfg: &RunConfig) -> Result<Vec<DocError>> {
    let ids = role_ids(manifest, SplitRole::Train);
    let (fps, errors) = load_fingerprints(fingerprints, &ids);
    let index = manifest.index();
    let entries: Vec<PoolEntry> = fps
        .into_values()
        .map(|fp| {
            let author = index[fp.meta.doc_id.as_str()].author_label.clone();
            PoolEntry::new(fp, author)
        })
        .collect();
    if entries.is_empty() {
        bail!("no training fingerprints could be loaded");
    }
    let pool = build_pool(entries, cfg.metric)?;
    pool.save(out)?;
    eprintln!(
        "pool: {} references from {} authors, {} / {}, config {}",
        pool.len(),
        pool.authors().len(),
        pool.variant(),
        pool.metric(),
        pool.config_hash()
    );
    Ok(errors)
}

pub fn calibrate(manifest: &DatasetManifest, fingerprints: &Path, pool_dir: &Path, out: &Path) -> Result<Vec<DocError>> {
    let pool = ReferencePool::load(pool_dir)?;
    let ids = role_ids(manifest, SplitRole::Dev);
    let (fps, errors) = load_fingerprints(fingerprints, &ids);
    let index = manifest.index();
    let dev: Vec<(Fingerprint, String)> = fps
        .into_iter()
        .map(|(id, fp)| (fp, index[id.as_str()].author_label.clone()))
        .collect();
    if dev.is_empty() {
        bail!("no development fingerprints could be loaded");
    }
    let mut obs = calibration_observations(&pool, &dev)?;
    if !obs.iter().any(|o| o.gold == DevGold::Unseen) {
        obs = leave_one_author_out(obs);
    }
    let cfg = ThresholdConfig {
        metric: pool.metric(),
        variant: pool.variant(),
        threshold: best_threshold(&obs)?,
        config_hash: Some(pool.config_hash().to_string()),
    };
    cfg.save(out)?;
    eprintln!("threshold {} ({} dev observations)", cfg.threshold, obs.len());
    Ok(errors)
}

/// `threshold_file` supplies a calibrated threshold; `value` overrides it or
/// stands alone.
pub fn attribute_files(
    pool_dir: &Path,
    threshold_file: Option<&Path>,
    value: Option<f64>,
    inputs: &[PathBuf],
    out: Option<&Path>,
) -> Result<Vec<DocError>> {
    let pool = ReferencePool::load(pool_dir)?;
    let threshold = match (threshold_file, value) {
        (Some(p), v) => {
            let mut t = ThresholdConfig::load(p)?;
            if let Some(v) = v {
                t.threshold = v;
            }
            t
        }
        (None, Some(v)) => ThresholdConfig {
            metric: pool.metric(),
            variant: pool.variant(),
            threshold: v,
            config_hash: None,
        },
        (None, None) => bail!("attribute needs --threshold-file or --threshold"),
    };
    let threshold = &threshold;
    let results: Vec<(String, Result<trace_core::AttributionResult>)> = inputs
        .par_iter()
        .map(|p| {
            let name = p.display().to_string();
            let r = read_fingerprint(p)
                .map_err(anyhow::Error::from)
                .and_then(|fp| Ok(attribute(&fp, &pool, threshold)?));
            (name, r)
        })
        .collect();
    let (ok, errors) = split_results(results);
    let ok: Vec<_> = ok.into_values().collect();
    let text = serde_json::to_string_pretty(&ok)?;
    match out {
        Some(path) => fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?,
        None => println!("{text}"),
    }
    Ok(errors)
}

/// Fingerprint files given directly, or every `.trfp` in a directory.
pub fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|e| e == "trfp"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

pub enum MethodChoice {
    Trace,
    Baseline(FeatureSet),
}

impl std::str::FromStr for MethodChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "trace" => Ok(MethodChoice::Trace),
            _ => s
                .strip_prefix("baseline-")
                .and_then(|f| f.parse().ok())
                .map(MethodChoice::Baseline)
                .ok_or_else(|| format!("unknown method `{s}` (trace, baseline-rank, baseline-entropy, baseline-gltr)")),
        }
    }
}

impl Clone for MethodChoice {
    fn clone(&self) -> Self {
        match self {
            MethodChoice::Trace => MethodChoice::Trace,
            MethodChoice::Baseline(f) => MethodChoice::Baseline(*f),
        }
    }
}

pub struct EvaluateArgs<'a> {
    pub manifests: &'a [DatasetManifest],
    pub protocol: Protocol,
    pub method: MethodChoice,
    pub streams: Option<&'a Path>,
    pub fingerprints: Option<&'a Path>,
    pub ood_genres: BTreeMap<String, BTreeSet<String>>,
    pub threshold: Option<f64>,
    pub out: &'a Path,
}

pub fn load_ood_genres(path: Option<&Path>) -> Result<BTreeMap<String, BTreeSet<String>>> {
    match path {
        None => Ok(BTreeMap::new()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("{}: expected {{\"author\": [\"genre\", ...]}}", p.display()))
        }
    }
}

fn plans(manifest: &DatasetManifest, protocol: Protocol, ood: &BTreeMap<String, BTreeSet<String>>) -> Result<Vec<SplitPlan>> {
    Ok(match protocol {
        Protocol::Id => vec![make_id_split(manifest, ood)],
        Protocol::OodDomain => {
            if ood.is_empty() {
                bail!("the ood-domain protocol needs --ood-genres");
            }
            vec![make_domain_split(manifest, ood)?]
        }
        Protocol::OodAuthor => make_author_holdout_splits(manifest)?,
    })
}

/// Drops documents without usable inputs from every part of the plan.
fn restrict(plan: &mut SplitPlan, available: &dyn Fn(&str) -> bool) {
    for set in [&mut plan.train_ids, &mut plan.dev_ids, &mut plan.test_ids] {
        set.retain(|id| available(id));
    }
}

fn run_all<M: AttributionMethod>(
    method: &M,
    args: &EvaluateArgs,
    available: &dyn Fn(&str) -> bool,
) -> Result<Vec<SplitOutcome>> {
    let mut jobs = Vec::new();
    for (i, m) in args.manifests.iter().enumerate() {
        for mut plan in plans(m, args.protocol, &args.ood_genres)? {
            if args.manifests.len() > 1 {
                plan.name = format!("split{}:{}", i + 1, plan.name);
            }
            restrict(&mut plan, available);
            jobs.push((m, plan));
        }
    }
    let done = Mutex::new(0usize);
    jobs.par_iter()
        .map(|(m, plan)| {
            let o = run_protocol(method, m, plan, args.protocol, args.threshold)
                .with_context(|| format!("split {}", plan.name))?;
            let mut n = done.lock().unwrap();
            *n += 1;
            eprintln!("[evaluate {}/{}] {}: macro-F1 {:.4} at threshold {:.6}", *n, jobs.len(), o.split, o.f1, o.threshold);
            Ok(o)
        })
        .collect()
}

pub struct Evaluated {
    pub report: EvaluationReport,
    pub errors: Vec<DocError>,
}

pub fn evaluate(args: &EvaluateArgs, cfg: &RunConfig) -> Result<Evaluated> {
    let mut ids: BTreeSet<String> = BTreeSet::new();
    let mut authors: BTreeSet<String> = BTreeSet::new();
    let mut families = BTreeMap::new();
    for m in args.manifests {
        ids.extend(m.records.iter().map(|r| r.doc_id.clone()));
        authors.extend(m.authors.iter().cloned());
        families.extend(m.families());
    }
    let ids: Vec<String> = ids.into_iter().collect();
    let authors: Vec<String> = authors.into_iter().collect();
    let (outcomes, describe, errors) = match &args.method {
        MethodChoice::Trace => {
            let (fps, errors) = match (args.fingerprints, args.streams) {
                (Some(dir), _) => load_fingerprints(dir, &ids),
                (None, Some(streams)) => {
                    let vocab = args.manifests[0].vocab_size;
                    let spec: FingerprintSpec = cfg.fingerprint_spec(vocab)?;
                    let built: Vec<(String, Result<Fingerprint>)> = ids
                        .par_iter()
                        .map(|id| (id.clone(), load_stream(streams, id, cfg).and_then(|s| Ok(spec.build(&s)?))))
                        .collect();
                    split_results(built)
                }
                (None, None) => bail!("evaluate needs --fingerprints or --streams"),
            };
            let method = FingerprintMethod {
                fingerprints: &fps,
                metric: cfg.metric,
            };
            (run_all(&method, args, &|id| fps.contains_key(id))?, method.describe(), errors)
        }
        MethodChoice::Baseline(set) => {
            let streams = args.streams.context("baselines need --streams")?;
            let built: Vec<(String, Result<FeatureVector>)> = ids
                .par_iter()
                .map(|id| (id.clone(), load_stream(streams, id, cfg).and_then(|s| Ok(extract_features(&s, *set)?))))
                .collect();
            let (features, errors) = split_results(built);
            let method = BaselineMethod {
                features: &features,
                feature_set: *set,
                train: TrainConfig::default(),
            };
            (run_all(&method, args, &|id| features.contains_key(id))?, method.describe(), errors)
        }
    };
    let family_map = (args.protocol == Protocol::OodAuthor).then_some(&families);
    let mut report = EvaluationReport::from_outcomes(args.protocol, describe, &outcomes, &authors, family_map)?;
    report.config_hash = Some(cfg.config_hash());
    fs::create_dir_all(args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let stem = format!("{}-{}", args.protocol, report.method);
    fs::write(args.out.join(format!("report-{stem}.json")), serde_json::to_string_pretty(&report)? + "\n")?;
    fs::write(args.out.join(format!("outcomes-{stem}.json")), serde_json::to_string_pretty(&outcomes)? + "\n")?;
    fs::write(args.out.join(format!("confusion-{stem}.csv")), report.confusion.to_csv(false))?;
    fs::write(args.out.join(format!("confusion-{stem}-normalized.csv")), report.confusion.to_csv(true))?;
    fs::write(
        args.out.join(format!("confusion-{stem}.pgm")),
        grid_to_pgm(&report.confusion.normalized_grid(), HeatmapScale::Linear),
    )?;
    Ok(Evaluated { report, errors })
}

pub fn export_heatmap(input: &Path, out: &Path, scale: Option<HeatmapScale>, csv: Option<&Path>) -> Result<()> {
    let fp = read_fingerprint(input).with_context(|| format!("reading {}", input.display()))?;
    let scale = scale.unwrap_or_else(|| HeatmapScale::default_for(fp.variant()));
    fs::write(out, grid_to_pgm(&fp.grid, scale)).with_context(|| format!("writing {}", out.display()))?;
    if let Some(csv) = csv {
        fs::write(csv, grid_to_csv(&fp.grid)).with_context(|| format!("writing {}", csv.display()))?;
    }
    Ok(())
}
