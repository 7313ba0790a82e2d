//! Reference pools, nearest-fingerprint attribution with rejection, and
//! threshold calibration on a development set.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{macro_f1, Label};
use crate::fingerprint::{read_fingerprint, write_fingerprint, Fingerprint, Variant};
use crate::scorestream::write_atomic;
use crate::similarity::Metric;

pub const POOL_INDEX_FILE: &str = "index.json";

#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub fingerprint: Fingerprint,
    pub author: String,
    pub doc_id: String,
}

impl PoolEntry {
    pub fn new(fingerprint: Fingerprint, author: impl Into<String>) -> Self {
        let doc_id = fingerprint.meta.doc_id.clone();
        PoolEntry {
            fingerprint,
            author: author.into(),
            doc_id,
        }
    }
}

/// One reference fingerprint per training document; entries of the same
/// author are never merged.
#[derive(Clone, Debug)]
pub struct ReferencePool {
    entries: Vec<PoolEntry>,
    variant: Variant,
    metric: Metric,
    config_hash: String,
    shape: (usize, usize),
}

pub fn build_pool(entries: Vec<PoolEntry>, metric: Metric) -> Result<ReferencePool> {
    let first = entries.first().ok_or(Error::Empty("reference pool"))?;
    let variant = first.fingerprint.variant();
    let config_hash = first.fingerprint.config_hash();
    let shape = first.fingerprint.grid.shape();
    for e in &entries {
        if e.fingerprint.variant() != variant
            || e.fingerprint.grid.shape() != shape
            || e.fingerprint.config_hash() != config_hash
        {
            return Err(Error::ConfigMismatch(format!(
                "pool entry `{}` ({} {:?}, config {}) differs from `{}` ({variant} {shape:?}, config {config_hash})",
                e.doc_id,
                e.fingerprint.variant(),
                e.fingerprint.grid.shape(),
                e.fingerprint.config_hash(),
                first.doc_id
            )));
        }
        if e.author.is_empty() {
            return Err(Error::InvalidParameter(format!("pool entry `{}` has no author", e.doc_id)));
        }
    }
    Ok(ReferencePool {
        entries,
        variant,
        metric,
        config_hash,
        shape,
    })
}

impl ReferencePool {
    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    /// Sorted distinct author labels.
    pub fn authors(&self) -> Vec<String> {
        let mut a: Vec<String> = self.entries.iter().map(|e| e.author.clone()).collect();
        a.sort();
        a.dedup();
        a
    }

    pub fn check_compatible(&self, fp: &Fingerprint) -> Result<()> {
        if fp.variant() != self.variant || fp.grid.shape() != self.shape || fp.config_hash() != self.config_hash {
            return Err(Error::ConfigMismatch(format!(
                "fingerprint `{}` ({} {:?}, config {}) does not match pool ({} {:?}, config {})",
                fp.meta.doc_id,
                fp.variant(),
                fp.grid.shape(),
                fp.config_hash(),
                self.variant,
                self.shape,
                self.config_hash
            )));
        }
        Ok(())
    }

    /// Distance from `fp` to every entry, in entry order.
    pub fn distances(&self, fp: &Fingerprint) -> Result<Vec<f64>> {
        self.check_compatible(fp)?;
        self.entries
            .iter()
            .map(|e| self.metric.between(fp, &e.fingerprint))
            .collect()
    }

    /// Smallest distance per author.
    pub fn per_author_best(&self, fp: &Fingerprint) -> Result<BTreeMap<String, f64>> {
        let d = self.distances(fp)?;
        let mut best: BTreeMap<String, f64> = BTreeMap::new();
        for (e, dist) in self.entries.iter().zip(d) {
            best.entry(e.author.clone())
                .and_modify(|b| *b = b.min(dist))
                .or_insert(dist);
        }
        Ok(best)
    }

    /// Writes `index.json` plus one `TRFP` file per entry into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = PoolIndex {
            variant: self.variant,
            metric: self.metric,
            config_hash: self.config_hash.clone(),
            entries: Vec::with_capacity(self.entries.len()),
        };
        for (i, e) in self.entries.iter().enumerate() {
            let file = format!("entry-{i:05}.trfp");
            write_fingerprint(&e.fingerprint, dir.join(&file))?;
            index.entries.push(PoolIndexEntry {
                doc_id: e.doc_id.clone(),
                author: e.author.clone(),
                file,
            });
        }
        let json = serde_json::to_vec_pretty(&index)?;
        write_atomic(&dir.join(POOL_INDEX_FILE), &json)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(POOL_INDEX_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: PoolIndex = serde_json::from_str(&text)?;
        let mut entries = Vec::with_capacity(index.entries.len());
        for e in index.entries {
            let fingerprint = read_fingerprint(dir.join(&e.file))?;
            entries.push(PoolEntry {
                fingerprint,
                author: e.author,
                doc_id: e.doc_id,
            });
        }
        let pool = build_pool(entries, index.metric)?;
        if pool.config_hash != index.config_hash || pool.variant != index.variant {
            return Err(Error::ConfigMismatch(format!(
                "pool index says {} / {} but entries are {} / {}",
                index.variant, index.config_hash, pool.variant, pool.config_hash
            )));
        }
        Ok(pool)
    }
}

#[derive(Serialize, Deserialize)]
struct PoolIndex {
    variant: Variant,
    metric: Metric,
    config_hash: String,
    entries: Vec<PoolIndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct PoolIndexEntry {
    doc_id: String,
    author: String,
    file: String,
}

/// Rejection threshold in distance units: reject when the best distance is
/// strictly greater.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    pub metric: Metric,
    pub variant: Variant,
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl ThresholdConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ThresholdConfig = serde_json::from_str(&text)?;
        if !cfg.threshold.is_finite() {
            return Err(Error::InvalidParameter("threshold must be finite".into()));
        }
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &serde_json::to_vec_pretty(self)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub doc_id: String,
    pub predicted_label: Label,
    pub best_distance: f64,
    pub nearest_doc_id: String,
    pub per_author_best: BTreeMap<String, f64>,
    pub threshold_used: f64,
}

/// Attributes `test_fp` to the author of its single nearest reference, or
/// rejects it when that distance exceeds the threshold. Ties are broken by
/// author label, then doc id.
pub fn attribute(test_fp: &Fingerprint, pool: &ReferencePool, threshold: &ThresholdConfig) -> Result<AttributionResult> {
    if threshold.metric != pool.metric || threshold.variant != pool.variant {
        return Err(Error::ConfigMismatch(format!(
            "threshold is for {} / {}, pool uses {} / {}",
            threshold.variant, threshold.metric, pool.variant, pool.metric
        )));
    }
    if let Some(hash) = &threshold.config_hash {
        if hash != &pool.config_hash {
            return Err(Error::ConfigMismatch(format!(
                "threshold calibrated for config {hash}, pool is {}",
                pool.config_hash
            )));
        }
    }
    let distances = pool.distances(test_fp)?;
    let mut best: Option<(f64, &str, &str)> = None;
    let mut per_author_best: BTreeMap<String, f64> = BTreeMap::new();
    for (e, &d) in pool.entries.iter().zip(&distances) {
        per_author_best
            .entry(e.author.clone())
            .and_modify(|b| *b = b.min(d))
            .or_insert(d);
        let cand = (d, e.author.as_str(), e.doc_id.as_str());
        let better = match best {
            None => true,
            Some(b) => cand.0.total_cmp(&b.0).then(cand.1.cmp(b.1)).then(cand.2.cmp(b.2)).is_lt(),
        };
        if better {
            best = Some(cand);
        }
    }
    let (best_distance, author, nearest) = best.expect("pools are never empty");
    let predicted_label = if best_distance > threshold.threshold {
        Label::Reject
    } else {
        Label::Author(author.to_string())
    };
    Ok(AttributionResult {
        doc_id: test_fp.meta.doc_id.clone(),
        predicted_label,
        best_distance,
        nearest_doc_id: nearest.to_string(),
        per_author_best,
        threshold_used: threshold.threshold,
    })
}

/// Gold label of a development document for calibration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DevGold {
    Known(String),
    /// The document's author is absent from the pool; rejecting it is correct.
    Unseen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevObservation {
    pub doc_id: String,
    pub gold: DevGold,
    pub per_author_best: BTreeMap<String, f64>,
}

impl DevObservation {
    /// Smallest distance and its author (lexicographically first on ties).
    pub fn best(&self) -> Option<(&str, f64)> {
        let mut best: Option<(&str, f64)> = None;
        for (a, &d) in &self.per_author_best {
            if best.map_or(true, |(_, b)| d < b) {
                best = Some((a.as_str(), d));
            }
        }
        best
    }
}

/// Decision for a per-author distance table at `threshold`.
pub fn predict_at(per_author_best: &BTreeMap<String, f64>, threshold: f64) -> Label {
    let mut best: Option<(&String, f64)> = None;
    for (a, &d) in per_author_best {
        if best.map_or(true, |(_, b)| d < b) {
            best = Some((a, d));
        }
    }
    match best {
        Some((a, d)) if d <= threshold => Label::Author(a.clone()),
        _ => Label::Reject,
    }
}

/// Development macro-F1 at `threshold`. Unseen documents form one extra
/// class whose correct prediction is a rejection.
pub fn dev_macro_f1(dev: &[DevObservation], threshold: f64) -> f64 {
    let golds: Vec<Label> = dev
        .iter()
        .map(|o| match &o.gold {
            DevGold::Known(a) => Label::Author(a.clone()),
            DevGold::Unseen => Label::Reject,
        })
        .collect();
    let preds: Vec<Label> = dev.iter().map(|o| predict_at(&o.per_author_best, threshold)).collect();
    let mut labels: Vec<Label> = golds.clone();
    labels.sort();
    labels.dedup();
    macro_f1(&golds, &preds, &labels).expect("equal lengths by construction")
}

fn sentinel_eps(d: f64) -> f64 {
    1e-9 * d.abs().max(1.0)
}

/// Candidate thresholds: every observed best distance and a point just below it.
pub fn candidate_thresholds(dev: &[DevObservation]) -> Vec<f64> {
    let mut c: Vec<f64> = dev
        .iter()
        .filter_map(|o| o.best().map(|(_, d)| d))
        .flat_map(|d| [d, d - sentinel_eps(d)])
        .collect();
    c.sort_by(f64::total_cmp);
    c.dedup();
    c
}

/// Picks the threshold with the best development macro-F1; among equally
/// good thresholds the largest wins.
pub fn calibrate_threshold(dev: &[DevObservation], metric: Metric, variant: Variant) -> Result<ThresholdConfig> {
    Ok(ThresholdConfig {
        metric,
        variant,
        threshold: best_threshold(dev)?,
        config_hash: None,
    })
}

/// The threshold value chosen by [`calibrate_threshold`].
pub fn best_threshold(dev: &[DevObservation]) -> Result<f64> {
    if dev.is_empty() {
        return Err(Error::Empty("development set"));
    }
    if !dev.iter().any(|o| matches!(o.gold, DevGold::Known(_))) {
        return Err(Error::InvalidParameter("development set has no known-author documents".into()));
    }
    let mut best: Option<(f64, f64)> = None;
    for t in candidate_thresholds(dev) {
        let f1 = dev_macro_f1(dev, t);
        if best.map_or(true, |(bf, bt)| f1 > bf || (f1 == bf && t > bt)) {
            best = Some((f1, t));
        }
    }
    let (_, threshold) = best.ok_or(Error::Empty("development distances"))?;
    Ok(threshold)
}

/// Known-author observations for each dev document, plus an unseen copy of
/// each with its own author's references removed (leave-one-author-out).
/// The unseen copies are only produced when at least two authors remain.
pub fn leave_one_author_out(known: Vec<DevObservation>) -> Vec<DevObservation> {
    let mut out = Vec::with_capacity(known.len() * 2);
    for o in known {
        if let DevGold::Known(author) = &o.gold {
            let mut without = o.per_author_best.clone();
            without.remove(author);
            if !without.is_empty() {
                out.push(DevObservation {
                    doc_id: format!("{}#unseen", o.doc_id),
                    gold: DevGold::Unseen,
                    per_author_best: without,
                });
            }
        }
        out.push(o);
    }
    out
}

/// Calibration table for dev fingerprints against `pool`. Dev documents
/// whose author is not in the pool are marked unseen.
pub fn calibration_observations(pool: &ReferencePool, dev: &[(Fingerprint, String)]) -> Result<Vec<DevObservation>> {
    let authors = pool.authors();
    let mut obs = Vec::with_capacity(dev.len());
    for (fp, author) in dev {
        let gold = if authors.binary_search(author).is_ok() {
            DevGold::Known(author.clone())
        } else {
            DevGold::Unseen
        };
        obs.push(DevObservation {
            doc_id: fp.meta.doc_id.clone(),
            gold,
            per_author_best: pool.per_author_best(fp)?,
        });
    }
    Ok(obs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprint::{FingerprintMeta, FingerprintParams, BandwidthRule};
    use crate::grid::Grid;

    fn fp(doc: &str, values: &[f64], g: u32) -> Fingerprint {
        let mut grid = Grid::from_vec(1, values.len(), values.to_vec()).unwrap();
        grid.normalize();
        Fingerprint {
            meta: FingerprintMeta {
                doc_id: doc.into(),
                evaluator_id: "gpt2".into(),
                vocab_size: 50257,
                order: 2,
                count: 10,
                params: FingerprintParams::Entropy {
                    grid_size: g,
                    range_max: 10.0,
                    bandwidth: BandwidthRule::Scott,
                    fallback_used: false,
                },
            },
            grid,
        }
    }

    fn thr(t: f64) -> ThresholdConfig {
        ThresholdConfig {
            metric: Metric::Js,
            variant: Variant::Entropy,
            threshold: t,
            config_hash: None,
        }
    }

    #[test]
    fn pool_cardinality() {
        let mut entries = Vec::new();
        for a in 0..9 {
            for d in 0..5 {
                entries.push(PoolEntry::new(fp(&format!("a{a}d{d}"), &[1.0, a as f64, d as f64], 3), format!("A{a}")));
            }
        }
        let pool = build_pool(entries, Metric::Js).unwrap();
        assert_eq!(pool.len(), 45);
        assert_eq!(pool.authors().len(), 9);
    }

    #[test]
    fn pool_rejects_mixed_configs() {
        let entries = vec![
            PoolEntry::new(fp("a", &[1.0, 2.0], 50), "A"),
            PoolEntry::new(fp("b", &[1.0, 2.0], 60), "B"),
        ];
        assert!(matches!(build_pool(entries, Metric::Js), Err(Error::ConfigMismatch(_))));
        assert!(build_pool(vec![], Metric::Js).is_err());
    }

    #[test]
    fn exact_match_attributes() {
        let pool = build_pool(
            vec![PoolEntry::new(fp("a", &[1.0, 2.0, 3.0], 3), "A"), PoolEntry::new(fp("b", &[3.0, 2.0, 1.0], 3), "B")],
            Metric::Js,
        )
        .unwrap();
        let r = attribute(&fp("t", &[1.0, 2.0, 3.0], 3), &pool, &thr(0.0)).unwrap();
        assert_eq!(r.predicted_label, Label::Author("A".into()));
        assert_eq!(r.best_distance, 0.0);
        assert_eq!(r.nearest_doc_id, "a");
    }

    #[test]
    fn far_test_rejected() {
        // disjoint supports: distance exactly 1
        let pool = build_pool(vec![PoolEntry::new(fp("a", &[1.0, 0.0], 2), "A")], Metric::Js).unwrap();
        let r = attribute(&fp("t", &[0.0, 1.0], 2), &pool, &thr(0.95)).unwrap();
        assert_eq!(r.predicted_label, Label::Reject);
        assert!(r.best_distance > r.threshold_used);
        // equality attributes
        let r = attribute(&fp("t", &[0.0, 1.0], 2), &pool, &thr(1.0)).unwrap();
        assert_eq!(r.predicted_label, Label::Author("A".into()));
    }

    #[test]
    fn tie_goes_to_smaller_label() {
        let same = [0.5, 0.5];
        let pool = build_pool(
            vec![PoolEntry::new(fp("b1", &same, 2), "B"), PoolEntry::new(fp("a1", &same, 2), "A")],
            Metric::Js,
        )
        .unwrap();
        let r = attribute(&fp("t", &[0.2, 0.8], 2), &pool, &thr(1.0)).unwrap();
        assert_eq!(r.predicted_label, Label::Author("A".into()));
        assert_eq!(r.nearest_doc_id, "a1");
    }

    #[test]
    fn threshold_metric_must_match() {
        let pool = build_pool(vec![PoolEntry::new(fp("a", &[1.0, 0.0], 2), "A")], Metric::Js).unwrap();
        let mut t = thr(0.5);
        t.metric = Metric::Cosine;
        assert!(attribute(&fp("t", &[1.0, 0.0], 2), &pool, &t).is_err());
        let mut t = thr(0.5);
        t.config_hash = Some("deadbeef".into());
        assert!(attribute(&fp("t", &[1.0, 0.0], 2), &pool, &t).is_err());
    }

    #[test]
    fn pool_save_load() {
        let pool = build_pool(
            vec![PoolEntry::new(fp("a", &[1.0, 2.0], 2), "A"), PoolEntry::new(fp("b", &[2.0, 1.0], 2), "B")],
            Metric::NormMean,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        pool.save(dir.path()).unwrap();
        let back = ReferencePool::load(dir.path()).unwrap();
        assert_eq!(back.entries(), pool.entries());
        assert_eq!(back.metric(), Metric::NormMean);
    }

    fn obs(id: &str, gold: Option<&str>, best: &[(&str, f64)]) -> DevObservation {
        DevObservation {
            doc_id: id.into(),
            gold: gold.map_or(DevGold::Unseen, |g| DevGold::Known(g.into())),
            per_author_best: best.iter().map(|(a, d)| (a.to_string(), *d)).collect(),
        }
    }

    #[test]
    fn separable_calibration() {
        let dev = vec![
            obs("k1", Some("A"), &[("A", 0.1), ("B", 0.9)]),
            obs("k2", Some("B"), &[("A", 0.8), ("B", 0.3)]),
            obs("u1", None, &[("A", 0.7), ("B", 0.75)]),
            obs("u2", None, &[("A", 0.95), ("B", 0.9)]),
        ];
        let t = calibrate_threshold(&dev, Metric::Js, Variant::Entropy).unwrap().threshold;
        assert!(t > 0.3 && t < 0.7, "{t}");
        assert_eq!(dev_macro_f1(&dev, t), 1.0);
        let larger: Vec<f64> = candidate_thresholds(&dev).into_iter().filter(|&c| c > t && c < 0.7).collect();
        assert!(larger.is_empty(), "{larger:?}");
    }

    #[test]
    fn no_unseen_never_rejects() {
        let dev = vec![
            obs("k1", Some("A"), &[("A", 0.1), ("B", 0.9)]),
            obs("k2", Some("B"), &[("A", 0.8), ("B", 0.45)]),
        ];
        let t = calibrate_threshold(&dev, Metric::Js, Variant::Entropy).unwrap().threshold;
        assert_eq!(t, 0.45);
    }

    #[test]
    fn calibration_errors() {
        assert!(calibrate_threshold(&[], Metric::Js, Variant::Rank).is_err());
        let only_unseen = vec![obs("u", None, &[("A", 0.5)])];
        assert!(calibrate_threshold(&only_unseen, Metric::Js, Variant::Rank).is_err());
    }

    #[test]
    fn loao_adds_unseen_copies() {
        let known = vec![obs("k1", Some("A"), &[("A", 0.1), ("B", 0.9)]), obs("k2", Some("A"), &[("A", 0.2)])];
        let all = leave_one_author_out(known);
        assert_eq!(all.len(), 3);
        assert_eq!(all[0].gold, DevGold::Unseen);
        assert_eq!(all[0].per_author_best.len(), 1);
        assert_eq!(all[0].best(), Some(("B", 0.9)));
    }

    #[test]
    fn raising_threshold_never_adds_rejections() {
        let dev: Vec<DevObservation> = (0..30)
            .map(|i| obs(&format!("d{i}"), Some("A"), &[("A", (i as f64 * 0.37) % 1.0), ("B", 0.5)]))
            .collect();
        let mut last = usize::MAX;
        for t in candidate_thresholds(&dev) {
            let rejected = dev.iter().filter(|o| predict_at(&o.per_author_best, t) == Label::Reject).count();
            assert!(rejected <= last);
            last = rejected;
        }
    }
}
