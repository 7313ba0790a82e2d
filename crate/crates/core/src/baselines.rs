//! Metric baselines: mean rank, mean entropy and GLTR rank-bucket shares,
//! each fed to a multinomial logistic-regression classifier.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attribution::{DevGold, DevObservation};
use crate::corpus::DatasetManifest;
use crate::error::{Error, Result};
use crate::evaluation::{AttributionMethod, Label};
use crate::scorestream::{write_atomic, ScoreStream};

/// Upper bounds of the first three GLTR buckets; the fourth runs to `|V|`.
pub const DEFAULT_GLTR_BOUNDS: [u32; 3] = [10, 100, 1000];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    MeanRank,
    MeanEntropy,
    Gltr,
}

impl FeatureSet {
    pub fn dim(self) -> usize {
        match self {
            FeatureSet::MeanRank | FeatureSet::MeanEntropy => 1,
            FeatureSet::Gltr => 4,
        }
    }
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureSet::MeanRank => "rank",
            FeatureSet::MeanEntropy => "entropy",
            FeatureSet::Gltr => "gltr",
        })
    }
}

impl FromStr for FeatureSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank" | "mean-rank" => Ok(FeatureSet::MeanRank),
            "entropy" | "mean-entropy" => Ok(FeatureSet::MeanEntropy),
            "gltr" => Ok(FeatureSet::Gltr),
            other => Err(Error::InvalidParameter(format!("unknown baseline `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub feature_set: FeatureSet,
}

/// Share of ranks in `[1, b0]`, `(b0, b1]`, `(b1, b2]` and `(b2, |V|]`.
pub fn gltr_features_with(ranks: &[u32], bounds: [u32; 3]) -> Result<FeatureVector> {
    if ranks.is_empty() {
        return Err(Error::Empty("rank sequence"));
    }
    let mut counts = [0u64; 4];
    for &r in ranks {
        let bucket = bounds.iter().position(|&b| r <= b).unwrap_or(3);
        counts[bucket] += 1;
    }
    let n = ranks.len() as f64;
    Ok(FeatureVector {
        values: counts.iter().map(|&c| c as f64 / n).collect(),
        feature_set: FeatureSet::Gltr,
    })
}

pub fn gltr_features(ranks: &[u32]) -> Result<FeatureVector> {
    gltr_features_with(ranks, DEFAULT_GLTR_BOUNDS)
}

pub fn mean_rank(stream: &ScoreStream) -> Result<f64> {
    if stream.ranks.is_empty() {
        return Err(Error::Empty("stream"));
    }
    Ok(stream.ranks.iter().map(|&r| f64::from(r)).sum::<f64>() / stream.ranks.len() as f64)
}

pub fn mean_entropy(stream: &ScoreStream) -> Result<f64> {
    if stream.entropies.is_empty() {
        return Err(Error::Empty("stream"));
    }
    Ok(stream.entropies.iter().map(|&e| f64::from(e)).sum::<f64>() / stream.entropies.len() as f64)
}

pub fn extract_features(stream: &ScoreStream, set: FeatureSet) -> Result<FeatureVector> {
    let values = match set {
        FeatureSet::MeanRank => vec![mean_rank(stream)?],
        FeatureSet::MeanEntropy => vec![mean_entropy(stream)?],
        FeatureSet::Gltr => return gltr_features(&stream.ranks),
    };
    Ok(FeatureVector {
        values,
        feature_set: set,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub l2: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop once the gradient's Euclidean norm drops below this.
    pub tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            l2: 1e-4,
            learning_rate: 0.5,
            max_epochs: 5000,
            tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    /// Row-major `classes x (dim + 1)`; the last column is the bias.
    pub weights: Vec<f64>,
    pub class_labels: Vec<String>,
    pub dim: usize,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub epochs_run: usize,
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

fn logits(weights: &[f64], classes: usize, dim: usize, x: &[f64]) -> Vec<f64> {
    (0..classes)
        .map(|k| {
            let row = &weights[k * (dim + 1)..(k + 1) * (dim + 1)];
            row[..dim].iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + row[dim]
        })
        .collect()
}

/// Mean cross-entropy plus `l2 * ||W||^2` (bias excluded) and its gradient.
pub fn loss_and_gradient(
    weights: &[f64],
    classes: usize,
    dim: usize,
    xs: &[Vec<f64>],
    ys: &[usize],
    l2: f64,
) -> (f64, Vec<f64>) {
    let n = xs.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; weights.len()];
    for (x, &y) in xs.iter().zip(ys) {
        let mut p = logits(weights, classes, dim, x);
        let m = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + p.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        loss -= p[y] - lse;
        softmax_in_place(&mut p);
        for k in 0..classes {
            let err = p[k] - if k == y { 1.0 } else { 0.0 };
            let row = &mut grad[k * (dim + 1)..(k + 1) * (dim + 1)];
            for d in 0..dim {
                row[d] += err * x[d] / n;
            }
            row[dim] += err / n;
        }
    }
    loss /= n;
    for k in 0..classes {
        for d in 0..dim {
            let i = k * (dim + 1) + d;
            loss += l2 * weights[i] * weights[i];
            grad[i] += 2.0 * l2 * weights[i];
        }
    }
    (loss, grad)
}

/// Full-batch gradient descent from zero weights on standardised features.
pub fn train_classifier(samples: &[(Vec<f64>, String)], cfg: &TrainConfig) -> Result<LinearClassifier> {
    let Some((first, _)) = samples.first() else {
        return Err(Error::Empty("training samples"));
    };
    let dim = first.len();
    if dim == 0 || samples.iter().any(|(x, _)| x.len() != dim || x.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidParameter("feature vectors must be non-empty, finite and equally sized".into()));
    }
    let class_labels: Vec<String> = samples
        .iter()
        .map(|(_, y)| y.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if class_labels.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 classes, got {}",
            class_labels.len()
        )));
    }
    let n = samples.len() as f64;
    let mut feature_mean = vec![0.0; dim];
    for (x, _) in samples {
        for d in 0..dim {
            feature_mean[d] += x[d] / n;
        }
    }
    let mut feature_scale = vec![0.0; dim];
    for (x, _) in samples {
        for d in 0..dim {
            feature_scale[d] += (x[d] - feature_mean[d]).powi(2) / n;
        }
    }
    for s in &mut feature_scale {
        *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
    }
    let xs: Vec<Vec<f64>> = samples
        .iter()
        .map(|(x, _)| (0..dim).map(|d| (x[d] - feature_mean[d]) / feature_scale[d]).collect())
        .collect();
    let ys: Vec<usize> = samples
        .iter()
        .map(|(_, y)| class_labels.binary_search(y).unwrap())
        .collect();
    let classes = class_labels.len();
    let mut weights = vec![0.0; classes * (dim + 1)];
    let mut epochs_run = 0;
    for _ in 0..cfg.max_epochs {
        let (_, grad) = loss_and_gradient(&weights, classes, dim, &xs, &ys, cfg.l2);
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm < cfg.tolerance {
            break;
        }
        for (w, g) in weights.iter_mut().zip(&grad) {
            *w -= cfg.learning_rate * g;
        }
        epochs_run += 1;
    }
    Ok(LinearClassifier {
        weights,
        class_labels,
        dim,
        feature_mean,
        feature_scale,
        epochs_run,
    })
}

impl LinearClassifier {
    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::InvalidParameter(format!(
                "feature dimension {} does not match classifier dimension {}",
                x.len(),
                self.dim
            )));
        }
        let z: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(d, v)| (v - self.feature_mean[d]) / self.feature_scale[d])
            .collect();
        let mut p = logits(&self.weights, self.class_labels.len(), self.dim, &z);
        softmax_in_place(&mut p);
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| crate::error::Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Index of the most probable class (first on ties) and its probability.
pub fn argmax_probability(p: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    (best, p[best])
}

/// The most probable class when its probability reaches `threshold`.
pub fn classify_probabilities(p: &[f64], labels: &[String], threshold: f64) -> Label {
    let (k, pk) = argmax_probability(p);
    if pk >= threshold {
        Label::Author(labels[k].clone())
    } else {
        Label::Reject
    }
}

pub fn classify(clf: &LinearClassifier, x: &[f64], threshold: f64) -> Result<Label> {
    Ok(classify_probabilities(&clf.predict_proba(x)?, &clf.class_labels, threshold))
}

/// Baseline as an [`AttributionMethod`]. Per-author scores are `1 - p`, so a
/// distance threshold `t` corresponds to a probability threshold `1 - t`.
pub struct BaselineMethod<'a> {
    pub features: &'a BTreeMap<String, FeatureVector>,
    pub feature_set: FeatureSet,
    pub train: TrainConfig,
}

pub struct TrainedBaseline {
    pub classifier: LinearClassifier,
    train_ids: BTreeSet<String>,
}

impl BaselineMethod<'_> {
    fn feature(&self, doc_id: &str) -> Result<&FeatureVector> {
        self.features.get(doc_id).ok_or_else(|| Error::Missing {
            what: "feature vector",
            doc_id: doc_id.to_string(),
        })
    }

    fn fit_ids<'m>(
        &self,
        manifest: &'m DatasetManifest,
        ids: impl Iterator<Item = &'m String>,
    ) -> Result<LinearClassifier> {
        let index = manifest.index();
        let mut samples = Vec::new();
        for id in ids {
            let rec = index.get(id.as_str()).ok_or_else(|| Error::Missing {
                what: "manifest record",
                doc_id: id.clone(),
            })?;
            samples.push((self.feature(id)?.values.clone(), rec.author_label.clone()));
        }
        train_classifier(&samples, &self.train)
    }

    fn score_with(&self, clf: &LinearClassifier, doc_id: &str) -> Result<BTreeMap<String, f64>> {
        let p = clf.predict_proba(&self.feature(doc_id)?.values)?;
        Ok(clf.class_labels.iter().cloned().zip(p.into_iter().map(|v| 1.0 - v)).collect())
    }
}

impl AttributionMethod for BaselineMethod<'_> {
    type Model = TrainedBaseline;

    fn describe(&self) -> String {
        format!("baseline-{}", self.feature_set)
    }

    fn fit(&self, manifest: &DatasetManifest, train_ids: &BTreeSet<String>) -> Result<TrainedBaseline> {
        Ok(TrainedBaseline {
            classifier: self.fit_ids(manifest, train_ids.iter())?,
            train_ids: train_ids.clone(),
        })
    }

    fn scores(&self, model: &TrainedBaseline, doc_id: &str) -> Result<BTreeMap<String, f64>> {
        self.score_with(&model.classifier, doc_id)
    }

    /// Dev documents of authors outside the classifier are unseen. Without
    /// any, unseen copies come from a classifier retrained without the
    /// document's author, when at least two authors remain.
    fn calibration_observations(
        &self,
        model: &TrainedBaseline,
        manifest: &DatasetManifest,
        dev_ids: &BTreeSet<String>,
    ) -> Result<Vec<DevObservation>> {
        let index = manifest.index();
        let classes = &model.classifier.class_labels;
        let mut direct = Vec::with_capacity(dev_ids.len());
        for id in dev_ids {
            let rec = index.get(id.as_str()).ok_or_else(|| Error::Missing {
                what: "manifest record",
                doc_id: id.clone(),
            })?;
            let gold = if classes.contains(&rec.author_label) {
                DevGold::Known(rec.author_label.clone())
            } else {
                DevGold::Unseen
            };
            direct.push(DevObservation {
                doc_id: id.clone(),
                gold,
                per_author_best: self.score_with(&model.classifier, id)?,
            });
        }
        if direct.iter().any(|o| o.gold == DevGold::Unseen) {
            return Ok(direct);
        }
        let mut without: BTreeMap<String, Option<LinearClassifier>> = BTreeMap::new();
        let mut out = Vec::new();
        for id in dev_ids {
            let rec = index.get(id.as_str()).ok_or_else(|| Error::Missing {
                what: "manifest record",
                doc_id: id.clone(),
            })?;
            let author = &rec.author_label;
            if !without.contains_key(author) {
                let rest: Vec<&String> = model
                    .train_ids
                    .iter()
                    .filter(|t| index.get(t.as_str()).is_some_and(|r| &r.author_label != author))
                    .collect();
                let authors: BTreeSet<&str> = rest.iter().map(|t| index[t.as_str()].author_label.as_str()).collect();
                let clf = if authors.len() >= 2 {
                    Some(self.fit_ids(manifest, rest.into_iter())?)
                } else {
                    None
                };
                without.insert(author.clone(), clf);
            }
            if let Some(clf) = &without[author] {
                out.push(DevObservation {
                    doc_id: format!("{id}#unseen"),
                    gold: DevGold::Unseen,
                    per_author_best: self.score_with(clf, id)?,
                });
            }
            out.push(DevObservation {
                doc_id: id.clone(),
                gold: DevGold::Known(author.clone()),
                per_author_best: self.score_with(&model.classifier, id)?,
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gltr_equal_buckets() {
        let f = gltr_features(&[1, 50, 500, 5000]).unwrap();
        assert_eq!(f.values, vec![0.25; 4]);
        assert_eq!(gltr_features(&[1, 1, 1]).unwrap().values, vec![1.0, 0.0, 0.0, 0.0]);
        assert!(gltr_features(&[]).is_err());
        // bucket edges are inclusive above
        assert_eq!(gltr_features(&[10, 11, 100, 101]).unwrap().values, vec![0.25, 0.5, 0.25, 0.0]);
    }

    fn stream(ranks: Vec<u32>, entropies: Vec<f32>) -> ScoreStream {
        ScoreStream {
            doc_id: "d".into(),
            evaluator_id: "e".into(),
            vocab_size: 50257,
            context_window: 1024,
            ranks,
            entropies,
        }
    }

    #[test]
    fn means() {
        assert_eq!(mean_rank(&stream(vec![2, 4], vec![0.0, 0.0])).unwrap(), 3.0);
        assert_eq!(mean_entropy(&stream(vec![1; 3], vec![0.5; 3])).unwrap(), 0.5);
        assert!(mean_rank(&stream(vec![], vec![])).is_err());
        assert_eq!(extract_features(&stream(vec![2, 4], vec![1.0, 2.0]), FeatureSet::MeanEntropy).unwrap().values, vec![1.5]);
    }

    #[test]
    fn separable_1d() {
        let samples: Vec<(Vec<f64>, String)> = (0..20)
            .map(|i| {
                let x = i as f64;
                (vec![x], if x < 10.0 { "low".into() } else { "high".into() })
            })
            .collect();
        let clf = train_classifier(&samples, &TrainConfig::default()).unwrap();
        for (x, y) in &samples {
            assert_eq!(classify(&clf, x, 0.0).unwrap(), Label::Author(y.clone()));
            let p = clf.predict_proba(x).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_sample_keeps_prediction() {
        let mut samples: Vec<(Vec<f64>, String)> = vec![
            (vec![0.0, 1.0], "a".into()),
            (vec![1.0, 0.0], "b".into()),
            (vec![0.2, 0.9], "a".into()),
            (vec![0.9, 0.3], "b".into()),
        ];
        let before = classify(&train_classifier(&samples, &TrainConfig::default()).unwrap(), &samples[2].0, 0.0).unwrap();
        samples.push(samples[2].clone());
        let after = classify(&train_classifier(&samples, &TrainConfig::default()).unwrap(), &samples[2].0, 0.0).unwrap();
        assert_eq!(before, after);
        assert_eq!(after, Label::Author("a".into()));
    }

    #[test]
    fn classify_thresholds() {
        let labels = vec!["A".to_string(), "B".to_string()];
        assert_eq!(classify_probabilities(&[0.9, 0.1], &labels, 0.5), Label::Author("A".into()));
        assert_eq!(classify_probabilities(&[0.45, 0.55], &labels, 0.6), Label::Reject);
        assert_eq!(classify_probabilities(&[0.5, 0.5], &labels, 0.0), Label::Author("A".into()));
    }

    #[test]
    fn degenerate_training_sets() {
        assert!(train_classifier(&[], &TrainConfig::default()).is_err());
        assert!(train_classifier(&[(vec![1.0], "a".into()), (vec![2.0], "a".into())], &TrainConfig::default()).is_err());
        assert!(train_classifier(&[(vec![1.0], "a".into()), (vec![2.0, 1.0], "b".into())], &TrainConfig::default()).is_err());
        let clf = train_classifier(&[(vec![1.0], "a".into()), (vec![2.0], "b".into())], &TrainConfig::default()).unwrap();
        assert!(clf.predict_proba(&[1.0, 2.0]).is_err());
    }

    fn random_problem(seed: u64) -> (Vec<f64>, usize, usize, Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = rng.gen_range(2..5);
        let dim = rng.gen_range(1..5);
        let n = rng.gen_range(3..12);
        let w = (0..classes * (dim + 1)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xs = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let ys = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        (w, classes, dim, xs, ys)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20 {
            let (w, c, d, xs, ys) = random_problem(seed);
            let (_, g) = loss_and_gradient(&w, c, d, &xs, &ys, 0.01);
            for i in 0..w.len() {
                let h = 1e-6;
                let mut wp = w.clone();
                wp[i] += h;
                let mut wm = w.clone();
                wm[i] -= h;
                let fd = (loss_and_gradient(&wp, c, d, &xs, &ys, 0.01).0 - loss_and_gradient(&wm, c, d, &xs, &ys, 0.01).0) / (2.0 * h);
                let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
                assert!(rel <= 1e-5 || (fd - g[i]).abs() < 1e-9, "seed {seed} i {i}: {fd} vs {}", g[i]);
            }
        }
    }

    proptest! {
        #[test]
        fn gltr_partitions(ranks in proptest::collection::vec(1u32..=50257, 1..500)) {
            let f = gltr_features(&ranks).unwrap();
            prop_assert!((f.values.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let counts: Vec<u64> = f.values.iter().map(|v| (v * ranks.len() as f64).round() as u64).collect();
            prop_assert_eq!(counts.iter().sum::<u64>(), ranks.len() as u64);
        }

        #[test]
        fn loss_non_increasing(seed in 0u64..1000) {
            let (_, c, d, xs, ys) = random_problem(seed);
            let mut w = vec![0.0; c * (d + 1)];
            let mut last = f64::INFINITY;
            for _ in 0..50 {
                let (loss, g) = loss_and_gradient(&w, c, d, &xs, &ys, 1e-3);
                prop_assert!(loss <= last + 1e-12);
                last = loss;
                for (wi, gi) in w.iter_mut().zip(&g) {
                    *wi -= 0.05 * gi;
                }
            }
        }
    }
}
