//! Scoring: macro-F1 with rejection, confusion matrices, family credit, and
//! the ID / OOD-Domain / OOD-Author protocol runner.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::attribution::{
    best_threshold, build_pool, leave_one_author_out, predict_at, DevGold, DevObservation, PoolEntry,
    ReferencePool,
};
use crate::corpus::{DatasetManifest, SplitPlan};
use crate::error::{Error, Result};
use crate::fingerprint::Fingerprint;
use crate::similarity::Metric;

pub const REJECT_TAG: &str = "REJECT";

/// A prediction (or open-set gold): an author, or a rejection.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Author(String),
    Reject,
}

impl Label {
    pub fn author(&self) -> Option<&str> {
        match self {
            Label::Author(a) => Some(a),
            Label::Reject => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Author(a) => f.write_str(a),
            Label::Reject => f.write_str(REJECT_TAG),
        }
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Label::Author(a) => s.serialize_some(a),
            Label::Reject => s.serialize_none(),
        }
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(match Option::<String>::deserialize(d)? {
            Some(a) => Label::Author(a),
            None => Label::Reject,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "OOD_DOMAIN")]
    OodDomain,
    #[serde(rename = "OOD_AUTHOR")]
    OodAuthor,
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "id" => Ok(Protocol::Id),
            "ood-domain" => Ok(Protocol::OodDomain),
            "ood-author" => Ok(Protocol::OodAuthor),
            other => Err(Error::InvalidParameter(format!("unknown protocol `{other}`"))),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Id => "id",
            Protocol::OodDomain => "ood-domain",
            Protocol::OodAuthor => "ood-author",
        })
    }
}

/// Per-class F1 for each label in `label_set`. A class with no gold and no
/// predicted documents scores 0.
pub fn per_class_f1(golds: &[Label], preds: &[Label], label_set: &[Label]) -> Result<Vec<f64>> {
    if golds.len() != preds.len() {
        return Err(Error::LengthMismatch(golds.len(), preds.len()));
    }
    Ok(label_set
        .iter()
        .map(|c| {
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for (g, p) in golds.iter().zip(preds) {
                match (g == c, p == c) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fn_ += 1,
                    (false, false) => {}
                }
            }
            let denom = 2 * tp + fp + fn_;
            if denom == 0 {
                0.0
            } else {
                (2 * tp) as f64 / denom as f64
            }
        })
        .collect())
}

/// Unweighted mean of per-class F1 over `label_set`.
///
/// A rejected document counts as a miss for its gold class. `Label::Reject`
/// is only scored as a class when it appears in `label_set` (open-set runs,
/// where unseen-author golds are `Label::Reject`).
pub fn macro_f1(golds: &[Label], preds: &[Label], label_set: &[Label]) -> Result<f64> {
    let f1 = per_class_f1(golds, preds, label_set)?;
    if f1.is_empty() {
        return Ok(0.0);
    }
    Ok(f1.iter().sum::<f64>() / f1.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// Axis labels for both rows (gold) and columns (predicted); the last one is `REJECT`.
    pub labels: Vec<Label>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Each row divided by its sum; empty rows stay zero.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let s: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 })
                    .collect()
            })
            .collect()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.labels != other.labels {
            return Err(Error::InvalidParameter("confusion matrices have different axes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn to_csv(&self, normalized: bool) -> String {
        let mut out = String::from("gold\\pred");
        for l in &self.labels {
            out.push(',');
            out.push_str(&l.to_string());
        }
        out.push('\n');
        let norm = self.row_normalized();
        for (i, l) in self.labels.iter().enumerate() {
            out.push_str(&l.to_string());
            for j in 0..self.labels.len() {
                out.push(',');
                if normalized {
                    out.push_str(&format!("{}", norm[i][j]));
                } else {
                    out.push_str(&self.counts[i][j].to_string());
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn normalized_grid(&self) -> crate::grid::Grid {
        let n = self.labels.len();
        let norm = self.row_normalized();
        crate::grid::Grid::from_fn(n, n, |r, c| norm[r][c])
    }
}

/// Counts over `label_set` plus a trailing `REJECT` row/column.
pub fn confusion_matrix(golds: &[Label], preds: &[Label], label_set: &[Label]) -> Result<ConfusionMatrix> {
    if golds.len() != preds.len() {
        return Err(Error::LengthMismatch(golds.len(), preds.len()));
    }
    let mut labels: Vec<Label> = label_set.iter().filter(|l| **l != Label::Reject).cloned().collect();
    labels.push(Label::Reject);
    let pos: BTreeMap<&Label, usize> = labels.iter().enumerate().map(|(i, l)| (l, i)).collect();
    let mut counts = vec![vec![0u64; labels.len()]; labels.len()];
    for (g, p) in golds.iter().zip(preds) {
        let gi = *pos.get(g).ok_or_else(|| Error::UnknownLabel(g.to_string()))?;
        let pi = *pos.get(p).ok_or_else(|| Error::UnknownLabel(p.to_string()))?;
        counts[gi][pi] += 1;
    }
    Ok(ConfusionMatrix { labels, counts })
}

/// Fraction of held-out documents predicted as a *different* author from
/// the same family. Rejections earn no family credit.
pub fn family_credit_score(held_out_authors: &[String], preds: &[Label], families: &BTreeMap<String, String>) -> Result<f64> {
    if held_out_authors.len() != preds.len() {
        return Err(Error::LengthMismatch(held_out_authors.len(), preds.len()));
    }
    if held_out_authors.is_empty() {
        return Err(Error::Empty("held-out documents"));
    }
    let family = |a: &str| families.get(a).ok_or_else(|| Error::UnknownLabel(format!("{a} (no family)")));
    let mut credited = 0usize;
    for (gold, pred) in held_out_authors.iter().zip(preds) {
        let gold_family = family(gold)?;
        if let Label::Author(p) = pred {
            if family(p)? == gold_family {
                credited += 1;
            }
        }
    }
    Ok(credited as f64 / held_out_authors.len() as f64)
}

/// Fraction of held-out documents that were rejected.
pub fn rejection_rate(preds: &[Label]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().filter(|p| **p == Label::Reject).count() as f64 / preds.len() as f64
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// A way of turning training documents into a model that yields, for any
/// document, a per-author score where lower means more likely.
pub trait AttributionMethod: Sync {
    type Model: Sync;

    fn describe(&self) -> String;

    fn fit(&self, manifest: &DatasetManifest, train_ids: &BTreeSet<String>) -> Result<Self::Model>;

    fn scores(&self, model: &Self::Model, doc_id: &str) -> Result<BTreeMap<String, f64>>;

    /// Calibration table for the dev documents. A dev document whose author
    /// the model has no scores for is unseen. When there are none, each
    /// known document is also replayed as unseen with its own author dropped.
    fn calibration_observations(
        &self,
        model: &Self::Model,
        manifest: &DatasetManifest,
        dev_ids: &BTreeSet<String>,
    ) -> Result<Vec<DevObservation>> {
        let index = manifest.index();
        let mut obs = Vec::with_capacity(dev_ids.len());
        for id in dev_ids {
            let rec = index.get(id.as_str()).ok_or_else(|| Error::Missing {
                what: "manifest record",
                doc_id: id.clone(),
            })?;
            let per_author_best = self.scores(model, id)?;
            let gold = if per_author_best.contains_key(&rec.author_label) {
                DevGold::Known(rec.author_label.clone())
            } else {
                DevGold::Unseen
            };
            obs.push(DevObservation {
                doc_id: id.clone(),
                gold,
                per_author_best,
            });
        }
        if obs.iter().any(|o| o.gold == DevGold::Unseen) {
            Ok(obs)
        } else {
            Ok(leave_one_author_out(obs))
        }
    }

    /// Turns a per-author score table into a decision.
    fn decide(&self, scores: &BTreeMap<String, f64>, threshold: f64) -> Label {
        predict_at(scores, threshold)
    }
}

/// Nearest-reference attribution over precomputed fingerprints.
pub struct FingerprintMethod<'a> {
    pub fingerprints: &'a BTreeMap<String, Fingerprint>,
    pub metric: Metric,
}

impl AttributionMethod for FingerprintMethod<'_> {
    type Model = ReferencePool;

    fn describe(&self) -> String {
        let variant = self
            .fingerprints
            .values()
            .next()
            .map_or("?".to_string(), |f| f.variant().to_string());
        format!("trace-{variant}-{}", self.metric)
    }

    fn fit(&self, manifest: &DatasetManifest, train_ids: &BTreeSet<String>) -> Result<ReferencePool> {
        let index = manifest.index();
        let mut entries = Vec::with_capacity(train_ids.len());
        for id in train_ids {
            let fp = self.fingerprints.get(id).ok_or_else(|| Error::Missing {
                what: "fingerprint",
                doc_id: id.clone(),
            })?;
            let rec = index.get(id.as_str()).ok_or_else(|| Error::Missing {
                what: "manifest record",
                doc_id: id.clone(),
            })?;
            entries.push(PoolEntry {
                fingerprint: fp.clone(),
                author: rec.author_label.clone(),
                doc_id: id.clone(),
            });
        }
        build_pool(entries, self.metric)
    }

    fn scores(&self, pool: &ReferencePool, doc_id: &str) -> Result<BTreeMap<String, f64>> {
        let fp = self.fingerprints.get(doc_id).ok_or_else(|| Error::Missing {
            what: "fingerprint",
            doc_id: doc_id.to_string(),
        })?;
        pool.per_author_best(fp)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitOutcome {
    pub split: String,
    pub threshold: f64,
    pub doc_ids: Vec<String>,
    /// Scoring golds: the author, or `REJECT` for held-out authors.
    pub golds: Vec<Label>,
    pub preds: Vec<Label>,
    /// True author of every test document.
    pub true_authors: Vec<String>,
    pub held_out: Vec<bool>,
    pub f1: f64,
}

/// Fits on `plan.train_ids`, calibrates on `plan.dev_ids` unless a
/// threshold is given, and scores `plan.test_ids`.
///
/// Test documents of held-out authors have gold `REJECT`; for
/// [`Protocol::OodAuthor`] the scored label set is every gold present, so
/// `REJECT` is a class and rejected known-author documents count against
/// it. For ID and OOD-Domain the label set holds authors only.
pub fn run_protocol<M: AttributionMethod>(
    method: &M,
    manifest: &DatasetManifest,
    plan: &SplitPlan,
    protocol: Protocol,
    threshold: Option<f64>,
) -> Result<SplitOutcome> {
    plan.validate(manifest)?;
    if plan.test_ids.is_empty() {
        return Err(Error::Split(format!("{}: no test documents", plan.name)));
    }
    let model = method.fit(manifest, &plan.train_ids)?;
    let threshold = match threshold {
        Some(t) => t,
        None => {
            let obs = method.calibration_observations(&model, manifest, &plan.dev_ids)?;
            best_threshold(&obs)?
        }
    };
    let index = manifest.index();
    let mut out = SplitOutcome {
        split: plan.name.clone(),
        threshold,
        doc_ids: Vec::new(),
        golds: Vec::new(),
        preds: Vec::new(),
        true_authors: Vec::new(),
        held_out: Vec::new(),
        f1: 0.0,
    };
    for id in &plan.test_ids {
        let rec = index.get(id.as_str()).ok_or_else(|| Error::Missing {
            what: "manifest record",
            doc_id: id.clone(),
        })?;
        let held = plan.held_out_authors.contains(&rec.author_label);
        let scores = method.scores(&model, id)?;
        out.doc_ids.push(id.clone());
        out.golds.push(if held {
            Label::Reject
        } else {
            Label::Author(rec.author_label.clone())
        });
        out.preds.push(method.decide(&scores, threshold));
        out.true_authors.push(rec.author_label.clone());
        out.held_out.push(held);
    }
    let mut labels: Vec<Label> = out.golds.clone();
    labels.sort();
    labels.dedup();
    if protocol != Protocol::OodAuthor {
        labels.retain(|l| *l != Label::Reject);
    }
    out.f1 = macro_f1(&out.golds, &out.preds, &labels)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: String,
    pub f1: f64,
    pub threshold: f64,
    pub documents: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub protocol: Protocol,
    pub method: String,
    pub splits: Vec<SplitSummary>,
    pub per_split_f1: Vec<f64>,
    pub mean_f1: f64,
    /// Population standard deviation over `per_split_f1`.
    pub std_f1: f64,
    /// Rows are true authors, columns predictions; summed over splits.
    pub confusion: ConfusionMatrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family_credit_f1: Option<f64>,
    pub f1_formula: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl EvaluationReport {
    /// Aggregates split outcomes. `authors` fixes the confusion axis;
    /// `families` enables family-credit scoring of held-out documents.
    pub fn from_outcomes(
        protocol: Protocol,
        method: impl Into<String>,
        outcomes: &[SplitOutcome],
        authors: &[String],
        families: Option<&BTreeMap<String, String>>,
    ) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::Empty("split outcomes"));
        }
        let axis: Vec<Label> = authors.iter().cloned().map(Label::Author).collect();
        let mut confusion = confusion_matrix(&[], &[], &axis)?;
        let mut held_truth = Vec::new();
        let mut held_preds = Vec::new();
        for o in outcomes {
            let truth: Vec<Label> = o.true_authors.iter().cloned().map(Label::Author).collect();
            confusion.merge(&confusion_matrix(&truth, &o.preds, &axis)?)?;
            for ((a, p), &h) in o.true_authors.iter().zip(&o.preds).zip(&o.held_out) {
                if h {
                    held_truth.push(a.clone());
                    held_preds.push(p.clone());
                }
            }
        }
        let per_split_f1: Vec<f64> = outcomes.iter().map(|o| o.f1).collect();
        let (mean_f1, std_f1) = mean_std(&per_split_f1);
        let open_set = !held_truth.is_empty();
        let family_credit_f1 = match families {
            Some(f) if open_set => Some(family_credit_score(&held_truth, &held_preds, f)?),
            _ => None,
        };
        let f1_formula = match protocol {
            Protocol::OodAuthor => "macro-F1 over gold classes; held-out authors have gold REJECT and are correct only when rejected; rejected known-author documents are misses for their class and false positives for REJECT",
            _ => "macro-F1 over gold author classes; a rejected document is a miss for its gold class",
        }
        .to_string();
        Ok(EvaluationReport {
            protocol,
            method: method.into(),
            splits: outcomes
                .iter()
                .map(|o| SplitSummary {
                    split: o.split.clone(),
                    f1: o.f1,
                    threshold: o.threshold,
                    documents: o.doc_ids.len(),
                })
                .collect(),
            per_split_f1,
            mean_f1,
            std_f1,
            confusion,
            rejection_rate: open_set.then(|| rejection_rate(&held_preds)),
            family_credit_f1,
            f1_formula,
            config_hash: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DocumentRecord, SplitRole};
    use std::path::PathBuf;

    fn l(s: &str) -> Label {
        if s == "R" {
            Label::Reject
        } else {
            Label::Author(s.into())
        }
    }

    fn ls(v: &[&str]) -> Vec<Label> {
        v.iter().map(|s| l(s)).collect()
    }

    #[test]
    fn perfect_is_one() {
        let g = ls(&["A", "B", "C"]);
        assert_eq!(macro_f1(&g, &g, &ls(&["A", "B", "C"])).unwrap(), 1.0);
    }

    #[test]
    fn worked_example() {
        let f = macro_f1(&ls(&["A", "A", "B"]), &ls(&["A", "B", "B"]), &ls(&["A", "B"])).unwrap();
        assert_eq!(f, 2.0 / 3.0);
    }

    #[test]
    fn rejection_is_false_negative() {
        let f = macro_f1(&ls(&["A", "A"]), &ls(&["R", "A"]), &ls(&["A"])).unwrap();
        assert_eq!(f, 2.0 / 3.0);
    }

    #[test]
    fn length_mismatch() {
        assert!(macro_f1(&ls(&["A"]), &[], &ls(&["A"])).is_err());
        assert!(confusion_matrix(&ls(&["A"]), &[], &ls(&["A"])).is_err());
    }

    #[test]
    fn confusion_cases() {
        let g = ls(&["A", "B", "B"]);
        let c = confusion_matrix(&g, &g, &ls(&["A", "B"])).unwrap();
        assert_eq!(c.counts, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 0]]);
        let all_r = confusion_matrix(&g, &ls(&["R", "R", "R"]), &ls(&["A", "B"])).unwrap();
        assert_eq!(all_r.counts, vec![vec![0, 0, 1], vec![0, 0, 2], vec![0, 0, 0]]);
        assert_eq!(all_r.row_sums(), vec![1, 2, 0]);
        assert_eq!(all_r.row_normalized()[1], vec![0.0, 0.0, 1.0]);
        assert!(confusion_matrix(&ls(&["Z"]), &ls(&["A"]), &ls(&["A"])).is_err());
        assert!(c.to_csv(false).starts_with("gold\\pred,A,B,REJECT\n"));
    }

    #[test]
    fn family_credit() {
        let fam: BTreeMap<String, String> = [("gpt-4.1", "gpt"), ("gpt-5.1", "gpt"), ("qwen", "qwen")]
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        let held = vec!["gpt-4.1".to_string()];
        assert_eq!(family_credit_score(&held, &ls(&["gpt-5.1"]), &fam).unwrap(), 1.0);
        assert_eq!(family_credit_score(&held, &ls(&["qwen"]), &fam).unwrap(), 0.0);
        assert_eq!(family_credit_score(&held, &ls(&["R"]), &fam).unwrap(), 0.0);
        assert!(family_credit_score(&held, &ls(&["mystery"]), &fam).is_err());

        let singletons: BTreeMap<String, String> =
            ["a", "b", "c"].iter().map(|a| (a.to_string(), a.to_string())).collect();
        let held = vec!["a".to_string(), "a".to_string()];
        assert_eq!(family_credit_score(&held, &ls(&["b", "R"]), &singletons).unwrap(), 0.0);
    }

    #[test]
    fn mean_std_population() {
        let (m, s) = mean_std(&[0.5, 0.7, 0.9]);
        assert!((m - 0.7).abs() < 1e-15);
        assert!((s - (0.08f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn label_serde() {
        assert_eq!(serde_json::to_string(&ls(&["A", "R"])).unwrap(), r#"["A",null]"#);
        let back: Vec<Label> = serde_json::from_str(r#"["A",null]"#).unwrap();
        assert_eq!(back, ls(&["A", "R"]));
    }

    #[test]
    fn protocol_names() {
        assert_eq!("ood-author".parse::<Protocol>().unwrap(), Protocol::OodAuthor);
        assert_eq!("OOD_DOMAIN".parse::<Protocol>().unwrap(), Protocol::OodDomain);
        assert!("xx".parse::<Protocol>().is_err());
    }

    /// Scores are fixed per document: author -> distance.
    struct TableMethod(BTreeMap<String, BTreeMap<String, f64>>);

    impl AttributionMethod for TableMethod {
        type Model = BTreeSet<String>;

        fn describe(&self) -> String {
            "table".into()
        }

        fn fit(&self, manifest: &DatasetManifest, train_ids: &BTreeSet<String>) -> Result<BTreeSet<String>> {
            let idx = manifest.index();
            Ok(train_ids.iter().map(|i| idx[i.as_str()].author_label.clone()).collect())
        }

        fn scores(&self, model: &BTreeSet<String>, doc_id: &str) -> Result<BTreeMap<String, f64>> {
            Ok(self.0[doc_id].iter().filter(|(a, _)| model.contains(*a)).map(|(a, d)| (a.clone(), *d)).collect())
        }
    }

    fn rec(id: &str, author: &str, role: SplitRole) -> DocumentRecord {
        DocumentRecord {
            doc_id: id.into(),
            author_label: author.into(),
            family_label: author.into(),
            genres: BTreeSet::from(["LF".to_string()]),
            split_role: role,
            text_path: PathBuf::new(),
        }
    }

    #[test]
    fn ood_author_perfect_open_set() {
        let m = DatasetManifest::new(
            vec![
                rec("a-tr", "A", SplitRole::Train),
                rec("b-tr", "B", SplitRole::Train),
                rec("a-te", "A", SplitRole::Test),
                rec("b-te", "B", SplitRole::Test),
                rec("c-te", "C", SplitRole::Test),
            ],
            10,
        )
        .unwrap();
        let table = |a: f64, b: f64, c: f64| BTreeMap::from([("A".into(), a), ("B".into(), b), ("C".into(), c)]);
        let method = TableMethod(BTreeMap::from([
            ("a-te".to_string(), table(0.1, 0.8, 0.1)),
            ("b-te".to_string(), table(0.8, 0.2, 0.1)),
            ("c-te".to_string(), table(0.9, 0.9, 0.0)),
        ]));
        let plan = SplitPlan {
            name: "holdout-C".into(),
            train_ids: BTreeSet::from(["a-tr".into(), "b-tr".into()]),
            dev_ids: BTreeSet::new(),
            test_ids: BTreeSet::from(["a-te".into(), "b-te".into(), "c-te".into()]),
            held_out_authors: BTreeSet::from(["C".into()]),
        };
        let out = run_protocol(&method, &m, &plan, Protocol::OodAuthor, Some(0.5)).unwrap();
        assert_eq!(out.preds, ls(&["A", "B", "R"]));
        assert_eq!(out.f1, 1.0);

        let report = EvaluationReport::from_outcomes(
            Protocol::OodAuthor,
            "table",
            &[out.clone(), out],
            &m.authors,
            Some(&m.families()),
        )
        .unwrap();
        assert_eq!(report.confusion.total(), 6);
        assert_eq!(report.rejection_rate, Some(1.0));
        assert_eq!(report.family_credit_f1, Some(0.0));
        assert_eq!(report.mean_f1, 1.0);
        assert_eq!(report.std_f1, 0.0);
    }

    #[test]
    fn missing_scores_error() {
        let m = DatasetManifest::new(vec![rec("a-tr", "A", SplitRole::Train), rec("a-te", "A", SplitRole::Test)], 10)
            .unwrap();
        let fps = BTreeMap::new();
        let method = FingerprintMethod {
            fingerprints: &fps,
            metric: Metric::Js,
        };
        let plan = crate::corpus::make_id_split(&m, &BTreeMap::new());
        assert!(matches!(
            run_protocol(&method, &m, &plan, Protocol::Id, Some(1.0)),
            Err(Error::Missing { .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn labels() -> impl Strategy<Value = Vec<(usize, usize)>> {
            proptest::collection::vec((0usize..4, 0usize..5), 1..60)
        }

        fn decode(v: &[(usize, usize)]) -> (Vec<Label>, Vec<Label>) {
            let name = |i: usize| if i == 4 { Label::Reject } else { Label::Author(format!("L{i}")) };
            (v.iter().map(|&(g, _)| name(g)).collect(), v.iter().map(|&(_, p)| name(p)).collect())
        }

        proptest! {
            #[test]
            fn permutation_invariant(v in labels(), seed in any::<u64>()) {
                let (g, p) = decode(&v);
                let set: Vec<Label> = (0..4).map(|i| Label::Author(format!("L{i}"))).collect();
                let base = macro_f1(&g, &p, &set).unwrap();
                let mut idx: Vec<usize> = (0..g.len()).collect();
                idx.sort_by_key(|&i| (i as u64).wrapping_mul(seed | 1).rotate_left(17));
                let g2: Vec<Label> = idx.iter().map(|&i| g[i].clone()).collect();
                let p2: Vec<Label> = idx.iter().map(|&i| p[i].clone()).collect();
                prop_assert_eq!(macro_f1(&g2, &p2, &set).unwrap(), base);
            }

            #[test]
            fn confusion_rows_match_gold_counts(v in labels()) {
                let (g, p) = decode(&v);
                let set: Vec<Label> = (0..4).map(|i| Label::Author(format!("L{i}"))).collect();
                let c = confusion_matrix(&g, &p, &set).unwrap();
                prop_assert_eq!(c.total() as usize, g.len());
                for (i, lab) in c.labels.iter().enumerate() {
                    prop_assert_eq!(c.row_sums()[i] as usize, g.iter().filter(|x| *x == lab).count());
                }
            }
        }
    }
}
