//! Labeled document manifests, text cleaning, and train/dev/test split plans.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of whitespace-delimited tokens dropped from each end of a document.
pub const DEFAULT_HEAD_TAIL_TRIM: usize = 1500;

/// Generation markers stripped by [`clean_text`].
pub const DEFAULT_MARKERS: &[&str] = &["END OF NOVEL", "START OF SEGMENT", "<START>", "<END>", "END"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub doc_id: String,
    pub author_label: String,
    /// Model family; defaults to the author label when the manifest omits it.
    #[serde(default)]
    pub family_label: String,
    pub genres: BTreeSet<String>,
    pub split_role: SplitRole,
    pub text_path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetManifest {
    pub records: Vec<DocumentRecord>,
    /// Distinct author labels, sorted lexicographically.
    pub authors: Vec<String>,
    pub vocab_size: u32,
}

#[derive(Deserialize)]
struct RawManifest {
    vocab_size: u64,
    records: Vec<serde_json::Value>,
}

impl DatasetManifest {
    /// Validates `records` and derives the sorted author list.
    pub fn new(records: Vec<DocumentRecord>, vocab_size: u32) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::Manifest {
                location: "vocab_size".into(),
                message: format!("must be at least 2, got {vocab_size}"),
            });
        }
        let mut seen = BTreeSet::new();
        let mut authors = BTreeSet::new();
        let mut records = records;
        for rec in &mut records {
            if rec.doc_id.is_empty() || rec.doc_id.contains(['/', '\\']) {
                return Err(Error::Manifest {
                    location: format!("doc `{}`", rec.doc_id),
                    message: "doc_id must be non-empty and free of path separators".into(),
                });
            }
            if !seen.insert(rec.doc_id.clone()) {
                return Err(Error::DuplicateDocId(rec.doc_id.clone()));
            }
            if rec.author_label.is_empty() {
                return Err(Error::Manifest {
                    location: format!("doc `{}`", rec.doc_id),
                    message: "author_label is empty".into(),
                });
            }
            if rec.genres.is_empty() {
                return Err(Error::Manifest {
                    location: format!("doc `{}`", rec.doc_id),
                    message: "genres is empty".into(),
                });
            }
            if rec.family_label.is_empty() {
                rec.family_label = rec.author_label.clone();
            }
            authors.insert(rec.author_label.clone());
        }
        Ok(DatasetManifest {
            records,
            authors: authors.into_iter().collect(),
            vocab_size,
        })
    }

    /// Parses a manifest document. Relative `text_path`s are resolved against `base_dir`.
    pub fn from_json_str(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let raw: RawManifest = serde_json::from_str(text).map_err(|e| Error::Manifest {
            location: "document".into(),
            message: e.to_string(),
        })?;
        let vocab_size = u32::try_from(raw.vocab_size).map_err(|_| Error::Manifest {
            location: "vocab_size".into(),
            message: format!("{} does not fit in 32 bits", raw.vocab_size),
        })?;
        let mut records = Vec::with_capacity(raw.records.len());
        for (idx, value) in raw.records.into_iter().enumerate() {
            let location = match value.get("doc_id").and_then(|v| v.as_str()) {
                Some(id) => format!("record #{idx} (doc `{id}`)"),
                None => format!("record #{idx}"),
            };
            let mut rec: DocumentRecord =
                serde_json::from_value(value).map_err(|e| Error::Manifest {
                    location,
                    message: e.to_string(),
                })?;
            if let Some(base) = base_dir {
                if rec.text_path.is_relative() {
                    rec.text_path = base.join(&rec.text_path);
                }
            }
            records.push(rec);
        }
        Self::new(records, vocab_size)
    }

    pub fn to_json_string(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Out<'a> {
            vocab_size: u32,
            records: &'a [DocumentRecord],
        }
        Ok(serde_json::to_string_pretty(&Out {
            vocab_size: self.vocab_size,
            records: &self.records,
        })?)
    }

    pub fn record(&self, doc_id: &str) -> Option<&DocumentRecord> {
        self.records.iter().find(|r| r.doc_id == doc_id)
    }

    /// doc_id → record lookup table.
    pub fn index(&self) -> BTreeMap<&str, &DocumentRecord> {
        self.records.iter().map(|r| (r.doc_id.as_str(), r)).collect()
    }

    /// author → family mapping.
    pub fn families(&self) -> BTreeMap<String, String> {
        self.records
            .iter()
            .map(|r| (r.author_label.clone(), r.family_label.clone()))
            .collect()
    }

    fn ids_where(&self, pred: impl Fn(&DocumentRecord) -> bool) -> BTreeSet<String> {
        self.records
            .iter()
            .filter(|r| pred(r))
            .map(|r| r.doc_id.clone())
            .collect()
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DatasetManifest::from_json_str(&text, path.parent())
}

/// Strips generation markers, normalises punctuation to ASCII, and trims
/// whitespace-delimited tokens from both ends.
#[derive(Clone, Debug)]
pub struct TextCleaner {
    markers: Regex,
}

impl Default for TextCleaner {
    fn default() -> Self {
        Self::new(DEFAULT_MARKERS.iter().copied())
    }
}

impl TextCleaner {
    pub fn new<'a>(markers: impl IntoIterator<Item = &'a str>) -> Self {
        let mut markers: Vec<&str> = markers.into_iter().filter(|m| !m.trim().is_empty()).collect();
        // Longest first so "END OF NOVEL" wins over "END".
        markers.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        let alternatives: Vec<String> = markers
            .iter()
            .map(|m| {
                let body = m
                    .split_whitespace()
                    .map(regex::escape)
                    .collect::<Vec<_>>()
                    .join(r"\s+");
                let word = |c: Option<char>| c.is_some_and(|c| c.is_ascii_alphanumeric() || c == '_');
                let lead = if word(m.trim().chars().next()) { r"\b" } else { "" };
                let tail = if word(m.trim().chars().last()) { r"\b" } else { "" };
                format!("{lead}{body}{tail}")
            })
            .collect();
        let pattern = if alternatives.is_empty() {
            // never matches
            r"[^\s\S]".to_string()
        } else {
            alternatives.join("|")
        };
        TextCleaner {
            markers: Regex::new(&pattern).expect("marker pattern is built from escaped literals"),
        }
    }

    pub fn clean(&self, raw: &str, head_tail_trim: usize) -> String {
        let mut text = normalize_ascii(raw);
        // Removing one marker can splice its neighbours into another; repeat to a fixpoint.
        while self.markers.is_match(&text) {
            text = self.markers.replace_all(&text, " ").into_owned();
        }
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.len() <= 2 * head_tail_trim {
            return String::new();
        }
        tokens[head_tail_trim..tokens.len() - head_tail_trim].join(" ")
    }
}

fn default_cleaner() -> &'static TextCleaner {
    static CLEANER: OnceLock<TextCleaner> = OnceLock::new();
    CLEANER.get_or_init(TextCleaner::default)
}

/// [`TextCleaner::clean`] with the default marker set.
pub fn clean_text(raw: &str, head_tail_trim: usize) -> String {
    default_cleaner().clean(raw, head_tail_trim)
}

fn normalize_ascii(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    for ch in raw.chars() {
        match ch {
            '\u{2018}' | '\u{2019}' | '\u{201A}' | '\u{201B}' | '\u{2032}' => out.push('\''),
            '\u{201C}' | '\u{201D}' | '\u{201E}' | '\u{201F}' | '\u{2033}' | '\u{00AB}' | '\u{00BB}' => {
                out.push('"')
            }
            '\u{2010}' | '\u{2011}' | '\u{2012}' | '\u{2013}' | '\u{2014}' | '\u{2015}' | '\u{2212}' => {
                out.push('-')
            }
            '\u{2026}' => out.push_str("..."),
            '\u{00A0}' | '\u{2002}' | '\u{2003}' | '\u{2009}' | '\u{200A}' | '\u{202F}' => out.push(' '),
            c if c.is_ascii() && (!c.is_ascii_control() || c.is_ascii_whitespace()) => out.push(c),
            _ => {}
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub name: String,
    pub train_ids: BTreeSet<String>,
    pub dev_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
    pub held_out_authors: BTreeSet<String>,
}

impl SplitPlan {
    /// Checks pairwise disjointness and that no held-out author is trained on.
    pub fn validate(&self, manifest: &DatasetManifest) -> Result<()> {
        let overlap = |a: &BTreeSet<String>, b: &BTreeSet<String>| a.intersection(b).next().cloned();
        for (x, y, what) in [
            (&self.train_ids, &self.dev_ids, "train/dev"),
            (&self.train_ids, &self.test_ids, "train/test"),
            (&self.dev_ids, &self.test_ids, "dev/test"),
        ] {
            if let Some(id) = overlap(x, y) {
                return Err(Error::Split(format!("{}: doc `{id}` in both {what}", self.name)));
            }
        }
        let index = manifest.index();
        for id in &self.train_ids {
            let rec = index.get(id.as_str()).ok_or_else(|| Error::Missing {
                what: "manifest record",
                doc_id: id.clone(),
            })?;
            if self.held_out_authors.contains(&rec.author_label) {
                return Err(Error::Split(format!(
                    "{}: held-out author `{}` has training doc `{id}`",
                    self.name, rec.author_label
                )));
            }
        }
        Ok(())
    }
}

/// Standard split taken straight from each record's `split_role`. Documents
/// whose genres fall in their author's OOD set are left out of every part.
pub fn make_id_split(
    manifest: &DatasetManifest,
    ood_genres_per_author: &BTreeMap<String, BTreeSet<String>>,
) -> SplitPlan {
    let in_ood = |r: &DocumentRecord| {
        ood_genres_per_author
            .get(&r.author_label)
            .is_some_and(|ood| !ood.is_disjoint(&r.genres))
    };
    SplitPlan {
        name: "id".into(),
        train_ids: manifest.ids_where(|r| r.split_role == SplitRole::Train && !in_ood(r)),
        dev_ids: manifest.ids_where(|r| r.split_role == SplitRole::Dev && !in_ood(r)),
        test_ids: manifest.ids_where(|r| r.split_role == SplitRole::Test && !in_ood(r)),
        held_out_authors: BTreeSet::new(),
    }
}

/// One plan per author: that author is unseen in training and its test
/// documents form the test set.
pub fn make_author_holdout_splits(manifest: &DatasetManifest) -> Result<Vec<SplitPlan>> {
    if manifest.authors.len() < 2 {
        return Err(Error::Split(format!(
            "author holdout needs at least 2 authors, manifest has {}",
            manifest.authors.len()
        )));
    }
    Ok(manifest
        .authors
        .iter()
        .map(|held| SplitPlan {
            name: format!("holdout-{held}"),
            train_ids: manifest
                .ids_where(|r| r.split_role == SplitRole::Train && &r.author_label != held),
            dev_ids: manifest.ids_where(|r| r.split_role == SplitRole::Dev && &r.author_label != held),
            test_ids: manifest.ids_where(|r| r.split_role == SplitRole::Test && &r.author_label == held),
            held_out_authors: BTreeSet::from([held.clone()]),
        })
        .collect())
}

/// Out-of-domain split: documents touching their author's OOD genres are
/// tested, the rest supply train and dev.
pub fn make_domain_split(
    manifest: &DatasetManifest,
    ood_genres_per_author: &BTreeMap<String, BTreeSet<String>>,
) -> Result<SplitPlan> {
    let mut plan = SplitPlan {
        name: "ood-domain".into(),
        train_ids: BTreeSet::new(),
        dev_ids: BTreeSet::new(),
        test_ids: BTreeSet::new(),
        held_out_authors: BTreeSet::new(),
    };
    for rec in &manifest.records {
        let ood = ood_genres_per_author.get(&rec.author_label);
        let hits_ood = ood.is_some_and(|g| !g.is_disjoint(&rec.genres));
        match (rec.split_role, hits_ood) {
            (SplitRole::Train, true) => {
                let shared: Vec<&String> = ood.unwrap().intersection(&rec.genres).collect();
                return Err(Error::Split(format!(
                    "author `{}`: training doc `{}` has OOD genre(s) {shared:?}",
                    rec.author_label, rec.doc_id
                )));
            }
            (_, true) => {
                plan.test_ids.insert(rec.doc_id.clone());
            }
            (SplitRole::Train, false) => {
                plan.train_ids.insert(rec.doc_id.clone());
            }
            (SplitRole::Dev, false) => {
                plan.dev_ids.insert(rec.doc_id.clone());
            }
            (SplitRole::Test, false) => {}
        }
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, author: &str, genre: &str, role: SplitRole) -> DocumentRecord {
        DocumentRecord {
            doc_id: id.into(),
            author_label: author.into(),
            family_label: String::new(),
            genres: BTreeSet::from([genre.to_string()]),
            split_role: role,
            text_path: PathBuf::from(format!("{id}.txt")),
        }
    }

    fn grid_manifest(authors: usize, per_author: usize) -> DatasetManifest {
        let mut records = Vec::new();
        for a in 0..authors {
            for d in 0..per_author {
                let role = match d % 4 {
                    0 | 1 => SplitRole::Train,
                    2 => SplitRole::Dev,
                    _ => SplitRole::Test,
                };
                records.push(rec(&format!("a{a}-d{d}"), &format!("author{a:02}"), "LF", role));
            }
        }
        DatasetManifest::new(records, 50257).unwrap()
    }

    #[test]
    fn ten_authors_four_docs() {
        let m = grid_manifest(10, 4);
        assert_eq!(m.authors.len(), 10);
        assert!(m.authors.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(m.records[0].family_label, m.records[0].author_label);
    }

    #[test]
    fn duplicate_doc_id_is_named() {
        let records = vec![
            rec("x", "a", "LF", SplitRole::Train),
            rec("x", "b", "LF", SplitRole::Train),
        ];
        let err = DatasetManifest::new(records, 10).unwrap_err();
        assert!(err.to_string().contains("`x`"), "{err}");
    }

    #[test]
    fn unknown_split_role_names_record() {
        let json = r#"{"vocab_size": 100, "records": [
            {"doc_id": "ok", "author_label": "a", "genres": ["LF"], "split_role": "train", "text_path": "ok.txt"},
            {"doc_id": "bad", "author_label": "a", "genres": ["LF"], "split_role": "holdout", "text_path": "b.txt"}
        ]}"#;
        let err = DatasetManifest::from_json_str(json, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad") && msg.contains("#1"), "{msg}");
    }

    #[test]
    fn table_shaped_author_counts() {
        // One author with 31 train / 9 test / 2 dev books.
        let mut records = Vec::new();
        for (role, n) in [(SplitRole::Train, 31), (SplitRole::Test, 9), (SplitRole::Dev, 2)] {
            for i in 0..n {
                records.push(rec(&format!("{role:?}-{i}"), "gpt-5.1", "LF", role));
            }
        }
        for a in 0..9 {
            records.push(rec(&format!("other-{a}"), &format!("m{a}"), "HB", SplitRole::Train));
        }
        let m = DatasetManifest::new(records, 50257).unwrap();
        assert_eq!(m.authors.len(), 10);
        assert_eq!(m.records.iter().filter(|r| r.author_label == "gpt-5.1").count(), 42);
    }

    #[test]
    fn clean_strips_markers() {
        assert_eq!(clean_text("<START> hello world <END>", 0), "hello world");
        assert_eq!(clean_text("The END OF NOVEL came. END", 0), "The came.");
        // whole-word only
        assert_eq!(clean_text("LEGEND ENDS", 0), "LEGEND ENDS");
    }

    #[test]
    fn clean_normalizes_quotes() {
        assert_eq!(clean_text("\u{201C}x\u{201D}", 0), "\"x\"");
        assert_eq!(clean_text("it\u{2019}s caf\u{00E9}", 0), "it's caf");
    }

    #[test]
    fn clean_trims_to_empty() {
        let raw = vec!["w"; 3000].join(" ");
        assert_eq!(clean_text(&raw, 1500), "");
        let raw = (0..3001).map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
        assert_eq!(clean_text(&raw, 1500), "1500");
    }

    #[test]
    fn clean_reaches_fixpoint_on_spliced_markers() {
        let once = clean_text("EN<END>D START <END>OF SEGMENT tail", 0);
        assert_eq!(clean_text(&once, 0), once);
    }

    #[test]
    fn custom_marker_set() {
        let c = TextCleaner::new(["###"]);
        assert_eq!(c.clean("a ### b END", 0), "a b END");
    }

    #[test]
    fn holdout_plans() {
        let m = grid_manifest(10, 8);
        let plans = make_author_holdout_splits(&m).unwrap();
        assert_eq!(plans.len(), 10);
        let index = m.index();
        for p in &plans {
            p.validate(&m).unwrap();
            assert_eq!(p.held_out_authors.len(), 1);
            let held = p.held_out_authors.iter().next().unwrap();
            assert!(p.train_ids.iter().all(|id| &index[id.as_str()].author_label != held));
            assert!(p.dev_ids.iter().all(|id| &index[id.as_str()].author_label != held));
            assert!(p.test_ids.iter().all(|id| &index[id.as_str()].author_label == held));
            assert_eq!(p.test_ids.len(), 2);
        }
    }

    #[test]
    fn holdout_two_authors() {
        let m = DatasetManifest::new(
            vec![
                rec("a1", "A", "LF", SplitRole::Train),
                rec("a2", "A", "LF", SplitRole::Test),
                rec("b1", "B", "LF", SplitRole::Train),
                rec("b2", "B", "LF", SplitRole::Test),
            ],
            10,
        )
        .unwrap();
        let plans = make_author_holdout_splits(&m).unwrap();
        assert_eq!(plans[0].name, "holdout-A");
        assert_eq!(plans[0].train_ids, BTreeSet::from(["b1".to_string()]));
        assert_eq!(plans[0].test_ids, BTreeSet::from(["a2".to_string()]));
    }

    #[test]
    fn holdout_needs_two_authors() {
        let m = DatasetManifest::new(vec![rec("a1", "A", "LF", SplitRole::Train)], 10).unwrap();
        assert!(make_author_holdout_splits(&m).is_err());
    }

    #[test]
    fn domain_split() {
        let m = DatasetManifest::new(
            vec![
                rec("a-train", "A", "LF", SplitRole::Train),
                rec("a-dev", "A", "LF", SplitRole::Dev),
                rec("a-id-test", "A", "LF", SplitRole::Test),
                rec("a-ood", "A", "SSP", SplitRole::Test),
            ],
            10,
        )
        .unwrap();
        let ood = BTreeMap::from([("A".to_string(), BTreeSet::from(["SSP".to_string()]))]);
        let plan = make_domain_split(&m, &ood).unwrap();
        plan.validate(&m).unwrap();
        assert_eq!(plan.test_ids, BTreeSet::from(["a-ood".to_string()]));
        assert_eq!(plan.train_ids, BTreeSet::from(["a-train".to_string()]));
        assert_eq!(plan.dev_ids, BTreeSet::from(["a-dev".to_string()]));

        let id = make_id_split(&m, &ood);
        assert_eq!(id.test_ids, BTreeSet::from(["a-id-test".to_string()]));

        let empty = make_domain_split(&m, &BTreeMap::new()).unwrap();
        assert!(empty.test_ids.is_empty());
    }

    #[test]
    fn domain_split_rejects_overlap() {
        let m = DatasetManifest::new(vec![rec("a", "A", "SSP", SplitRole::Train)], 10).unwrap();
        let ood = BTreeMap::from([("A".to_string(), BTreeSet::from(["SSP".to_string()]))]);
        assert!(make_domain_split(&m, &ood).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn clean_is_idempotent(raw in "[ a-zA-Z<>\u{201C}\u{201D}\u{2019}\u{00E9}.\n]{0,200}", trim in 0usize..5) {
                let once = clean_text(&raw, trim);
                prop_assert_eq!(clean_text(&once, 0), once);
            }

            #[test]
            fn splits_are_disjoint(roles in proptest::collection::vec((0usize..4, 0u8..3, 0usize..3), 2..40)) {
                let records: Vec<DocumentRecord> = roles.iter().enumerate().map(|(i, &(a, r, g))| {
                    let role = [SplitRole::Train, SplitRole::Dev, SplitRole::Test][r as usize];
                    rec(&format!("d{i}"), &format!("A{a}"), ["LF", "HB", "SSP"][g], role)
                }).collect();
                let m = DatasetManifest::new(records, 100).unwrap();
                if m.authors.len() >= 2 {
                    for p in make_author_holdout_splits(&m).unwrap() {
                        prop_assert!(p.validate(&m).is_ok());
                    }
                }
                let ood: BTreeMap<_, _> = m.authors.iter().map(|a| (a.clone(), BTreeSet::from(["SSP".to_string()]))).collect();
                if let Ok(p) = make_domain_split(&m, &ood) {
                    prop_assert!(p.validate(&m).is_ok());
                }
                prop_assert!(make_id_split(&m, &ood).validate(&m).is_ok());
            }
        }
    }
}
