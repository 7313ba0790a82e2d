//! Per-document work with error collection and content-hash stamps.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct DocError {
    pub doc_id: Option<String>,
    pub error: String,
}

impl DocError {
    pub fn new(doc_id: &str, error: impl std::fmt::Display) -> Self {
        DocError {
            doc_id: Some(doc_id.to_string()),
            error: error.to_string(),
        }
    }
}

#[derive(Debug, Default)]
pub struct Tally {
    pub done: usize,
    pub skipped: usize,
    pub errors: Vec<DocError>,
}

pub enum Step {
    Done,
    Skipped,
}

/// Runs `work` over `ids` in parallel. Progress lines go to stderr one at a
/// time; errors come back sorted by document.
pub fn for_each_doc<F>(label: &str, ids: &[String], work: F) -> Tally
where
    F: Fn(&str) -> anyhow::Result<Step> + Sync,
{
    let progress = Mutex::new(0usize);
    let total = ids.len();
    let results: Vec<(String, anyhow::Result<Step>)> = ids
        .par_iter()
        .map(|id| {
            let r = work(id);
            let mut n = progress.lock().unwrap();
            *n += 1;
            let status = match &r {
                Ok(Step::Done) => "ok",
                Ok(Step::Skipped) => "up to date",
                Err(_) => "FAILED",
            };
            eprintln!("[{label} {}/{total}] {id}: {status}", *n);
            (id.clone(), r)
        })
        .collect();
    let mut tally = Tally::default();
    for (id, r) in results {
        match r {
            Ok(Step::Done) => tally.done += 1,
            Ok(Step::Skipped) => tally.skipped += 1,
            Err(e) => tally.errors.push(DocError::new(&id, format!("{e:#}"))),
        }
    }
    tally
}

pub fn digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn stamp_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".stamp");
    output.with_file_name(name)
}

/// True when `output` exists and its stamp records `key`.
pub fn is_fresh(output: &Path, key: &str) -> bool {
    output.exists() && fs::read_to_string(stamp_path(output)).is_ok_and(|s| s.trim() == key)
}

pub fn write_stamp(output: &Path, key: &str) -> std::io::Result<()> {
    fs::write(stamp_path(output), format!("{key}\n"))
}
