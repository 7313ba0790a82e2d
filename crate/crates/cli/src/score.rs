//! Scoring through an external scorer command.

use std::fs;
use std::path::Path;
use std::process::Command;

use anyhow::{bail, Context, Result};
use trace_core::corpus::{DatasetManifest, TextCleaner, DEFAULT_MARKERS};
use trace_core::scorestream::{read_stream, validate_stream, write_stream};
use trace_core::RunConfig;

use crate::jobs::{digest, for_each_doc, is_fresh, write_stamp, Step, Tally};

pub const SCORER_ENV: &str = "TRACE_SCORER_CMD";

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

/// Fills `{input_text}`, `{output_stream}`, `{context}` and `{evaluator}`.
pub fn render_command(template: &str, input: &Path, output: &Path, context: u32, evaluator: &str) -> String {
    template
        .replace("{input_text}", &shell_quote(&input.to_string_lossy()))
        .replace("{output_stream}", &shell_quote(&output.to_string_lossy()))
        .replace("{context}", &context.to_string())
        .replace("{evaluator}", &shell_quote(evaluator))
}

pub fn run(manifest: &DatasetManifest, streams: &Path, template: &str, cfg: &RunConfig) -> Result<Tally> {
    if !template.contains("{output_stream}") {
        bail!("{SCORER_ENV} must contain the {{output_stream}} placeholder");
    }
    let cleaned_dir = streams.join(".cleaned");
    fs::create_dir_all(&cleaned_dir).with_context(|| format!("creating {}", cleaned_dir.display()))?;
    let cleaner = TextCleaner::new(DEFAULT_MARKERS.iter().copied());
    let index = manifest.index();
    let ids: Vec<String> = manifest.records.iter().map(|r| r.doc_id.clone()).collect();
    let settings = cfg.scoring_hash();
    Ok(for_each_doc("score", &ids, |id| {
        let rec = index[id];
        let raw = fs::read(&rec.text_path).with_context(|| format!("reading {}", rec.text_path.display()))?;
        let text = cleaner.clean(&String::from_utf8_lossy(&raw), cfg.head_tail_trim);
        if text.is_empty() {
            bail!("document is empty after cleaning (trim {} from each end)", cfg.head_tail_trim);
        }
        let out = streams.join(format!("{id}.trsc"));
        let key = digest(&[text.as_bytes(), settings.as_bytes(), template.as_bytes()]);
        if is_fresh(&out, &key) {
            return Ok(Step::Skipped);
        }
        let input = cleaned_dir.join(format!("{id}.txt"));
        fs::write(&input, &text).with_context(|| format!("writing {}", input.display()))?;
        let cmd = render_command(template, &input, &out, cfg.context_window, &cfg.evaluator_id);
        let res = Command::new("sh").arg("-c").arg(&cmd).output().context("launching scorer")?;
        if !res.status.success() {
            let stderr = String::from_utf8_lossy(&res.stderr);
            let tail: Vec<&str> = stderr.lines().rev().take(5).collect();
            bail!(
                "scorer exited with {}: {}",
                res.status,
                tail.into_iter().rev().collect::<Vec<_>>().join(" | ")
            );
        }
        let mut stream = read_stream(&out).context("malformed stream output")?;
        let violations = validate_stream(&stream);
        if !violations.is_empty() {
            bail!("scorer output fails validation: {violations:?}");
        }
        if stream.vocab_size != manifest.vocab_size {
            bail!("scorer reported |V| = {}, manifest says {}", stream.vocab_size, manifest.vocab_size);
        }
        if stream.doc_id != id {
            stream.doc_id = id.to_string();
            write_stream(&stream, &out)?;
        }
        write_stamp(&out, &key)?;
        Ok(Step::Done)
    }))
}
