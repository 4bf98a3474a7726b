//! Benchmark runner over a JSONL manifest of finished outputs.
//!
//! ```json
//! {"sample_id": "dog-0", "subject_path": "subjects/dog.png", "class": "dog",
//!  "prompt": "a dog in Paris", "output_path": "out/dog-0.png"}
//! {"sample_id": "cat-3", "subject_path": "subjects/cat.png", "input_path": "in/3.png",
//!  "mask_path": "in/3_mask.png", "output_path": "out/cat-3.png"}
//! ```
//!
//! `reference_path` names a vanilla-backbone output for generation samples;
//! editing samples use their input as the naturalness reference.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use imprint_core::metrics::{evaluate_samples, MetricReport, MetricSuite, Sample, SampleRecord};
use imprint_core::workflows::ReferenceSubject;
use serde::{Deserialize, Serialize};

use crate::io;
use crate::job::resolve_path;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub sample_id: String,
    pub subject_path: PathBuf,
    #[serde(default)]
    pub class: Option<String>,
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default)]
    pub input_path: Option<PathBuf>,
    pub output_path: PathBuf,
    #[serde(default)]
    pub mask_path: Option<PathBuf>,
    #[serde(default)]
    pub reference_path: Option<PathBuf>,
}

pub fn parse_manifest(text: &str, origin: &Path) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::format(origin, format!("line {}: {e}", n + 1)))?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::format(origin, "manifest has no samples"));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingFile {
    pub sample_id: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub report: MetricReport,
    pub samples: Vec<SampleRecord>,
    /// Files that could not be found; their samples are left out.
    pub missing: Vec<MissingFile>,
}

fn load_sample(rec: &ManifestRecord, base: &Path) -> Result<std::result::Result<Sample, Vec<MissingFile>>> {
    let paths: Vec<&PathBuf> = [Some(&rec.subject_path), Some(&rec.output_path), rec.input_path.as_ref(), rec.mask_path.as_ref(), rec.reference_path.as_ref()]
        .into_iter()
        .flatten()
        .collect();
    let missing: Vec<MissingFile> = paths
        .iter()
        .filter(|p| !resolve_path(base, p).exists())
        .map(|p| MissingFile { sample_id: rec.sample_id.clone(), path: (*p).clone() })
        .collect();
    if !missing.is_empty() {
        return Ok(Err(missing));
    }
    let load = |p: &Path| io::load_image(&resolve_path(base, p));
    let input = rec.input_path.as_deref().map(load).transpose()?;
    let mut output = load(&rec.output_path)?;
    let mut mask = rec.mask_path.as_deref().map(|p| io::load_mask(&resolve_path(base, p))).transpose()?;
    if let Some(inp) = &input {
        let (h, w) = inp.dims();
        output = output.resized(h, w);
        mask = mask.map(|m| io::resize_mask(&m, h, w));
    }
    Ok(Ok(Sample {
        sample_id: rec.sample_id.clone(),
        subject: ReferenceSubject::new(load(&rec.subject_path)?, rec.class.clone().unwrap_or_default()),
        prompt: rec.prompt.clone(),
        input,
        output,
        mask,
        reference: rec.reference_path.as_deref().map(load).transpose()?,
    }))
}

/// Scores every sample whose files exist. Paths resolve against `base`.
pub fn run_benchmark(records: &[ManifestRecord], base: &Path, suite: &MetricSuite) -> Result<BenchReport> {
    if records.is_empty() {
        return Err(Error::Usage("manifest has no samples".into()));
    }
    let mut samples = Vec::new();
    let mut missing = Vec::new();
    for rec in records {
        match load_sample(rec, base)? {
            Ok(s) => samples.push(s),
            Err(m) => missing.extend(m),
        }
    }
    if samples.is_empty() {
        let list: Vec<String> = missing.iter().map(|m| m.path.display().to_string()).collect();
        return Err(Error::Usage(format!("no sample could be loaded; missing: {}", list.join(", "))));
    }
    let (report, samples) = evaluate_samples(&samples, suite)?;
    Ok(BenchReport { report, samples, missing })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

/// One-row markdown table of the aggregate metrics.
pub fn render_table(b: &BenchReport) -> String {
    let r = &b.report;
    let nat = r.naturalness;
    let mut s = String::new();
    s.push_str("| Samples | DINO | IR | CLIP-I | CLIP-T | FID | KID | CMMD | LPIPS | MSE |\n");
    s.push_str("|---:|---:|---:|---:|---:|---:|---:|---:|---:|---:|\n");
    let _ = writeln!(
        s,
        "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
        r.n_samples,
        cell(Some(r.identity.dino)),
        cell(Some(r.identity.ir)),
        cell(Some(r.identity.clip_i)),
        cell(r.clip_t),
        cell(nat.map(|n| n.fid)),
        cell(nat.map(|n| n.kid)),
        cell(nat.map(|n| n.cmmd)),
        cell(r.background_lpips),
        cell(r.diversity_mse),
    );
    if !b.missing.is_empty() {
        s.push_str("\nMissing files:\n\n");
        for m in &b.missing {
            let _ = writeln!(s, "- {}: {}", m.sample_id, m.path.display());
        }
    }
    s
}

/// Writes `report.json` and `report.md` into `out`.
pub fn write_report(b: &BenchReport, out: &Path) -> Result<()> {
    io::write_bytes(&out.join("report.json"), serde_json::to_string_pretty(b).expect("reports serialize").as_bytes())?;
    io::write_bytes(&out.join("report.md"), render_table(b).as_bytes())
}
