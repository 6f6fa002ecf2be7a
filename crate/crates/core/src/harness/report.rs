use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::run::read_results;
use super::spec::ExperimentSpec;
use crate::error::{Error, Result};

const REFERENCE_CSV: &str = include_str!("../../data/reference_results.csv");

/// Published full-scale numbers, shipped for side-by-side comparison only.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ReferenceRow {
    pub corpus: String,
    pub model: String,
    pub colorspace: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
}

pub fn reference_results() -> Result<Vec<ReferenceRow>> {
    let mut r = csv::Reader::from_reader(REFERENCE_CSV.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Markdown summary of a run directory: desk-scale results with raw counts,
/// followed by the reference table.
pub fn render_report(run_root: impl AsRef<Path>) -> Result<String> {
    let root = run_root.as_ref();
    let rows = read_results(root.join("results.csv"))?;
    let mut out = String::new();
    let name = root.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
    let _ = writeln!(out, "# Run {name}\n");
    let _ = writeln!(
        out,
        "| run | protocol | train | test | space | n | tp | fp | fn | tn | acc | prec | rec | f1 | auc |"
    );
    let _ = writeln!(out, "|---|---|---|---|---|---|---|---|---|---|---|---|---|---|---|");
    for r in &rows {
        let auc = r.auc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {} |",
            r.tag,
            r.protocol,
            r.train,
            r.test,
            r.colorspace,
            r.samples,
            r.tp,
            r.fp,
            r.fn_,
            r.tn,
            r.accuracy,
            r.precision,
            r.recall,
            r.f1,
            auc
        );
    }
    let _ = writeln!(
        out,
        "\n## Published full-scale reference\n\nFor comparison only; these are not thresholds and were obtained on the original corpora at full scale.\n"
    );
    let _ = writeln!(out, "| corpus | model | space | acc | prec | rec | f1 | auc |");
    let _ = writeln!(out, "|---|---|---|---|---|---|---|---|");
    for r in reference_results()? {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} |",
            r.corpus, r.model, r.colorspace, r.accuracy, r.precision, r.recall, r.f1, r.auc
        );
    }
    Ok(out)
}

/// Writes `report.md` into the run directory and returns its path.
pub fn write_report_md(run_root: impl AsRef<Path>) -> Result<PathBuf> {
    let root = run_root.as_ref();
    let path = root.join("report.md");
    fs::write(&path, render_report(root)?)?;
    Ok(path)
}

/// Files a finished run directory must contain. Returns the missing ones.
pub fn check_completeness(run_root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = run_root.as_ref();
    let spec_path = root.join("spec.toml");
    let mut missing = Vec::new();
    if !spec_path.exists() {
        missing.push(spec_path);
        return Ok(missing);
    }
    let spec = ExperimentSpec::load(&spec_path)?;
    let results = root.join("results.csv");
    if !results.exists() {
        missing.push(results);
        return Ok(missing);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n != "corpora"))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        missing.push(root.join("<run directories>"));
    }
    let mut required = vec!["manifest_train.csv", "manifest_val.csv", "history.csv", "metrics.json", "roc.csv"];
    if spec.embed.is_some() {
        required.extend(["features.csv", "tsne.csv"]);
    }
    for d in dirs {
        for f in &required {
            let p = d.join(f);
            if !p.exists() {
                missing.push(p);
            }
        }
    }
    Ok(missing)
}
