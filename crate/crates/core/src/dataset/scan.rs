use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{Label, ManifestRecord};
use crate::colorspace::ImageTensor;
use crate::error::{Error, Result};

/// Files a scan could not use.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ScanReport {
    pub root: PathBuf,
    pub accepted: [usize; 2],
    pub corrupt: Vec<(PathBuf, String)>,
}

impl ScanReport {
    pub fn corrupt_count(&self) -> usize {
        self.corrupt.len()
    }
}

fn class_dir(root: &Path, label: Label) -> Result<PathBuf> {
    let mut found = None;
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() && entry.file_name().to_string_lossy().eq_ignore_ascii_case(label.dir_name()) {
            if found.is_some() {
                return Err(Error::Layout(format!(
                    "{} has more than one {} directory",
                    root.display(),
                    label.dir_name()
                )));
            }
            found = Some(entry.path());
        }
    }
    found.ok_or_else(|| Error::Layout(format!("{} has no {} directory", root.display(), label.dir_name())))
}

/// A JPEG stream must end with an EOI marker; decoders tend to pad
/// truncated scans silently instead of failing.
fn check_jpeg_complete(path: &Path) -> Result<()> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(&[0xFF, 0xD8]) {
        let end = bytes.iter().rposition(|&b| b != 0).unwrap_or(0);
        if end < 1 || bytes[end - 1..=end] != [0xFF, 0xD9] {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                reason: "JPEG stream is truncated (no end-of-image marker)".into(),
            });
        }
    }
    Ok(())
}

/// Scans `<root>/{cgi,real}/` (case-insensitive) for decodable images.
/// Undecodable files are excluded and listed in the report. Hidden files
/// are ignored.
pub fn scan_directory(root: impl AsRef<Path>, source: &str) -> Result<(Vec<ManifestRecord>, ScanReport)> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Layout(format!("{} is not a directory", root.display())));
    }
    let mut records = Vec::new();
    let mut report = ScanReport {
        root: root.to_path_buf(),
        ..Default::default()
    };
    for (slot, label) in Label::BOTH.into_iter().enumerate() {
        let dir = class_dir(root, label)?;
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
            .filter(|e| !e.file_name().to_string_lossy().starts_with('.'))
            .map(|e| e.path())
            .collect();
        files.sort();
        for path in files {
            match check_jpeg_complete(&path).and_then(|_| ImageTensor::load(&path)) {
                Ok(_) => {
                    report.accepted[slot] += 1;
                    records.push(ManifestRecord::original(path, label, source));
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    report.corrupt.push((path, e.to_string()));
                }
            }
        }
    }
    Ok((records, report))
}
