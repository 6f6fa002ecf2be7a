//! Corpus ingestion: directory scans, manifests, stratified splits,
//! geometric augmentation, class balancing, multi-corpus combination and
//! seeded batching.

mod augment;
mod batch;
mod protocol;
mod scan;
mod synth;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::colorspace::ImageTensor;
use crate::error::{Error, Result};

pub use augment::{augment, crop_resize, AugmentOp};
pub use batch::{preprocess, Batch, PreparedSet};
pub use protocol::{balance, combine, split, CombineMode, SplitSpec};
pub use scan::{scan_directory, ScanReport};
pub use synth::{synth_corpus, SynthOptions};

/// Class of an image. CGI is the positive class everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "CGI")]
    Cgi,
    #[serde(rename = "REAL")]
    Real,
}

impl Label {
    pub const BOTH: [Label; 2] = [Label::Cgi, Label::Real];

    /// Model class index: REAL = 0, CGI = 1.
    pub fn index(self) -> usize {
        match self {
            Label::Real => 0,
            Label::Cgi => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Real),
            1 => Ok(Label::Cgi),
            _ => Err(Error::Label(format!("class index {i} is not binary"))),
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Cgi
    }

    /// Directory name in a corpus root.
    pub fn dir_name(self) -> &'static str {
        match self {
            Label::Cgi => "cgi",
            Label::Real => "real",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Cgi => "CGI",
            Label::Real => "REAL",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cgi" => Ok(Label::Cgi),
            "real" => Ok(Label::Real),
            _ => Err(Error::Label(format!("unknown label {s:?}"))),
        }
    }
}

/// One image of a manifest. Augmented records point at their parent and
/// carry the transform; their `path` is virtual (`<parent>#<op>@<seed>`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub label: Label,
    pub source: String,
    pub augmented_from: Option<PathBuf>,
    #[serde(skip)]
    pub augmentation: Option<(AugmentOp, u64)>,
}

impl ManifestRecord {
    pub fn original(path: impl Into<PathBuf>, label: Label, source: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            label,
            source: source.into(),
            augmented_from: None,
            augmentation: None,
        }
    }

    pub fn augmented(parent: &ManifestRecord, op: AugmentOp, seed: u64) -> Self {
        let mut path = parent.path.clone().into_os_string();
        path.push(format!("#{op}@{seed}"));
        Self {
            path: path.into(),
            label: parent.label,
            source: parent.source.clone(),
            augmented_from: Some(parent.path.clone()),
            augmentation: Some((op, seed)),
        }
    }

    pub fn is_augmented(&self) -> bool {
        self.augmented_from.is_some()
    }

    /// Decodes the image, applying the augmentation for derived records.
    pub fn load(&self) -> Result<ImageTensor> {
        match (&self.augmented_from, self.augmentation) {
            (Some(parent), Some((op, seed))) => Ok(augment(&ImageTensor::load(parent)?, op, seed)),
            (None, _) => ImageTensor::load(&self.path),
            (Some(_), None) => Err(Error::Input(format!(
                "augmented record {} has no transform",
                self.path.display()
            ))),
        }
    }

    fn restore_augmentation(&mut self) -> Result<()> {
        if self.augmented_from.is_none() {
            return Ok(());
        }
        let s = self.path.to_string_lossy();
        let tag = s
            .rsplit_once('#')
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Input(format!("augmented path {s} has no #op@seed suffix")))?;
        let (op, seed) = tag
            .split_once('@')
            .ok_or_else(|| Error::Input(format!("augmented path {s} has no @seed")))?;
        let seed = seed
            .parse()
            .map_err(|_| Error::Input(format!("augmented path {s} has a bad seed")))?;
        self.augmentation = Some((op.parse()?, seed));
        Ok(())
    }
}

pub fn write_manifest(records: &[ManifestRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let mut rec: ManifestRecord = row?;
        rec.restore_augmentation()?;
        out.push(rec);
    }
    Ok(out)
}

/// Record counts per label, `[cgi, real]`.
pub fn class_counts(records: &[ManifestRecord]) -> [usize; 2] {
    let cgi = records.iter().filter(|r| r.label == Label::Cgi).count();
    [cgi, records.len() - cgi]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_parsing_is_case_insensitive() {
        assert_eq!("CGI".parse::<Label>().unwrap(), Label::Cgi);
        assert_eq!("Real".parse::<Label>().unwrap(), Label::Real);
        assert!("fake".parse::<Label>().is_err());
        assert_eq!(Label::from_index(Label::Cgi.index()).unwrap(), Label::Cgi);
    }

    #[test]
    fn manifest_csv_roundtrip_restores_augmentation() {
        let dir = tempfile::tempdir().unwrap();
        let a = ManifestRecord::original("x/cgi/a, b.png", Label::Cgi, "D1");
        let b = ManifestRecord::augmented(&a, AugmentOp::CropResize { scale: 0.8125 }, 77);
        let c = ManifestRecord::augmented(&a, AugmentOp::Rot90, 3);
        let path = dir.path().join("m.csv");
        write_manifest(&[a.clone(), b.clone(), c.clone()], &path).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, vec![a, b, c]);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("path,label,source,augmented_from\n"));
    }
}
