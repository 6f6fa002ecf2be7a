use std::collections::HashSet;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AugmentOp, Label, ManifestRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            seed: 0,
            stratified: true,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Spec(format!("train fraction {} outside (0, 1)", self.train_fraction)));
        }
        if !self.stratified {
            return Err(Error::Spec("only stratified splits are supported".into()));
        }
        Ok(())
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stratified split. Each class contributes `round(fraction · n)` records
/// to the training side, clamped so both sides keep at least one. Output
/// preserves manifest order.
pub fn split(manifest: &[ManifestRecord], spec: &SplitSpec) -> Result<(Vec<ManifestRecord>, Vec<ManifestRecord>)> {
    spec.validate()?;
    let mut in_train = vec![false; manifest.len()];
    for label in Label::BOTH {
        let mut idx: Vec<usize> = (0..manifest.len()).filter(|&i| manifest[i].label == label).collect();
        if idx.len() < 2 {
            return Err(Error::Balance(format!(
                "class {label} has {} records; a split needs at least 2",
                idx.len()
            )));
        }
        let n = idx.len();
        let n_train = ((spec.train_fraction * n as f64).round() as usize).clamp(1, n - 1);
        idx.shuffle(&mut rng_for(spec.seed, label.index() as u64));
        for &i in &idx[..n_train] {
            in_train[i] = true;
        }
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (r, t) in manifest.iter().zip(in_train) {
        if t {
            train.push(r.clone());
        } else {
            val.push(r.clone());
        }
    }
    Ok((train, val))
}

/// Tops every class up to `target` records with augmented copies of
/// uniformly drawn originals, cycling through the transforms. Input records
/// are kept in order and the new ones appended, CGI first.
pub fn balance(manifest: &[ManifestRecord], target: usize, seed: u64) -> Result<Vec<ManifestRecord>> {
    let mut out = manifest.to_vec();
    for label in Label::BOTH {
        let current = manifest.iter().filter(|r| r.label == label).count();
        let originals: Vec<&ManifestRecord> = manifest
            .iter()
            .filter(|r| r.label == label && !r.is_augmented())
            .collect();
        if originals.is_empty() {
            return Err(Error::Balance(format!("class {label} has no original records")));
        }
        if target < current {
            return Err(Error::Balance(format!(
                "target {target} is below the {current} {label} records already present"
            )));
        }
        let mut rng = rng_for(seed, label.index() as u64);
        let mut seen: HashSet<(PathBuf, String, u64)> = HashSet::new();
        let mut k = 0;
        while k < target - current {
            let parent = originals[rng.random_range(0..originals.len())];
            let op = AugmentOp::round_robin(k, &mut rng);
            let s: u64 = rng.random();
            if seen.insert((parent.path.clone(), op.to_string(), s)) {
                out.push(ManifestRecord::augmented(parent, op, s));
                k += 1;
            }
        }
    }
    Ok(out)
}

/// How [`combine`] splits a per-class cap across sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    /// Equal shares; sources that run out hand their remainder to the rest.
    #[default]
    EqualShare,
    /// Shares proportional to each source's size (largest remainder).
    Proportional,
}

fn equal_quotas(avail: &[usize], cap: usize) -> Vec<usize> {
    let mut quota = vec![0; avail.len()];
    let mut active: Vec<usize> = (0..avail.len()).filter(|&i| avail[i] > 0).collect();
    let mut remaining = cap;
    loop {
        if active.is_empty() {
            return quota;
        }
        let share = remaining / active.len();
        let saturated: Vec<usize> = active.iter().copied().filter(|&i| avail[i] <= share).collect();
        if saturated.is_empty() {
            let extra = remaining % active.len();
            for (k, &i) in active.iter().enumerate() {
                quota[i] = share + usize::from(k < extra);
            }
            return quota;
        }
        for &i in &saturated {
            quota[i] = avail[i];
            remaining -= avail[i];
        }
        active.retain(|i| !saturated.contains(i));
    }
}

fn proportional_quotas(avail: &[usize], cap: usize) -> Vec<usize> {
    let total: usize = avail.iter().sum();
    if total == 0 {
        return vec![0; avail.len()];
    }
    let mut quota: Vec<usize> = avail.iter().map(|&a| a * cap / total).collect();
    let mut rema: Vec<(usize, usize)> = avail.iter().enumerate().map(|(i, &a)| ((a * cap) % total, i)).collect();
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = cap - quota.iter().sum::<usize>();
    for &(_, i) in rema.iter().take(short) {
        quota[i] += 1;
    }
    quota
}

/// Draws exactly `per_class_cap` records per class from several corpora.
/// Paths repeated across inputs count once (first occurrence).
pub fn combine(
    manifests: &[Vec<ManifestRecord>],
    per_class_cap: usize,
    seed: u64,
    mode: CombineMode,
) -> Result<Vec<ManifestRecord>> {
    if manifests.is_empty() {
        return Err(Error::Spec("combine needs at least one manifest".into()));
    }
    let mut seen = HashSet::new();
    let deduped: Vec<Vec<&ManifestRecord>> = manifests
        .iter()
        .map(|m| m.iter().filter(|r| seen.insert(r.path.clone())).collect())
        .collect();
    let mut out = Vec::new();
    for label in Label::BOTH {
        let pools: Vec<Vec<&ManifestRecord>> = deduped
            .iter()
            .map(|m| m.iter().copied().filter(|r| r.label == label).collect())
            .collect();
        let avail: Vec<usize> = pools.iter().map(Vec::len).collect();
        let total: usize = avail.iter().sum();
        if per_class_cap > total {
            return Err(Error::Capacity(format!(
                "cap {per_class_cap} exceeds the {total} {label} records available"
            )));
        }
        let quotas = match mode {
            CombineMode::EqualShare => equal_quotas(&avail, per_class_cap),
            CombineMode::Proportional => proportional_quotas(&avail, per_class_cap),
        };
        for (s, (pool, q)) in pools.iter().zip(quotas).enumerate() {
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.shuffle(&mut rng_for(seed, (s * 2 + label.index()) as u64));
            let mut chosen = order[..q].to_vec();
            chosen.sort_unstable();
            out.extend(chosen.into_iter().map(|i| pool[i].clone()));
        }
    }
    Ok(out)
}
