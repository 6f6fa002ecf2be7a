use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::plot::emit_plots;
use super::spec::{ExperimentSpec, Protocol};
use crate::colorspace::ColorSpace;
use crate::dataset::{
    balance, class_counts, combine, scan_directory, split, write_manifest, Label, ManifestRecord, PreparedSet,
};
use crate::error::{Error, Result};
use crate::metrics::{write_report, MetricsReport};
use crate::swin::SwinModel;
use crate::training::{evaluate, train, Checkpoints, Evaluation};
use crate::tsne::{tsne_embed, write_features_csv, write_layout_csv, EmbeddingSet, TsneConfig};

/// One line of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub tag: String,
    pub protocol: String,
    pub train: String,
    pub test: String,
    pub colorspace: ColorSpace,
    pub samples: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
}

impl ResultRow {
    fn new(tag: &str, protocol: &str, train: &str, test: &str, space: ColorSpace, r: &MetricsReport) -> Self {
        Self {
            tag: tag.into(),
            protocol: protocol.into(),
            train: train.into(),
            test: test.into(),
            colorspace: space,
            samples: r.samples,
            tp: r.tp,
            fp: r.fp,
            fn_: r.fn_,
            tn: r.tn,
            accuracy: r.accuracy,
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            auc: r.auc,
        }
    }
}

/// Outcome of one evaluation inside an experiment.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub row: ResultRow,
    pub report: MetricsReport,
    pub dir: PathBuf,
}

pub fn write_results(rows: &[ResultRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Uses a single worker thread for the process-wide pool when
/// `deterministic` is set. Results never depend on the thread count; this
/// only pins scheduling. Has no effect once the pool exists.
pub fn configure_threads(deterministic: bool) {
    if deterministic {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
}

fn start(spec: &ExperimentSpec, protocol: Protocol) -> Result<PathBuf> {
    let mut spec = spec.clone();
    spec.protocol = protocol;
    spec.validate()?;
    let root = spec.run_dir();
    fs::create_dir_all(&root)?;
    fs::write(root.join("spec.toml"), spec.to_toml()?)?;
    Ok(root)
}

fn scan_corpus(spec: &ExperimentSpec, id: &str, root: &Path) -> Result<Vec<ManifestRecord>> {
    let c = spec.corpus(id)?;
    let (records, report) = scan_directory(&c.root, &c.id).map_err(|e| e.context(format!("corpus {id}")))?;
    let dir = root.join("corpora").join(id);
    fs::create_dir_all(&dir)?;
    write_manifest(&records, dir.join("manifest.csv"))?;
    fs::write(dir.join("scan.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    log::info!(
        "corpus {id}: {} cgi, {} real, {} unreadable",
        report.accepted[0],
        report.accepted[1],
        report.corrupt_count()
    );
    Ok(records)
}

fn balanced(spec: &ExperimentSpec, records: Vec<ManifestRecord>) -> Result<Vec<ManifestRecord>> {
    let counts = class_counts(&records);
    let target = match (spec.balance.target, spec.balance.to_max) {
        (Some(t), _) => t,
        (None, true) => counts[0].max(counts[1]),
        (None, false) => return Ok(records),
    };
    balance(&records, target, spec.seed)
}

/// Stratified subsample of at most `cap` records, half per class where
/// possible, in manifest order.
pub fn stratified_cap(records: &[ManifestRecord], cap: usize, seed: u64) -> Result<Vec<ManifestRecord>> {
    if cap < 4 {
        return Err(Error::Spec(format!("embedding cap {cap} < 4")));
    }
    let counts = class_counts(records);
    let mut quota = [cap / 2 + cap % 2, cap / 2];
    for k in 0..2 {
        if quota[k] > counts[k] {
            let spare = quota[k] - counts[k];
            quota[k] = counts[k];
            quota[1 - k] = (quota[1 - k] + spare).min(counts[1 - k]);
        }
    }
    let mut keep = vec![false; records.len()];
    for (k, label) in Label::BOTH.into_iter().enumerate() {
        let mut idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].label == label).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(label.index() as u64);
        idx.shuffle(&mut rng);
        for &i in &idx[..quota[k]] {
            keep[i] = true;
        }
    }
    Ok(records.iter().zip(keep).filter(|(_, k)| *k).map(|(r, _)| r.clone()).collect())
}

/// Pooled pre-head features of a capped stratified subsample.
pub fn embed_features(
    model: &SwinModel<f32>,
    records: &[ManifestRecord],
    space: ColorSpace,
    cap: usize,
    seed: u64,
) -> Result<(Vec<String>, EmbeddingSet)> {
    let chosen = stratified_cap(records, cap, seed)?;
    let set = PreparedSet::prepare(&chosen, space, model.config().image_size);
    let usable: Vec<usize> = (0..set.len()).filter(|&i| set.input(i).is_some()).collect();
    let feats = usable
        .par_iter()
        .map(|&i| model.forward_one(set.input(i).expect("usable")).map(|(_, f)| f))
        .collect::<Result<Vec<_>>>()?;
    let mut paths = Vec::new();
    let mut out = EmbeddingSet {
        vectors: Vec::new(),
        labels: Vec::new(),
        sources: Vec::new(),
        low_dim: Vec::new(),
        cost_trace: Vec::new(),
    };
    for (&i, f) in usable.iter().zip(feats) {
        let r = &chosen[i];
        paths.push(r.path.display().to_string());
        out.vectors.push(f.iter().map(|&v| v as f64).collect());
        out.labels.push(r.label);
        out.sources.push(r.source.clone());
    }
    Ok((paths, out))
}

/// t-SNE with the perplexity lowered to `(n - 1) / 3` when the point count
/// is too small for the configured value.
pub fn run_tsne(set: &EmbeddingSet, config: &TsneConfig) -> Result<(EmbeddingSet, TsneConfig)> {
    let n = set.vectors.len();
    let mut config = config.clone();
    let limit = (n as f64 - 1.0) / 3.0;
    if config.perplexity > limit && limit >= 1.0 {
        log::warn!("perplexity {} lowered to {limit} for {n} points", config.perplexity);
        config.perplexity = limit;
    }
    let out = tsne_embed(&set.vectors, &set.labels, &set.sources, &config)?;
    Ok((out, config))
}

fn write_embedding(dir: &Path, paths: &[String], set: &EmbeddingSet, config: &TsneConfig) -> Result<()> {
    write_features_csv(paths, set, dir.join("features.csv"))?;
    let (layout, used) = run_tsne(set, config)?;
    write_layout_csv(&layout, dir.join("tsne.csv"))?;
    fs::write(dir.join("tsne_config.json"), serde_json::to_string_pretty(&used)? + "\n")?;
    Ok(())
}

/// Split-train-evaluate for one color space inside `dir`.
fn train_and_evaluate(
    spec: &ExperimentSpec,
    dir: &Path,
    train_records: &[ManifestRecord],
    val_records: &[ManifestRecord],
    space: ColorSpace,
) -> Result<(SwinModel<f32>, PreparedSet, Evaluation)> {
    fs::create_dir_all(dir)?;
    write_manifest(train_records, dir.join("manifest_train.csv"))?;
    write_manifest(val_records, dir.join("manifest_val.csv"))?;
    let size = spec.model.image_size;
    let train_set = PreparedSet::prepare(train_records, space, size);
    let val_set = PreparedSet::prepare(val_records, space, size);
    let mut model = SwinModel::new(spec.model.clone(), spec.seed)?;
    let mut tc = spec.train.clone();
    tc.seed = spec.seed;
    let history = train(&mut model, &train_set, &val_set, &tc, Checkpoints { dir: Some(dir) })?;
    history.save_csv(dir.join("history.csv"))?;
    let ev = evaluate(&model, &val_set)?;
    let report = ev.report()?;
    write_report(&report, dir.join("metrics.json"), dir.join("roc.csv"))?;
    if let Some(embed) = &spec.embed {
        let (paths, set) = embed_features(&model, val_records, space, embed.cap, spec.seed)?;
        write_embedding(dir, &paths, &set, &embed.tsne)?;
    }
    Ok((model, val_set, ev))
}

fn finish(root: &Path, results: &[RunResult]) -> Result<()> {
    let rows: Vec<ResultRow> = results.iter().map(|r| r.row.clone()).collect();
    write_results(&rows, root.join("results.csv"))?;
    let mut dirs: Vec<&PathBuf> = results.iter().map(|r| &r.dir).collect();
    dirs.dedup();
    for d in dirs {
        emit_plots(d)?;
    }
    Ok(())
}

/// Train and test within each corpus, for every color space.
pub fn run_intra(spec: &ExperimentSpec) -> Result<Vec<RunResult>> {
    let root = start(spec, Protocol::Intra)?;
    let mut results = Vec::new();
    for c in &spec.corpus {
        let records = balanced(spec, scan_corpus(spec, &c.id, &root)?)?;
        let (tr, va) = split(&records, &spec.split).map_err(|e| e.context(format!("corpus {}", c.id)))?;
        for &space in &spec.colorspaces {
            let tag = format!("intra_{}_{}", c.id, space.name());
            log::info!("{tag}: {} train, {} validation", tr.len(), va.len());
            let dir = root.join(&tag);
            let (_, _, ev) = train_and_evaluate(spec, &dir, &tr, &va, space).map_err(|e| e.context(tag.clone()))?;
            let report = ev.report()?;
            results.push(RunResult {
                row: ResultRow::new(&tag, "intra", &c.id, &c.id, space, &report),
                report,
                dir,
            });
        }
    }
    finish(&root, &results)?;
    Ok(results)
}

/// Pool all corpora with a per-class cap, then train and test on the pool.
/// Reports include a per-source breakdown of the validation split.
pub fn run_combined(spec: &ExperimentSpec) -> Result<Vec<RunResult>> {
    let root = start(spec, Protocol::Combined)?;
    let mut manifests = Vec::new();
    for c in &spec.corpus {
        manifests.push(balanced(spec, scan_corpus(spec, &c.id, &root)?)?);
    }
    let cap = match spec.combine.cap {
        Some(c) => c,
        None => {
            let totals = manifests.iter().map(|m| class_counts(m)).fold([0, 0], |a, b| [a[0] + b[0], a[1] + b[1]]);
            totals[0].min(totals[1])
        }
    };
    let pooled = combine(&manifests, cap, spec.seed, spec.combine.mode)?;
    write_manifest(&pooled, root.join("manifest_combined.csv"))?;
    let (tr, va) = split(&pooled, &spec.split)?;
    let mut results = Vec::new();
    for &space in &spec.colorspaces {
        let tag = format!("combined_{}", space.name());
        let dir = root.join(&tag);
        let (_, _, ev) = train_and_evaluate(spec, &dir, &tr, &va, space).map_err(|e| e.context(tag.clone()))?;
        let report = ev.report()?;
        results.push(RunResult {
            row: ResultRow::new(&tag, "combined", "combined", "combined", space, &report),
            report,
            dir: dir.clone(),
        });
        for c in &spec.corpus {
            let sub = ev.filter(|i| va[i].source == c.id);
            if sub.labels.is_empty() {
                continue;
            }
            let r = sub.report()?;
            r.save_json(dir.join(format!("metrics_source_{}.json", c.id)))?;
            results.push(RunResult {
                row: ResultRow::new(&format!("{tag}@{}", c.id), "combined-source", "combined", &c.id, space, &r),
                report: r,
                dir: dir.clone(),
            });
        }
    }
    finish(&root, &results)?;
    Ok(results)
}

/// Train on one corpus, test on each other corpus in full. Validation
/// results on the training corpus are reported alongside as `cross-val`.
pub fn run_cross(spec: &ExperimentSpec) -> Result<Vec<RunResult>> {
    let root = start(spec, Protocol::Cross)?;
    let pairs = spec.cross_pairs()?;
    let mut scanned: BTreeMap<String, Vec<ManifestRecord>> = BTreeMap::new();
    for (a, b) in &pairs {
        for id in [a, b] {
            if !scanned.contains_key(id) {
                scanned.insert(id.clone(), scan_corpus(spec, id, &root)?);
            }
        }
    }
    let mut trains: Vec<&String> = pairs.iter().map(|p| &p.0).collect();
    trains.dedup();
    let mut results = Vec::new();
    for train_id in trains {
        let records = balanced(spec, scanned[train_id].clone())?;
        let (tr, va) = split(&records, &spec.split)?;
        for &space in &spec.colorspaces {
            let tag = format!("cross_{}_{}", train_id, space.name());
            let dir = root.join(&tag);
            let (model, _, ev) =
                train_and_evaluate(spec, &dir, &tr, &va, space).map_err(|e| e.context(tag.clone()))?;
            let report = ev.report()?;
            results.push(RunResult {
                row: ResultRow::new(&tag, "cross-val", train_id, train_id, space, &report),
                report,
                dir: dir.clone(),
            });
            for (_, test_id) in pairs.iter().filter(|p| &p.0 == train_id) {
                let test = &scanned[test_id];
                write_manifest(test, dir.join(format!("manifest_test_{test_id}.csv")))?;
                let set = PreparedSet::prepare(test, space, spec.model.image_size);
                let r = evaluate(&model, &set)?.report()?;
                write_report(
                    &r,
                    dir.join(format!("metrics_{test_id}.json")),
                    dir.join(format!("roc_{test_id}.csv")),
                )?;
                results.push(RunResult {
                    row: ResultRow::new(
                        &format!("cross_{}_{}_{}", train_id, test_id, space.name()),
                        "cross",
                        train_id,
                        test_id,
                        space,
                        &r,
                    ),
                    report: r,
                    dir: dir.clone(),
                });
            }
        }
    }
    finish(&root, &results)?;
    Ok(results)
}

/// Dispatches on `spec.protocol`.
pub fn run(spec: &ExperimentSpec) -> Result<Vec<RunResult>> {
    match spec.protocol {
        Protocol::Intra => run_intra(spec),
        Protocol::Combined => run_combined(spec),
        Protocol::Cross => run_cross(spec),
    }
}
