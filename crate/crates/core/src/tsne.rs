//! Exact t-SNE: perplexity-calibrated Gaussian affinities in feature space,
//! Student-t affinities in the plane, KL descent with momentum and early
//! exaggeration.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::numerics::pairwise_sum;

/// Entropy tolerance of the bandwidth search, in bits.
pub const ENTROPY_TOLERANCE: f64 = 1e-4;
const MAX_BISECTIONS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    /// Per-coordinate adaptive gains (delta-bar-delta), as in the reference
    /// implementation.
    pub adaptive_gains: bool,
    pub init_std: f64,
    pub trace_every: usize,
    pub seed: u64,
    pub out_dims: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            adaptive_gains: true,
            init_std: 1e-4,
            trace_every: 100,
            seed: 0,
            out_dims: 2,
        }
    }
}

impl TsneConfig {
    /// Checks the config against a point count. The perplexity may not
    /// exceed `(n - 1) / 3`.
    pub fn validate(&self, n: usize) -> Result<()> {
        if n < 4 {
            return Err(Error::Spec(format!("t-SNE needs at least 4 points, got {n}")));
        }
        validate_perplexity(self.perplexity, n)?;
        if self.iterations == 0 || self.trace_every == 0 {
            return Err(Error::Spec("iterations and trace interval must be at least 1".into()));
        }
        if self.out_dims != 2 {
            return Err(Error::Spec(format!("only 2-D embeddings are supported, got {}", self.out_dims)));
        }
        if !(self.learning_rate > 0.0 && self.init_std > 0.0 && self.exaggeration >= 1.0) {
            return Err(Error::Spec("learning rate and init std must be positive, exaggeration >= 1".into()));
        }
        Ok(())
    }
}

fn validate_perplexity(perplexity: f64, n: usize) -> Result<()> {
    let limit = (n as f64 - 1.0) / 3.0;
    if !(perplexity >= 1.0 && perplexity <= limit) {
        return Err(Error::Spec(format!(
            "perplexity {perplexity} outside [1, {limit}] for {n} points"
        )));
    }
    Ok(())
}

/// Dense symmetric `n × n` matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Affinities {
    pub n: usize,
    pub values: Vec<f64>,
}

impl Affinities {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn sum(&self) -> f64 {
        pairwise_sum(&self.values)
    }
}

fn squared_distances(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    d
}

/// Conditional distribution of row `i` at precision `beta` over rescaled
/// distances, and its entropy in bits.
fn conditional(dist: &[f64], i: usize, beta: f64) -> (Vec<f64>, f64) {
    let mut p: Vec<f64> = dist
        .iter()
        .enumerate()
        .map(|(j, &d)| if j == i { 0.0 } else { (-beta * d).exp() })
        .collect();
    let z: f64 = p.iter().sum();
    let mut h = 0.0;
    for v in &mut p {
        *v /= z;
        if *v > 0.0 {
            h -= *v * v.log2();
        }
    }
    (p, h)
}

/// Row `i` of the conditional matrix `p_{j|i}` at the requested perplexity,
/// plus the achieved entropy error in bits. A row whose distances are all
/// equal is uniform whatever the bandwidth.
fn calibrate_row(d2: &[f64], n: usize, i: usize, target_bits: f64) -> (Vec<f64>, f64) {
    let row = &d2[i * n..(i + 1) * n];
    let others = || row.iter().enumerate().filter(move |&(j, _)| j != i).map(|(_, &d)| d);
    let min = others().fold(f64::INFINITY, f64::min);
    let mean = others().map(|d| d - min).sum::<f64>() / (n - 1) as f64;
    if mean <= f64::EPSILON * min.abs().max(1.0) {
        let u = 1.0 / (n - 1) as f64;
        let p = (0..n).map(|j| if j == i { 0.0 } else { u }).collect();
        return (p, 0.0);
    }
    let scaled: Vec<f64> = row.iter().map(|&d| (d - min) / mean).collect();
    let (mut lo, mut hi) = (-50.0f64, 50.0f64);
    let mut best = conditional(&scaled, i, 1.0);
    let mut best_err = (best.1 - target_bits).abs();
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        let (p, h) = conditional(&scaled, i, mid.exp());
        let err = (h - target_bits).abs();
        if err < best_err {
            best = (p, h);
            best_err = err;
        }
        if err < ENTROPY_TOLERANCE * 1e-2 {
            break;
        }
        // entropy falls as precision rises
        if h > target_bits {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (best.0, best_err)
}

/// Per-point conditionals calibrated to `perplexity`, returned unsymmetrized
/// (row `i` holds `p_{j|i}`).
pub fn conditional_affinities(x: &[Vec<f64>], perplexity: f64) -> Result<Affinities> {
    let n = x.len();
    if n < 4 {
        return Err(Error::Spec(format!("affinities need at least 4 points, got {n}")));
    }
    validate_perplexity(perplexity, n)?;
    check_vectors(x)?;
    let d2 = squared_distances(x);
    let target = perplexity.log2();
    let rows: Vec<(Vec<f64>, f64)> = (0..n).into_par_iter().map(|i| calibrate_row(&d2, n, i, target)).collect();
    let (worst, worst_err) = rows
        .iter()
        .enumerate()
        .map(|(i, r)| (i, r.1))
        .fold((0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
    if worst_err > ENTROPY_TOLERANCE {
        return Err(Error::Tolerance(format!(
            "bandwidth search for point {worst} missed the entropy target by {worst_err:.3e} bits"
        )));
    }
    Ok(Affinities {
        n,
        values: rows.into_iter().flat_map(|r| r.0).collect(),
    })
}

/// Joint affinities `p_ij = (p_{j|i} + p_{i|j}) / 2n`.
pub fn pairwise_affinities(x: &[Vec<f64>], perplexity: f64) -> Result<Affinities> {
    let c = conditional_affinities(x, perplexity)?;
    let n = c.n;
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            values[i * n + j] = (c.get(i, j) + c.get(j, i)) / (2 * n) as f64;
        }
    }
    Ok(Affinities { n, values })
}

/// Student-t affinities of a planar layout and their unnormalized kernels.
fn student_t(y: &[[f64; 2]]) -> (Affinities, Vec<f64>) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let k = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = k;
            num[j * n + i] = k;
        }
    }
    let z = pairwise_sum(&num);
    let values = num.iter().map(|v| v / z).collect();
    (Affinities { n, values }, num)
}

pub fn low_dim_affinities(y: &[[f64; 2]]) -> Result<Affinities> {
    if y.len() < 2 {
        return Err(Error::Spec("Q needs at least 2 points".into()));
    }
    Ok(student_t(y).0)
}

/// `KL(P || Q)` over all ordered pairs, with `0 · log(0 / q) = 0`.
pub fn kl_cost(p: &Affinities, q: &Affinities) -> Result<f64> {
    if p.n != q.n {
        return Err(Error::Shape(format!("P is {0}×{0}, Q is {1}×{1}", p.n, q.n)));
    }
    let mut terms = Vec::with_capacity(p.values.len());
    for (k, (&pv, &qv)) in p.values.iter().zip(&q.values).enumerate() {
        if pv > 0.0 {
            if qv <= 0.0 {
                return Err(Error::Divergence(format!(
                    "q is zero where p > 0 at pair ({}, {})",
                    k / p.n,
                    k % p.n
                )));
            }
            terms.push(pv * (pv / qv).ln());
        }
    }
    Ok(pairwise_sum(&terms))
}

fn check_vectors(x: &[Vec<f64>]) -> Result<()> {
    let dim = x.first().map_or(0, Vec::len);
    for (i, v) in x.iter().enumerate() {
        if v.len() != dim {
            return Err(Error::Shape(format!("vector {i} has length {}, expected {dim}", v.len())));
        }
        if v.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite(format!("feature vector {i}")));
        }
    }
    Ok(())
}

/// Feature vectors with their labels and (after [`tsne_embed`]) 2-D layout.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: Vec<Vec<f64>>,
    pub labels: Vec<Label>,
    pub sources: Vec<String>,
    pub low_dim: Vec<[f64; 2]>,
    /// `(iteration, cost)` samples of the descent.
    pub cost_trace: Vec<(usize, f64)>,
}

/// Runs t-SNE on `x`. Returns the final layout and the cost sampled at
/// iteration 0, every `trace_every` iterations, at the end of
/// exaggeration and at the last iteration (cost always against the
/// unexaggerated P).
pub fn tsne_embed(x: &[Vec<f64>], labels: &[Label], sources: &[String], config: &TsneConfig) -> Result<EmbeddingSet> {
    let n = x.len();
    config.validate(n)?;
    if labels.len() != n || sources.len() != n {
        return Err(Error::Input(format!("{n} vectors, {} labels, {} sources", labels.len(), sources.len())));
    }
    let p = pairwise_affinities(x, config.perplexity)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = Normal::new(0.0, config.init_std).map_err(|e| Error::Spec(e.to_string()))?;
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [init.sample(&mut rng), init.sample(&mut rng)]).collect();
    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut trace = Vec::new();
    for it in 0..config.iterations {
        let exaggerate = it < config.exaggeration_iters;
        let ex = if exaggerate { config.exaggeration } else { 1.0 };
        let momentum = if it < config.momentum_switch {
            config.momentum
        } else {
            config.final_momentum
        };
        let (q, num) = student_t(&y);
        if it == 0 || it % config.trace_every == 0 || it == config.exaggeration_iters {
            trace.push((it, traced_cost(&p, &q, it)?));
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = (ex * p.get(i, j) - q.get(i, j)) * num[i * n + j];
                g[0] += w * (y[i][0] - y[j][0]);
                g[1] += w * (y[i][1] - y[j][1]);
            }
            for d in 0..2 {
                let grad = 4.0 * g[d];
                if config.adaptive_gains {
                    let same_sign = (grad > 0.0) == (velocity[i][d] > 0.0);
                    gains[i][d] = if same_sign { gains[i][d] * 0.8 } else { gains[i][d] + 0.2 };
                    gains[i][d] = gains[i][d].max(0.01);
                }
                velocity[i][d] = momentum * velocity[i][d] - config.learning_rate * gains[i][d] * grad;
            }
        }
        for (yi, vi) in y.iter_mut().zip(&velocity) {
            yi[0] += vi[0];
            yi[1] += vi[1];
        }
        let cx = y.iter().map(|v| v[0]).sum::<f64>() / n as f64;
        let cy = y.iter().map(|v| v[1]).sum::<f64>() / n as f64;
        for yi in &mut y {
            yi[0] -= cx;
            yi[1] -= cy;
        }
        if y.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
            return Err(Error::NonFinite(format!("t-SNE layout at iteration {}", it + 1)));
        }
    }
    let (q, _) = student_t(&y);
    trace.push((config.iterations, traced_cost(&p, &q, config.iterations)?));
    Ok(EmbeddingSet {
        vectors: x.to_vec(),
        labels: labels.to_vec(),
        sources: sources.to_vec(),
        low_dim: y,
        cost_trace: trace,
    })
}

fn traced_cost(p: &Affinities, q: &Affinities, it: usize) -> Result<f64> {
    let c = kl_cost(p, q)?;
    if !c.is_finite() {
        return Err(Error::NonFinite(format!("t-SNE cost at iteration {it}")));
    }
    Ok(c)
}

/// Fraction of each point's `k` nearest layout neighbours sharing its label,
/// averaged over points.
pub fn knn_purity<L: PartialEq>(layout: &[[f64; 2]], labels: &[L], k: usize) -> f64 {
    let n = layout.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut d: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let dx = layout[i][0] - layout[j][0];
                let dy = layout[i][1] - layout[j][1];
                (dx * dx + dy * dy, j)
            })
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let same = d.iter().take(k).filter(|&&(_, j)| labels[j] == labels[i]).count();
        total += same as f64 / k.min(n - 1) as f64;
    }
    total / n as f64
}

#[derive(Debug, Serialize, Deserialize)]
struct LayoutRow {
    x: f64,
    y: f64,
    label: Label,
    source: String,
}

/// Layout CSV: `x,y,label,source`.
pub fn write_layout_csv(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for ((p, l), s) in set.low_dim.iter().zip(&set.labels).zip(&set.sources) {
        w.serialize(LayoutRow {
            x: p[0],
            y: p[1],
            label: *l,
            source: s.clone(),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a layout CSV back as `(points, labels, sources)`.
pub fn read_layout_csv(path: impl AsRef<Path>) -> Result<(Vec<[f64; 2]>, Vec<Label>, Vec<String>)> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let (mut pts, mut labels, mut sources) = (Vec::new(), Vec::new(), Vec::new());
    for row in r.deserialize() {
        let row: LayoutRow = row?;
        pts.push([row.x, row.y]);
        labels.push(row.label);
        sources.push(row.source);
    }
    Ok((pts, labels, sources))
}

/// Feature CSV: `path,label,source,f0..f{F-1}`.
pub fn write_features_csv(
    paths: &[String],
    set: &EmbeddingSet,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let dim = set.vectors.first().map_or(0, Vec::len);
    let mut header = vec!["path".to_string(), "label".into(), "source".into()];
    header.extend((0..dim).map(|k| format!("f{k}")));
    w.write_record(&header)?;
    for (i, v) in set.vectors.iter().enumerate() {
        let mut row = vec![paths[i].clone(), set.labels[i].to_string(), set.sources[i].clone()];
        row.extend(v.iter().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a feature CSV into an [`EmbeddingSet`] without a layout.
pub fn read_features_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, EmbeddingSet)> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut paths = Vec::new();
    let mut set = EmbeddingSet {
        vectors: Vec::new(),
        labels: Vec::new(),
        sources: Vec::new(),
        low_dim: Vec::new(),
        cost_trace: Vec::new(),
    };
    for rec in r.records() {
        let rec = rec?;
        if rec.len() < 3 {
            return Err(Error::Csv(format!("feature row has {} columns", rec.len())));
        }
        paths.push(rec[0].to_string());
        set.labels.push(rec[1].parse()?);
        set.sources.push(rec[2].to_string());
        let v = rec
            .iter()
            .skip(3)
            .map(|s| s.parse::<f64>().map_err(|e| Error::Csv(format!("feature value {s:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        set.vectors.push(v);
    }
    Ok((paths, set))
}
