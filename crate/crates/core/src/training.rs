//! Cross-entropy training with Adam, per-epoch history and checkpoints.

use std::path::Path;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::PreparedSet;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::numerics::{Graph, Scalar, Tensor};
use crate::swin::{forward_sample, SwinModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 20,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted (it freezes the weights).
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Spec(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Spec("epochs and batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Spec("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }
}

/// One bias-corrected Adam update at step `t` (1-based), no weight decay.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    config: &TrainConfig,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::State("Adam step index starts at 1".into()));
    }
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::State(format!(
            "{} params, {} grads, moments {}/{}",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    let c = |x: f64| T::from_f64_lossy(x);
    let (b1, b2) = (c(config.beta1), c(config.beta2));
    let one = T::one();
    let bc1 = one - b1.powi(t as i32);
    let bc2 = one - b2.powi(t as i32);
    let (lr, eps) = (c(config.learning_rate), c(config.eps));
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over every parameter of a model.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar = f32> {
    config: TrainConfig,
    step: u64,
    states: IndexMap<String, AdamState<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(model: &SwinModel<T>, config: &TrainConfig) -> Self {
        Self {
            config: config.clone(),
            step: 0,
            states: model
                .params()
                .iter()
                .map(|(k, t)| (k.clone(), AdamState::zeros(t.len())))
                .collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from gradients keyed by parameter name.
    pub fn step(&mut self, model: &mut SwinModel<T>, grads: &IndexMap<String, Vec<T>>) -> Result<()> {
        self.step += 1;
        for (name, param) in model.params_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::State(format!("no gradient for {name}")))?;
            let state = self
                .states
                .get_mut(name)
                .ok_or_else(|| Error::State(format!("no optimizer state for {name}")))?;
            adam_step(param.data_mut(), g, state, &self.config, self.step)?;
        }
        Ok(())
    }
}

/// Loss and correctness of one sample, plus parameter gradients of its loss
/// (unscaled).
fn sample_step<T: Scalar>(
    model: &SwinModel<T>,
    image: &Tensor<T>,
    label: usize,
) -> Result<(f64, bool, IndexMap<String, Vec<T>>)> {
    let g = Graph::new();
    let params = model.bind(&g)?;
    let x = g.leaf(image)?;
    let (logits, _) = forward_sample(x, &params, model.config())?;
    let lv = logits.value();
    let predicted = argmax(&lv);
    let loss = logits.cross_entropy(&[label])?;
    let loss_value = loss.item()?.to_f64_lossy();
    let mut grads = g.backward(loss)?;
    let mut out = IndexMap::with_capacity(model.params().len());
    for (name, var) in params.iter() {
        let gv = grads
            .take(var)
            .unwrap_or_else(|| vec![T::zero(); var.len()]);
        out.insert(name.to_string(), gv);
    }
    Ok((loss_value, predicted == label, out))
}

fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean loss and the gradients of the batch-mean cross-entropy. Samples are
/// accumulated in batch order so the result does not depend on threading.
pub fn batch_gradients<T: Scalar>(
    model: &SwinModel<T>,
    images: &[Tensor<T>],
    labels: &[usize],
) -> Result<(f64, usize, IndexMap<String, Vec<T>>)> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::Input(format!("{} images, {} labels", images.len(), labels.len())));
    }
    let scale = T::from_f64_lossy(1.0 / images.len() as f64);
    let mut total: IndexMap<String, Vec<T>> = model
        .params()
        .iter()
        .map(|(k, t)| (k.clone(), vec![T::zero(); t.len()]))
        .collect();
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for (image, &label) in images.iter().zip(labels) {
        let (loss, ok, grads) = sample_step(model, image, label)?;
        loss_sum += loss;
        correct += usize::from(ok);
        for (name, acc) in total.iter_mut() {
            for (a, g) in acc.iter_mut().zip(&grads[name]) {
                *a = *a + *g * scale;
            }
        }
    }
    Ok((loss_sum / images.len() as f64, correct, total))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// One record per completed epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut r = csv::Reader::from_path(path)?;
        let epochs = r.deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(Self { epochs })
    }
}

/// Per-sample outputs of an evaluation pass, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
    /// Softmax probability of the CGI class.
    pub scores: Vec<f64>,
    pub losses: Vec<f64>,
}

impl Evaluation {
    pub fn mean_loss(&self) -> f64 {
        crate::numerics::pairwise_sum(&self.losses) / self.losses.len().max(1) as f64
    }

    pub fn accuracy(&self) -> f64 {
        let ok = self.labels.iter().zip(&self.predictions).filter(|(a, b)| a == b).count();
        ok as f64 / self.labels.len().max(1) as f64
    }

    pub fn report(&self) -> Result<MetricsReport> {
        let positive = crate::dataset::Label::Cgi.index();
        let labels: Vec<bool> = self.labels.iter().map(|&l| l == positive).collect();
        let preds: Vec<bool> = self.predictions.iter().map(|&l| l == positive).collect();
        MetricsReport::from_predictions(&labels, &preds, &self.scores)
    }

    /// The subset of samples whose manifest index satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(usize) -> bool) -> Self {
        let sel: Vec<usize> = (0..self.indices.len()).filter(|&k| keep(self.indices[k])).collect();
        Self {
            indices: sel.iter().map(|&k| self.indices[k]).collect(),
            labels: sel.iter().map(|&k| self.labels[k]).collect(),
            predictions: sel.iter().map(|&k| self.predictions[k]).collect(),
            scores: sel.iter().map(|&k| self.scores[k]).collect(),
            losses: sel.iter().map(|&k| self.losses[k]).collect(),
        }
    }
}

/// Forward pass over every usable record of `set`. Samples run in parallel;
/// results are collected in manifest order.
pub fn evaluate(model: &SwinModel<f32>, set: &PreparedSet) -> Result<Evaluation> {
    let usable: Vec<usize> = (0..set.len()).filter(|&i| set.input(i).is_some()).collect();
    let outs = usable
        .par_iter()
        .map(|&i| {
            let (logits, _) = model.forward_one(set.input(i).expect("usable"))?;
            Ok(logits)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ev = Evaluation {
        indices: usable.clone(),
        labels: Vec::new(),
        predictions: Vec::new(),
        scores: Vec::new(),
        losses: Vec::new(),
    };
    let positive = crate::dataset::Label::Cgi.index();
    for (&i, logits) in usable.iter().zip(outs) {
        let z: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let label = set.records()[i].label.index();
        ev.labels.push(label);
        ev.predictions.push(argmax(&logits));
        ev.scores.push((z[positive] - lse).exp());
        ev.losses.push(lse - z[label]);
    }
    Ok(ev)
}

/// Where checkpoints go; `None` disables them.
#[derive(Debug, Clone, Copy, Default)]
pub struct Checkpoints<'a> {
    pub dir: Option<&'a Path>,
}

/// Trains for `config.epochs` epochs. Training loss/accuracy are running
/// averages over the epoch (measured before each update); validation
/// metrics are measured after the epoch. Writes `final.swnt` and the
/// best-validation-accuracy `best.swnt` when a directory is given.
pub fn train(
    model: &mut SwinModel<f32>,
    train_set: &PreparedSet,
    val_set: &PreparedSet,
    config: &TrainConfig,
    checkpoints: Checkpoints<'_>,
) -> Result<TrainHistory> {
    config.validate()?;
    if train_set.usable() == 0 || val_set.usable() == 0 {
        return Err(Error::Input("training and validation sets must be non-empty".into()));
    }
    let mut adam = Adam::new(model, config);
    let mut history = TrainHistory::default();
    let mut best = f64::NEG_INFINITY;
    for epoch in 0..config.epochs {
        let batches = train_set.batches(config.batch_size, config.seed, epoch as u64)?;
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (b, batch) in batches.iter().enumerate() {
            let images = (0..batch.len()).map(|i| batch.image(i)).collect::<Result<Vec<_>>>()?;
            let (loss, ok, grads) = batch_gradients(model, &images, &batch.labels)
                .map_err(|e| e.context(format!("epoch {} batch {b}", epoch + 1)))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {} batch {b}", epoch + 1)));
            }
            adam.step(model, &grads)
                .map_err(|e| e.context(format!("epoch {} batch {b}", epoch + 1)))?;
            if let Some((name, _)) = model.params().iter().find(|(_, t)| !t.data().iter().all(|v| v.is_finite())) {
                return Err(Error::NonFinite(format!(
                    "parameter {name} after epoch {} batch {b}",
                    epoch + 1
                )));
            }
            loss_sum += loss * batch.len() as f64;
            correct += ok;
            seen += batch.len();
            log::debug!("epoch {} batch {b}: loss {loss:.5}", epoch + 1);
        }
        let val = evaluate(model, val_set)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_loss: val.mean_loss(),
            val_acc: val.accuracy(),
        };
        log::info!(
            "epoch {}: train loss {:.4} acc {:.4}, val loss {:.4} acc {:.4}",
            record.epoch,
            record.train_loss,
            record.train_acc,
            record.val_loss,
            record.val_acc
        );
        history.epochs.push(record);
        if let Some(dir) = checkpoints.dir {
            if record.val_acc > best {
                best = record.val_acc;
                model.save(dir.join("best.swnt"))?;
            }
        }
    }
    if let Some(dir) = checkpoints.dir {
        model.save(dir.join("final.swnt"))?;
    }
    Ok(history)
}
