use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::ManifestRecord;
use crate::colorspace::{convert, normalize, resize_bilinear, ColorSpace, NORM_MEAN, NORM_STD};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Decode, resize to `size`², convert to `space` and normalize.
pub fn preprocess(record: &ManifestRecord, space: ColorSpace, size: usize) -> Result<Tensor<f32>> {
    let img = record.load()?;
    let img = resize_bilinear(&img, size, size)?;
    let img = convert(&img, space)?;
    normalize(&img, NORM_MEAN, NORM_STD)
}

/// A mini-batch: `[B, 3, S, S]` images, class indices and the manifest
/// positions they came from.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The `i`-th image as `[3, S, S]`.
    pub fn image(&self, i: usize) -> Result<Tensor<f32>> {
        let shape = self.images.shape()[1..].to_vec();
        let per: usize = shape.iter().product();
        Tensor::new(shape, self.images.data()[i * per..(i + 1) * per].to_vec())
    }
}

/// A manifest preprocessed into model inputs once, so epochs only reshuffle.
/// Records that fail to decode stay in place as `None` and are skipped by
/// every batch stream.
#[derive(Debug, Clone)]
pub struct PreparedSet {
    records: Vec<ManifestRecord>,
    inputs: Vec<Option<Tensor<f32>>>,
    failures: Vec<(usize, String)>,
    space: ColorSpace,
    size: usize,
}

impl PreparedSet {
    pub fn prepare(records: &[ManifestRecord], space: ColorSpace, size: usize) -> Self {
        let results: Vec<Result<Tensor<f32>>> = records.par_iter().map(|r| preprocess(r, space, size)).collect();
        let mut inputs = Vec::with_capacity(records.len());
        let mut failures = Vec::new();
        for (i, res) in results.into_iter().enumerate() {
            match res {
                Ok(t) => inputs.push(Some(t)),
                Err(e) => {
                    log::warn!("skipping {}: {e}", records[i].path.display());
                    failures.push((i, e.to_string()));
                    inputs.push(None);
                }
            }
        }
        Self {
            records: records.to_vec(),
            inputs,
            failures,
            space,
            size,
        }
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn failures(&self) -> &[(usize, String)] {
        &self.failures
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn image_size(&self) -> usize {
        self.size
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of usable (decoded) records.
    pub fn usable(&self) -> usize {
        self.inputs.iter().filter(|t| t.is_some()).count()
    }

    pub fn input(&self, i: usize) -> Option<&Tensor<f32>> {
        self.inputs[i].as_ref()
    }

    /// Record order for one epoch, seeded by `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        order
    }

    /// Shuffled batches for one epoch; the last batch may be short.
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
        self.batches_in(self.epoch_order(seed, epoch), batch_size)
    }

    /// Batches in manifest order, for evaluation.
    pub fn ordered_batches(&self, batch_size: usize) -> Result<Vec<Batch>> {
        self.batches_in((0..self.records.len()).collect(), batch_size)
    }

    fn batches_in(&self, order: Vec<usize>, batch_size: usize) -> Result<Vec<Batch>> {
        if batch_size == 0 {
            return Err(Error::Spec("batch size must be at least 1".into()));
        }
        let usable: Vec<usize> = order.into_iter().filter(|&i| self.inputs[i].is_some()).collect();
        usable.chunks(batch_size).map(|chunk| self.gather(chunk)).collect()
    }

    fn gather(&self, chunk: &[usize]) -> Result<Batch> {
        let per = 3 * self.size * self.size;
        let mut data = Vec::with_capacity(chunk.len() * per);
        for &i in chunk {
            data.extend_from_slice(self.inputs[i].as_ref().expect("filtered").data());
        }
        Ok(Batch {
            images: Tensor::new(vec![chunk.len(), 3, self.size, self.size], data)?,
            labels: chunk.iter().map(|&i| self.records[i].label.index()).collect(),
            indices: chunk.to_vec(),
        })
    }
}
