use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{channel_mean, load_sample, Sample, SampleRecord, Transform};
use crate::error::{param_err, Error, Result};
use crate::tensor::Tensor;

/// Stacked images `N x 3 x h x w` and labels `N x h x w`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
    /// Record indices in batch order.
    pub indices: Vec<usize>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-sample augmentation seed, independent of which worker processes the sample.
pub fn sample_seed(seed: u64, epoch: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ epoch) ^ index)
}

/// Seeded, worker-count independent batch source.
pub struct Loader {
    records: Vec<SampleRecord>,
    decoded: Vec<OnceLock<Sample>>,
    transforms: Vec<Transform>,
    batch_size: usize,
    seed: u64,
    training: bool,
    pool: Option<rayon::ThreadPool>,
}

impl Loader {
    /// `training` shuffles each epoch and drops the last partial batch.
    pub fn new(
        records: Vec<SampleRecord>,
        mut transforms: Vec<Transform>,
        batch_size: usize,
        seed: u64,
        training: bool,
        workers: usize,
    ) -> Result<Self> {
        if batch_size == 0 {
            return param_err("batch_size must be >= 1");
        }
        if records.is_empty() {
            return Err(Error::Data("loader needs at least one record".into()));
        }
        if training && records.len() < batch_size {
            return Err(Error::Data(format!(
                "{} training record(s) cannot fill one batch of {batch_size}",
                records.len()
            )));
        }
        for t in &transforms {
            t.validate()?;
        }
        if transforms.iter().any(|t| matches!(t, Transform::RandomCropPad { fill: None, .. })) {
            let mean = channel_mean(&records)?;
            for t in &mut transforms {
                if let Transform::RandomCropPad { fill, .. } = t {
                    fill.get_or_insert(mean);
                }
            }
        }
        let pool = if workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .map_err(|e| Error::Data(format!("cannot start {workers} loader workers: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self {
            decoded: records.iter().map(|_| OnceLock::new()).collect(),
            records,
            transforms,
            batch_size,
            seed,
            training,
            pool,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn transforms(&self) -> &[Transform] {
        &self.transforms
    }

    pub fn batches_per_epoch(&self) -> usize {
        if self.training {
            self.records.len() / self.batch_size
        } else {
            self.records.len().div_ceil(self.batch_size)
        }
    }

    /// Record order for an epoch: a seeded permutation in training, identity otherwise.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        if self.training {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(self.seed, epoch, u64::MAX));
            order.shuffle(&mut rng);
        }
        order
    }

    fn raw(&self, index: usize) -> Result<&Sample> {
        if let Some(s) = self.decoded[index].get() {
            return Ok(s);
        }
        let s = load_sample(&self.records[index])?;
        Ok(self.decoded[index].get_or_init(|| s))
    }

    /// Record `index` after the transform chain seeded for `epoch`.
    pub fn sample(&self, epoch: u64, index: usize) -> Result<Sample> {
        let mut s = self.raw(index)?.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(self.seed, epoch, index as u64));
        for t in &self.transforms {
            s = t
                .apply(s, &mut rng)
                .map_err(|e| e.context(format!("{} on record at line {}", t.name(), self.records[index].line_no)))?;
        }
        Ok(s)
    }

    /// Batch `b` of `epoch`.
    pub fn batch(&self, epoch: u64, b: usize) -> Result<Batch> {
        if b >= self.batches_per_epoch() {
            return param_err(format!("batch {b} out of range ({} per epoch)", self.batches_per_epoch()));
        }
        let order = self.epoch_order(epoch);
        let end = ((b + 1) * self.batch_size).min(order.len());
        let indices = order[b * self.batch_size..end].to_vec();
        let work = || indices.par_iter().map(|&i| self.sample(epoch, i)).collect::<Result<Vec<_>>>();
        let samples = match &self.pool {
            Some(pool) => pool.install(work),
            None => indices.iter().map(|&i| self.sample(epoch, i)).collect::<Result<Vec<_>>>(),
        }?;
        stack(samples, indices)
    }

    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = Result<Batch>> + '_ {
        (0..self.batches_per_epoch()).map(move |b| self.batch(epoch, b))
    }
}

fn stack(samples: Vec<Sample>, indices: Vec<usize>) -> Result<Batch> {
    let (h, w) = (samples[0].height(), samples[0].width());
    if let Some(s) = samples.iter().find(|s| (s.height(), s.width()) != (h, w)) {
        return Err(Error::Shape(format!(
            "cannot stack a {}x{} sample with {h}x{w} ones; add a crop transform or use batch size 1",
            s.height(),
            s.width()
        )));
    }
    let n = samples.len();
    let mut images = Vec::with_capacity(n * 3 * h * w);
    let mut labels = Vec::with_capacity(n * h * w);
    for s in samples {
        images.extend_from_slice(s.image.data());
        labels.extend_from_slice(&s.label);
    }
    Ok(Batch {
        images: Tensor::new(vec![n, 3, h, w], images)?,
        labels,
        indices,
    })
}
