use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

// Distinct key so flip decisions never share a stream with the permutation.
const FLIP_KEY: u64 = 0x666c_6970;

fn keyed_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng
}

/// Uniform permutation of `0..n` for `epoch`, a pure function of
/// `(seed, epoch)`.
pub fn shuffle_epoch(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut keyed_rng(seed, epoch));
    perm
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Dataset rows this batch was drawn from.
    pub indices: Vec<usize>,
}

/// One epoch of mini-batches.
#[derive(Debug)]
pub struct BatchStream<'a> {
    ds: &'a Dataset,
    batch: usize,
    perm: Vec<usize>,
    flip: Option<ChaCha8Rng>,
    drop_last: bool,
    pos: usize,
}

impl<'a> BatchStream<'a> {
    /// Shuffled stream for `epoch`. `flip` mirrors each sample along the
    /// width axis with probability 1/2.
    pub fn new(
        ds: &'a Dataset,
        batch: usize,
        seed: u64,
        epoch: u64,
        flip: bool,
        drop_last: bool,
    ) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(BatchStream {
            ds,
            batch,
            perm: shuffle_epoch(ds.len(), seed, epoch),
            flip: flip.then(|| keyed_rng(seed ^ FLIP_KEY, epoch)),
            drop_last,
            pos: 0,
        })
    }

    /// In-order stream with no shuffling or augmentation (evaluation).
    pub fn sequential(ds: &'a Dataset, batch: usize) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(BatchStream {
            ds,
            batch,
            perm: (0..ds.len()).collect(),
            flip: None,
            drop_last: false,
            pos: 0,
        })
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Batches this stream yields in total.
    pub fn num_batches(&self) -> usize {
        let n = self.perm.len();
        if self.drop_last {
            n / self.batch
        } else {
            n.div_ceil(self.batch)
        }
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let n = self.perm.len();
        let end = (self.pos + self.batch).min(n);
        if self.pos >= n || (self.drop_last && end - self.pos < self.batch) {
            return None;
        }
        let indices = self.perm[self.pos..end].to_vec();
        self.pos = end;
        let mut x = self
            .ds
            .images
            .select_batch(&indices)
            .expect("indices in range");
        if let Some(rng) = self.flip.as_mut() {
            let per = x.len() / indices.len();
            let w = self.ds.sample_shape()[2];
            for sample in x.data_mut().chunks_exact_mut(per) {
                if rng.random::<bool>() {
                    sample.chunks_exact_mut(w).for_each(<[f32]>::reverse);
                }
            }
        }
        let labels = indices.iter().map(|&i| self.ds.labels[i]).collect();
        Some(Batch { x, labels, indices })
    }
}
