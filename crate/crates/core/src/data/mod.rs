//! Datasets: MNIST IDX files, DSprites NPZ archives, a synthetic sprite
//! generator, seeded subsampling and drop-last batch iteration.

mod idx;
mod npz;
mod synth;

pub use idx::{load_mnist_idx, mnist_paths, read_idx_images, read_idx_labels};
pub use npz::{load_dsprites_npz, load_dsprites_npz_subset, write_dsprites_npz, NpyArray, NpyDtype, NpzReader};
pub use synth::{render_sprite, synth_factors, synth_sprites, DSPRITES_CARDINALITIES, SPRITE_SIDE};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::FactorTable;
use crate::tensor::Tensor;

/// Images as an n×1×H×W tensor with values in [0, 1], plus optional factors.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub images: Tensor,
    pub factors: Option<FactorTable>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Tensor, factors: Option<FactorTable>) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::shape("dataset", format!("expected n×1×H×W images, got {shape:?}")));
        }
        if let Some(f) = &factors {
            if f.len() != shape[0] {
                return Err(Error::shape("dataset", format!("{} images but {} factor rows", shape[0], f.len())));
            }
        }
        Ok(Dataset { name: name.into(), images, factors })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (H, W).
    pub fn image_size(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            images: self.images.select_rows(idx),
            factors: self.factors.as_ref().map(|f| f.select_rows(idx)),
        }
    }

    pub fn batch(&self, idx: &[usize]) -> Tensor {
        self.images.select_rows(idx)
    }
}

/// Seeded uniform subset of `n` samples drawn without replacement.
pub fn subsample(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > ds.len() {
        return Err(Error::Contract(format!("cannot subsample {n} of {} samples", ds.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = index::sample(&mut rng, ds.len(), n).into_vec();
    Ok(ds.select(&idx))
}

/// Endless iterator over mini-batch indices. Each epoch is a fresh seeded
/// permutation and the final short batch is dropped.
#[derive(Clone, Debug)]
pub struct BatchStream {
    batch_size: usize,
    n: usize,
    epoch: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    pub fn new(n: usize, batch_size: usize, order_seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > n {
            return Err(Error::Contract(format!("batch size {batch_size} does not fit {n} samples")));
        }
        let mut s = BatchStream {
            batch_size,
            n,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(order_seed),
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order = index::sample(&mut self.rng, self.n, self.n).into_vec();
        self.cursor = 0;
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n / self.batch_size
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Epochs started so far, counting the current one from zero.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch_size > self.n {
            self.epoch += 1;
            self.reshuffle();
        }
        let b = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        b
    }
}

impl Iterator for BatchStream {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}

/// Convenience constructor matching the dataset size.
pub fn batches(ds: &Dataset, batch_size: usize, seed: u64) -> Result<BatchStream> {
    BatchStream::new(ds.len(), batch_size, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize) -> Dataset {
        let images = Tensor::new(&[n, 1, 1, 1], (0..n).map(|i| i as f64 / n as f64).collect()).unwrap();
        Dataset::new("tiny", images, None).unwrap()
    }

    #[test]
    fn full_subsample_is_a_permutation() {
        let ds = tiny(50);
        let sub = subsample(&ds, 50, 3).unwrap();
        let mut got: Vec<f64> = sub.images.data().to_vec();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, ds.images.data());
        assert!(subsample(&ds, 51, 3).is_err());
    }

    #[test]
    fn drop_last_batching() {
        let mut s = BatchStream::new(737, 64, 1).unwrap();
        assert_eq!(s.batches_per_epoch(), 11);
        let mut seen = Vec::new();
        for _ in 0..11 {
            seen.extend(s.next_batch());
        }
        assert_eq!(s.epoch(), 0);
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 704);
        s.next_batch();
        assert_eq!(s.epoch(), 1);
    }

    #[test]
    fn same_seed_same_order() {
        let a: Vec<_> = BatchStream::new(100, 10, 9).unwrap().take(25).collect();
        let b: Vec<_> = BatchStream::new(100, 10, 9).unwrap().take(25).collect();
        let c: Vec<_> = BatchStream::new(100, 10, 10).unwrap().take(25).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_oversized_batch() {
        assert!(BatchStream::new(5, 6, 0).is_err());
        assert!(BatchStream::new(5, 0, 0).is_err());
    }
}
