use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplingMode {
    /// Every batch is drawn uniformly with replacement.
    #[default]
    Uniform,
    /// Batches walk through a stream of shuffled epochs.
    Epoch,
}

impl FromStr for SamplingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uniform" => Ok(SamplingMode::Uniform),
            "epoch" => Ok(SamplingMode::Epoch),
            other => Err(format!("unknown sampling mode '{other}' (expected uniform or epoch)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchSampler {
    batch: usize,
    mode: SamplingMode,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(batch: usize, mode: SamplingMode, seed: u64) -> Result<Self> {
        if batch == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(BatchSampler {
            batch,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            cursor: 0,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn mode(&self) -> SamplingMode {
        self.mode
    }

    /// Indices of the next batch over a dataset of `n` samples. In epoch mode
    /// a batch that crosses an epoch boundary finishes the old permutation
    /// and continues in a fresh one, so each epoch covers every index once.
    pub fn next_indices(&mut self, n: usize) -> Result<Vec<usize>> {
        if n == 0 {
            return Err(Error::InvalidArgument("cannot sample from an empty dataset".into()));
        }
        match self.mode {
            SamplingMode::Uniform => Ok((0..self.batch).map(|_| self.rng.random_range(0..n)).collect()),
            SamplingMode::Epoch => {
                if self.batch > n {
                    return Err(Error::InvalidArgument(format!(
                        "batch size {} exceeds dataset size {n}",
                        self.batch
                    )));
                }
                if self.order.len() != n {
                    self.order = (0..n).collect();
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                let mut out = Vec::with_capacity(self.batch);
                while out.len() < self.batch {
                    if self.cursor == n {
                        self.order.shuffle(&mut self.rng);
                        self.cursor = 0;
                    }
                    let take = (self.batch - out.len()).min(n - self.cursor);
                    out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
                    self.cursor += take;
                }
                Ok(out)
            }
        }
    }

    pub fn next_batch(&mut self, dataset: &Dataset) -> Result<(Tensor, Tensor)> {
        let idx = self.next_indices(dataset.len())?;
        Ok(dataset.gather(&idx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use proptest::prelude::*;

    fn toy(n: usize) -> Dataset {
        let images = Tensor::new(&[n, 28, 28, 1], (0..n * 784).map(|i| (i / 784) as f64).collect()).unwrap();
        let classes: Vec<usize> = (0..n).map(|i| i % 10).collect();
        Dataset::from_classes(images, &classes, 10, Split::Train).unwrap()
    }

    #[test]
    fn batch_shapes() {
        let ds = toy(100);
        let mut s = BatchSampler::new(64, SamplingMode::Uniform, 1).unwrap();
        let (x, y) = s.next_batch(&ds).unwrap();
        assert_eq!(x.shape(), &[64, 28, 28, 1]);
        assert_eq!(y.shape(), &[64, 10]);
    }

    #[test]
    fn full_batch_epoch_is_a_permutation() {
        let ds = toy(50);
        let mut s = BatchSampler::new(50, SamplingMode::Epoch, 2).unwrap();
        let (x, _) = s.next_batch(&ds).unwrap();
        let mut seen: Vec<usize> = x.data().chunks(784).map(|img| img[0] as usize).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn oversized_epoch_batch_is_an_error() {
        let mut s = BatchSampler::new(11, SamplingMode::Epoch, 0).unwrap();
        assert!(s.next_indices(10).is_err());
        assert!(BatchSampler::new(0, SamplingMode::Uniform, 0).is_err());
    }

    #[test]
    fn same_seed_same_sequence() {
        for mode in [SamplingMode::Uniform, SamplingMode::Epoch] {
            let mut a = BatchSampler::new(7, mode, 99).unwrap();
            let mut b = BatchSampler::new(7, mode, 99).unwrap();
            for _ in 0..20 {
                assert_eq!(a.next_indices(30).unwrap(), b.next_indices(30).unwrap());
            }
        }
    }

    proptest! {
        #[test]
        fn epoch_mode_covers_each_index_once(seed in any::<u64>(), n in 1usize..60, b in 1usize..20) {
            prop_assume!(b <= n);
            let mut s = BatchSampler::new(b, SamplingMode::Epoch, seed).unwrap();
            let mut stream = Vec::new();
            while stream.len() < 3 * n {
                stream.extend(s.next_indices(n).unwrap());
            }
            for epoch in stream.chunks(n).take(3) {
                let mut e = epoch.to_vec();
                e.sort_unstable();
                prop_assert_eq!(e, (0..n).collect::<Vec<_>>());
            }
        }
    }
}
