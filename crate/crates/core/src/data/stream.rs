use rand::seq::SliceRandom;

use super::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::util::keyed_rng;

/// Endless sequence of full batches. Each epoch is a fresh permutation keyed
/// by `(seed, epoch)`; the trailing partial batch of every epoch is dropped.
#[derive(Debug)]
pub struct BatchStream<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    next: usize,
    order: Vec<i64>,
}

/// Starts a stream at the first batch of epoch 0.
pub fn batch_stream(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<BatchStream<'_>> {
    BatchStream::resume(dataset, batch_size, seed, 0)
}

impl<'a> BatchStream<'a> {
    /// Positions a stream after `consumed` batches.
    pub fn resume(dataset: &'a Dataset, batch_size: usize, seed: u64, consumed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > dataset.len() {
            return Err(Error::Config(format!(
                "batch size {batch_size} must be in 1..={} (dataset size)",
                dataset.len()
            )));
        }
        let per_epoch = (dataset.len() / batch_size) as u64;
        let epoch = consumed / per_epoch;
        let mut stream = BatchStream {
            dataset,
            batch_size,
            seed,
            epoch,
            next: (consumed % per_epoch) as usize,
            order: Vec::new(),
        };
        stream.order = stream.permutation(epoch);
        Ok(stream)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.dataset.len() / self.batch_size
    }

    /// Total batches handed out so far, counting from epoch 0.
    pub fn consumed(&self) -> u64 {
        self.epoch * self.batches_per_epoch() as u64 + self.next as u64
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    fn permutation(&self, epoch: u64) -> Vec<i64> {
        let mut order: Vec<i64> = (0..self.dataset.len() as i64).collect();
        order.shuffle(&mut keyed_rng(self.seed, &format!("shuffle/{epoch}")));
        order
    }

    /// Row indices of the next batch.
    pub fn next_indices(&mut self) -> Vec<i64> {
        if self.next >= self.batches_per_epoch() {
            self.epoch += 1;
            self.next = 0;
            self.order = self.permutation(self.epoch);
        }
        let start = self.next * self.batch_size;
        self.next += 1;
        self.order[start..start + self.batch_size].to_vec()
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let idx = self.next_indices();
        Some(self.dataset.batch(&idx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use tch::{Kind, Tensor};

    fn ds(n: i64) -> Dataset {
        let images = Tensor::zeros([n, 1, 2, 2], (Kind::Float, tch::Device::Cpu));
        Dataset::new("z", images, None, None, Split::Train, 0..n as usize).unwrap()
    }

    #[test]
    fn fifteen_batches_of_64_from_1000() {
        let d = ds(1000);
        let mut s = batch_stream(&d, 64, 1).unwrap();
        assert_eq!(s.batches_per_epoch(), 15);
        let first_epoch: Vec<Vec<i64>> = (0..15).map(|_| s.next_indices()).collect();
        assert_eq!(s.epoch(), 0);
        let second = s.next_indices();
        assert_eq!(s.epoch(), 1);
        let mut seen: Vec<i64> = first_epoch.concat();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 960);
        assert_ne!(first_epoch[0], second);
    }

    #[test]
    fn same_seed_same_sequence_and_resume() {
        let d = ds(100);
        let a: Vec<Vec<i64>> = {
            let mut s = batch_stream(&d, 8, 9).unwrap();
            (0..30).map(|_| s.next_indices()).collect()
        };
        let mut s = batch_stream(&d, 8, 9).unwrap();
        let b: Vec<Vec<i64>> = (0..30).map(|_| s.next_indices()).collect();
        assert_eq!(a, b);
        assert_eq!(s.consumed(), 30);
        let mut r = BatchStream::resume(&d, 8, 9, 17).unwrap();
        let tail: Vec<Vec<i64>> = (17..30).map(|_| r.next_indices()).collect();
        assert_eq!(tail, a[17..].to_vec());
    }

    #[test]
    fn oversized_batch_rejected() {
        let d = ds(10);
        assert!(batch_stream(&d, 11, 0).is_err());
    }
}
