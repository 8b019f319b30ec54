//! Datasets, deterministic batch streams and on-disk caches.

mod cache;
mod cifar;
mod stream;
mod synthetic;

use std::ops::Range;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tch::{Kind, Tensor};

pub use cache::{load_cached, save_cached};
pub use cifar::{load_cifar10, CIFAR10_CLASSES, CIFAR10_RECORD_BYTES};
pub use stream::{batch_stream, BatchStream};
pub use synthetic::{make_synthetic_shapes, glyphs, SyntheticShapes, GLYPH_SIZE};

use crate::error::{Error, Result};
use crate::util::keyed_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// An immutable image collection with pixels in `[-1, 1]`.
#[derive(Debug)]
pub struct Dataset {
    pub name: String,
    /// `[N, C, H, W]`, `f32`.
    pub images: Tensor,
    /// `[N]`, `i64`, when the data is labeled.
    pub labels: Option<Tensor>,
    pub num_classes: Option<i64>,
    pub split: Split,
    /// Global record indices covered by this split.
    pub records: Range<usize>,
}

/// One mini-batch.
#[derive(Debug)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Option<Tensor>,
}

impl Batch {
    pub fn len(&self) -> i64 {
        self.images.size()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        images: Tensor,
        labels: Option<Tensor>,
        num_classes: Option<i64>,
        split: Split,
        records: Range<usize>,
    ) -> Result<Self> {
        let size = images.size();
        if size.len() != 4 {
            return Err(Error::Shape(format!("dataset images must be [N, C, H, W], got {size:?}")));
        }
        let n = size[0];
        if records.len() != n as usize {
            return Err(Error::Dataset(format!("{} records for {n} images", records.len())));
        }
        check_pixel_range(&images)?;
        if let Some(l) = &labels {
            if l.size() != [n] {
                return Err(Error::Shape(format!("labels must be [{n}], got {:?}", l.size())));
            }
            let classes = num_classes.ok_or_else(|| Error::Dataset("labeled dataset without num_classes".into()))?;
            if n > 0 {
                crate::models::generator::check_labels(l, classes)?;
            }
        }
        Ok(Dataset {
            name: name.into(),
            images: images.to_kind(Kind::Float),
            labels: labels.map(|l| l.to_kind(Kind::Int64)),
            num_classes,
            split,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.images.size()[0] as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_shape(&self) -> [i64; 3] {
        let s = self.images.size();
        [s[1], s[2], s[3]]
    }

    /// Gathers the given rows into a batch.
    pub fn batch(&self, indices: &[i64]) -> Batch {
        let idx = Tensor::from_slice(indices);
        Batch {
            images: self.images.index_select(0, &idx),
            labels: self.labels.as_ref().map(|l| l.index_select(0, &idx)),
        }
    }

    /// Rows `[start, start + len)` as a new dataset.
    pub fn slice(&self, start: usize, len: usize) -> Dataset {
        let end = (start + len).min(self.len());
        let len = end.saturating_sub(start);
        Dataset {
            name: self.name.clone(),
            images: self.images.narrow(0, start as i64, len as i64),
            labels: self.labels.as_ref().map(|l| l.narrow(0, start as i64, len as i64)),
            num_classes: self.num_classes,
            split: self.split,
            records: self.records.start + start..self.records.start + end,
        }
    }

    /// Seeded disjoint split into `(rest, holdout)` with
    /// `round(fraction · N)` holdout rows.
    pub fn holdout(&self, fraction: f64, seed: u64) -> (Batch, Batch) {
        let n = self.len();
        let mut order: Vec<i64> = (0..n as i64).collect();
        order.shuffle(&mut keyed_rng(seed, "holdout"));
        let k = ((fraction * n as f64).round() as usize).min(n);
        let (held, rest) = order.split_at(k);
        (self.batch(rest), self.batch(held))
    }

    /// SHA-256 over pixels and labels; identifies a dataset version.
    pub fn version_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.name.as_bytes());
        hash_tensor(&mut hasher, &self.images);
        if let Some(l) = &self.labels {
            hash_tensor(&mut hasher, l);
        }
        hex::encode(hasher.finalize())
    }
}

pub(crate) fn hash_tensor(hasher: &mut Sha256, t: &Tensor) {
    let t = t.contiguous();
    let numel = t.numel();
    let mut bytes = vec![0u8; numel * t.kind().elt_size_in_bytes()];
    t.copy_data_u8(&mut bytes, numel);
    hasher.update(&bytes);
}

/// Rejects images outside `[-1, 1]` (for example raw `[0, 255]` bytes).
pub fn check_pixel_range(images: &Tensor) -> Result<()> {
    if images.numel() == 0 {
        return Ok(());
    }
    let min = images.min().double_value(&[]);
    let max = images.max().double_value(&[]);
    const SLACK: f64 = 1e-6;
    if !(min >= -1.0 - SLACK && max <= 1.0 + SLACK) {
        return Err(Error::PixelRange { min, max });
    }
    Ok(())
}
