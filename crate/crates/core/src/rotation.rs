//! Quarter-turn rotations and the rotation-prediction pretext task.
//!
//! Rotation label `r` means `r` successive 90° counter-clockwise turns of the
//! spatial plane. Rotations act on the last two axes of a tensor, so they
//! apply equally to a single `[C, H, W]` image or a `[N, C, H, W]` batch, and
//! they are differentiable (pure index permutations).

use tch::{Kind, Tensor};

use crate::error::{Error, Result};

pub const NUM_ROTATIONS: i64 = 4;

/// The fixed set of quarter-turn rotations, indexed by label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RotationSet;

impl RotationSet {
    pub const DEGREES: [u32; 4] = [0, 90, 180, 270];

    pub fn labels() -> std::ops::Range<i64> {
        0..NUM_ROTATIONS
    }

    pub fn degrees(label: i64) -> Option<u32> {
        usize::try_from(label).ok().and_then(|i| Self::DEGREES.get(i).copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Real,
    Fake,
}

/// Rotated images with their rotation labels.
#[derive(Debug)]
pub struct RotationBatch {
    pub images: Tensor,
    pub labels: Tensor,
    pub source: Source,
}

impl RotationBatch {
    pub fn len(&self) -> i64 {
        self.labels.size()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_square(image: &Tensor) -> Result<()> {
    let size = image.size();
    if size.len() < 2 {
        return Err(Error::Shape(format!("expected at least 2 spatial axes, got {size:?}")));
    }
    let (h, w) = (size[size.len() - 2], size[size.len() - 1]);
    if h != w {
        return Err(Error::Shape(format!("quarter-turns need square images, got {h}x{w}")));
    }
    Ok(())
}

/// Rotates the last two axes by `label` quarter-turns counter-clockwise.
pub fn rotate_image(image: &Tensor, label: i64) -> Result<Tensor> {
    check_square(image)?;
    Ok(rotate_unchecked(image, label.rem_euclid(NUM_ROTATIONS)))
}

fn rotate_unchecked(x: &Tensor, label: i64) -> Tensor {
    match label {
        0 => x.shallow_clone(),
        1 => x.transpose(-2, -1).flip([-2]),
        2 => x.flip([-2, -1]),
        3 => x.transpose(-2, -1).flip([-1]),
        _ => unreachable!("label reduced mod 4"),
    }
}

/// Takes the first quarter of `batch` and emits every image in all four
/// orientations, grouped by label: `[q×r0, q×r1, q×r2, q×r3]`.
pub fn make_rotation_batch(batch: &Tensor, source: Source) -> Result<RotationBatch> {
    let n = batch.size().first().copied().unwrap_or(0);
    if n == 0 || n % NUM_ROTATIONS != 0 {
        return Err(Error::BatchSize(n));
    }
    check_square(batch)?;
    let quarter = n / NUM_ROTATIONS;
    let subset = batch.narrow(0, 0, quarter);
    let rotated: Vec<Tensor> = RotationSet::labels().map(|r| rotate_unchecked(&subset, r)).collect();
    let images = Tensor::cat(&rotated, 0);
    let labels = Tensor::arange(NUM_ROTATIONS, (Kind::Int64, batch.device()))
        .repeat_interleave_self_int(quarter, 0, None);
    Ok(RotationBatch { images, labels, source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::to_i64_vec;

    #[test]
    fn two_by_two_quarter_turn() {
        // [[a,b],[c,d]] -> [[b,d],[a,c]]
        let x = Tensor::from_slice(&[1.0f32, 2.0, 3.0, 4.0]).reshape([1, 2, 2]);
        let y = rotate_image(&x, 1).unwrap();
        let got = Vec::<f32>::try_from(&y.reshape([-1])).unwrap();
        assert_eq!(got, vec![2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn identity_rotation() {
        let x = Tensor::arange(27, (Kind::Float, tch::Device::Cpu)).reshape([3, 3, 3]);
        assert!(rotate_image(&x, 0).unwrap().equal(&x));
    }

    #[test]
    fn non_square_rejected() {
        let x = Tensor::zeros([3, 4, 5], (Kind::Float, tch::Device::Cpu));
        assert!(matches!(rotate_image(&x, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn rotation_batch_minimal_and_histogram() {
        let x = Tensor::arange(4 * 2 * 2, (Kind::Float, tch::Device::Cpu)).reshape([4, 1, 2, 2]);
        let rb = make_rotation_batch(&x, Source::Real).unwrap();
        assert_eq!(rb.images.size(), vec![4, 1, 2, 2]);
        assert_eq!(to_i64_vec(&rb.labels), vec![0, 1, 2, 3]);
        for r in 0..4 {
            let expect = rotate_image(&x.get(0), r).unwrap();
            assert!(rb.images.get(r).equal(&expect));
        }

        let x8 = Tensor::zeros([8, 1, 2, 2], (Kind::Float, tch::Device::Cpu));
        let labels = to_i64_vec(&make_rotation_batch(&x8, Source::Fake).unwrap().labels);
        let mut hist = [0; 4];
        for l in labels {
            hist[l as usize] += 1;
        }
        assert_eq!(hist, [2, 2, 2, 2]);
    }

    #[test]
    fn batch_of_64_uses_16_distinct_images() {
        let x = Tensor::arange(64, (Kind::Float, tch::Device::Cpu))
            .reshape([64, 1, 1, 1])
            .expand([64, 1, 3, 3], false)
            .contiguous();
        let rb = make_rotation_batch(&x, Source::Real).unwrap();
        assert_eq!(rb.len(), 64);
        let firsts = crate::util::to_f64_vec(&rb.images.select(2, 0).select(2, 0).view(-1));
        let mut distinct = firsts.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        assert_eq!(distinct.len(), 16);
        assert!(firsts.iter().all(|&v| v < 16.0));
    }

    #[test]
    fn indivisible_batch_rejected() {
        let x = Tensor::zeros([6, 1, 2, 2], (Kind::Float, tch::Device::Cpu));
        assert!(matches!(make_rotation_batch(&x, Source::Real), Err(Error::BatchSize(6))));
    }

    #[test]
    fn degrees_table() {
        assert_eq!(RotationSet::degrees(3), Some(270));
        assert_eq!(RotationSet::degrees(4), None);
    }
}
