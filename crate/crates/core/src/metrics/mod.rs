//! Fréchet distance between Gaussian fits of embedded image sets.
//!
//! All linear algebra runs in `f64` through nalgebra. The cross term uses
//! `Tr((Σx Σg)^½) = Tr((Σx^½ Σg Σx^½)^½)` so every square root is taken of a
//! symmetric PSD matrix.

mod extractor;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use tch::Tensor;

pub use extractor::{ExtractorConfig, FeatureExtractor, EMBEDDING_DIM};

use crate::data::check_pixel_range;
use crate::error::{Error, Result};

/// Tolerance on `|A - Aᵀ|` accepted by [`matrix_sqrt_spd`].
pub const SYMMETRY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

fn tensor_to_matrix(t: &Tensor) -> Result<DMatrix<f64>> {
    let s = t.size();
    if s.len() != 2 {
        return Err(Error::Shape(format!("expected a [N, F] matrix, got {s:?}")));
    }
    let data = crate::util::to_f64_vec(t);
    Ok(DMatrix::from_row_slice(s[0] as usize, s[1] as usize, &data))
}

/// Column means and the unbiased (N−1) covariance, symmetrized.
pub fn gaussian_stats(features: &Tensor) -> Result<GaussianStats> {
    let x = tensor_to_matrix(features)?;
    gaussian_stats_matrix(&x)
}

pub fn gaussian_stats_matrix(x: &DMatrix<f64>) -> Result<GaussianStats> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::BatchSize(n as i64));
    }
    let mu = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let c = centered.transpose() * &centered / (n as f64 - 1.0);
    let sigma = (&c + c.transpose()) * 0.5;
    Ok(GaussianStats { mu, sigma })
}

/// Principal square root of a symmetric PSD matrix via eigendecomposition,
/// with negative eigenvalues clamped to zero.
pub fn matrix_sqrt_spd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::Shape(format!("matrix_sqrt_spd needs a square matrix, got {}×{}", a.nrows(), a.ncols())));
    }
    let asym = (a - a.transpose()).abs().max();
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(asym));
    }
    let eig = SymmetricEigen::new(a.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    let s = q * DMatrix::from_diagonal(&roots) * q.transpose();
    Ok((&s + s.transpose()) * 0.5)
}

/// `‖μx − μg‖² + Tr(Σx + Σg − 2(ΣxΣg)^½)`; results in `(−1e-6, 0)` clamp to 0.
pub fn frechet_distance(x: &GaussianStats, g: &GaussianStats) -> Result<f64> {
    if x.dim() != g.dim() || x.sigma.nrows() != x.dim() || g.sigma.nrows() != g.dim() {
        return Err(Error::Shape(format!("feature dimensions differ: {} vs {}", x.dim(), g.dim())));
    }
    let diff = &x.mu - &g.mu;
    let sx_half = matrix_sqrt_spd(&x.sigma)?;
    let inner = &sx_half * &g.sigma * &sx_half;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = matrix_sqrt_spd(&inner)?.trace();
    let d = diff.norm_squared() + x.sigma.trace() + g.sigma.trace() - 2.0 * cross;
    if d < 0.0 && d > -1e-6 {
        return Ok(0.0);
    }
    Ok(d)
}

/// One FID measurement with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub step: i64,
    pub fid: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub extractor_hash: String,
}

/// Embeds both image sets with `extractor` and returns their Fréchet
/// distance plus sample counts. `step` is carried into the report.
pub fn compute_fid(real: &Tensor, fake: &Tensor, extractor: &FeatureExtractor, step: i64) -> Result<FidReport> {
    check_pixel_range(real)?;
    check_pixel_range(fake)?;
    let (n_real, n_fake) = (real.size()[0] as usize, fake.size()[0] as usize);
    if n_real < 2 || n_fake < 2 {
        return Err(Error::BatchSize(n_real.min(n_fake) as i64));
    }
    let stats_r = gaussian_stats(&extractor.embed(real)?)?;
    let stats_f = gaussian_stats(&extractor.embed(fake)?)?;
    Ok(FidReport {
        step,
        fid: frechet_distance(&stats_r, &stats_f)?,
        n_real,
        n_fake,
        extractor_hash: extractor.hash().to_string(),
    })
}

/// Real-side statistics are fixed for a run, so callers may cache them.
pub fn real_stats(real: &Tensor, extractor: &FeatureExtractor) -> Result<GaussianStats> {
    check_pixel_range(real)?;
    gaussian_stats(&extractor.embed(real)?)
}

/// FID between the two halves of `real`: the noise floor of the metric at
/// half the sample size.
pub fn split_half_fid(real: &Tensor, extractor: &FeatureExtractor) -> Result<f64> {
    let half = real.size()[0] / 2;
    let a = real_stats(&real.narrow(0, 0, half), extractor)?;
    let b = real_stats(&real.narrow(0, half, half), extractor)?;
    frechet_distance(&a, &b)
}

pub fn fid_against(stats_r: &GaussianStats, fake: &Tensor, extractor: &FeatureExtractor) -> Result<f64> {
    check_pixel_range(fake)?;
    if fake.size()[0] < 2 {
        return Err(Error::BatchSize(fake.size()[0]));
    }
    frechet_distance(stats_r, &gaussian_stats(&extractor.embed(fake)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::Kind;

    fn stats(mu: Vec<f64>, sigma: DMatrix<f64>) -> GaussianStats {
        GaussianStats { mu: DVector::from_vec(mu), sigma }
    }

    #[test]
    fn two_row_covariance() {
        let s = gaussian_stats(&Tensor::from_slice(&[0.0f64, 0.0, 2.0, 0.0]).reshape([2, 2])).unwrap();
        assert_eq!(s.mu.as_slice(), &[1.0, 0.0]);
        assert_eq!(s.sigma, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn identical_rows_have_zero_covariance() {
        let x = Tensor::from_slice(&[1.5f64, -2.0, 3.0]).repeat([5, 1]);
        let s = gaussian_stats(&x).unwrap();
        assert_eq!(s.mu.as_slice(), &[1.5, -2.0, 3.0]);
        assert!(s.sigma.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_row_rejected() {
        assert!(gaussian_stats(&Tensor::zeros([1, 3], (Kind::Float, tch::Device::Cpu))).is_err());
    }

    #[test]
    fn sqrt_closed_forms() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert!((matrix_sqrt_spd(&i).unwrap() - &i).abs().max() < 1e-12);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let s = matrix_sqrt_spd(&d).unwrap();
        assert!((s - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]))).abs().max() < 1e-12);
    }

    #[test]
    fn asymmetric_input_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(matrix_sqrt_spd(&a), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn distance_closed_forms() {
        let n = 5;
        let i = DMatrix::<f64>::identity(n, n);
        let a = stats(vec![0.0; n], i.clone());
        assert!(frechet_distance(&a, &a).unwrap() <= 1e-6);
        let b = stats(vec![1.0, -2.0, 0.0, 0.5, 3.0], i.clone());
        assert!((frechet_distance(&a, &b).unwrap() - 14.25).abs() < 1e-9);
        let c = stats(vec![0.0; n], &i * 4.0);
        assert!((frechet_distance(&c, &a).unwrap() - n as f64).abs() < 1e-9);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = stats(vec![0.0; 2], DMatrix::identity(2, 2));
        let b = stats(vec![0.0; 3], DMatrix::identity(3, 3));
        assert!(frechet_distance(&a, &b).is_err());
    }
}
