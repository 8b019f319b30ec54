//! Spectral normalization by power iteration.
//!
//! A weight `W` (reshaped to `[out, in·k·k]`) is divided by the estimate
//! `σ̂ = uᵀ W v` of its largest singular value. `u` and `v` carry over between
//! calls; the gradient flows through `W` only.

use tch::Tensor;

/// Floor on `σ̂` so an all-zero weight does not divide by zero.
pub const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug)]
pub struct SpectralNormState {
    /// Left singular vector estimate, length `out`.
    pub u: Tensor,
    /// Right singular vector estimate, length `in`.
    pub v: Tensor,
}

impl Clone for SpectralNormState {
    fn clone(&self) -> Self {
        SpectralNormState { u: self.u.copy(), v: self.v.copy() }
    }
}

impl SpectralNormState {
    /// Starts from `u` and derives a matching unit `v = Wᵀu / ‖Wᵀu‖`.
    pub fn from_u(weight: &Tensor, u: Tensor) -> Self {
        let w = as_matrix(weight).detach();
        let v = normalize_or(&w.transpose(0, 1).mv(&u), None, w.size()[1]);
        SpectralNormState { u, v }
    }
}

fn as_matrix(weight: &Tensor) -> Tensor {
    let out = weight.size()[0];
    weight.reshape([out, -1])
}

/// Unit-normalizes `x`; falls back to `prev` (or a basis vector) when `x`
/// is numerically zero so the state always stays unit-norm.
fn normalize_or(x: &Tensor, prev: Option<&Tensor>, len: i64) -> Tensor {
    let norm = x.norm().double_value(&[]);
    if norm > SIGMA_FLOOR {
        x / norm
    } else if let Some(p) = prev {
        p.copy()
    } else {
        let e = x.zeros_like();
        if len > 0 {
            let _ = e.get(0).fill_(1.0);
        }
        e
    }
}

/// Runs `iterations` power-iteration updates without tracking gradients.
pub fn power_iteration(weight: &Tensor, state: &SpectralNormState, iterations: usize) -> SpectralNormState {
    tch::no_grad(|| {
        let w = as_matrix(weight).detach();
        let n_in = w.size()[1];
        let n_out = w.size()[0];
        let mut u = state.u.copy();
        let mut v = state.v.copy();
        for _ in 0..iterations {
            v = normalize_or(&w.transpose(0, 1).mv(&u), Some(&v), n_in);
            u = normalize_or(&w.mv(&v), Some(&u), n_out);
        }
        SpectralNormState { u, v }
    })
}

/// `σ̂ = uᵀ W v`, differentiable in `W` and floored at [`SIGMA_FLOOR`].
pub fn sigma(weight: &Tensor, state: &SpectralNormState) -> Tensor {
    let w = as_matrix(weight);
    let s = state.u.detach().dot(&w.mv(&state.v.detach()));
    s.clamp_min(SIGMA_FLOOR)
}

/// Power-iterates `iterations` times, then returns `W / σ̂` and the new state.
pub fn spectral_normalize(
    weight: &Tensor,
    state: &SpectralNormState,
    iterations: usize,
) -> (Tensor, SpectralNormState) {
    let next = power_iteration(weight, state, iterations);
    let normalized = weight / sigma(weight, &next);
    (normalized, next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::params::unit_vector;
    use tch::{Device, Kind};

    fn opts() -> (Kind, Device) {
        (Kind::Double, Device::Cpu)
    }

    #[test]
    fn identity_is_fixed_point() {
        let w = Tensor::eye(3, opts());
        let state = SpectralNormState::from_u(&w, unit_vector(0, "u", 3));
        let (out, _) = spectral_normalize(&w, &state, 1);
        assert!(out.allclose(&w, 1e-12, 1e-12, false));
    }

    #[test]
    fn diagonal_converged() {
        let w = Tensor::from_slice(&[3.0f64, 0.0, 0.0, 1.0]).reshape([2, 2]);
        let state = SpectralNormState::from_u(&w, unit_vector(1, "u", 2));
        let (out, state) = spectral_normalize(&w, &state, 60);
        let expect = Tensor::from_slice(&[1.0f64, 0.0, 0.0, 1.0 / 3.0]).reshape([2, 2]);
        assert!(out.allclose(&expect, 1e-9, 1e-9, false));
        for t in [&state.u, &state.v] {
            assert!((t.norm().double_value(&[]) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weight_is_floored() {
        let w = Tensor::zeros([3, 2], opts());
        let state = SpectralNormState::from_u(&w, unit_vector(2, "u", 3));
        let (out, state) = spectral_normalize(&w, &state, 1);
        assert!(out.isfinite().all().int64_value(&[]) == 1);
        assert!((state.v.norm().double_value(&[]) - 1.0).abs() < 1e-12);
        assert!((state.u.norm().double_value(&[]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conv_weight_reshaped() {
        let w = Tensor::from_slice(&(0..2 * 3 * 2 * 2).map(|i| (i as f64).sin()).collect::<Vec<_>>())
            .reshape([2, 3, 2, 2]);
        let state = SpectralNormState::from_u(&w, unit_vector(3, "u", 2));
        let (out, state) = spectral_normalize(&w, &state, 100);
        assert_eq!(out.size(), w.size());
        assert_eq!(state.v.size(), vec![12]);
        let m = Vec::<f64>::try_from(&out.reshape([-1])).unwrap();
        let s = nalgebra::DMatrix::from_row_slice(2, 12, &m).singular_values().max();
        assert!((s - 1.0).abs() < 1e-9);
    }
}
