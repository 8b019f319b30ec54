//! Batch normalization for the generator, in three flavours: plain learned
//! affine, self-modulated (affine predicted from the latent), and
//! label-conditional (affine looked up per class).
//!
//! Normalization always uses the statistics of the current batch; the
//! generator keeps no running averages.

use serde::{Deserialize, Serialize};
use tch::Tensor;

use super::layers::{Embedding, LayerBuilder, Linear};
use super::params::ParamStore;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    PlainBn,
    SelfModulatedBn,
    LabelConditionalBn,
}

/// Per-channel normalization of `[N, C, H, W]` (or `[N, C]`) activations with
/// biased batch variance.
pub fn batch_normalize(h: &Tensor) -> Result<Tensor> {
    let size = h.size();
    if size.len() < 2 {
        return Err(Error::Shape(format!("batch norm expects [N, C, ...], got {size:?}")));
    }
    if size[0] < 2 {
        return Err(Error::Shape("batch statistics need at least 2 samples".into()));
    }
    let dims: Vec<i64> = std::iter::once(0).chain(2..size.len() as i64).collect();
    let mean = h.mean_dim(dims.as_slice(), true, None);
    let var = (h - &mean).square().mean_dim(dims.as_slice(), true, None);
    Ok((h - mean) / (var + BN_EPS).sqrt())
}

fn broadcast_channels(per_sample: &Tensor, ndim: usize) -> Tensor {
    let mut shape = per_sample.size();
    shape.extend(std::iter::repeat_n(1, ndim - 2));
    per_sample.reshape(shape.as_slice())
}

/// Self-modulated batch norm: `BN(h) · γ(z) + β(z)` with `γ, β` from a
/// one-hidden-layer MLP on the latent.
pub fn self_modulated_bn(h: &Tensor, z: &Tensor, params: &SelfModulation, store: &ParamStore) -> Result<Tensor> {
    let normalized = batch_normalize(h)?;
    let (gamma, shift) = params.modulation(store, z)?;
    let nd = h.dim();
    Ok(normalized * broadcast_channels(&gamma, nd) + broadcast_channels(&shift, nd))
}

/// The latent-to-affine map of a self-modulated batch norm.
#[derive(Debug, Clone)]
pub struct SelfModulation {
    hidden: Linear,
    out: Linear,
    channels: i64,
}

impl SelfModulation {
    pub fn new(b: &mut LayerBuilder<'_>, name: &str, latent_dim: i64, hidden: i64, channels: i64) -> Self {
        let hidden_layer = b.linear(&format!("{name}.mod_hidden"), latent_dim, hidden, true);
        let out = b.linear(&format!("{name}.mod_out"), hidden, 2 * channels, true);
        // Start as plain batch norm: γ ≡ 1, β ≡ 0.
        b.store.assign(&out.weight, &b.store.param(&out.weight).zeros_like());
        SelfModulation { hidden: hidden_layer, out, channels }
    }

    /// Returns per-sample `(γ, β)`, each `[N, C]`.
    pub fn modulation(&self, store: &ParamStore, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.hidden.forward(store, z).relu();
        let o = self.out.forward(store, &h);
        if o.size()[1] != 2 * self.channels {
            return Err(Error::Shape(format!("modulation width {} != 2·{}", o.size()[1], self.channels)));
        }
        let gamma = o.narrow(1, 0, self.channels) + 1.0;
        let shift = o.narrow(1, self.channels, self.channels);
        Ok((gamma, shift))
    }
}

/// Conditioning inputs available to a generator batch norm.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a> {
    pub z: &'a Tensor,
    pub labels: Option<&'a Tensor>,
}

#[derive(Debug, Clone)]
enum Affine {
    Plain { gamma: String, beta: String },
    SelfModulated(SelfModulation),
    LabelConditional { gamma: Embedding, beta: Embedding },
}

/// A generator batch-norm layer in one of the three modes.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    affine: Affine,
}

impl BatchNorm {
    pub fn new(
        b: &mut LayerBuilder<'_>,
        name: &str,
        channels: i64,
        mode: NormMode,
        latent_dim: i64,
        sbn_hidden: i64,
        num_classes: Option<i64>,
    ) -> Result<Self> {
        let affine = match mode {
            NormMode::PlainBn => {
                let kind = b.store.kind();
                let gamma = format!("{name}.gamma");
                let beta = format!("{name}.beta");
                b.store.add_param(&gamma, Tensor::ones([channels], (kind, tch::Device::Cpu)));
                b.store.add_param(&beta, Tensor::zeros([channels], (kind, tch::Device::Cpu)));
                Affine::Plain { gamma, beta }
            }
            NormMode::SelfModulatedBn => {
                Affine::SelfModulated(SelfModulation::new(b, name, latent_dim, sbn_hidden, channels))
            }
            NormMode::LabelConditionalBn => {
                let classes = num_classes
                    .ok_or_else(|| Error::Config("label-conditional batch norm needs num_classes".into()))?;
                let gamma = b.constant_table(&format!("{name}.gamma"), classes, channels, 1.0);
                let beta = b.constant_table(&format!("{name}.beta"), classes, channels, 0.0);
                Affine::LabelConditional { gamma, beta }
            }
        };
        Ok(BatchNorm { affine })
    }

    pub fn forward(&self, store: &ParamStore, h: &Tensor, cond: Conditioning<'_>) -> Result<Tensor> {
        let nd = h.dim();
        match &self.affine {
            Affine::Plain { gamma, beta } => {
                let normalized = batch_normalize(h)?;
                let g = store.param(gamma).reshape([1, -1, 1, 1]);
                let b = store.param(beta).reshape([1, -1, 1, 1]);
                Ok(normalized * g + b)
            }
            Affine::SelfModulated(m) => self_modulated_bn(h, cond.z, m, store),
            Affine::LabelConditional { gamma, beta } => {
                let labels = cond
                    .labels
                    .ok_or_else(|| Error::Config("label-conditional generator called without labels".into()))?;
                let normalized = batch_normalize(h)?;
                let g = broadcast_channels(&gamma.forward(store, labels), nd);
                let b = broadcast_channels(&beta.forward(store, labels), nd);
                Ok(normalized * g + b)
            }
        }
    }
}
