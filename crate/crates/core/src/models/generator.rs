use rand::Rng;
use tch::{Kind, Tensor};

use super::layers::{Conv2d, LayerBuilder, Linear};
use super::norm::{BatchNorm, Conditioning, NormMode};
use super::params::ParamStore;
use super::{ArchConfig, LatentSpec};
use crate::error::{Error, Result};
use crate::util::normal_tensor;

#[derive(Debug, Clone)]
struct UpBlock {
    bn1: BatchNorm,
    conv1: Conv2d,
    bn2: BatchNorm,
    conv2: Conv2d,
    shortcut: Conv2d,
}

fn upsample(x: &Tensor) -> Tensor {
    let s = x.size();
    x.upsample_nearest2d([s[2] * 2, s[3] * 2], None, None)
}

impl UpBlock {
    fn forward(&self, store: &ParamStore, x: &Tensor, cond: Conditioning<'_>) -> Result<Tensor> {
        let h = self.bn1.forward(store, x, cond)?.relu();
        let h = self.conv1.forward(store, &upsample(&h));
        let h = self.bn2.forward(store, &h, cond)?.relu();
        let h = self.conv2.forward(store, &h);
        Ok(h + self.shortcut.forward(store, &upsample(x)))
    }
}

/// ResNet generator: latent → `[base, base]` grid → three 2× up-sampling
/// residual blocks → `tanh` image in `[-1, 1]`.
#[derive(Debug)]
pub struct Generator {
    store: ParamStore,
    arch: ArchConfig,
    norm_mode: NormMode,
    latent: LatentSpec,
    num_classes: Option<i64>,
    fc: Linear,
    blocks: Vec<UpBlock>,
    final_bn: BatchNorm,
    final_conv: Conv2d,
}

impl Generator {
    pub(crate) fn build(arch: &ArchConfig, norm_mode: NormMode, num_classes: Option<i64>, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new(Kind::Float);
        let mut b = LayerBuilder { store: &mut store, seed, spectral_norm: false };
        let w = arch.g_width;
        let base = arch.image_size / 8;
        let fc = b.linear("g.fc", arch.latent_dim, base * base * w, true);
        let bn = |b: &mut LayerBuilder<'_>, name: &str| {
            BatchNorm::new(b, name, w, norm_mode, arch.latent_dim, arch.sbn_hidden, num_classes)
        };
        let mut blocks = Vec::new();
        for i in 0..3 {
            let p = format!("g.block{i}");
            blocks.push(UpBlock {
                bn1: bn(&mut b, &format!("{p}.bn1"))?,
                conv1: b.conv(&format!("{p}.conv1"), w, w, 3),
                bn2: bn(&mut b, &format!("{p}.bn2"))?,
                conv2: b.conv(&format!("{p}.conv2"), w, w, 3),
                shortcut: b.conv(&format!("{p}.shortcut"), w, w, 1),
            });
        }
        let final_bn = bn(&mut b, "g.final_bn")?;
        let final_conv = b.conv("g.final_conv", w, arch.channels, 3);
        Ok(Generator {
            store,
            arch: arch.clone(),
            norm_mode,
            latent: LatentSpec { dim: arch.latent_dim },
            num_classes,
            fc,
            blocks,
            final_bn,
            final_conv,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn latent(&self) -> LatentSpec {
        self.latent
    }

    pub fn norm_mode(&self) -> NormMode {
        self.norm_mode
    }

    pub fn output_shape(&self) -> [i64; 3] {
        [self.arch.channels, self.arch.image_size, self.arch.image_size]
    }

    /// Maps latents `[N, dim]` (and class labels for the conditional
    /// generator) to images `[N, C, H, W]`.
    pub fn forward(&self, z: &Tensor, labels: Option<&Tensor>) -> Result<Tensor> {
        let zs = z.size();
        if zs.len() != 2 || zs[1] != self.latent.dim {
            return Err(Error::Shape(format!("latent must be [N, {}], got {zs:?}", self.latent.dim)));
        }
        if let (Some(classes), Some(l)) = (self.num_classes, labels) {
            check_labels(l, classes)?;
        }
        let cond = Conditioning { z, labels };
        let base = self.arch.image_size / 8;
        let mut h = self.fc.forward(&self.store, z).reshape([zs[0], self.arch.g_width, base, base]);
        for block in &self.blocks {
            h = block.forward(&self.store, &h, cond)?;
        }
        let h = self.final_bn.forward(&self.store, &h, cond)?.relu();
        Ok(self.final_conv.forward(&self.store, &h).tanh())
    }

    /// Draws `n` latents from `rng` and generates.
    pub fn sample(&self, rng: &mut impl Rng, n: i64, labels: Option<&Tensor>) -> Result<Tensor> {
        let z = self.latent.sample(rng, n, self.store.kind());
        self.forward(&z, labels)
    }
}

impl LatentSpec {
    pub fn sample(&self, rng: &mut impl Rng, n: i64, kind: Kind) -> Tensor {
        normal_tensor(rng, &[n, self.dim], kind)
    }
}

pub(crate) fn check_labels(labels: &Tensor, num_classes: i64) -> Result<()> {
    if labels.numel() == 0 {
        return Ok(());
    }
    let lo = labels.min().int64_value(&[]);
    let hi = labels.max().int64_value(&[]);
    for l in [lo, hi] {
        if !(0..num_classes).contains(&l) {
            return Err(Error::LabelRange { label: l, bound: num_classes });
        }
    }
    Ok(())
}
