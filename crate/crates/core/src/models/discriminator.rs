use tch::{Kind, Tensor};

use super::generator::check_labels;
use super::layers::{refresh_spectral_norm, Conv2d, Embedding, LayerBuilder, Linear};
use super::params::ParamStore;
use super::{ArchConfig, Regularizer};
use crate::error::{Error, Result};
use crate::rotation::NUM_ROTATIONS;

/// Published shape of one trunk block's output, `[C, H, W]`.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BlockMeta {
    pub name: String,
    pub channels: i64,
    pub height: i64,
    pub width: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlockKind {
    /// First block: conv before activation, pooled shortcut.
    Input,
    Down,
    Plain,
}

#[derive(Debug, Clone)]
struct DownBlock {
    kind: BlockKind,
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

fn pool(x: &Tensor) -> Tensor {
    x.avg_pool2d([2, 2], [2, 2], [0, 0], false, true, None)
}

impl DownBlock {
    fn forward(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        match self.kind {
            BlockKind::Input => {
                let h = self.conv1.forward(store, x).relu();
                let h = pool(&self.conv2.forward(store, &h));
                let sc = self.shortcut.as_ref().expect("input block shortcut").forward(store, &pool(x));
                h + sc
            }
            BlockKind::Down => {
                let h = self.conv1.forward(store, &x.relu());
                let h = pool(&self.conv2.forward(store, &h.relu()));
                let sc = pool(&self.shortcut.as_ref().expect("down block shortcut").forward(store, x));
                h + sc
            }
            BlockKind::Plain => {
                let h = self.conv1.forward(store, &x.relu());
                let h = self.conv2.forward(store, &h.relu());
                h + x
            }
        }
    }
}

/// Projection head of the conditional baseline:
/// `logit = w·f + b + ⟨embed(y), f⟩`.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub unconditional: Linear,
    pub embedding: Embedding,
    pub num_classes: i64,
}

impl ProjectionHead {
    pub fn logit(&self, store: &ParamStore, features: &Tensor, labels: &Tensor) -> Result<Tensor> {
        pcgan_logit(features, labels, &self.unconditional.forward(store, features), &self.embedding.table(store))
    }
}

/// `unconditional_logits + ⟨embedding[label], features⟩`, shape `[N, 1]`.
pub fn pcgan_logit(
    features: &Tensor,
    labels: &Tensor,
    unconditional_logits: &Tensor,
    embedding: &Tensor,
) -> Result<Tensor> {
    let n = features.size()[0];
    let classes = embedding.size()[0];
    let labels = labels.reshape([-1]).to_kind(Kind::Int64);
    if labels.size()[0] != n {
        return Err(Error::Shape(format!("{} labels for {n} feature rows", labels.size()[0])));
    }
    check_labels(&labels, classes)?;
    let proj = (embedding.index_select(0, &labels) * features).sum_dim_intlist(1, true, None);
    Ok(unconditional_logits.reshape([n, 1]) + proj)
}

/// Outputs of both heads over one trunk pass.
#[derive(Debug)]
pub struct DiscOutput {
    /// Real/fake logits, `[N]`.
    pub source: Tensor,
    /// Rotation logits `[N, 4]` when the rotation head exists.
    pub rotation: Option<Tensor>,
    /// Pooled trunk features `[N, F]` shared by the heads.
    pub features: Tensor,
}

/// Residual discriminator with a shared trunk and up to three heads.
#[derive(Debug)]
pub struct Discriminator {
    store: ParamStore,
    regularizer: Regularizer,
    blocks: Vec<DownBlock>,
    meta: Vec<BlockMeta>,
    source_head: Linear,
    rotation_head: Option<Linear>,
    projection: Option<ProjectionHead>,
    image_size: i64,
    channels: i64,
}

impl Discriminator {
    pub(crate) fn build(
        arch: &ArchConfig,
        regularizer: Regularizer,
        rotation_head: bool,
        num_classes: Option<i64>,
        seed: u64,
    ) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new(Kind::Float);
        let mut b = LayerBuilder {
            store: &mut store,
            seed,
            spectral_norm: regularizer == Regularizer::SpectralNorm,
        };
        let w = arch.d_width;
        let s = arch.image_size;
        let layout = [
            (BlockKind::Input, arch.channels, s / 2),
            (BlockKind::Down, w, s / 4),
            (BlockKind::Plain, w, s / 4),
            (BlockKind::Plain, w, s / 4),
        ];
        let mut blocks = Vec::new();
        let mut meta = Vec::new();
        for (i, (kind, c_in, out_size)) in layout.into_iter().enumerate() {
            let p = format!("d.block{i}");
            let shortcut = (kind != BlockKind::Plain).then(|| b.conv(&format!("{p}.shortcut"), c_in, w, 1));
            blocks.push(DownBlock {
                kind,
                conv1: b.conv(&format!("{p}.conv1"), c_in, w, 3),
                conv2: b.conv(&format!("{p}.conv2"), w, w, 3),
                shortcut,
            });
            meta.push(BlockMeta { name: format!("block{i}"), channels: w, height: out_size, width: out_size });
        }
        let source_head = b.linear("d.source_head", w, 1, true);
        let rotation_head = rotation_head.then(|| b.linear("d.rotation_head", w, NUM_ROTATIONS, true));
        let projection = num_classes.map(|classes| ProjectionHead {
            unconditional: source_head.clone(),
            embedding: b.embedding("d.label_projection", classes, w),
            num_classes: classes,
        });
        Ok(Discriminator {
            store,
            regularizer,
            blocks,
            meta,
            source_head,
            rotation_head,
            projection,
            image_size: s,
            channels: arch.channels,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn regularizer(&self) -> Regularizer {
        self.regularizer
    }

    pub fn has_rotation_head(&self) -> bool {
        self.rotation_head.is_some()
    }

    pub fn is_conditional(&self) -> bool {
        self.projection.is_some()
    }

    pub fn blocks(&self) -> &[BlockMeta] {
        &self.meta
    }

    pub fn feature_dim(&self) -> i64 {
        self.meta.last().map(|m| m.channels).unwrap_or(0)
    }

    /// Parameter names of the rotation head (empty without one).
    pub fn rotation_head_params(&self) -> Vec<String> {
        self.rotation_head
            .iter()
            .flat_map(|h| std::iter::once(h.weight.clone()).chain(h.bias.clone()))
            .collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.size();
        if s.len() != 4 || s[1] != self.channels || s[2] != self.image_size || s[3] != self.image_size {
            return Err(Error::Shape(format!(
                "discriminator expects [N, {}, {}, {}], got {s:?}",
                self.channels, self.image_size, self.image_size
            )));
        }
        Ok(())
    }

    /// Pooled trunk features `[N, F]`: final block → ReLU → spatial sum.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.shallow_clone();
        for block in &self.blocks {
            h = block.forward(&self.store, &h);
        }
        Ok(h.relu().sum_dim_intlist([2i64, 3].as_slice(), false, None))
    }

    /// Activations of the named block, `[N, C, H, W]`.
    pub fn block_features(&self, x: &Tensor, block: &str) -> Result<Tensor> {
        self.check_input(x)?;
        let idx = self.meta.iter().position(|m| m.name == block).ok_or_else(|| Error::UnknownBlock {
            name: block.to_string(),
            valid: self.meta.iter().map(|m| m.name.clone()).collect(),
        })?;
        let mut h = x.shallow_clone();
        for b in &self.blocks[..=idx] {
            h = b.forward(&self.store, &h);
        }
        Ok(h)
    }

    /// Source logits `[N]`; the conditional discriminator requires labels.
    pub fn source_logits(&self, features: &Tensor, labels: Option<&Tensor>) -> Result<Tensor> {
        match (&self.projection, labels) {
            (Some(p), Some(l)) => Ok(p.logit(&self.store, features, l)?.reshape([-1])),
            (Some(_), None) => Err(Error::Config("conditional discriminator needs labels".into())),
            (None, _) => Ok(self.source_head.forward(&self.store, features).reshape([-1])),
        }
    }

    pub fn rotation_logits(&self, features: &Tensor) -> Result<Tensor> {
        let head = self
            .rotation_head
            .as_ref()
            .ok_or_else(|| Error::Config("discriminator has no rotation head".into()))?;
        Ok(head.forward(&self.store, features))
    }

    /// Runs the trunk once and every head present.
    pub fn forward(&self, x: &Tensor, labels: Option<&Tensor>) -> Result<DiscOutput> {
        let features = self.features(x)?;
        let source = self.source_logits(&features, labels)?;
        let rotation = match self.rotation_head {
            Some(_) => Some(self.rotation_logits(&features)?),
            None => None,
        };
        Ok(DiscOutput { source, rotation, features })
    }

    /// Advances the power iteration of every spectrally normalized weight.
    pub fn refresh_spectral_norm(&self, iterations: usize) {
        if self.regularizer == Regularizer::SpectralNorm {
            refresh_spectral_norm(&self.store, iterations);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_logit_by_hand() {
        // features f = (1, 2, 3), embedding rows e0 = (1, 0, -1), e1 = (0.5, 0.5, 0.5)
        let f = Tensor::from_slice(&[1.0f64, 2.0, 3.0, 1.0, 2.0, 3.0]).reshape([2, 3]);
        let e = Tensor::from_slice(&[1.0f64, 0.0, -1.0, 0.5, 0.5, 0.5]).reshape([2, 3]);
        let uncond = Tensor::from_slice(&[0.25f64, 0.25]);
        let labels = Tensor::from_slice(&[0i64, 1]);
        let out = pcgan_logit(&f, &labels, &uncond, &e).unwrap();
        assert_eq!(out.size(), vec![2, 1]);
        // 0.25 + (1 - 3) = -1.75 ; 0.25 + 0.5·6 = 3.25
        assert_eq!(Vec::<f64>::try_from(&out.reshape([-1])).unwrap(), vec![-1.75, 3.25]);
    }

    #[test]
    fn projection_symmetry_and_zero_embedding() {
        let f = Tensor::from_slice(&[0.3f64, -1.2]).reshape([1, 2]);
        let uncond = Tensor::from_slice(&[0.7f64]);
        let e = Tensor::from_slice(&[2.0f64, 1.0, -2.0, -1.0]).reshape([2, 2]);
        let a = pcgan_logit(&f, &Tensor::from_slice(&[0i64]), &uncond, &e).unwrap().double_value(&[0, 0]);
        let b = pcgan_logit(&f, &Tensor::from_slice(&[1i64]), &uncond, &e).unwrap().double_value(&[0, 0]);
        assert!(((a + b) / 2.0 - 0.7).abs() < 1e-12);
        let zero = pcgan_logit(&f, &Tensor::from_slice(&[1i64]), &uncond, &e.zeros_like()).unwrap();
        assert_eq!(zero.double_value(&[0, 0]), 0.7);
    }

    #[test]
    fn projection_label_out_of_range() {
        let f = Tensor::zeros([1, 2], (Kind::Double, tch::Device::Cpu));
        let e = Tensor::zeros([2, 2], (Kind::Double, tch::Device::Cpu));
        let err = pcgan_logit(&f, &Tensor::from_slice(&[2i64]), &Tensor::zeros([1], (Kind::Double, tch::Device::Cpu)), &e);
        assert!(matches!(err, Err(Error::LabelRange { label: 2, bound: 2 })));
    }
}
