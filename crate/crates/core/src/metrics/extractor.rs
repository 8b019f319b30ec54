//! Small CNN classifier whose penultimate layer serves as the FID embedding.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::data::{batch_stream, Dataset};
use crate::error::{Error, Result};
use crate::models::checkpoint::Archive;
use crate::models::layers::{Conv2d, LayerBuilder, Linear};
use crate::models::ParamStore;
use crate::optim::{gradients, Adam, AdamConfig};

pub const EMBEDDING_DIM: i64 = 256;
const EMBED_CHUNK: i64 = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub image_size: i64,
    pub channels: i64,
    pub num_classes: i64,
    pub widths: [i64; 3],
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            image_size: 32,
            channels: 3,
            num_classes: 10,
            widths: [32, 64, 128],
            steps: 2000,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Frozen embedding network, identified by the hash of its weights.
#[derive(Debug)]
pub struct FeatureExtractor {
    config: ExtractorConfig,
    store: ParamStore,
    convs: Vec<Conv2d>,
    embed: Linear,
    classify: Linear,
    hash: String,
}

impl FeatureExtractor {
    fn build(config: ExtractorConfig) -> Result<Self> {
        if config.image_size % 8 != 0 || config.image_size < 8 {
            return Err(Error::Config(format!("extractor image size must be a multiple of 8, got {}", config.image_size)));
        }
        let mut store = ParamStore::new(Kind::Float);
        let mut b = LayerBuilder { store: &mut store, seed: config.seed, spectral_norm: false };
        let mut convs = Vec::new();
        let mut c_in = config.channels;
        for (i, &w) in config.widths.iter().enumerate() {
            convs.push(b.conv(&format!("fx.conv{i}"), c_in, w, 3));
            c_in = w;
        }
        let spatial = config.image_size / 8;
        let embed = b.linear("fx.embed", c_in * spatial * spatial, EMBEDDING_DIM, true);
        let classify = b.linear("fx.classify", EMBEDDING_DIM, config.num_classes, true);
        let mut fx = FeatureExtractor { config, store, convs, embed, classify, hash: String::new() };
        fx.hash = fx.store.digest();
        Ok(fx)
    }

    fn embedding_graph(&self, x: &Tensor) -> Tensor {
        let mut h = x.shallow_clone();
        for conv in &self.convs {
            h = conv.forward(&self.store, &h).relu().max_pool2d([2, 2], [2, 2], [0, 0], [1, 1], false);
        }
        self.embed.forward(&self.store, &h.flatten(1, -1))
    }

    fn logits(&self, x: &Tensor) -> Tensor {
        self.classify.forward(&self.store, &self.embedding_graph(x).relu())
    }

    /// Trains a fresh classifier on a labeled dataset and freezes it.
    pub fn train(dataset: &Dataset, config: ExtractorConfig) -> Result<Self> {
        let labels_known = dataset.labels.is_some() && dataset.num_classes == Some(config.num_classes);
        if !labels_known {
            return Err(Error::Config(format!(
                "extractor training needs labels with {} classes",
                config.num_classes
            )));
        }
        let [c, h, _] = dataset.image_shape();
        if c != config.channels || h != config.image_size {
            return Err(Error::Shape(format!(
                "extractor configured for {}×{}² images, dataset has {c}×{h}²",
                config.channels, config.image_size
            )));
        }
        let mut fx = Self::build(config.clone())?;
        let adam_cfg = AdamConfig { lr: config.lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut adam = Adam::new(adam_cfg, &fx.store);
        let stream = batch_stream(dataset, config.batch_size.min(dataset.len()), config.seed)?;
        for batch in stream.take(config.steps) {
            let labels = batch.labels.expect("labeled dataset");
            let loss = fx.logits(&batch.images).cross_entropy_for_logits(&labels);
            let grads = gradients(&loss, &fx.store)?;
            adam.apply(&fx.store, &grads);
        }
        fx.hash = fx.store.digest();
        Ok(fx)
    }

    /// `[N, 256]` embeddings, computed without gradients in fixed-size chunks.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let s = images.size();
        if s.len() != 4 || s[1] != self.config.channels || s[2] != self.config.image_size || s[3] != s[2] {
            return Err(Error::Shape(format!(
                "extractor expects [N, {}, {}, {}], got {s:?}",
                self.config.channels, self.config.image_size, self.config.image_size
            )));
        }
        let x = images.to_kind(Kind::Float);
        let out = tch::no_grad(|| {
            let parts: Vec<Tensor> = (0..s[0])
                .step_by(EMBED_CHUNK as usize)
                .map(|start| self.embedding_graph(&x.narrow(0, start, EMBED_CHUNK.min(s[0] - start))))
                .collect();
            Tensor::cat(&parts, 0)
        });
        Ok(out)
    }

    /// Top-1 accuracy of the classifier head.
    pub fn accuracy(&self, images: &Tensor, labels: &Tensor) -> Result<f64> {
        let emb = self.embed(images)?;
        let pred = tch::no_grad(|| self.classify.forward(&self.store, &emb.relu()).argmax(1, false));
        Ok(pred.eq_tensor(labels).to_kind(Kind::Double).mean(Kind::Double).double_value(&[]))
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ar = Archive::new();
        ar.insert_store("fx", &self.store);
        ar.set("kind", "feature_extractor");
        ar.set("content_hash", &self.hash);
        ar.set("config", serde_json::to_string(&self.config)?);
        ar.save(path)
    }

    /// Loads an extractor and checks its weights against the stored hash.
    pub fn load(path: &Path) -> Result<Self> {
        let ar = Archive::load(path)?;
        if ar.get("kind")? != "feature_extractor" {
            return Err(Error::Checkpoint(format!("{} is not a feature extractor", path.display())));
        }
        let config: ExtractorConfig = serde_json::from_str(ar.get("config")?)?;
        let mut fx = Self::build(config)?;
        ar.restore_store("fx", &fx.store)?;
        fx.hash = fx.store.digest();
        if fx.hash != ar.get("content_hash")? {
            return Err(Error::Checkpoint(format!("{}: extractor weights do not match content hash", path.display())));
        }
        Ok(fx)
    }
}
