use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_cifar10, Dataset, Split, SyntheticShapes};
use crate::error::{Error, Result};
use crate::losses::{LossFamily, LossWeights};
use crate::metrics::ExtractorConfig;
use crate::models::{ArchConfig, Regularizer, Variant};
use crate::optim::AdamConfig;

/// Optimizer settings shared by both players.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        AdamSettings { lr: 2e-4, beta1: 0.0, beta2: 0.9 }
    }
}

impl AdamSettings {
    pub fn to_config(self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// CIFAR-10 binary archive; `root` falls back to `SSGAN_DATA_ROOT`.
    Cifar10 {
        #[serde(default)]
        root: Option<PathBuf>,
    },
    Synthetic {
        #[serde(default)]
        shapes: SyntheticShapes,
        /// Size of the separately seeded evaluation set.
        #[serde(default = "default_eval_n")]
        eval_n: usize,
    },
}

fn default_eval_n() -> usize {
    1000
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Cifar10 { root: None }
    }
}

pub const DATA_ROOT_ENV: &str = "SSGAN_DATA_ROOT";

impl DatasetSpec {
    pub fn name(&self) -> String {
        match self {
            DatasetSpec::Cifar10 { .. } => "cifar10".into(),
            DatasetSpec::Synthetic { shapes, .. } => format!("shapes{}", shapes.size),
        }
    }

    fn cifar_root(root: &Option<PathBuf>) -> Result<PathBuf> {
        root.clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .ok_or_else(|| Error::Config(format!("dataset.root is not set and {DATA_ROOT_ENV} is empty")))
    }

    /// Training data.
    pub fn load_train(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Cifar10 { root } => load_cifar10(&Self::cifar_root(root)?, Split::Train),
            DatasetSpec::Synthetic { shapes, .. } => shapes.generate(),
        }
    }

    /// Held-out data for the real side of FID and for probe testing.
    pub fn load_eval(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Cifar10 { root } => load_cifar10(&Self::cifar_root(root)?, Split::Test),
            DatasetSpec::Synthetic { shapes, eval_n } => {
                let spec = SyntheticShapes { n: *eval_n, seed: shapes.seed.wrapping_add(0x5eed), ..shapes.clone() };
                let mut d = spec.generate()?;
                d.split = Split::Test;
                d.records = shapes.n..shapes.n + *eval_n;
                Ok(d)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FidConfig {
    /// Generated and real samples per evaluation (capped by the eval split).
    pub samples: usize,
    /// Pre-trained extractor checkpoint; trained on the training split when
    /// absent and stored in the run directory.
    pub extractor: Option<PathBuf>,
    pub extractor_train: ExtractorConfig,
}

impl Default for FidConfig {
    fn default() -> Self {
        FidConfig { samples: 5000, extractor: None, extractor_train: ExtractorConfig::default() }
    }
}

/// Complete description of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsGANConfig {
    pub variant: Variant,
    pub seed: u64,
    pub weights: LossWeights,
    pub loss: LossFamily,
    pub regularizer: Regularizer,
    pub adam: AdamSettings,
    pub disc_iters: usize,
    pub batch_size: usize,
    pub total_steps: u64,
    /// Steps between FID evaluations; 0 disables evaluation.
    pub eval_interval: u64,
    pub checkpoint_interval: u64,
    /// Steps between sample grids; 0 disables them.
    pub sample_interval: u64,
    /// Steps between loss rows in the metrics log.
    pub log_interval: u64,
    /// Power iterations per discriminator update.
    pub sn_iterations: usize,
    pub arch: ArchConfig,
    pub dataset: DatasetSpec,
    pub fid: FidConfig,
}

impl Default for SsGANConfig {
    fn default() -> Self {
        SsGANConfig {
            variant: Variant::Ssgan,
            seed: 0,
            weights: LossWeights::default(),
            loss: LossFamily::default(),
            regularizer: Regularizer::SpectralNorm,
            adam: AdamSettings::default(),
            disc_iters: 1,
            batch_size: 64,
            total_steps: 20_000,
            eval_interval: 1000,
            checkpoint_interval: 1000,
            sample_interval: 1000,
            log_interval: 100,
            sn_iterations: 1,
            arch: ArchConfig::default(),
            dataset: DatasetSpec::default(),
            fid: FidConfig::default(),
        }
    }
}

impl SsGANConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.adam.to_config().validate()?;
        self.arch.validate()?;
        if self.disc_iters < 1 {
            return Err(Error::Config("disc_iters must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.variant.uses_rotation() && self.batch_size % 4 != 0 {
            return Err(Error::BatchSize(self.batch_size as i64));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("checkpoint_interval must be positive".into()));
        }
        if self.regularizer == Regularizer::GradientPenalty && self.weights.gp_lambda == 0.0 {
            return Err(Error::Config("regularizer = gradient_penalty needs weights.gp_lambda > 0".into()));
        }
        if self.regularizer != Regularizer::GradientPenalty && self.weights.gp_lambda != 0.0 {
            return Err(Error::Config(format!(
                "weights.gp_lambda = {} requires regularizer = gradient_penalty",
                self.weights.gp_lambda
            )));
        }
        if self.variant == Variant::RotationOnly && self.weights.beta == 0.0 {
            return Err(Error::Config("rotation_only needs weights.beta > 0".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SsGANConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))[..16].to_string()
    }

    /// Applies a `dotted.key=value` override. The value is parsed as a TOML
    /// value, falling back to a plain string.
    pub fn with_override(&self, assignment: &str) -> Result<Self> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut doc = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut slot = &mut doc;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = slot
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{key}: {} is not a table", parts[..i].join("."))))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            slot = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        }
        let cfg: SsGANConfig = doc.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = SsGANConfig::default();
        let back = SsGANConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.config_hash(), cfg.config_hash());
        assert_eq!(cfg.adam.lr, 2e-4);
        assert_eq!(cfg.batch_size, 64);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = SsGANConfig::from_toml_str("variant = \"ssgan\"\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"));
        assert!(SsGANConfig::from_toml_str("[weights]\ngamma = 1.0\n").is_err());
    }

    #[test]
    fn overrides_apply_and_change_hash() {
        let base = SsGANConfig::default();
        let cfg = base.with_override("weights.alpha=0.5").unwrap();
        assert_eq!(cfg.weights.alpha, 0.5);
        assert_ne!(cfg.config_hash(), base.config_hash());
        let cfg = cfg.with_override("variant=sn_gan").unwrap();
        assert_eq!(cfg.variant, Variant::SnGan);
        assert!(base.with_override("weights.alpha=-1").is_err());
        assert!(base.with_override("nope.x=1").is_err());
    }

    #[test]
    fn synthetic_spec_parses() {
        let cfg = SsGANConfig::from_toml_str(
            "[dataset]\nkind = \"synthetic\"\neval_n = 40\n[dataset.shapes]\nn = 80\nsize = 16\n[arch]\nimage_size = 16\n",
        )
        .unwrap();
        let eval = cfg.dataset.load_eval().unwrap();
        assert_eq!(eval.len(), 40);
        assert_eq!(eval.records, 80..120);
        assert_ne!(eval.version_hash(), cfg.dataset.load_train().unwrap().version_hash());
    }

    #[test]
    fn rotation_variants_need_batch_multiple_of_four() {
        let cfg = SsGANConfig { batch_size: 30, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::BatchSize(30))));
        assert!(SsGANConfig { variant: Variant::SnGan, ..cfg }.validate().is_ok());
    }
}
