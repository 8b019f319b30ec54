//! Generator and discriminator architectures for the compared systems.
//!
//! | variant       | generator norm       | discriminator heads            |
//! |---------------|----------------------|--------------------------------|
//! | `sn_gan`      | plain BN             | source                         |
//! | `pcgan`       | label-conditional BN | source + label projection      |
//! | `ssgan`       | plain BN             | source + rotation              |
//! | `ssgan_sbn`   | self-modulated BN    | source + rotation              |
//! | `rotation_only` | (unused)           | rotation, trained without GAN loss |

pub mod checkpoint;
pub mod discriminator;
pub mod generator;
pub mod layers;
pub mod norm;
pub mod params;
pub mod spectral;

use serde::{Deserialize, Serialize};

pub use discriminator::{pcgan_logit, BlockMeta, DiscOutput, Discriminator};
pub use generator::Generator;
pub use norm::{self_modulated_bn, NormMode};
pub use params::ParamStore;
pub use spectral::{spectral_normalize, SpectralNormState};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SnGan,
    Pcgan,
    Ssgan,
    SsganSbn,
    RotationOnly,
}

impl Variant {
    pub fn uses_rotation(self) -> bool {
        matches!(self, Variant::Ssgan | Variant::SsganSbn | Variant::RotationOnly)
    }

    pub fn is_conditional(self) -> bool {
        self == Variant::Pcgan
    }

    pub fn norm_mode(self) -> NormMode {
        match self {
            Variant::Pcgan => NormMode::LabelConditionalBn,
            Variant::SsganSbn => NormMode::SelfModulatedBn,
            _ => NormMode::PlainBn,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::SnGan => "sn_gan",
            Variant::Pcgan => "pcgan",
            Variant::Ssgan => "ssgan",
            Variant::SsganSbn => "ssgan_sbn",
            Variant::RotationOnly => "rotation_only",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Variant::SnGan, Variant::Pcgan, Variant::Ssgan, Variant::SsganSbn, Variant::RotationOnly]
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    #[default]
    SpectralNorm,
    GradientPenalty,
    None,
}

/// Architecture sizes. The defaults are the desk-scale 32×32 setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub image_size: i64,
    pub channels: i64,
    pub latent_dim: i64,
    pub g_width: i64,
    pub d_width: i64,
    /// Hidden width of the self-modulation MLP.
    pub sbn_hidden: i64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig { image_size: 32, channels: 3, latent_dim: 128, g_width: 128, d_width: 128, sbn_hidden: 32 }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.image_size % 8 != 0 {
            return Err(Error::Config(format!("image_size must be a positive multiple of 8, got {}", self.image_size)));
        }
        for (name, v) in [
            ("channels", self.channels),
            ("latent_dim", self.latent_dim),
            ("g_width", self.g_width),
            ("d_width", self.d_width),
            ("sbn_hidden", self.sbn_hidden),
        ] {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Standard-normal latent of a fixed dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentSpec {
    pub dim: i64,
}

/// Everything needed to construct a model pair.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub variant: Variant,
    pub arch: ArchConfig,
    pub regularizer: Regularizer,
    pub seed: u64,
    /// Number of classes of the training data, if it is labeled.
    pub num_classes: Option<i64>,
}

/// Builds freshly initialised models; initial values depend only on
/// `(seed, parameter name)`.
pub fn build_models(spec: &ModelSpec) -> Result<(Generator, Discriminator)> {
    let classes = if spec.variant.is_conditional() {
        Some(spec.num_classes.ok_or_else(|| {
            Error::Config("pcgan needs a labeled dataset (num_classes is not declared)".into())
        })?)
    } else {
        None
    };
    let g = Generator::build(&spec.arch, spec.variant.norm_mode(), classes, spec.seed)?;
    let d = Discriminator::build(&spec.arch, spec.regularizer, spec.variant.uses_rotation(), classes, spec.seed)?;
    Ok((g, d))
}
