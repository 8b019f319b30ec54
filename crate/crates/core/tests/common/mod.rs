#![allow(dead_code)]

pub mod gradcheck;

use ssgan::data::SyntheticShapes;
use ssgan::metrics::ExtractorConfig;
use ssgan::models::{ArchConfig, Variant};
use ssgan::trainer::{DatasetSpec, FidConfig, SsGANConfig};

/// A configuration small enough to train for a few steps in well under a
/// second: 8×8 synthetic glyphs and 8-channel networks.
pub fn tiny_config(variant: Variant) -> SsGANConfig {
    SsGANConfig {
        variant,
        seed: 7,
        batch_size: 8,
        total_steps: 4,
        eval_interval: 2,
        checkpoint_interval: 2,
        sample_interval: 0,
        log_interval: 1,
        arch: ArchConfig { image_size: 8, channels: 3, latent_dim: 8, g_width: 8, d_width: 8, sbn_hidden: 4 },
        dataset: DatasetSpec::Synthetic {
            shapes: SyntheticShapes { n: 64, size: 8, seed: 3, ..Default::default() },
            eval_n: 32,
        },
        fid: FidConfig {
            samples: 16,
            extractor: None,
            extractor_train: ExtractorConfig {
                image_size: 8,
                widths: [4, 4, 4],
                steps: 3,
                batch_size: 16,
                ..Default::default()
            },
        },
        ..Default::default()
    }
}
