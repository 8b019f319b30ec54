//! Self-supervised GAN training and evaluation at desk scale.
//!
//! The discriminator carries two heads over a shared trunk: the usual
//! real/fake source head and a four-way rotation classifier trained on
//! rotated real images. The generator is additionally rewarded for producing
//! images whose rotation the discriminator can recognise.
//!
//! Besides the models and losses the crate contains everything needed to
//! evaluate them: a Fréchet distance over the embedding of an in-repo
//! feature extractor, linear probes on discriminator blocks, and the
//! task-switching classifier experiment that motivates the auxiliary loss.
//!
//! Images are `f32` tensors in NCHW layout with pixels in `[-1, 1]`.

pub mod data;
pub mod error;
pub mod forgetting;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod probes;
pub mod rotation;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
