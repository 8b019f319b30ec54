use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use super::config::SsGANConfig;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::losses::{
    discriminator_loss, discriminator_source_loss, generator_loss, generator_source_loss, gradient_penalty,
    interpolate_grad_norms, rotation_term, LossWeights, RotationLogits,
};
use crate::models::checkpoint::Archive;
use crate::models::{build_models, Discriminator, Generator, ModelSpec, Regularizer, Variant};
use crate::optim::{gradients, Adam};
use crate::rotation::{make_rotation_batch, Source};
use crate::util::{keyed_rng, scalar, uniform_tensor, RngState};

/// Everything that evolves during training.
#[derive(Debug)]
pub struct TrainState {
    /// Completed generator updates.
    pub t: u64,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    /// Source of latents, fake labels and interpolation weights.
    pub rng: ChaCha8Rng,
    /// Real batches drawn from the data stream so far.
    pub batches_consumed: u64,
    pub config: SsGANConfig,
    pub num_classes: Option<i64>,
}

/// Scalars recorded for one generator step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub t: u64,
    pub d_loss: f64,
    pub d_source: Option<f64>,
    pub d_rotation: Option<f64>,
    pub gp: Option<f64>,
    pub g_loss: Option<f64>,
    pub g_source: Option<f64>,
    pub g_rotation: Option<f64>,
    /// Rotation-head accuracy on the rotated real quarter batch of the last
    /// discriminator update.
    pub rot_acc_real: Option<f64>,
    pub d_updates: u64,
}

impl StepMetrics {
    /// `(name, value)` pairs for the metrics log.
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        let mut rows = vec![("d_loss", self.d_loss)];
        let opt = [
            ("d_source", self.d_source),
            ("d_rotation", self.d_rotation),
            ("gp", self.gp),
            ("g_loss", self.g_loss),
            ("g_source", self.g_source),
            ("g_rotation", self.g_rotation),
            ("rot_acc_real", self.rot_acc_real),
        ];
        rows.extend(opt.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))));
        rows
    }
}

/// Scalars from one discriminator update.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscUpdate {
    pub loss: f64,
    pub source: Option<f64>,
    pub rotation: Option<f64>,
    pub penalty: Option<f64>,
    pub rotation_accuracy: Option<f64>,
}

fn finite(t: &Tensor, what: &str, step: u64) -> Result<f64> {
    let v = scalar(t);
    if !v.is_finite() {
        return Err(Error::NonFinite { what: what.to_string(), step });
    }
    Ok(v)
}

fn rotation_accuracy(logits: &Tensor, labels: &Tensor) -> f64 {
    logits.argmax(1, false).eq_tensor(labels).to_kind(Kind::Double).mean(Kind::Double).double_value(&[])
}

impl TrainState {
    pub fn new(config: &SsGANConfig, num_classes: Option<i64>) -> Result<Self> {
        config.validate()?;
        let spec = ModelSpec {
            variant: config.variant,
            arch: config.arch.clone(),
            regularizer: config.regularizer,
            seed: config.seed,
            num_classes,
        };
        let (generator, discriminator) = build_models(&spec)?;
        let adam = config.adam.to_config();
        Ok(TrainState {
            t: 0,
            opt_g: Adam::new(adam, generator.store()),
            opt_d: Adam::new(adam, discriminator.store()),
            generator,
            discriminator,
            rng: keyed_rng(config.seed, "train"),
            batches_consumed: 0,
            config: config.clone(),
            num_classes,
        })
    }

    fn fake_labels(&mut self, n: i64) -> Option<Tensor> {
        let k = self.num_classes.filter(|_| self.config.variant.is_conditional())?;
        let v: Vec<i64> = (0..n).map(|_| self.rng.random_range(0..k)).collect();
        Some(Tensor::from_slice(&v))
    }

    fn latent(&mut self, n: i64) -> Tensor {
        self.generator.latent().sample(&mut self.rng, n, Kind::Float)
    }

    /// One discriminator update on `real`. Generator parameters are not
    /// touched.
    pub fn discriminator_update(&mut self, real: &Batch) -> Result<DiscUpdate> {
        let cfg = self.config.clone();
        let step = self.t;
        let n = real.len();
        if cfg.variant.is_conditional() && real.labels.is_none() {
            return Err(Error::Config("pcgan training needs labeled real batches".into()));
        }
        self.discriminator.refresh_spectral_norm(cfg.sn_iterations);
        let real_labels = real.labels.as_ref().filter(|_| cfg.variant.is_conditional());

        let rot = if cfg.variant.uses_rotation() && cfg.weights.beta > 0.0 {
            let rb = make_rotation_batch(&real.images, Source::Real)?;
            let logits = self.discriminator.rotation_logits(&self.discriminator.features(&rb.images)?)?;
            Some((logits, rb.labels))
        } else {
            None
        };
        let rot_acc = rot.as_ref().map(|(l, y)| tch::no_grad(|| rotation_accuracy(l, y)));
        let rot_term = rot.as_ref().map(|(l, y)| rotation_term(l, y)).transpose()?;

        let (loss, source, penalty) = if cfg.variant == Variant::RotationOnly {
            let term = rot_term.as_ref().expect("rotation_only has a rotation term");
            (-cfg.weights.beta * term, None, None)
        } else {
            let z = self.latent(n);
            let fake_labels = self.fake_labels(n);
            let fake = tch::no_grad(|| self.generator.forward(&z, fake_labels.as_ref()))?;
            let d = &self.discriminator;
            let real_src = d.source_logits(&d.features(&real.images)?, real_labels)?;
            let fake_src = d.source_logits(&d.features(&fake)?, fake_labels.as_ref())?;
            let rot_logits = rot.as_ref().map(|(l, y)| RotationLogits { logits: l, labels: y });
            let weights = if cfg.variant.uses_rotation() {
                cfg.weights
            } else {
                LossWeights { beta: 0.0, ..cfg.weights }
            };
            let loss = discriminator_loss(&real_src, &fake_src, rot_logits, &weights, cfg.loss)?;
            let source = discriminator_source_loss(&real_src, &fake_src, cfg.loss)?;
            let mut penalty = None;
            let loss = if cfg.regularizer == Regularizer::GradientPenalty && cfg.weights.gp_lambda > 0.0 {
                let eps = uniform_tensor(&mut self.rng, &[n], Kind::Float);
                let d = &self.discriminator;
                let norms = interpolate_grad_norms(&real.images, &fake, &eps, |x| {
                    d.source_logits(&d.features(x)?, real_labels)
                })?;
                let gp = gradient_penalty(&norms, cfg.weights.gp_lambda)?;
                penalty = Some(finite(&gp, "gradient penalty", step)?);
                loss + gp
            } else {
                loss
            };
            (loss, Some(finite(&source, "discriminator source loss", step)?), penalty)
        };
        let loss_v = finite(&loss, "discriminator loss", step)?;
        let grads = gradients(&loss, self.discriminator.store())?;
        self.opt_d.apply(self.discriminator.store(), &grads);
        Ok(DiscUpdate {
            loss: loss_v,
            source,
            rotation: rot_term.as_ref().map(scalar),
            penalty,
            rotation_accuracy: rot_acc,
        })
    }

    /// One generator update on `n` fresh latents; returns
    /// `(loss, source loss, rotation term)`. The discriminator is not touched.
    pub fn generator_update(&mut self, n: i64) -> Result<(f64, f64, Option<f64>)> {
        let cfg = self.config.clone();
        let z = self.latent(n);
        let labels = self.fake_labels(n);
        let fake = self.generator.forward(&z, labels.as_ref())?;
        let d = &self.discriminator;
        let src = d.source_logits(&d.features(&fake)?, labels.as_ref())?;
        let rot = if cfg.variant.uses_rotation() && cfg.weights.alpha > 0.0 {
            let rb = make_rotation_batch(&fake, Source::Fake)?;
            Some((d.rotation_logits(&d.features(&rb.images)?)?, rb.labels))
        } else {
            None
        };
        let rot_logits = rot.as_ref().map(|(l, y)| RotationLogits { logits: l, labels: y });
        let weights = if cfg.variant.uses_rotation() {
            cfg.weights
        } else {
            LossWeights { alpha: 0.0, ..cfg.weights }
        };
        let loss = generator_loss(&src, rot_logits, &weights, cfg.loss)?;
        let source = generator_source_loss(&src, cfg.loss)?;
        let loss_v = finite(&loss, "generator loss", self.t)?;
        let grads = gradients(&loss, self.generator.store())?;
        self.opt_g.apply(self.generator.store(), &grads);
        let rot_v = rot.as_ref().map(|(l, y)| rotation_term(l, y).map(|t| scalar(&t))).transpose()?;
        Ok((loss_v, scalar(&source), rot_v))
    }

    /// Writes parameters, optimizer moments and counters to one archive.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ar = Archive::new();
        ar.insert_store("generator", self.generator.store());
        ar.insert_store("discriminator", self.discriminator.store());
        self.opt_g.save_into(&mut ar, "opt_g");
        self.opt_d.save_into(&mut ar, "opt_d");
        ar.set("variant", self.config.variant);
        ar.set("step", self.t);
        ar.set("seed", self.config.seed);
        ar.set("config_hash", self.config.config_hash());
        ar.set("batches_consumed", self.batches_consumed);
        ar.set("rng", serde_json::to_string(&RngState::capture(&self.rng))?);
        ar.set("config", serde_json::to_string(&self.config)?);
        if let Some(k) = self.num_classes {
            ar.set("num_classes", k);
        }
        ar.save(path)
    }

    /// Restores a checkpoint using the config stored in its manifest.
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let ar = Archive::load(path)?;
        let config: SsGANConfig = serde_json::from_str(ar.get("config")?)?;
        let num_classes = match ar.get("num_classes") {
            Ok(k) => Some(k.parse().map_err(|e| Error::Checkpoint(format!("num_classes: {e}")))?),
            Err(_) => None,
        };
        Self::load(path, &config, num_classes)
    }

    /// Restores a state saved by [`TrainState::save`] under the same config.
    pub fn load(path: &Path, config: &SsGANConfig, num_classes: Option<i64>) -> Result<Self> {
        let ar = Archive::load(path)?;
        if ar.get("config_hash")? != config.config_hash() {
            return Err(Error::Checkpoint(format!(
                "{} was written by config {} but the run uses {}",
                path.display(),
                ar.get("config_hash")?,
                config.config_hash()
            )));
        }
        let mut state = TrainState::new(config, num_classes)?;
        ar.restore_store("generator", state.generator.store())?;
        ar.restore_store("discriminator", state.discriminator.store())?;
        state.opt_g.load_from(&ar, "opt_g")?;
        state.opt_d.load_from(&ar, "opt_d")?;
        let parse = |k: &str| -> Result<u64> {
            ar.get(k)?.parse().map_err(|e| Error::Checkpoint(format!("{k}: {e}")))
        };
        state.t = parse("step")?;
        state.batches_consumed = parse("batches_consumed")?;
        let rng: RngState = serde_json::from_str(ar.get("rng")?)?;
        state.rng = rng.restore();
        Ok(state)
    }
}

/// `disc_iters` discriminator updates, one per real batch, followed by one
/// generator update. The rotation-only ablation skips the generator.
pub fn train_step(state: &mut TrainState, real: &[Batch]) -> Result<StepMetrics> {
    let cfg = state.config.clone();
    if real.len() != cfg.disc_iters {
        return Err(Error::Config(format!("train_step needs {} real batches, got {}", cfg.disc_iters, real.len())));
    }
    let mut m = StepMetrics::default();
    for batch in real {
        if cfg.variant.uses_rotation() && batch.len() % 4 != 0 {
            return Err(Error::BatchSize(batch.len()));
        }
        let d = state.discriminator_update(batch)?;
        m.d_loss = d.loss;
        m.d_source = d.source;
        m.d_rotation = d.rotation;
        m.gp = d.penalty;
        m.rot_acc_real = d.rotation_accuracy;
    }
    if cfg.variant != Variant::RotationOnly {
        let (loss, source, rot) = state.generator_update(real[0].len())?;
        m.g_loss = Some(loss);
        m.g_source = Some(source);
        m.g_rotation = rot;
    }
    state.t += 1;
    m.t = state.t;
    m.d_updates = state.opt_d.step as u64;
    Ok(m)
}
