//! Scalar training objectives.
//!
//! Sign convention: the discriminator ascends the GAN value function (its
//! source loss is `-V`), and the generator descends the non-saturating
//! objective `-mean(log σ(D(G(z))))`. The rotation terms are batch means of
//! the log-probability assigned to the true rotation, so they are `<= 0` and
//! enter both losses with a negative weight.

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};
use crate::rotation::NUM_ROTATIONS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the rotation term in the generator loss.
    pub alpha: f64,
    /// Weight of the rotation term in the discriminator loss.
    pub beta: f64,
    /// Gradient-penalty strength; 0 disables the penalty.
    pub gp_lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.2, beta: 1.0, gp_lambda: 0.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gp_lambda", self.gp_lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a nonnegative real, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFamily {
    /// Cross-entropy form of the original value function.
    #[default]
    CrossEntropy,
    Hinge,
}

fn nonempty(t: &Tensor, what: &'static str) -> Result<Tensor> {
    if t.numel() == 0 {
        return Err(Error::Empty(what));
    }
    Ok(t.reshape([-1]))
}

/// Empirical `V(G, D) = E log σ(D(x)) + E log(1 − σ(D(G(z))))` from
/// pre-sigmoid source logits.
pub fn gan_value(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    let real = nonempty(real_logits, "real logits")?;
    let fake = nonempty(fake_logits, "fake logits")?;
    // log(1 - σ(x)) == log σ(-x)
    Ok(real.log_sigmoid().mean(None) + (-fake).log_sigmoid().mean(None))
}

/// Mean log-probability of the true rotation under `softmax(rot_logits)`.
pub fn rotation_term(rot_logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let size = rot_logits.size();
    if size.len() != 2 || size[1] != NUM_ROTATIONS {
        return Err(Error::Shape(format!("rotation logits must be [N, 4], got {size:?}")));
    }
    if size[0] == 0 {
        return Err(Error::Empty("rotation logits"));
    }
    let labels = labels.reshape([-1]).to_kind(Kind::Int64);
    if labels.size()[0] != size[0] {
        return Err(Error::Shape(format!(
            "{} rotation labels for {} logit rows",
            labels.size()[0],
            size[0]
        )));
    }
    let lo = labels.min().int64_value(&[]);
    let hi = labels.max().int64_value(&[]);
    for l in [lo, hi] {
        if !(0..NUM_ROTATIONS).contains(&l) {
            return Err(Error::LabelRange { label: l, bound: NUM_ROTATIONS });
        }
    }
    let logp = rot_logits.log_softmax(-1, None);
    Ok(logp.gather(1, &labels.unsqueeze(1), false).mean(None))
}

/// Discriminator real/fake loss without the rotation term.
pub fn discriminator_source_loss(
    real_logits: &Tensor,
    fake_logits: &Tensor,
    family: LossFamily,
) -> Result<Tensor> {
    match family {
        LossFamily::CrossEntropy => Ok(-gan_value(real_logits, fake_logits)?),
        LossFamily::Hinge => {
            let real = nonempty(real_logits, "real logits")?;
            let fake = nonempty(fake_logits, "fake logits")?;
            Ok((-real + 1.0).relu().mean(None) + (fake + 1.0).relu().mean(None))
        }
    }
}

/// Generator real/fake loss without the rotation term.
pub fn generator_source_loss(fake_logits: &Tensor, family: LossFamily) -> Result<Tensor> {
    let fake = nonempty(fake_logits, "fake logits")?;
    Ok(match family {
        LossFamily::CrossEntropy => -fake.log_sigmoid().mean(None),
        LossFamily::Hinge => -fake.mean(None),
    })
}

/// Rotation logits and labels for one rotated batch.
#[derive(Debug, Clone, Copy)]
pub struct RotationLogits<'a> {
    pub logits: &'a Tensor,
    pub labels: &'a Tensor,
}

/// `L_G = generator source loss − α · rotation_term(fake)`.
///
/// With `alpha == 0` the rotation logits are ignored and the result is the
/// plain generator loss, bit for bit.
pub fn generator_loss(
    fake_src_logits: &Tensor,
    fake_rot: Option<RotationLogits<'_>>,
    weights: &LossWeights,
    family: LossFamily,
) -> Result<Tensor> {
    weights.validate()?;
    let base = generator_source_loss(fake_src_logits, family)?;
    weighted_rotation(base, fake_rot, weights.alpha, "fake rotation logits")
}

/// `L_D = discriminator source loss − β · rotation_term(real)`.
///
/// Only rotated real images enter the rotation term.
pub fn discriminator_loss(
    real_src_logits: &Tensor,
    fake_src_logits: &Tensor,
    real_rot: Option<RotationLogits<'_>>,
    weights: &LossWeights,
    family: LossFamily,
) -> Result<Tensor> {
    weights.validate()?;
    let base = discriminator_source_loss(real_src_logits, fake_src_logits, family)?;
    weighted_rotation(base, real_rot, weights.beta, "real rotation logits")
}

fn weighted_rotation(
    base: Tensor,
    rot: Option<RotationLogits<'_>>,
    weight: f64,
    what: &'static str,
) -> Result<Tensor> {
    if weight == 0.0 {
        return Ok(base);
    }
    let rot = rot.ok_or(Error::Empty(what))?;
    Ok(base - weight * rotation_term(rot.logits, rot.labels)?)
}

/// `λ · mean((‖∇‖ − 1)²)` over per-sample gradient norms at interpolates.
pub fn gradient_penalty(interp_grad_norms: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("gradient penalty λ must be nonnegative, got {lambda}")));
    }
    let norms = nonempty(interp_grad_norms, "gradient norms")?;
    Ok(lambda * (norms - 1.0).square().mean(None))
}

/// Per-sample norms of `∂ sum(critic(x̂)) / ∂x̂` at `x̂ = ε·real + (1−ε)·fake`.
///
/// The returned norms keep the graph, so a penalty built from them can be
/// differentiated with respect to the critic's parameters.
pub fn interpolate_grad_norms(
    real: &Tensor,
    fake: &Tensor,
    eps: &Tensor,
    mut critic: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    if real.size() != fake.size() {
        return Err(Error::Shape(format!(
            "real {:?} and fake {:?} batches differ",
            real.size(),
            fake.size()
        )));
    }
    let n = real.size()[0];
    let eps = eps.reshape([n, 1, 1, 1]).to_kind(real.kind());
    let interp = (&eps * real.detach() + (eps.ones_like() - &eps) * fake.detach()).set_requires_grad(true);
    let out = critic(&interp)?;
    let grads = Tensor::f_run_backward(&[out.sum(None)], &[&interp], true, true)?;
    let g = grads.into_iter().next().expect("one input, one gradient");
    // Offset keeps the second derivative finite at a zero gradient.
    Ok((g.reshape([n, -1]).square().sum_dim_intlist(1, false, None) + 1e-12).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::scalar;
    use tch::Device;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_slice(v)
    }

    #[test]
    fn value_at_zero_logits() {
        let v = scalar(&gan_value(&t(&[0.0, 0.0]), &t(&[0.0])).unwrap());
        assert!((v - 2.0 * 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn value_supremum_limit() {
        let v = scalar(&gan_value(&t(&[200.0]), &t(&[-200.0])).unwrap());
        assert!(v.abs() < 1e-80);
    }

    #[test]
    fn value_single_pair() {
        let sig1 = 1.0 / (1.0 + (-1.0f64).exp());
        let expect = 2.0 * sig1.ln();
        let v = scalar(&gan_value(&t(&[1.0]), &t(&[-1.0])).unwrap());
        assert!((v - expect).abs() < 1e-12);
        assert!((v - -0.6265).abs() < 1e-4);
    }

    #[test]
    fn empty_batches_rejected() {
        let empty = Tensor::zeros([0], (Kind::Double, Device::Cpu));
        assert!(matches!(gan_value(&empty, &t(&[0.0])), Err(Error::Empty(_))));
        assert!(gradient_penalty(&empty, 1.0).is_err());
    }

    #[test]
    fn rotation_term_cases() {
        let zeros = Tensor::zeros([3, 4], (Kind::Double, Device::Cpu));
        let labels = Tensor::from_slice(&[0i64, 2, 3]);
        let v = scalar(&rotation_term(&zeros, &labels).unwrap());
        assert!((v - 0.25f64.ln()).abs() < 1e-12);

        let logits = t(&[1.0, 0.0, 0.0, 0.0]).reshape([1, 4]);
        let v = scalar(&rotation_term(&logits, &Tensor::from_slice(&[0i64])).unwrap());
        let expect = 1.0 - (1f64.exp() + 3.0).ln();
        assert!((v - expect).abs() < 1e-12);
        assert!((v - -0.7437).abs() < 1e-4);

        let sharp = Tensor::eye(4, (Kind::Double, Device::Cpu)) * 100.0;
        let v = scalar(&rotation_term(&sharp, &Tensor::from_slice(&[0i64, 1, 2, 3])).unwrap());
        assert!(v <= 0.0 && v > -1e-40);
    }

    #[test]
    fn rotation_label_out_of_range() {
        let zeros = Tensor::zeros([1, 4], (Kind::Double, Device::Cpu));
        let err = rotation_term(&zeros, &Tensor::from_slice(&[4i64])).unwrap_err();
        assert!(matches!(err, Error::LabelRange { label: 4, .. }));
        assert!(rotation_term(&zeros, &Tensor::from_slice(&[-1i64])).is_err());
    }

    #[test]
    fn generator_rotation_weighting() {
        let fake = t(&[0.3, -0.7]);
        let rot = Tensor::zeros([4, 4], (Kind::Double, Device::Cpu));
        let labels = Tensor::from_slice(&[0i64, 1, 2, 3]);
        let r = Some(RotationLogits { logits: &rot, labels: &labels });
        let plain = scalar(&generator_source_loss(&fake, LossFamily::CrossEntropy).unwrap());
        let w = LossWeights { alpha: 0.2, ..Default::default() };
        let l = scalar(&generator_loss(&fake, r, &w, LossFamily::CrossEntropy).unwrap());
        assert!((l - plain - 0.2 * 4f64.ln()).abs() < 1e-12);
        assert!((l - plain - 0.27726).abs() < 1e-5);

        let w0 = LossWeights { alpha: 0.0, ..Default::default() };
        let l0 = generator_loss(&fake, None, &w0, LossFamily::CrossEntropy).unwrap();
        assert_eq!(scalar(&l0).to_bits(), plain.to_bits());
    }

    #[test]
    fn discriminator_uniform_rotation_adds_ln4() {
        let real = t(&[0.5, 1.5]);
        let fake = t(&[-0.2, 0.1]);
        let rot = Tensor::zeros([4, 4], (Kind::Double, Device::Cpu));
        let labels = Tensor::from_slice(&[0i64, 1, 2, 3]);
        let r = Some(RotationLogits { logits: &rot, labels: &labels });
        let w = LossWeights::default();
        let base = scalar(&discriminator_source_loss(&real, &fake, LossFamily::CrossEntropy).unwrap());
        let l = scalar(&discriminator_loss(&real, &fake, r, &w, LossFamily::CrossEntropy).unwrap());
        assert!((l - base - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn negative_weights_rejected() {
        let x = t(&[0.0]);
        let w = LossWeights { alpha: -0.1, ..Default::default() };
        assert!(matches!(generator_loss(&x, None, &w, LossFamily::CrossEntropy), Err(Error::Config(_))));
        let w = LossWeights { beta: -1.0, ..Default::default() };
        assert!(matches!(
            discriminator_loss(&x, &x, None, &w, LossFamily::CrossEntropy),
            Err(Error::Config(_))
        ));
        assert!(matches!(gradient_penalty(&x, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn penalty_values() {
        assert_eq!(scalar(&gradient_penalty(&t(&[1.0, 1.0]), 10.0).unwrap()), 0.0);
        assert_eq!(scalar(&gradient_penalty(&t(&[2.0]), 10.0).unwrap()), 10.0);
        assert_eq!(scalar(&gradient_penalty(&t(&[0.0]), 1.0).unwrap()), 1.0);
    }

    #[test]
    fn hinge_family() {
        let real = t(&[2.0, 0.5]);
        let fake = t(&[-2.0, 0.0]);
        let d = scalar(&discriminator_source_loss(&real, &fake, LossFamily::Hinge).unwrap());
        assert!((d - (0.25 + 0.5)).abs() < 1e-12);
        let g = scalar(&generator_source_loss(&fake, LossFamily::Hinge).unwrap());
        assert!((g - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grad_norms_of_linear_critic() {
        // critic(x) = sum(w * x) per sample: gradient is w everywhere.
        let w = Tensor::from_slice(&[3.0f64, 4.0]).reshape([1, 1, 1, 2]);
        let real = Tensor::ones([2, 1, 1, 2], (Kind::Double, Device::Cpu));
        let fake = Tensor::zeros([2, 1, 1, 2], (Kind::Double, Device::Cpu));
        let eps = t(&[0.3, 0.9]);
        let norms = interpolate_grad_norms(&real, &fake, &eps, |x| {
            Ok((x * &w).sum_dim_intlist([1i64, 2, 3].as_slice(), false, None))
        })
        .unwrap();
        let v = crate::util::to_f64_vec(&norms);
        assert!(v.iter().all(|n| (n - 5.0).abs() < 1e-12));
    }
}
