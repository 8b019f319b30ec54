use ssgan::losses::{discriminator_loss, generator_loss, LossFamily, LossWeights, RotationLogits};
use ssgan::models::{build_models, ArchConfig, Discriminator, Generator, ModelSpec, ParamStore, Regularizer, Variant};
use ssgan::optim::gradients;
use ssgan::rotation::{make_rotation_batch, Source};
use ssgan::util::{keyed_rng, normal_tensor, uniform_tensor};
use tch::{Kind, Tensor};

const H: f64 = 1e-6;

pub fn tiny_models() -> (Generator, Discriminator) {
    let spec = ModelSpec {
        variant: Variant::Ssgan,
        arch: ArchConfig { image_size: 8, channels: 1, latent_dim: 2, g_width: 2, d_width: 2, sbn_hidden: 2 },
        regularizer: Regularizer::SpectralNorm,
        seed: 5,
        num_classes: None,
    };
    let (mut g, mut d) = build_models(&spec).unwrap();
    g.store_mut().set_kind(Kind::Double);
    d.store_mut().set_kind(Kind::Double);
    (g, d)
}

pub fn d_loss(d: &Discriminator, real: &Tensor, fake: &Tensor) -> Tensor {
    let rot = make_rotation_batch(real, Source::Real).unwrap();
    let rl = d.rotation_logits(&d.features(&rot.images).unwrap()).unwrap();
    let real_src = d.source_logits(&d.features(real).unwrap(), None).unwrap();
    let fake_src = d.source_logits(&d.features(fake).unwrap(), None).unwrap();
    let r = RotationLogits { logits: &rl, labels: &rot.labels };
    discriminator_loss(&real_src, &fake_src, Some(r), &LossWeights::default(), LossFamily::CrossEntropy).unwrap()
}

pub fn g_loss(g: &Generator, d: &Discriminator, z: &Tensor) -> Tensor {
    let fake = g.forward(z, None).unwrap();
    let rot = make_rotation_batch(&fake, Source::Fake).unwrap();
    let rl = d.rotation_logits(&d.features(&rot.images).unwrap()).unwrap();
    let src = d.source_logits(&d.features(&fake).unwrap(), None).unwrap();
    let r = RotationLogits { logits: &rl, labels: &rot.labels };
    generator_loss(&src, Some(r), &LossWeights::default(), LossFamily::CrossEntropy).unwrap()
}

/// Fraction of coordinates whose central difference agrees with the
/// analytic gradient to 1e-3 relative error.
pub fn agreement(store: &ParamStore, loss: impl Fn() -> Tensor) -> (f64, usize) {
    let analytic = gradients(&loss(), store).unwrap();
    let (mut ok, mut total) = (0, 0);
    for (name, p) in store.params() {
        let flat = p.view([-1]);
        let grad = analytic.get(name).map(|g| g.view([-1]));
        for i in 0..flat.size()[0] {
            let orig = flat.double_value(&[i]);
            let eval = |v: f64| {
                tch::no_grad(|| {
                    let _ = flat.get(i).fill_(v);
                    loss().double_value(&[])
                })
            };
            let numeric = (eval(orig + H) - eval(orig - H)) / (2.0 * H);
            tch::no_grad(|| {
                let _ = flat.get(i).fill_(orig);
            });
            let a = grad.as_ref().map_or(0.0, |g| g.double_value(&[i]));
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
            ok += (rel <= 1e-3) as usize;
            total += 1;
        }
    }
    (ok as f64 / total as f64, total)
}

pub struct GradCheck {
    pub generator_params: usize,
    pub discriminator_params: usize,
    pub generator_agreement: f64,
    pub discriminator_agreement: f64,
}

/// Central differences against autograd for both losses, in `f64`.
pub fn run() -> GradCheck {
    let (g, d) = tiny_models();
    let mut rng = keyed_rng(0, "gradcheck");
    let real = uniform_tensor(&mut rng, &[4, 1, 8, 8], Kind::Double) * 2.0 - 1.0;
    let z = normal_tensor(&mut rng, &[4, 2], Kind::Double);
    let fake = tch::no_grad(|| g.forward(&z, None).unwrap());
    let (discriminator_agreement, nd) = agreement(d.store(), || d_loss(&d, &real, &fake));
    let (generator_agreement, ng) = agreement(g.store(), || g_loss(&g, &d, &z));
    assert_eq!(nd as i64, d.store().num_parameters());
    assert_eq!(ng as i64, g.store().num_parameters());
    GradCheck { generator_params: ng, discriminator_params: nd, generator_agreement, discriminator_agreement }
}
