mod common;

use common::tiny_config;
use ssgan::data::batch_stream;
use ssgan::models::{Regularizer, Variant};
use ssgan::trainer::{
    list_checkpoints, read_metrics, train, train_step, AdamSettings, RunOptions, RunStatus, SsGANConfig, TrainState,
};

fn batches(cfg: &SsGANConfig, n: usize) -> Vec<ssgan::data::Batch> {
    let data = cfg.dataset.load_train().unwrap();
    batch_stream(&data, cfg.batch_size, cfg.seed).unwrap().take(n).collect()
}

fn state(cfg: &SsGANConfig) -> TrainState {
    TrainState::new(cfg, Some(10)).unwrap()
}

#[test]
fn two_discriminator_updates_per_step() {
    let cfg = SsGANConfig { disc_iters: 2, ..tiny_config(Variant::Ssgan) };
    let mut s = state(&cfg);
    let m = train_step(&mut s, &batches(&cfg, 2)).unwrap();
    assert_eq!(m.d_updates, 2);
    assert_eq!(s.opt_g.step, 1);
    assert_eq!(s.t, 1);
    assert!(train_step(&mut s, &batches(&cfg, 1)).is_err());
}

#[test]
fn updates_touch_only_their_own_player() {
    let cfg = tiny_config(Variant::Ssgan);
    let mut s = state(&cfg);
    let b = batches(&cfg, 1);
    let (g0, d0) = (s.generator.store().digest(), s.discriminator.store().digest());
    s.discriminator_update(&b[0]).unwrap();
    assert_eq!(s.generator.store().digest(), g0);
    let d1 = s.discriminator.store().digest();
    assert_ne!(d1, d0);
    s.generator_update(8).unwrap();
    assert_eq!(s.discriminator.store().digest(), d1);
    assert_ne!(s.generator.store().digest(), g0);
}

#[test]
fn zero_weights_reproduce_baseline_trajectory() {
    let mut ss = tiny_config(Variant::Ssgan);
    ss.weights.alpha = 0.0;
    ss.weights.beta = 0.0;
    let sn = SsGANConfig { variant: Variant::SnGan, ..ss.clone() };
    let (mut a, mut b) = (state(&ss), state(&sn));
    for chunk in batches(&ss, 3).chunks(1) {
        let ma = train_step(&mut a, chunk).unwrap();
        let mb = train_step(&mut b, chunk).unwrap();
        assert_eq!(ma.d_loss, mb.d_loss);
        assert_eq!(ma.g_loss, mb.g_loss);
    }
    assert_eq!(a.generator.store().digest(), b.generator.store().digest());
    for (name, t) in b.discriminator.store().params() {
        assert!(t.equal(a.discriminator.store().param(name)), "{name} diverged");
    }
}

#[test]
fn rotation_accuracy_logged_for_self_supervised_runs() {
    let cfg = tiny_config(Variant::Ssgan);
    let mut s = state(&cfg);
    let m = train_step(&mut s, &batches(&cfg, 1)).unwrap();
    let acc = m.rot_acc_real.unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(m.g_rotation.is_some());
    let mut base = state(&tiny_config(Variant::SnGan));
    assert!(train_step(&mut base, &batches(&cfg, 1)).unwrap().rot_acc_real.is_none());
}

#[test]
fn rotation_only_leaves_generator_alone() {
    let cfg = tiny_config(Variant::RotationOnly);
    let mut s = state(&cfg);
    let g0 = s.generator.store().digest();
    let m = train_step(&mut s, &batches(&cfg, 1)).unwrap();
    assert!(m.g_loss.is_none() && m.d_source.is_none());
    assert_eq!(s.generator.store().digest(), g0);
}

#[test]
fn gradient_penalty_and_conditional_variants_step() {
    let mut gp = tiny_config(Variant::Ssgan);
    gp.regularizer = Regularizer::GradientPenalty;
    gp.weights.gp_lambda = 10.0;
    let mut s = state(&gp);
    assert!(train_step(&mut s, &batches(&gp, 1)).unwrap().gp.unwrap() >= 0.0);

    let pc = tiny_config(Variant::Pcgan);
    let mut s = state(&pc);
    train_step(&mut s, &batches(&pc, 1)).unwrap();
    let mut unlabeled = batches(&pc, 1);
    unlabeled[0].labels = None;
    assert!(train_step(&mut s, &unlabeled).is_err());

    let sbn = tiny_config(Variant::SsganSbn);
    let mut s = state(&sbn);
    train_step(&mut s, &batches(&sbn, 1)).unwrap();
}

#[test]
fn empty_run_writes_initial_checkpoint_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SsGANConfig { total_steps: 0, ..tiny_config(Variant::Ssgan) };
    let rec = train(&cfg, dir.path(), &RunOptions::default()).unwrap();
    assert_eq!(rec.final_step, 0);
    assert_eq!(rec.checkpoints.len(), 1);
    assert_eq!(list_checkpoints(dir.path()).unwrap()[0].0, 0);
    assert!(dir.path().join("config.toml").exists());
    assert_eq!(rec.fid.len(), 1);
}

#[test]
fn run_directory_layout_and_sample_grids() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SsGANConfig { sample_interval: 2, ..tiny_config(Variant::Ssgan) };
    let rec = train(&cfg, dir.path(), &RunOptions::default()).unwrap();
    assert_eq!(rec.status, RunStatus::Completed);
    assert_eq!(rec.final_step, 4);
    assert!(dir.path().join("samples/step_000002.png").exists());
    assert!(dir.path().join("record.json").exists());
    let steps: Vec<u64> = rec.fid.iter().map(|f| f.step as u64).collect();
    assert_eq!(steps, vec![0, 2, 4]);
    assert!(rec.fid.iter().all(|f| f.n_fake == 16 && f.n_real == 16));
    let rows = read_metrics(&dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(rows, rec.metrics);
    assert!(rows.windows(2).all(|w| w[0].step <= w[1].step));
}

#[test]
fn unwritable_run_directory_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let err = train(&tiny_config(Variant::Ssgan), &blocker.join("run"), &RunOptions::default());
    assert!(err.is_err());
}

fn held_out_rotation_accuracy(s: &TrainState, images: &tch::Tensor) -> f64 {
    let rot = ssgan::rotation::make_rotation_batch(images, ssgan::rotation::Source::Real).unwrap();
    tch::no_grad(|| {
        let d = &s.discriminator;
        let logits = d.rotation_logits(&d.features(&rot.images).unwrap()).unwrap();
        let hits = logits.argmax(1, false).eq_tensor(&rot.labels).to_kind(tch::Kind::Double);
        hits.mean(tch::Kind::Double).double_value(&[])
    })
}

#[test]
fn rotation_pretext_is_learnable_on_synthetic_glyphs() {
    let mut cfg = SsGANConfig { batch_size: 128, regularizer: Regularizer::None, ..tiny_config(Variant::RotationOnly) };
    cfg.adam = AdamSettings { lr: 1e-3, beta1: 0.9, beta2: 0.999 };
    cfg.arch.image_size = 16;
    cfg.arch.d_width = 16;
    cfg.dataset = ssgan::trainer::DatasetSpec::Synthetic {
        shapes: ssgan::data::SyntheticShapes { n: 10_000, size: 16, seed: 9, ..Default::default() },
        eval_n: 200,
    };
    let data = cfg.dataset.load_train().unwrap();
    let held = cfg.dataset.load_eval().unwrap().images;
    let mut s = state(&cfg);
    let mut acc = 0.0;
    for (i, b) in batch_stream(&data, cfg.batch_size, cfg.seed).unwrap().take(2000).enumerate() {
        train_step(&mut s, &[b]).unwrap();
        if (i + 1) % 100 == 0 {
            acc = held_out_rotation_accuracy(&s, &held);
            if acc > 0.9 {
                break;
            }
        }
    }
    assert!(acc > 0.9, "held-out rotation accuracy {acc} after 2000 steps");
}

#[test]
fn rotation_head_beats_chance_after_warm_up() {
    let mut cfg = SsGANConfig { batch_size: 64, ..tiny_config(Variant::Ssgan) };
    cfg.adam.lr = 1e-3;
    cfg.arch.d_width = 16;
    cfg.dataset = ssgan::trainer::DatasetSpec::Synthetic {
        shapes: ssgan::data::SyntheticShapes { n: 4000, size: 8, seed: 3, ..Default::default() },
        eval_n: 32,
    };
    let mut s = state(&cfg);
    let accs: Vec<f64> = batches(&cfg, 400)
        .chunks(1)
        .map(|b| train_step(&mut s, b).unwrap().rot_acc_real.unwrap())
        .collect();
    let late = accs[350..].iter().sum::<f64>() / 50.0;
    eprintln!("late rotation accuracy {late}");
    assert!(late > 0.25, "rotation accuracy {late} after warm-up");
}
