mod common;

use common::tiny_config;
use ssgan::models::Variant;
use ssgan::trainer::{train, RunOptions, SsGANConfig, TrainState};

fn metrics_bytes(dir: &std::path::Path) -> Vec<u8> {
    std::fs::read(dir.join("metrics.jsonl")).unwrap()
}

#[test]
fn same_config_same_metric_log() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny_config(Variant::SsganSbn);
    train(&cfg, a.path(), &RunOptions::default()).unwrap();
    train(&cfg, b.path(), &RunOptions::default()).unwrap();
    assert_eq!(metrics_bytes(a.path()), metrics_bytes(b.path()));
    let c = tempfile::tempdir().unwrap();
    train(&SsGANConfig { seed: 8, ..cfg }, c.path(), &RunOptions::default()).unwrap();
    assert_ne!(metrics_bytes(a.path()), metrics_bytes(c.path()));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let cfg = SsGANConfig { total_steps: 6, disc_iters: 2, ..tiny_config(Variant::Ssgan) };
    let full = tempfile::tempdir().unwrap();
    let whole = train(&cfg, full.path(), &RunOptions::default()).unwrap();

    let split = tempfile::tempdir().unwrap();
    let first = train(&cfg, split.path(), &RunOptions { resume: false, stop_after: Some(2) }).unwrap();
    assert_eq!(first.final_step, 2);
    // Simulate a crash that left rows past the checkpoint behind.
    let mut log = std::fs::read_to_string(split.path().join("metrics.jsonl")).unwrap();
    log.push_str("{\"step\":3,\"name\":\"d_loss\",\"value\":1.0}\n");
    std::fs::write(split.path().join("metrics.jsonl"), log).unwrap();

    let rest = train(&cfg, split.path(), &RunOptions { resume: true, stop_after: None }).unwrap();
    assert_eq!(rest.final_step, 6);
    assert_eq!(metrics_bytes(full.path()), metrics_bytes(split.path()));
    assert_eq!(whole.metrics, rest.metrics);
}

#[test]
fn resume_with_a_different_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(Variant::Ssgan);
    train(&cfg, dir.path(), &RunOptions { resume: false, stop_after: Some(2) }).unwrap();
    let other = cfg.with_override("weights.alpha=0.5").unwrap();
    assert!(train(&other, dir.path(), &RunOptions { resume: true, stop_after: None }).is_err());
}

#[test]
fn checkpoint_restores_state_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(Variant::Pcgan);
    let data = cfg.dataset.load_train().unwrap();
    let mut s = TrainState::new(&cfg, Some(10)).unwrap();
    let mut stream = ssgan::data::batch_stream(&data, cfg.batch_size, cfg.seed).unwrap();
    for _ in 0..2 {
        let b = vec![stream.next().unwrap()];
        ssgan::trainer::train_step(&mut s, &b).unwrap();
    }
    s.batches_consumed = stream.consumed();
    let path = dir.path().join("ck.safetensors");
    s.save(&path).unwrap();
    let mut r = TrainState::load(&path, &cfg, Some(10)).unwrap();
    assert_eq!(r.t, 2);
    assert_eq!(r.generator.store().digest(), s.generator.store().digest());
    assert_eq!(r.discriminator.store().digest(), s.discriminator.store().digest());
    let b = vec![stream.next().unwrap()];
    let ma = ssgan::trainer::train_step(&mut s, &b).unwrap();
    let mb = ssgan::trainer::train_step(&mut r, &b).unwrap();
    assert_eq!(ma, mb);
}
