use std::path::Path;
use std::process::{Command, Output};

use ssgan::data::SyntheticShapes;
use ssgan::forgetting::{ForgettingConfig, TaskSchedule};
use ssgan::metrics::ExtractorConfig;
use ssgan::models::{ArchConfig, Variant};
use ssgan::trainer::{DatasetSpec, FidConfig, SsGANConfig};

fn ssgan(args: &[&str], root: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_ssgan"))
        .args(args)
        .env("SSGAN_RUN_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn ssgan");
    assert!(
        out.status.success(),
        "ssgan {args:?} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny() -> SsGANConfig {
    SsGANConfig {
        variant: Variant::Ssgan,
        seed: 1,
        batch_size: 8,
        total_steps: 4,
        eval_interval: 2,
        checkpoint_interval: 2,
        sample_interval: 0,
        log_interval: 1,
        arch: ArchConfig { image_size: 8, channels: 3, latent_dim: 8, g_width: 8, d_width: 8, sbn_hidden: 4 },
        dataset: DatasetSpec::Synthetic { shapes: SyntheticShapes { n: 64, size: 8, seed: 3, ..Default::default() }, eval_n: 40 },
        fid: FidConfig {
            samples: 16,
            extractor: None,
            extractor_train: ExtractorConfig { image_size: 8, widths: [4, 4, 4], steps: 3, batch_size: 16, ..Default::default() },
        },
        ..Default::default()
    }
}

fn write_config(dir: &Path, cfg: &SsGANConfig) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, cfg.to_toml()).unwrap();
    p.display().to_string()
}

#[test]
fn synth_writes_a_cached_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("glyphs.bin");
    let o = ssgan(&["synth", "--out", out.to_str().unwrap(), "--n", "20", "--size", "8"], dir.path());
    assert!(out.exists());
    assert!(stdout(&o).contains("20 images of 8×8"));
}

#[test]
fn train_then_fid_then_probe() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = write_config(root, &tiny());
    let o = ssgan(&["train", "--config", &cfg, "--seeds", "1,2", "--set", "variant=\"sn_gan\"", "--plot"], root);
    let text = stdout(&o);
    assert!(text.contains("best_final_fid="), "{text}");
    let table = std::fs::read_to_string(root.join("sn_gan-seeds.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().skip(1).all(|l| l.starts_with("sn_gan,")));

    let run_dirs: Vec<String> = table.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().to_string()).collect();
    let fid = stdout(&ssgan(&["fid", "--run-dir", &run_dirs[0], "--floor"], root));
    assert!(fid.contains("\"fid\"") && fid.contains("split_half_fid="), "{fid}");

    let out = root.join("probe.csv");
    let probe = ssgan(
        &[
            "probe",
            "--run-dirs",
            &run_dirs.join(","),
            "--step",
            "4",
            "--out",
            out.to_str().unwrap(),
            "--set",
            "epochs=3",
            "--set",
            "decay_every=2",
        ],
        root,
    );
    assert_eq!(stdout(&probe).lines().filter(|l| l.contains("top1=")).count(), 4);
    let rows = std::fs::read_to_string(&out).unwrap();
    assert!(rows.starts_with("block,variant,step,top1_mean,top1_std,seeds,config_hash"));
    assert_eq!(rows.lines().count(), 5);
    assert!(rows.contains("1;2"));
}

#[test]
fn rejects_bad_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ssgan"))
        .args(["train", "--set", "no_such_key=1", "--run-dir"])
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn forgetting_writes_trace_summary_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = ForgettingConfig {
        schedule: TaskSchedule { num_classes: 2, steps_per_task: 4, cycles: 1 },
        batch_size: 8,
        eval_interval: 2,
        eval_per_class: 4,
        post_switch_window: 2,
        arch: ArchConfig { image_size: 8, d_width: 8, ..ArchConfig::default() },
        dataset: DatasetSpec::Synthetic { shapes: SyntheticShapes { n: 80, size: 8, seed: 3, ..Default::default() }, eval_n: 40 },
        ..Default::default()
    };
    let p = root.join("forgetting.toml");
    std::fs::write(&p, toml::to_string(&cfg).unwrap()).unwrap();
    let o = ssgan(&["forgetting", "--config", p.to_str().unwrap(), "--seeds", "0", "--plot"], root);
    let text = stdout(&o);
    assert!(text.contains("final_task vanilla="), "{text}");
    let trace = std::fs::read_to_string(root.join("forgetting/trace.csv")).unwrap();
    assert!(trace.lines().any(|l| l.ends_with(",vanilla,0")));
    assert!(trace.lines().any(|l| l.ends_with(",with_selfsup,0")));
    assert!(root.join("forgetting/summary.json").exists());
    if Path::new("/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf").exists() {
        assert!(root.join("forgetting/forgetting.png").exists());
    }
}

#[test]
fn sweep_runs_cells_in_worker_processes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = write_config(root, &SsGANConfig { total_steps: 2, checkpoint_interval: 2, ..tiny() });
    let o = ssgan(&["sweep", "--config", &cfg, "--grid", "sn", "--jobs", "2"], root);
    let text = stdout(&o);
    assert!(text.contains("worst_fid[sn_gan]=") && text.contains("worst_fid[ssgan]="), "{text}");
    let table = std::fs::read_to_string(root.join("sweep-sn-s1/sweep.csv")).unwrap();
    assert!(table.lines().count() > 2);
    assert!(!table.contains("failed"), "{table}");
}
