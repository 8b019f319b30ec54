mod plot;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use ssgan::data::{save_cached, SyntheticShapes};
use ssgan::forgetting::{run_forgetting_experiment, summarize_forgetting, AccuracyTrace, ForgettingConfig, ForgettingVariant};
use ssgan::metrics::{split_half_fid, FeatureExtractor};
use ssgan::models::Variant;
use ssgan::probes::{probe_all_blocks, ProbeConfig};
use ssgan::trainer::{
    grid_cells, list_checkpoints, prepare_extractor, summarize_seeds, train, worst_fid, Evaluator, RunOptions,
    RunRecord, SsGANConfig, SweepCell, SweepGrid, SweepRow, TrainState,
};

const RUN_ROOT_ENV: &str = "SSGAN_RUN_ROOT";

#[derive(Parser)]
#[command(name = "ssgan", version, about = "Self-supervised GAN experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run per seed.
    Train(TrainArgs),
    /// Run a hyperparameter grid.
    Sweep(SweepArgs),
    /// Score a checkpoint.
    Fid(FidArgs),
    /// Linear probes on discriminator blocks.
    Probe(ProbeArgs),
    /// The 1-vs-all forgetting experiment.
    Forgetting(ForgettingArgs),
    /// Train and save the FID feature extractor.
    Extractor(ExtractorArgs),
    /// Render a synthetic dataset to a cache directory.
    Synth(SynthArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set weights.alpha=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seeds; one run each.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    resume: bool,
    /// Explicit run directory (single seed only).
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long, env = RUN_ROOT_ENV, default_value = "runs")]
    root: PathBuf,
    #[arg(long)]
    plot: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value = "sn")]
    grid: SweepGrid,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    resume: bool,
    /// Parallel worker processes.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, env = RUN_ROOT_ENV, default_value = "runs")]
    root: PathBuf,
    #[arg(long)]
    plot: bool,
}

#[derive(Args)]
struct FidArgs {
    #[arg(long)]
    run_dir: PathBuf,
    /// Checkpoint step; the latest when omitted.
    #[arg(long)]
    step: Option<u64>,
    /// Also report the split-half FID of the evaluation set.
    #[arg(long)]
    floor: bool,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// One run directory per seed, all of the same variant.
    #[arg(long, value_delimiter = ',', required = true)]
    run_dirs: Vec<PathBuf>,
    /// Checkpoint step; every step shared by all runs when omitted.
    #[arg(long)]
    step: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    plot: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ForgettingChoice {
    Vanilla,
    WithSelfsup,
    Both,
}

#[derive(Args)]
struct ForgettingArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_enum, default_value = "both")]
    variant: ForgettingChoice,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, env = RUN_ROOT_ENV, default_value = "runs")]
    root: PathBuf,
    #[arg(long)]
    plot: bool,
}

#[derive(Args)]
struct ExtractorArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    clutter: usize,
}

/// Loads `T` from an optional TOML file and applies dotted overrides.
fn load_with_overrides<T: DeserializeOwned + Serialize + Default>(args: &ConfigArgs) -> Result<T> {
    let base: T = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => T::default(),
    };
    if args.set.is_empty() {
        return Ok(base);
    }
    let mut value = toml::Value::try_from(&base)?;
    for a in &args.set {
        let (key, raw) = a.split_once('=').with_context(|| format!("override {a:?} is not KEY=VALUE"))?;
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .map(|mut t| t.remove("v").unwrap())
            .unwrap_or_else(|_| toml::Value::String(raw.to_string()));
        let mut slot = &mut value;
        for part in key.split('.') {
            let table = slot.as_table_mut().with_context(|| format!("{key}: {part} is not inside a table"))?;
            slot = table.entry(part).or_insert_with(|| toml::Value::Table(Default::default()));
        }
        *slot = parsed;
    }
    Ok(value.try_into()?)
}

fn load_gan_config(args: &ConfigArgs) -> Result<SsGANConfig> {
    let mut cfg = match &args.config {
        Some(p) => SsGANConfig::load(p)?,
        None => SsGANConfig::default(),
    };
    for a in &args.set {
        cfg = cfg.with_override(a)?;
    }
    Ok(cfg)
}

fn run_dir_name(cfg: &SsGANConfig) -> String {
    format!("{}-s{}-{}", cfg.variant, cfg.seed, &cfg.config_hash()[..8])
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?)
}

fn fid_curves(records: &[RunRecord]) -> Vec<plot::Series> {
    records
        .iter()
        .map(|r| plot::Series {
            label: format!("{} seed {}", r.config.variant, r.config.seed),
            points: r.fid.iter().map(|f| (f.step as f64, f.fid)).collect(),
        })
        .collect()
}

fn maybe_plot(enabled: bool, path: &Path, panels: &[plot::Panel]) {
    if !enabled {
        return;
    }
    match plot::render(path, panels) {
        Ok(()) => println!("plot: {}", path.display()),
        Err(e) => log::warn!("plot skipped: {e:#}"),
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut base = load_gan_config(&a.cfg)?;
    if let Some(v) = a.variant {
        base.variant = v;
    }
    if let Some(s) = a.seed {
        base.seed = s;
    }
    let seeds = if a.seeds.is_empty() { vec![base.seed] } else { a.seeds.clone() };
    if a.run_dir.is_some() && seeds.len() > 1 {
        bail!("--run-dir needs a single seed");
    }
    let mut records = Vec::new();
    for seed in seeds {
        let cfg = SsGANConfig { seed, ..base.clone() };
        cfg.validate()?;
        let dir = a.run_dir.clone().unwrap_or_else(|| a.root.join(run_dir_name(&cfg)));
        log::info!("training {} seed {seed} in {}", cfg.variant, dir.display());
        let rec = train(&cfg, &dir, &RunOptions { resume: a.resume, stop_after: None })?;
        println!(
            "{}\tseed={}\tconfig_hash={}\tfinal_fid={}\tstatus={:?}",
            rec.config.variant,
            seed,
            rec.config_hash,
            rec.final_fid().map_or("nan".into(), |f| format!("{f:.4}")),
            rec.status
        );
        records.push(rec);
    }
    let table = a.root.join(format!("{}-seeds.csv", base.variant));
    let mut w = csv_writer(&table)?;
    w.write_record(["variant", "seed", "config_hash", "final_fid", "status", "run_dir"])?;
    for r in &records {
        w.write_record([
            r.config.variant.to_string(),
            r.config.seed.to_string(),
            r.config_hash.clone(),
            r.final_fid().map_or(String::new(), |f| f.to_string()),
            format!("{:?}", r.status),
            r.run_dir.display().to_string(),
        ])?;
    }
    w.flush()?;
    let summary = summarize_seeds(&records);
    println!(
        "best_final_fid={} best_seed={:?} diverged={}",
        summary.best_final_fid.map_or("nan".into(), |f| format!("{f:.4}")),
        summary.best_seed,
        summary.diverged
    );
    let mut series = fid_curves(&records);
    if records.len() > 1 {
        series.push(plot::Series {
            label: "mean".into(),
            points: summary.mean_curve.iter().map(|&(s, f, _)| (s as f64, f)).collect(),
        });
    }
    let panel = plot::Panel {
        title: format!("{} FID", base.variant),
        x_label: "step",
        y_label: "FID",
        series,
        markers: vec![],
        y_range: None,
    };
    maybe_plot(a.plot, &a.root.join(format!("{}-fid.png", base.variant)), &[panel]);
    Ok(())
}

/// Runs cells as `ssgan train` subprocesses, `jobs` at a time.
fn run_cells_parallel(cells: &[SweepCell], root: &Path, resume: bool, jobs: usize) -> Result<Vec<SweepRow>> {
    let exe = std::env::current_exe()?;
    let cfg_dir = root.join("cells");
    std::fs::create_dir_all(&cfg_dir)?;
    for c in cells {
        std::fs::write(cfg_dir.join(format!("{}.toml", c.id)), c.config.to_toml())?;
    }
    let next = AtomicUsize::new(0);
    let rows: Mutex<Vec<Option<SweepRow>>> = Mutex::new(vec![None; cells.len()]);
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                let dir = root.join(&cell.id);
                let mut cmd = Command::new(&exe);
                cmd.arg("train")
                    .arg("--config")
                    .arg(cfg_dir.join(format!("{}.toml", cell.id)))
                    .arg("--run-dir")
                    .arg(&dir)
                    .arg("--root")
                    .arg(root.join("cells"));
                if resume {
                    cmd.arg("--resume");
                }
                let row = match cmd.output() {
                    Ok(out) if out.status.success() => match RunRecord::load(&dir) {
                        Ok(rec) => SweepRow::from_record(cell, &rec),
                        Err(e) => SweepRow::failed(cell, &e),
                    },
                    Ok(out) => {
                        let msg = String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or("").to_string();
                        SweepRow::failed(cell, &ssgan::Error::Config(format!("worker exited with {}: {msg}", out.status)))
                    }
                    Err(e) => SweepRow::failed(cell, &ssgan::Error::Config(format!("spawning worker: {e}"))),
                };
                rows.lock().unwrap()[i] = Some(row);
            });
        }
    });
    Ok(rows.into_inner().unwrap().into_iter().map(Option::unwrap).collect())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let mut base = load_gan_config(&a.cfg)?;
    if let Some(s) = a.seed {
        base.seed = s;
    }
    let cells = grid_cells(a.grid, &base);
    let root = a.root.join(format!("sweep-{:?}-s{}", a.grid, base.seed).to_lowercase());
    std::fs::create_dir_all(&root)?;
    let rows = if a.jobs > 1 {
        run_cells_parallel(&cells, &root, a.resume, a.jobs)?
    } else {
        ssgan::trainer::run_sweep(&cells, &root, a.resume)
    };
    let table = root.join("sweep.csv");
    let mut w = csv_writer(&table)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    println!("table: {}", table.display());
    for v in [Variant::SnGan, Variant::Ssgan] {
        if let Some(f) = worst_fid(&rows, v) {
            println!("worst_fid[{v}]={f:.4}");
        }
    }
    let records: Vec<RunRecord> = cells.iter().filter_map(|c| RunRecord::load(&root.join(&c.id)).ok()).collect();
    let mut series = fid_curves(&records);
    for (s, c) in series.iter_mut().zip(cells.iter().filter(|c| root.join(&c.id).join("record.json").exists())) {
        s.label = c.id.clone();
    }
    let panel = plot::Panel {
        title: format!("{:?} sweep", a.grid),
        x_label: "step",
        y_label: "FID",
        series,
        markers: vec![],
        y_range: None,
    };
    maybe_plot(a.plot, &root.join("sweep-fid.png"), &[panel]);
    Ok(())
}

fn cmd_fid(a: FidArgs) -> Result<()> {
    let ckpts = list_checkpoints(&a.run_dir)?;
    let path = match a.step {
        Some(s) => ckpts.iter().find(|c| c.0 == s).map(|c| c.1.clone()),
        None => ckpts.last().map(|c| c.1.clone()),
    }
    .with_context(|| format!("no matching checkpoint in {}", a.run_dir.display()))?;
    let state = TrainState::load_checkpoint(&path)?;
    let train_data = state.config.dataset.load_train()?;
    let eval = state.config.dataset.load_eval()?;
    let evaluator = Evaluator::new(&state.config, &train_data, &eval, &a.run_dir)?;
    let report = evaluator.fid(&state)?;
    println!("{}", serde_json::to_string(&report)?);
    if a.floor {
        let n = (2 * evaluator.n_real).min(eval.len()) as i64;
        let floor = split_half_fid(&eval.images.narrow(0, 0, n), &evaluator.extractor)?;
        println!("split_half_fid={floor:.4} (n={})", n / 2);
    }
    Ok(())
}

fn cmd_probe(a: ProbeArgs) -> Result<()> {
    let cfg: ProbeConfig = load_with_overrides(&a.cfg)?;
    let mut per_run = Vec::new();
    for d in &a.run_dirs {
        per_run.push(list_checkpoints(d)?);
    }
    let steps: Vec<u64> = match a.step {
        Some(s) => vec![s],
        None => per_run[0].iter().map(|c| c.0).filter(|s| per_run.iter().all(|r| r.iter().any(|c| c.0 == *s))).collect(),
    };
    if steps.is_empty() {
        bail!("no checkpoint step shared by all runs");
    }
    let first = TrainState::load_checkpoint(&per_run[0][0].1)?;
    let train_data = first.config.dataset.load_train()?;
    let test = first.config.dataset.load_eval()?;
    let config_hash = first.config.config_hash();
    let out = a.out.clone().unwrap_or_else(|| a.run_dirs[0].join("probe.csv"));
    let mut w = csv_writer(&out)?;
    w.write_record(["block", "variant", "step", "top1_mean", "top1_std", "seeds", "config_hash"])?;
    let mut results = Vec::new();
    for step in steps {
        let paths: Vec<PathBuf> = per_run
            .iter()
            .map(|r| r.iter().find(|c| c.0 == step).map(|c| c.1.clone()).unwrap())
            .collect();
        let refs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
        for r in probe_all_blocks(&refs, &train_data, &test, &cfg)? {
            let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
            w.write_record([
                r.block.clone(),
                r.variant.clone(),
                r.step.to_string(),
                r.top1_mean.to_string(),
                r.top1_std.to_string(),
                seeds.join(";"),
                config_hash.clone(),
            ])?;
            println!("{}\t{}\tstep={}\ttop1={:.4}±{:.4}", r.variant, r.block, r.step, r.top1_mean, r.top1_std);
            results.push(r);
        }
        w.flush()?;
    }
    let mut blocks: Vec<String> = results.iter().map(|r| r.block.clone()).collect();
    blocks.dedup();
    blocks.sort();
    blocks.dedup();
    let series = blocks
        .iter()
        .map(|b| plot::Series {
            label: b.clone(),
            points: results.iter().filter(|r| &r.block == b).map(|r| (r.step as f64, r.top1_mean)).collect(),
        })
        .collect();
    let panel = plot::Panel {
        title: format!("{} probe accuracy", first.config.variant),
        x_label: "step",
        y_label: "top-1",
        series,
        markers: vec![],
        y_range: Some((0.0, 1.0)),
    };
    maybe_plot(a.plot, &out.with_extension("png"), &[panel]);
    println!("table: {}", out.display());
    Ok(())
}

fn forgetting_panel(traces: &[AccuracyTrace], variant: ForgettingVariant) -> plot::Panel<'static> {
    let picked: Vec<&AccuracyTrace> = traces.iter().filter(|t| t.variant == variant).collect();
    let markers = picked.first().map(|t| t.switches.iter().map(|&s| s as f64).collect()).unwrap_or_default();
    plot::Panel {
        title: match variant {
            ForgettingVariant::Vanilla => "vanilla classifier".into(),
            ForgettingVariant::WithSelfsup => "with self-supervision".into(),
        },
        x_label: "iteration",
        y_label: "accuracy",
        series: picked
            .iter()
            .map(|t| plot::Series {
                label: format!("seed {}", t.seed),
                points: t.rows.iter().map(|r| (r.step as f64, r.accuracy)).collect(),
            })
            .collect(),
        markers,
        y_range: Some((0.0, 1.0)),
    }
}

fn cmd_forgetting(a: ForgettingArgs) -> Result<()> {
    let cfg: ForgettingConfig = load_with_overrides(&a.cfg)?;
    let variants = match a.variant {
        ForgettingChoice::Vanilla => vec![ForgettingVariant::Vanilla],
        ForgettingChoice::WithSelfsup => vec![ForgettingVariant::WithSelfsup],
        ForgettingChoice::Both => ForgettingVariant::ALL.to_vec(),
    };
    let train_data = cfg.dataset.load_train()?;
    let eval = cfg.dataset.load_eval()?;
    let dir = a.root.join("forgetting");
    let table = dir.join("trace.csv");
    let mut w = csv_writer(&table)?;
    w.write_record(["step", "task_id", "accuracy", "variant", "seed"])?;
    let mut traces = Vec::new();
    for &seed in &a.seeds {
        for &v in &variants {
            let t = run_forgetting_experiment(v, &cfg, &train_data, &eval, seed)?;
            if let Some(s) = t.aborted_at {
                log::warn!("{v} seed {seed} aborted at step {s}");
            }
            for r in &t.rows {
                w.write_record([r.step.to_string(), r.task_id.to_string(), r.accuracy.to_string(), v.to_string(), seed.to_string()])?;
            }
            w.flush()?;
            traces.push(t);
        }
    }
    println!("table: {}", table.display());
    if let Ok(s) = summarize_forgetting(&traces, cfg.post_switch_window) {
        let post: Vec<String> = s.vanilla_post_switch.iter().map(|x| format!("{x:.3}")).collect();
        println!("vanilla_post_switch=[{}]", post.join(", "));
        println!("switches_at_or_below_0.60={}/{}", s.switches_below(0.60), s.vanilla_post_switch.len());
        println!("final_task vanilla={:.4} with_selfsup={:.4}", s.vanilla_final_task, s.selfsup_final_task);
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&s)?)?;
    }
    let panels: Vec<_> = variants.iter().map(|&v| forgetting_panel(&traces, v)).collect();
    maybe_plot(a.plot, &dir.join("forgetting.png"), &panels);
    Ok(())
}

fn cmd_extractor(a: ExtractorArgs) -> Result<()> {
    let cfg = load_gan_config(&a.cfg)?;
    let train_data = cfg.dataset.load_train()?;
    let dir = a.out.parent().map(Path::to_path_buf).unwrap_or_default();
    std::fs::create_dir_all(&dir)?;
    let tmp = dir.join(".extractor-staging");
    std::fs::create_dir_all(&tmp)?;
    let fx = prepare_extractor(&SsGANConfig { fid: ssgan::trainer::FidConfig { extractor: None, ..cfg.fid.clone() }, ..cfg.clone() }, &train_data, &tmp)?;
    std::fs::rename(tmp.join("extractor.safetensors"), &a.out)?;
    std::fs::remove_dir_all(&tmp).ok();
    let eval = cfg.dataset.load_eval()?;
    if let Some(labels) = &eval.labels {
        println!("test accuracy {:.4}", fx.accuracy(&eval.images, labels)?);
    }
    let check = FeatureExtractor::load(&a.out)?;
    println!("extractor {} hash={}", a.out.display(), check.hash());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let ds = SyntheticShapes { n: a.n, size: a.size, seed: a.seed, clutter: a.clutter, ..Default::default() }.generate()?;
    save_cached(&ds, &a.out)?;
    println!("{} images of {}×{} in {} (hash {})", ds.len(), a.size, a.size, a.out.display(), ds.version_hash());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Fid(a) => cmd_fid(a),
        Cmd::Probe(a) => cmd_probe(a),
        Cmd::Forgetting(a) => cmd_forgetting(a),
        Cmd::Extractor(a) => cmd_extractor(a),
        Cmd::Synth(a) => cmd_synth(a),
    }
}
