use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use super::config::SsGANConfig;
use super::step::{train_step, StepMetrics, TrainState};
use crate::data::{BatchStream, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{fid_against, real_stats, FeatureExtractor, FidReport, GaussianStats};
use crate::models::Generator;
use crate::util::keyed_rng;

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub name: String,
    /// Non-finite values are written as `null`.
    #[serde(deserialize_with = "null_as_nan")]
    pub value: f64,
}

fn null_as_nan<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// FID blew up or went non-finite for consecutive evaluations.
    Diverged { step: u64, reason: String },
    /// A loss became non-finite; `diagnostics.json` holds the details.
    Aborted { step: u64, reason: String },
}

/// Persisted outcome of one run (`record.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: SsGANConfig,
    pub config_hash: String,
    pub run_dir: PathBuf,
    pub status: RunStatus,
    pub metrics: Vec<MetricRow>,
    pub fid: Vec<FidReport>,
    pub checkpoints: Vec<PathBuf>,
    pub final_step: u64,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn final_fid(&self) -> Option<f64> {
        self.fid.last().map(|r| r.fid)
    }

    pub fn is_diverged(&self) -> bool {
        !matches!(self.status, RunStatus::Completed)
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let p = run_dir.join("record.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// FID more than this many times the first evaluation counts as a bad eval.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// Consecutive bad evaluations that mark a run diverged.
pub const DIVERGENCE_PATIENCE: usize = 3;

/// Tracks the divergence rule across evaluations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DivergenceMonitor {
    pub initial: Option<f64>,
    pub bad_streak: usize,
}

impl DivergenceMonitor {
    /// Records one FID value; returns true once the run counts as diverged.
    pub fn observe(&mut self, fid: f64) -> bool {
        let bad = match self.initial {
            _ if !fid.is_finite() => true,
            None => {
                self.initial = Some(fid);
                false
            }
            Some(first) => fid > DIVERGENCE_FACTOR * first,
        };
        self.bad_streak = if bad { self.bad_streak + 1 } else { 0 };
        self.bad_streak >= DIVERGENCE_PATIENCE
    }
}

pub fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join("checkpoints").join(format!("step_{step:06}.safetensors"))
}

/// Checkpoints in the run directory, ordered by step.
pub fn list_checkpoints(run_dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let dir = run_dir.join("checkpoints");
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step_"))
            .and_then(|n| n.strip_suffix(".safetensors"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(step) = step {
            out.push((step, path));
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            rows.push(serde_json::from_str(&line)?);
        }
    }
    Ok(rows)
}

struct MetricsLog {
    path: PathBuf,
    file: File,
    rows: Vec<MetricRow>,
}

impl MetricsLog {
    /// Opens the log keeping only rows with `step <= keep_through`.
    fn open(path: PathBuf, keep_through: Option<u64>) -> Result<Self> {
        let rows: Vec<MetricRow> = match keep_through {
            Some(k) => read_metrics(&path)?.into_iter().filter(|r| r.step <= k).collect(),
            None => Vec::new(),
        };
        let mut file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        for r in &rows {
            writeln!(file, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(MetricsLog { path, file, rows })
    }

    fn push(&mut self, step: u64, name: &str, value: f64) -> Result<()> {
        let row = MetricRow { step, name: name.to_string(), value };
        writeln!(self.file, "{}", serde_json::to_string(&row)?).map_err(|e| Error::io(&self.path, e))?;
        self.rows.push(row);
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Generates `n` images in chunks of `chunk` from a dedicated RNG stream.
pub fn generate_samples(
    generator: &Generator,
    n: usize,
    chunk: usize,
    num_classes: Option<i64>,
    seed: u64,
    tag: &str,
) -> Result<Tensor> {
    let mut rng = keyed_rng(seed, tag);
    let chunk = chunk.max(2);
    let mut parts = Vec::new();
    let mut done = 0;
    while done < n {
        // Batch norm needs at least two rows per chunk.
        let k = chunk.min(n - done).max(2);
        let labels = num_classes.map(|c| Tensor::arange(k as i64, (Kind::Int64, tch::Device::Cpu)).remainder(c));
        let x = tch::no_grad(|| generator.sample(&mut rng, k as i64, labels.as_ref()))?;
        parts.push(x);
        done += k;
    }
    Ok(Tensor::cat(&parts, 0).narrow(0, 0, n as i64))
}

/// Writes an `nrow`-wide grid of `[-1, 1]` images as an 8-bit PNG.
pub fn save_image_grid(images: &Tensor, path: &Path, nrow: i64) -> Result<()> {
    let s = images.size();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let ncol = nrow.max(1);
    let rows = (n + ncol - 1) / ncol;
    let pixels = ((images.to_kind(Kind::Float).clamp(-1.0, 1.0) + 1.0) * 127.5)
        .round()
        .to_kind(Kind::Uint8)
        .contiguous();
    let data = Vec::<u8>::try_from(&pixels.view(-1)).map_err(Error::Torch)?;
    let (gw, gh) = ((ncol * (w + 1) + 1) as u32, (rows * (h + 1) + 1) as u32);
    let mut img = image::RgbImage::new(gw, gh);
    for i in 0..n {
        let (oy, ox) = ((i / ncol) * (h + 1) + 1, (i % ncol) * (w + 1) + 1);
        for y in 0..h {
            for x in 0..w {
                let px = |ch: i64| data[(((i * c + ch.min(c - 1)) * h + y) * w + x) as usize];
                img.put_pixel((ox + x) as u32, (oy + y) as u32, image::Rgb([px(0), px(1), px(2)]));
            }
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Trains or loads the FID extractor for a run.
pub fn prepare_extractor(config: &SsGANConfig, train: &Dataset, run_dir: &Path) -> Result<FeatureExtractor> {
    if let Some(p) = &config.fid.extractor {
        return FeatureExtractor::load(p);
    }
    let path = run_dir.join("extractor.safetensors");
    if path.exists() {
        return FeatureExtractor::load(&path);
    }
    let mut fx_cfg = config.fid.extractor_train.clone();
    fx_cfg.image_size = config.arch.image_size;
    fx_cfg.channels = config.arch.channels;
    if let Some(k) = train.num_classes {
        fx_cfg.num_classes = k;
    }
    let fx = FeatureExtractor::train(train, fx_cfg)?;
    fx.save(&path)?;
    Ok(fx)
}

/// FID against cached statistics of the first `fid.samples` evaluation images.
pub struct Evaluator {
    pub extractor: FeatureExtractor,
    stats: GaussianStats,
    pub n_real: usize,
    pub n_fake: usize,
}

impl Evaluator {
    pub fn new(config: &SsGANConfig, train: &Dataset, eval: &Dataset, run_dir: &Path) -> Result<Self> {
        let extractor = prepare_extractor(config, train, run_dir)?;
        let n = config.fid.samples.min(eval.len()).max(2);
        let stats = real_stats(&eval.images.narrow(0, 0, n as i64), &extractor)?;
        Ok(Evaluator { extractor, stats, n_real: n, n_fake: config.fid.samples.max(2) })
    }

    pub fn fid(&self, state: &TrainState) -> Result<FidReport> {
        let cfg = &state.config;
        let fake = generate_samples(
            &state.generator,
            self.n_fake,
            cfg.batch_size,
            state.num_classes.filter(|_| cfg.variant.is_conditional()),
            cfg.seed,
            "eval_z",
        )?;
        let fid = fid_against(&self.stats, &fake, &self.extractor).unwrap_or(f64::NAN);
        Ok(FidReport {
            step: state.t as i64,
            fid,
            n_real: self.n_real,
            n_fake: self.n_fake,
            extractor_hash: self.extractor.hash().to_string(),
        })
    }
}

/// Options that do not affect results.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub resume: bool,
    /// Stop after this step even if `total_steps` is larger (for tests of
    /// interrupted runs).
    pub stop_after: Option<u64>,
}

fn write_fid_rows(log: &mut MetricsLog, r: &FidReport) -> Result<()> {
    let step = r.step as u64;
    log.push(step, "fid", r.fid)?;
    log.push(step, "fid_n_real", r.n_real as f64)?;
    log.push(step, "fid_n_fake", r.n_fake as f64)
}

fn fid_reports(rows: &[MetricRow], hash: &str) -> Vec<FidReport> {
    let get = |step: u64, name: &str| rows.iter().find(|r| r.step == step && r.name == name).map(|r| r.value);
    rows.iter()
        .filter(|r| r.name == "fid")
        .map(|r| FidReport {
            step: r.step as i64,
            fid: r.value,
            n_real: get(r.step, "fid_n_real").unwrap_or(0.0) as usize,
            n_fake: get(r.step, "fid_n_fake").unwrap_or(0.0) as usize,
            extractor_hash: hash.to_string(),
        })
        .collect()
}

/// Runs (or resumes) training in `run_dir`, writing `config.toml`,
/// `metrics.jsonl`, `checkpoints/`, `samples/` and finally `record.json`.
pub fn train(config: &SsGANConfig, run_dir: &Path, options: &RunOptions) -> Result<RunRecord> {
    config.validate()?;
    let started = Instant::now();
    std::fs::create_dir_all(run_dir.join("checkpoints")).map_err(|e| Error::io(run_dir, e))?;
    let cfg_path = run_dir.join("config.toml");
    if options.resume && cfg_path.exists() {
        let prev = SsGANConfig::load(&cfg_path)?;
        if prev.config_hash() != config.config_hash() {
            return Err(Error::Config(format!(
                "{} holds config {} but resume was requested with {}",
                run_dir.display(),
                prev.config_hash(),
                config.config_hash()
            )));
        }
    }
    std::fs::write(&cfg_path, config.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;

    let train_data = config.dataset.load_train()?;
    let num_classes = train_data.num_classes;
    let evaluator = if config.eval_interval > 0 {
        Some(Evaluator::new(config, &train_data, &config.dataset.load_eval()?, run_dir)?)
    } else {
        None
    };

    let latest = if options.resume { list_checkpoints(run_dir)?.pop() } else { None };
    let (mut state, mut monitor, mut log) = match &latest {
        Some((step, path)) => {
            let state = TrainState::load(path, config, num_classes)?;
            let log = MetricsLog::open(run_dir.join("metrics.jsonl"), Some(*step))?;
            let mut monitor = DivergenceMonitor::default();
            for r in log.rows.iter().filter(|r| r.name == "fid") {
                monitor.observe(r.value);
            }
            (state, monitor, log)
        }
        None => {
            let state = TrainState::new(config, num_classes)?;
            let mut log = MetricsLog::open(run_dir.join("metrics.jsonl"), None)?;
            let mut monitor = DivergenceMonitor::default();
            if let Some(ev) = &evaluator {
                let r = ev.fid(&state)?;
                write_fid_rows(&mut log, &r)?;
                monitor.observe(r.fid);
            }
            state.save(&checkpoint_path(run_dir, 0))?;
            (state, monitor, log)
        }
    };

    let sample_z = config.sample_interval > 0;
    let mut stream = BatchStream::resume(&train_data, config.batch_size, config.seed, state.batches_consumed)?;
    let mut status = RunStatus::Completed;
    let last = options.stop_after.map_or(config.total_steps, |s| s.min(config.total_steps));
    while state.t < last {
        let batches: Vec<_> = (0..config.disc_iters).map(|_| stream.next().expect("endless stream")).collect();
        state.batches_consumed = stream.consumed();
        let m: StepMetrics = match train_step(&mut state, &batches) {
            Ok(m) => m,
            Err(Error::NonFinite { what, step }) => {
                write_diagnostics(run_dir, &state, &what, &log.rows)?;
                status = RunStatus::Aborted { step, reason: format!("non-finite {what}") };
                break;
            }
            Err(e) => return Err(e),
        };
        let t = state.t;
        if t % config.log_interval.max(1) == 0 || t == last {
            for (name, v) in m.rows() {
                log.push(t, name, v)?;
            }
        }
        if let Some(ev) = &evaluator {
            if t % config.eval_interval == 0 || t == config.total_steps {
                let r = ev.fid(&state)?;
                write_fid_rows(&mut log, &r)?;
                if monitor.observe(r.fid) {
                    status = RunStatus::Diverged {
                        step: t,
                        reason: format!("FID above {DIVERGENCE_FACTOR}× initial or non-finite for {DIVERGENCE_PATIENCE} evaluations"),
                    };
                }
            }
        }
        if sample_z && t % config.sample_interval == 0 {
            let grid = generate_samples(&state.generator, 64, 64, num_classes.filter(|_| config.variant.is_conditional()), config.seed, "sample_z")?;
            save_image_grid(&grid, &run_dir.join("samples").join(format!("step_{t:06}.png")), 8)?;
        }
        if t % config.checkpoint_interval == 0 || t == last {
            log.flush()?;
            state.save(&checkpoint_path(run_dir, t))?;
        }
        if status != RunStatus::Completed {
            break;
        }
    }
    log.flush()?;

    let hash = evaluator.as_ref().map(|e| e.extractor.hash().to_string()).unwrap_or_default();
    let record = RunRecord {
        config: config.clone(),
        config_hash: config.config_hash(),
        run_dir: run_dir.to_path_buf(),
        status,
        fid: fid_reports(&log.rows, &hash),
        metrics: log.rows,
        checkpoints: list_checkpoints(run_dir)?.into_iter().map(|(_, p)| p).collect(),
        final_step: state.t,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    let rec_path = run_dir.join("record.json");
    std::fs::write(&rec_path, serde_json::to_string_pretty(&record)?).map_err(|e| Error::io(&rec_path, e))?;
    Ok(record)
}

fn write_diagnostics(run_dir: &Path, state: &TrainState, what: &str, rows: &[MetricRow]) -> Result<()> {
    let norms = |store: &crate::models::ParamStore| {
        store
            .params()
            .map(|(k, t)| (k.to_string(), t.norm().double_value(&[])))
            .collect::<std::collections::BTreeMap<_, _>>()
    };
    let tail: Vec<&MetricRow> = rows.iter().rev().take(50).collect();
    let diag = serde_json::json!({
        "what": what,
        "step": state.t,
        "generator_param_norms": norms(state.generator.store()),
        "discriminator_param_norms": norms(state.discriminator.store()),
        "recent_metrics": tail,
    });
    let p = run_dir.join("diagnostics.json");
    let mut f = OpenOptions::new().create(true).write(true).truncate(true).open(&p).map_err(|e| Error::io(&p, e))?;
    f.write_all(serde_json::to_string_pretty(&diag)?.as_bytes()).map_err(|e| Error::io(&p, e))
}
