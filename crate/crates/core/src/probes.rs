//! Linear probes on frozen discriminator block features.
//!
//! Block activations are max-pooled to a grid of at most `target_dim`
//! values, standardized with training-split statistics, and fed to a
//! multinomial logistic regression trained with momentum SGD under a
//! step-decay schedule. The learning rate is picked on a held-out slice of
//! the training split; the final probe is then refit on the whole split.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Discriminator;
use crate::trainer::TrainState;
use crate::util::{keyed_rng, to_i64_vec};

const EXTRACT_CHUNK: i64 = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Upper bound on the pooled feature dimension.
    pub target_dim: i64,
    pub batch_size: usize,
    pub momentum: f64,
    /// Candidate learning rates, ranked on the validation slice.
    pub lr_grid: Vec<f64>,
    pub epochs: usize,
    /// The learning rate is multiplied by `decay_factor` every `decay_every` epochs.
    pub decay_every: usize,
    pub decay_factor: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            target_dim: 9216,
            batch_size: 256,
            momentum: 0.9,
            lr_grid: vec![0.01, 0.1, 1.0],
            epochs: 100,
            decay_every: 30,
            decay_factor: 0.1,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Accuracy of one block's probe, aggregated over models trained with
/// different seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub block: String,
    pub variant: String,
    pub step: u64,
    pub top1_mean: f64,
    pub top1_std: f64,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<f64>,
}

impl ProbeResult {
    /// Standard error of the mean over seeds.
    pub fn std_error(&self) -> f64 {
        self.top1_std / (self.per_seed.len().max(1) as f64).sqrt()
    }
}

/// Named block activations `[N, C, H, W]`, computed without gradients.
pub fn extract_block_features(d: &Discriminator, images: &Tensor, block: &str) -> Result<Tensor> {
    let n = images.size()[0];
    tch::no_grad(|| {
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let len = EXTRACT_CHUNK.min(n - start);
            parts.push(d.block_features(&images.narrow(0, start, len), block)?);
            start += len;
        }
        if parts.is_empty() {
            return Err(Error::Empty("probe images"));
        }
        Ok(Tensor::cat(&parts, 0))
    })
}

/// Side of the pooled grid: the largest `s` with `s²·c <= target_dim`,
/// capped by the feature map size.
pub fn pooled_side(channels: i64, height: i64, width: i64, target_dim: i64) -> Result<i64> {
    if target_dim < channels {
        return Err(Error::Config(format!("target_dim {target_dim} is smaller than the {channels} channels")));
    }
    let mut s = 1;
    while (s + 1) * (s + 1) * channels <= target_dim {
        s += 1;
    }
    Ok(s.min(height).min(width))
}

/// Adaptive max pooling to `s × s` and flattening, `[N, s²·c]`.
pub fn pool_features(features: &Tensor, target_dim: i64) -> Result<Tensor> {
    let sz = features.size();
    if sz.len() != 4 {
        return Err(Error::Shape(format!("block features must be [N, C, H, W], got {sz:?}")));
    }
    let s = pooled_side(sz[1], sz[2], sz[3], target_dim)?;
    let (pooled, _) = features.adaptive_max_pool2d([s, s]);
    Ok(pooled.flatten(1, -1))
}

/// Weights and biases of a fitted multinomial logistic regression,
/// including the standardization learned from its training data.
#[derive(Debug)]
pub struct LinearProbe {
    pub weight: Tensor,
    pub bias: Tensor,
    pub mean: Tensor,
    pub scale: Tensor,
    pub lr: f64,
}

impl LinearProbe {
    pub fn logits(&self, x: &Tensor) -> Tensor {
        ((x - &self.mean) / &self.scale).matmul(&self.weight) + &self.bias
    }

    pub fn accuracy(&self, x: &Tensor, y: &Tensor) -> f64 {
        tch::no_grad(|| top1(&self.logits(x), y))
    }
}

fn top1(logits: &Tensor, y: &Tensor) -> f64 {
    logits.argmax(1, false).eq_tensor(y).to_kind(Kind::Double).mean(Kind::Double).double_value(&[])
}

fn class_count(y: &Tensor) -> Result<i64> {
    let labels = to_i64_vec(y);
    let mut distinct = labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Dataset(format!("linear probe needs at least 2 classes, found {}", distinct.len())));
    }
    if distinct[0] < 0 {
        return Err(Error::LabelRange { label: distinct[0], bound: 0 });
    }
    Ok(distinct[distinct.len() - 1] + 1)
}

/// Momentum SGD on softmax cross-entropy with zero initial weights.
fn sgd_fit(x: &Tensor, y: &Tensor, classes: i64, lr: f64, cfg: &ProbeConfig, tag: &str) -> (Tensor, Tensor) {
    let (n, f) = (x.size()[0], x.size()[1]);
    let opts = (Kind::Float, tch::Device::Cpu);
    let mut w = Tensor::zeros([f, classes], opts);
    let mut b = Tensor::zeros([classes], opts);
    let mut vw = w.zeros_like();
    let mut vb = b.zeros_like();
    let onehot = y.one_hot(classes).to_kind(Kind::Float);
    let batch = (cfg.batch_size as i64).min(n).max(1);
    let mut order: Vec<i64> = (0..n).collect();
    tch::no_grad(|| {
        for epoch in 0..cfg.epochs {
            let rate = lr * cfg.decay_factor.powi((epoch / cfg.decay_every.max(1)) as i32);
            order.shuffle(&mut keyed_rng(cfg.seed, &format!("probe/{tag}/{epoch}")));
            for chunk in order.chunks(batch as usize) {
                let idx = Tensor::from_slice(chunk);
                let xb = x.index_select(0, &idx);
                let yb = onehot.index_select(0, &idx);
                let p = (xb.matmul(&w) + &b).softmax(1, Kind::Float);
                let err = (p - yb) / chunk.len() as f64;
                let gw = xb.transpose(0, 1).matmul(&err);
                let gb = err.sum_dim_intlist(0, false, Kind::Float);
                vw = &vw * cfg.momentum + gw;
                vb = &vb * cfg.momentum + gb;
                w = &w - &vw * rate;
                b = &b - &vb * rate;
            }
        }
    });
    (w, b)
}

fn standardizer(x: &Tensor) -> (Tensor, Tensor) {
    let mean = x.mean_dim(0, true, Kind::Float);
    let scale = x.std_dim(0, false, true).clamp_min(1e-6);
    (mean, scale)
}

/// Outcome of [`fit_linear_probe`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFit {
    pub lr: f64,
    /// Validation accuracy per candidate learning rate.
    pub val_top1: Vec<(f64, f64)>,
    pub test_top1: f64,
}

/// Fits a probe on `(train_x, train_y)` and reports top-1 on the test set.
pub fn fit_linear_probe(
    train_x: &Tensor,
    train_y: &Tensor,
    test_x: &Tensor,
    test_y: &Tensor,
    cfg: &ProbeConfig,
) -> Result<(LinearProbe, ProbeFit)> {
    let n = train_x.size()[0];
    if train_y.size() != [n] || test_y.size() != [test_x.size()[0]] {
        return Err(Error::Shape("probe labels do not match feature rows".into()));
    }
    if cfg.lr_grid.is_empty() {
        return Err(Error::Config("probe lr_grid is empty".into()));
    }
    let classes = class_count(train_y)?.max(class_count(test_y).unwrap_or(0));
    let train_x = train_x.to_kind(Kind::Float);
    let test_x = test_x.to_kind(Kind::Float);

    let mut order: Vec<i64> = (0..n).collect();
    order.shuffle(&mut keyed_rng(cfg.seed, "probe/holdout"));
    let n_val = ((cfg.val_fraction * n as f64).round() as i64).clamp(1, n - 1);
    let (val_idx, fit_idx) = order.split_at(n_val as usize);
    let (fit_idx, val_idx) = (Tensor::from_slice(fit_idx), Tensor::from_slice(val_idx));
    let (fx, fy) = (train_x.index_select(0, &fit_idx), train_y.index_select(0, &fit_idx));
    let (vx, vy) = (train_x.index_select(0, &val_idx), train_y.index_select(0, &val_idx));

    let (mean, scale) = standardizer(&fx);
    let fxs = (&fx - &mean) / &scale;
    let vxs = (&vx - &mean) / &scale;
    let mut val_top1 = Vec::new();
    for &lr in &cfg.lr_grid {
        let (w, b) = sgd_fit(&fxs, &fy, classes, lr, cfg, &format!("select/{lr}"));
        let logits = vxs.matmul(&w) + &b;
        let acc = if bool::try_from(logits.isfinite().all()).unwrap_or(false) { top1(&logits, &vy) } else { 0.0 };
        val_top1.push((lr, acc));
    }
    let lr = val_top1.iter().fold((f64::NAN, -1.0), |best, &(lr, acc)| if acc > best.1 { (lr, acc) } else { best }).0;

    let (mean, scale) = standardizer(&train_x);
    let (w, b) = sgd_fit(&((&train_x - &mean) / &scale), train_y, classes, lr, cfg, "final");
    let probe = LinearProbe { weight: w, bias: b, mean, scale, lr };
    let test_top1 = probe.accuracy(&test_x, test_y);
    Ok((probe, ProbeFit { lr, val_top1, test_top1 }))
}

/// Pooled features of one block for a whole dataset.
pub fn block_dataset_features(d: &Discriminator, data: &Dataset, block: &str, target_dim: i64) -> Result<Tensor> {
    let raw = extract_block_features(d, &data.images, block)?;
    pool_features(&raw, target_dim)
}

fn labels_of(data: &Dataset) -> Result<&Tensor> {
    data.labels.as_ref().ok_or_else(|| Error::Dataset(format!("{} has no labels for probing", data.name)))
}

/// Top-1 of a probe on every block of one discriminator.
pub fn probe_discriminator(
    d: &Discriminator,
    train: &Dataset,
    test: &Dataset,
    cfg: &ProbeConfig,
) -> Result<Vec<(String, ProbeFit)>> {
    let (ytr, yte) = (labels_of(train)?, labels_of(test)?);
    let blocks: Vec<String> = d.blocks().iter().map(|b| b.name.clone()).collect();
    blocks
        .into_iter()
        .map(|block| {
            let xtr = block_dataset_features(d, train, &block, cfg.target_dim)?;
            let xte = block_dataset_features(d, test, &block, cfg.target_dim)?;
            let (_, fit) = fit_linear_probe(&xtr, ytr, &xte, yte, cfg)?;
            Ok((block, fit))
        })
        .collect()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Probes every block of each checkpoint (one per seed, all at the same
/// step and variant) and aggregates accuracies per block.
pub fn probe_all_blocks(
    checkpoints: &[&Path],
    train: &Dataset,
    test: &Dataset,
    cfg: &ProbeConfig,
) -> Result<Vec<ProbeResult>> {
    if checkpoints.is_empty() {
        return Err(Error::Empty("checkpoints"));
    }
    let mut per_block: Vec<(String, Vec<f64>)> = Vec::new();
    let mut seeds = Vec::new();
    let (mut variant, mut step) = (String::new(), 0);
    for path in checkpoints {
        if !path.exists() {
            return Err(Error::Checkpoint(format!("{} does not exist", path.display())));
        }
        let state = TrainState::load_checkpoint(path)?;
        variant = state.config.variant.to_string();
        step = state.t;
        seeds.push(state.config.seed);
        for (i, (block, fit)) in probe_discriminator(&state.discriminator, train, test, cfg)?.into_iter().enumerate() {
            if per_block.len() <= i {
                per_block.push((block, Vec::new()));
            }
            per_block[i].1.push(fit.test_top1);
        }
    }
    Ok(per_block
        .into_iter()
        .map(|(block, accs)| {
            let (top1_mean, top1_std) = mean_std(&accs);
            ProbeResult { block, variant: variant.clone(), step, top1_mean, top1_std, seeds: seeds.clone(), per_seed: accs }
        })
        .collect())
}
