//! Online 1-vs-all classification over a cyclic task sequence, with and
//! without an auxiliary rotation loss on the shared trunk.

use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::rotation_term;
use crate::models::{ArchConfig, Discriminator, Regularizer};
use crate::optim::{gradients, Adam, AdamConfig};
use crate::rotation::{make_rotation_batch, Source};
use crate::trainer::DatasetSpec;
use crate::util::{keyed_rng, scalar, to_i64_vec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSchedule {
    pub num_classes: usize,
    pub steps_per_task: u64,
    pub cycles: u64,
}

impl Default for TaskSchedule {
    fn default() -> Self {
        TaskSchedule { num_classes: 10, steps_per_task: 1000, cycles: 1 }
    }
}

impl TaskSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.steps_per_task == 0 || self.cycles == 0 {
            return Err(Error::Config(format!("invalid task schedule {self:?}")));
        }
        Ok(())
    }

    pub fn task_id(&self, step: u64) -> usize {
        ((step / self.steps_per_task) % self.num_classes as u64) as usize
    }

    pub fn cycle_len(&self) -> u64 {
        self.steps_per_task * self.num_classes as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.cycle_len() * self.cycles
    }

    /// Steps at which the current task changes, including the return to
    /// task 0 at the end of the last cycle.
    pub fn switches(&self) -> Vec<u64> {
        (1..=self.total_steps() / self.steps_per_task).map(|k| k * self.steps_per_task).collect()
    }
}

/// A balanced 1-vs-all batch for one task.
#[derive(Debug)]
pub struct TaskBatch {
    pub images: Tensor,
    /// 1 for the task class, 0 otherwise; `f32`.
    pub targets: Tensor,
    pub task_id: usize,
}

/// Per-class index pools of a labeled dataset.
#[derive(Debug, Clone)]
pub struct ClassPools {
    pools: Vec<Vec<i64>>,
}

impl ClassPools {
    pub fn new(data: &Dataset, num_classes: usize, min_per_class: usize) -> Result<Self> {
        let labels = data
            .labels
            .as_ref()
            .ok_or_else(|| Error::Dataset(format!("{} has no labels", data.name)))?;
        let mut pools = vec![Vec::new(); num_classes];
        for (i, l) in to_i64_vec(labels).into_iter().enumerate() {
            if let Some(p) = usize::try_from(l).ok().and_then(|l| pools.get_mut(l)) {
                p.push(i as i64);
            }
        }
        for (c, p) in pools.iter().enumerate() {
            if p.len() < min_per_class {
                return Err(Error::Dataset(format!(
                    "class {c} has {} samples, at least {min_per_class} needed",
                    p.len()
                )));
            }
        }
        Ok(ClassPools { pools })
    }

    /// `half` positives of `task`, then `half` negatives drawn uniformly
    /// from the remaining classes.
    pub fn sample(&self, task: usize, half: usize, rng: &mut ChaCha8Rng) -> (Vec<i64>, Vec<i64>) {
        let pos = (0..half).map(|_| *self.pools[task].choose(rng).unwrap()).collect();
        let others: Vec<usize> = (0..self.pools.len()).filter(|&c| c != task).collect();
        let neg = (0..half)
            .map(|_| {
                let c = others[rng.random_range(0..others.len())];
                *self.pools[c].choose(rng).unwrap()
            })
            .collect();
        (pos, neg)
    }
}

fn task_batch(data: &Dataset, pos: &[i64], neg: &[i64], task_id: usize) -> TaskBatch {
    let idx: Vec<i64> = pos.iter().chain(neg).copied().collect();
    let images = data.images.index_select(0, &Tensor::from_slice(&idx));
    let mut t = vec![1f32; pos.len()];
    t.resize(idx.len(), 0.0);
    TaskBatch { images, targets: Tensor::from_slice(&t), task_id }
}

/// Deterministic stream of balanced batches following `schedule`.
pub fn make_task_sequence<'a>(
    data: &'a Dataset,
    schedule: TaskSchedule,
    batch_size: usize,
    seed: u64,
) -> Result<impl Iterator<Item = TaskBatch> + 'a> {
    schedule.validate()?;
    if batch_size < 2 || batch_size % 2 != 0 {
        return Err(Error::BatchSize(batch_size as i64));
    }
    let pools = ClassPools::new(data, schedule.num_classes, 1)?;
    let mut rng = keyed_rng(seed, "forgetting/stream");
    Ok((0..schedule.total_steps()).map(move |s| {
        let task = schedule.task_id(s);
        let (pos, neg) = pools.sample(task, batch_size / 2, &mut rng);
        task_batch(data, &pos, &neg, task)
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgettingVariant {
    Vanilla,
    WithSelfsup,
}

impl ForgettingVariant {
    pub const ALL: [ForgettingVariant; 2] = [ForgettingVariant::Vanilla, ForgettingVariant::WithSelfsup];

    pub fn name(self) -> &'static str {
        match self {
            ForgettingVariant::Vanilla => "vanilla",
            ForgettingVariant::WithSelfsup => "with_selfsup",
        }
    }
}

impl fmt::Display for ForgettingVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ForgettingVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown forgetting variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForgettingConfig {
    pub schedule: TaskSchedule,
    /// Weight of the rotation loss in the self-supervised variant.
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub eval_interval: u64,
    /// Positives (and as many negatives) per evaluation.
    pub eval_per_class: usize,
    /// Width of the window after each switch used for post-switch accuracy.
    pub post_switch_window: u64,
    pub arch: ArchConfig,
    pub dataset: DatasetSpec,
}

impl Default for ForgettingConfig {
    fn default() -> Self {
        ForgettingConfig {
            schedule: TaskSchedule::default(),
            beta: 1.0,
            lr: 2e-4,
            batch_size: 64,
            eval_interval: 50,
            eval_per_class: 100,
            post_switch_window: 100,
            arch: ArchConfig::default(),
            dataset: DatasetSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub task_id: usize,
    pub accuracy: f64,
    pub variant: ForgettingVariant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTrace {
    pub variant: ForgettingVariant,
    pub seed: u64,
    pub schedule: TaskSchedule,
    pub rows: Vec<TraceRow>,
    /// Steps at which the task changes.
    pub switches: Vec<u64>,
    /// Steps at which a full cycle ends.
    pub cycle_ends: Vec<u64>,
    /// Set when training stopped on a non-finite loss.
    pub aborted_at: Option<u64>,
}

impl AccuracyTrace {
    /// Mean accuracy over evaluations in `[start, end)`.
    pub fn mean_between(&self, start: u64, end: u64) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.step >= start && r.step < end).map(|r| r.accuracy).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Mean accuracy in the window after each switch.
    pub fn post_switch(&self, window: u64) -> Vec<Option<f64>> {
        self.switches.iter().map(|&s| self.mean_between(s, s + window)).collect()
    }

    /// Mean accuracy over the last task of the final cycle.
    pub fn final_task(&self) -> Option<f64> {
        let end = self.schedule.total_steps();
        self.mean_between(end - self.schedule.steps_per_task, end)
    }
}

/// Balanced evaluation set per task, fixed for the whole run.
struct EvalPool {
    per_task: Vec<TaskBatch>,
}

impl EvalPool {
    fn new(data: &Dataset, schedule: &TaskSchedule, per_class: usize, seed: u64) -> Result<Self> {
        let pools = ClassPools::new(data, schedule.num_classes, 1)?;
        let mut rng = keyed_rng(seed, "forgetting/eval");
        let per_task = (0..schedule.num_classes)
            .map(|task| {
                let (pos, neg) = pools.sample(task, per_class, &mut rng);
                task_batch(data, &pos, &neg, task)
            })
            .collect();
        Ok(EvalPool { per_task })
    }

    fn accuracy(&self, model: &Discriminator, task: usize) -> Result<f64> {
        let b = &self.per_task[task];
        tch::no_grad(|| {
            let logits = model.source_logits(&model.features(&b.images)?, None)?.reshape([-1]);
            let pred = logits.gt(0.0).to_kind(Kind::Float);
            Ok(scalar(&pred.eq_tensor(&b.targets).to_kind(Kind::Float).mean(Kind::Float)))
        })
    }
}

fn classifier_loss(model: &Discriminator, batch: &TaskBatch, beta: Option<f64>) -> Result<Tensor> {
    let logits = model.source_logits(&model.features(&batch.images)?, None)?.reshape([-1]);
    let bce = logits.binary_cross_entropy_with_logits::<Tensor>(&batch.targets, None, None, tch::Reduction::Mean);
    match beta {
        Some(beta) if beta != 0.0 => {
            let rot = make_rotation_batch(&batch.images, Source::Real)?;
            let rot_logits = model.rotation_logits(&model.features(&rot.images)?)?;
            Ok(bce - rotation_term(&rot_logits, &rot.labels)? * beta)
        }
        _ => Ok(bce),
    }
}

/// Trains a fresh classifier online over the task stream of `train` and
/// evaluates current-task accuracy on `eval` every `eval_interval` steps.
pub fn run_forgetting_experiment(
    variant: ForgettingVariant,
    cfg: &ForgettingConfig,
    train: &Dataset,
    eval: &Dataset,
    seed: u64,
) -> Result<AccuracyTrace> {
    let schedule = cfg.schedule;
    schedule.validate()?;
    if cfg.eval_interval == 0 {
        return Err(Error::Config("eval_interval must be positive".into()));
    }
    let selfsup = variant == ForgettingVariant::WithSelfsup;
    if selfsup && cfg.batch_size % 4 != 0 {
        return Err(Error::BatchSize(cfg.batch_size as i64));
    }
    let model = Discriminator::build(&cfg.arch, Regularizer::None, true, None, seed)?;
    let adam = AdamConfig { lr: cfg.lr, beta1: 0.9, beta2: 0.999, ..Default::default() };
    adam.validate()?;
    let mut opt = Adam::new(adam, model.store());
    let evals = EvalPool::new(eval, &schedule, cfg.eval_per_class, seed)?;
    let beta = selfsup.then_some(cfg.beta);

    let mut trace = AccuracyTrace {
        variant,
        seed,
        schedule,
        rows: Vec::new(),
        switches: schedule.switches(),
        cycle_ends: (1..=schedule.cycles).map(|c| c * schedule.cycle_len()).collect(),
        aborted_at: None,
    };
    let record = |step: u64, model: &Discriminator, trace: &mut AccuracyTrace| -> Result<()> {
        let task_id = schedule.task_id(step);
        let accuracy = evals.accuracy(model, task_id)?;
        trace.rows.push(TraceRow { step, task_id, accuracy, variant });
        Ok(())
    };

    let stream = make_task_sequence(train, schedule, cfg.batch_size, seed)?;
    for (step, batch) in stream.enumerate() {
        let step = step as u64;
        if step % cfg.eval_interval == 0 {
            record(step, &model, &mut trace)?;
        }
        let loss = classifier_loss(&model, &batch, beta)?;
        if !scalar(&loss).is_finite() {
            log::warn!("{variant} classifier diverged at step {step}");
            trace.aborted_at = Some(step);
            return Ok(trace);
        }
        let grads = gradients(&loss, model.store())?;
        opt.apply(model.store(), &grads);
    }
    record(schedule.total_steps(), &model, &mut trace)?;
    Ok(trace)
}

/// Directional summary over seeds for one variant pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingSummary {
    /// Mean vanilla post-switch accuracy per switch, averaged over seeds.
    pub vanilla_post_switch: Vec<f64>,
    pub selfsup_post_switch: Vec<f64>,
    pub vanilla_final_task: f64,
    pub selfsup_final_task: f64,
}

impl ForgettingSummary {
    pub fn switches_below(&self, threshold: f64) -> usize {
        self.vanilla_post_switch.iter().filter(|&&a| a <= threshold).count()
    }

    pub fn final_task_gain(&self) -> f64 {
        self.selfsup_final_task - self.vanilla_final_task
    }
}

fn mean_over_seeds(traces: &[&AccuracyTrace], window: u64) -> (Vec<f64>, f64) {
    let n_switch = traces.iter().map(|t| t.switches.len()).min().unwrap_or(0);
    let post = (0..n_switch)
        .map(|i| {
            let v: Vec<f64> = traces.iter().filter_map(|t| t.post_switch(window)[i]).collect();
            if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 }
        })
        .collect();
    let finals: Vec<f64> = traces.iter().map(|t| t.final_task().unwrap_or(f64::NAN)).collect();
    (post, finals.iter().sum::<f64>() / finals.len().max(1) as f64)
}

pub fn summarize_forgetting(traces: &[AccuracyTrace], window: u64) -> Result<ForgettingSummary> {
    let pick = |v: ForgettingVariant| traces.iter().filter(|t| t.variant == v).collect::<Vec<_>>();
    let (van, ss) = (pick(ForgettingVariant::Vanilla), pick(ForgettingVariant::WithSelfsup));
    if van.is_empty() || ss.is_empty() {
        return Err(Error::Empty("forgetting traces for both variants"));
    }
    let (vanilla_post_switch, vanilla_final_task) = mean_over_seeds(&van, window);
    let (selfsup_post_switch, selfsup_final_task) = mean_over_seeds(&ss, window);
    Ok(ForgettingSummary { vanilla_post_switch, selfsup_post_switch, vanilla_final_task, selfsup_final_task })
}

/// Loads the configured data and runs both variants for every seed.
pub fn run_forgetting_seeds(cfg: &ForgettingConfig, seeds: &[u64]) -> Result<Vec<AccuracyTrace>> {
    let train = cfg.dataset.load_train()?;
    let eval = cfg.dataset.load_eval()?;
    let mut out = Vec::new();
    for &seed in seeds {
        for v in ForgettingVariant::ALL {
            out.push(run_forgetting_experiment(v, cfg, &train, &eval, seed)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_shapes;

    #[test]
    fn schedule_is_periodic() {
        let s = TaskSchedule::default();
        assert_eq!(s.task_id(0), 0);
        assert_eq!(s.task_id(999), 0);
        assert_eq!(s.task_id(1000), 1);
        assert_eq!(s.task_id(10_000), 0);
        assert_eq!(s.switches().len(), 10);
        assert_eq!(*s.switches().last().unwrap(), 10_000);
    }

    #[test]
    fn batches_are_balanced() {
        let data = make_synthetic_shapes(200, 8, 1).unwrap();
        let sched = TaskSchedule { steps_per_task: 3, ..Default::default() };
        for (s, b) in make_task_sequence(&data, sched, 16, 0).unwrap().take(40).enumerate() {
            assert_eq!(b.task_id, sched.task_id(s as u64));
            assert_eq!(scalar(&b.targets.sum(Kind::Float)), 8.0);
            assert_eq!(b.images.size()[0], 16);
        }
    }

    #[test]
    fn missing_class_is_rejected() {
        let data = crate::data::SyntheticShapes { n: 50, size: 8, classes: 5, ..Default::default() }.generate().unwrap();
        assert!(make_task_sequence(&data, TaskSchedule::default(), 16, 0).is_err());
    }
}
