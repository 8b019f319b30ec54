//! Seed summaries and the hyper-parameter sweep grids.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{AdamSettings, SsGANConfig};
use super::run::{train, RunOptions, RunRecord};
use crate::error::{Error, Result};
use crate::models::{Regularizer, Variant};

/// `(beta1, beta2, disc_iters)` settings of the robustness study.
pub const ADAM_SETTINGS: [(f64, f64, usize); 3] = [(0.0, 0.9, 1), (0.0, 0.9, 2), (0.5, 0.999, 1)];
pub const GP_LAMBDAS: [f64; 2] = [1.0, 10.0];
pub const ALPHAS: [f64; 3] = [0.2, 0.5, 1.0];

/// Mean FID curve over seeds plus the best final FID.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    /// `(step, mean FID, number of seeds evaluated at that step)`.
    pub mean_curve: Vec<(i64, f64, usize)>,
    /// Lowest final FID among seeds that did not diverge.
    pub best_final_fid: Option<f64>,
    pub best_seed: Option<u64>,
    pub seeds: Vec<u64>,
    pub diverged: usize,
}

pub fn summarize_seeds(records: &[RunRecord]) -> SeedSummary {
    let mut by_step: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for r in records {
        for f in &r.fid {
            by_step.entry(f.step).or_default().push(f.fid);
        }
    }
    let mean_curve = by_step
        .into_iter()
        .map(|(s, v)| (s, v.iter().sum::<f64>() / v.len() as f64, v.len()))
        .collect();
    let best = records
        .iter()
        .filter(|r| !r.is_diverged())
        .filter_map(|r| r.final_fid().filter(|f| f.is_finite()).map(|f| (f, r.config.seed)))
        .min_by(|a, b| a.0.total_cmp(&b.0));
    SeedSummary {
        mean_curve,
        best_final_fid: best.map(|b| b.0),
        best_seed: best.map(|b| b.1),
        seeds: records.iter().map(|r| r.config.seed).collect(),
        diverged: records.iter().filter(|r| r.is_diverged()).count(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepGrid {
    /// Gradient penalty λ ∈ {1, 10} × the three Adam settings.
    Gp,
    /// Spectral norm × the three Adam settings.
    Sn,
    /// α ∈ {0.2, 0.5, 1} with β = 1, self-supervised variant only.
    Alpha,
}

impl std::str::FromStr for SweepGrid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gp" => Ok(SweepGrid::Gp),
            "sn" => Ok(SweepGrid::Sn),
            "alpha" => Ok(SweepGrid::Alpha),
            other => Err(Error::Config(format!("unknown grid {other:?}; expected gp, sn or alpha"))),
        }
    }
}

/// One configuration of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub id: String,
    pub gp_lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub disc_iters: usize,
    pub alpha: f64,
    pub config: SsGANConfig,
}

impl SweepCell {
    pub fn variant(&self) -> Variant {
        self.config.variant
    }
}

fn with_adam(base: &SsGANConfig, (beta1, beta2, disc_iters): (f64, f64, usize)) -> SsGANConfig {
    SsGANConfig {
        adam: AdamSettings { beta1, beta2, ..base.adam },
        disc_iters,
        ..base.clone()
    }
}

/// Expands a grid into cells. The robustness grids pair every setting with
/// both `sn_gan` and `ssgan`.
pub fn grid_cells(grid: SweepGrid, base: &SsGANConfig) -> Vec<SweepCell> {
    let mut out = Vec::new();
    let mut push = |cfg: SsGANConfig| {
        let id = format!(
            "{}-lam{}-b1_{}-b2_{}-d{}-a{}",
            cfg.variant, cfg.weights.gp_lambda, cfg.adam.beta1, cfg.adam.beta2, cfg.disc_iters, cfg.weights.alpha
        );
        out.push(SweepCell {
            id,
            gp_lambda: cfg.weights.gp_lambda,
            beta1: cfg.adam.beta1,
            beta2: cfg.adam.beta2,
            disc_iters: cfg.disc_iters,
            alpha: cfg.weights.alpha,
            config: cfg,
        });
    };
    match grid {
        SweepGrid::Gp | SweepGrid::Sn => {
            let lambdas: &[f64] = if grid == SweepGrid::Gp { &GP_LAMBDAS } else { &[0.0] };
            for &lambda in lambdas {
                for setting in ADAM_SETTINGS {
                    for variant in [Variant::SnGan, Variant::Ssgan] {
                        let mut cfg = with_adam(base, setting);
                        cfg.variant = variant;
                        cfg.weights.gp_lambda = lambda;
                        cfg.regularizer =
                            if lambda > 0.0 { Regularizer::GradientPenalty } else { Regularizer::SpectralNorm };
                        push(cfg);
                    }
                }
            }
        }
        SweepGrid::Alpha => {
            for alpha in ALPHAS {
                let mut cfg = base.clone();
                cfg.variant = Variant::Ssgan;
                cfg.weights.alpha = alpha;
                cfg.weights.beta = 1.0;
                push(cfg);
            }
        }
    }
    out
}

/// One row of a sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: String,
    pub variant: Variant,
    pub gp_lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub disc_iters: usize,
    pub alpha: f64,
    pub seed: u64,
    pub config_hash: String,
    /// Empty when the run diverged before any evaluation.
    pub final_fid: Option<f64>,
    pub status: String,
}

impl SweepRow {
    pub fn from_record(cell: &SweepCell, record: &RunRecord) -> Self {
        let status = match &record.status {
            super::run::RunStatus::Completed => "completed".to_string(),
            super::run::RunStatus::Diverged { .. } => "diverged".to_string(),
            super::run::RunStatus::Aborted { .. } => "aborted".to_string(),
        };
        SweepRow {
            cell: cell.id.clone(),
            variant: cell.variant(),
            gp_lambda: cell.gp_lambda,
            beta1: cell.beta1,
            beta2: cell.beta2,
            disc_iters: cell.disc_iters,
            alpha: cell.alpha,
            seed: record.config.seed,
            config_hash: record.config_hash.clone(),
            final_fid: record.final_fid(),
            status,
        }
    }

    /// Row for a run that failed with an error rather than a record.
    pub fn failed(cell: &SweepCell, err: &Error) -> Self {
        SweepRow {
            cell: cell.id.clone(),
            variant: cell.variant(),
            gp_lambda: cell.gp_lambda,
            beta1: cell.beta1,
            beta2: cell.beta2,
            disc_iters: cell.disc_iters,
            alpha: cell.alpha,
            seed: cell.config.seed,
            config_hash: cell.config.config_hash(),
            final_fid: None,
            status: format!("failed: {err}"),
        }
    }

    /// Whether this row counts as diverged in table summaries.
    pub fn diverged(&self) -> bool {
        self.status != "completed" || !self.final_fid.is_some_and(f64::is_finite)
    }
}

/// Runs every cell in-process, one after another, under `root/<cell id>`.
/// A failed cell becomes a row with its error instead of ending the sweep.
pub fn run_sweep(cells: &[SweepCell], root: &Path, resume: bool) -> Vec<SweepRow> {
    cells
        .iter()
        .map(|cell| match train(&cell.config, &root.join(&cell.id), &RunOptions { resume, stop_after: None }) {
            Ok(rec) => SweepRow::from_record(cell, &rec),
            Err(e) => SweepRow::failed(cell, &e),
        })
        .collect()
}

/// Worst (largest) FID over a variant's rows; diverged cells count as +∞.
pub fn worst_fid(rows: &[SweepRow], variant: Variant) -> Option<f64> {
    rows.iter()
        .filter(|r| r.variant == variant)
        .map(|r| if r.diverged() { f64::INFINITY } else { r.final_fid.unwrap_or(f64::INFINITY) })
        .max_by(f64::total_cmp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shapes() {
        let base = SsGANConfig::default();
        let gp = grid_cells(SweepGrid::Gp, &base);
        assert_eq!(gp.len(), 12);
        assert!(gp.iter().all(|c| c.config.regularizer == Regularizer::GradientPenalty));
        assert!(gp.iter().all(|c| c.config.validate().is_ok()));
        let sn = grid_cells(SweepGrid::Sn, &base);
        assert_eq!(sn.len(), 6);
        assert_eq!(sn.iter().filter(|c| c.variant() == Variant::Ssgan).count(), 3);
        let alpha = grid_cells(SweepGrid::Alpha, &base);
        assert_eq!(alpha.iter().map(|c| c.alpha).collect::<Vec<_>>(), vec![0.2, 0.5, 1.0]);
        assert!(alpha.iter().all(|c| c.config.weights.beta == 1.0 && c.variant() == Variant::Ssgan));
        let ids: std::collections::BTreeSet<_> = gp.iter().map(|c| c.id.clone()).collect();
        assert_eq!(ids.len(), gp.len());
    }
}
