//! Alternating GAN training, run directories and sweeps.

mod config;
mod run;
mod step;
mod sweep;

pub use config::{AdamSettings, DatasetSpec, FidConfig, SsGANConfig, DATA_ROOT_ENV};
pub use run::{
    checkpoint_path, generate_samples, list_checkpoints, prepare_extractor, read_metrics, save_image_grid, train,
    DivergenceMonitor, Evaluator, MetricRow, RunOptions, RunRecord, RunStatus, DIVERGENCE_FACTOR, DIVERGENCE_PATIENCE,
};
pub use step::{train_step, DiscUpdate, StepMetrics, TrainState};
pub use sweep::{
    grid_cells, run_sweep, summarize_seeds, worst_fid, SeedSummary, SweepCell, SweepGrid, SweepRow, ADAM_SETTINGS,
    ALPHAS, GP_LAMBDAS,
};
