//! Batch orchestration: configuration, dataset generation, training runs,
//! evaluation, ablation sweeps and overlay rendering. The `wend` binary is
//! a thin argument parser over these functions.

mod commands;
mod config;
mod train;

pub use commands::{
    cmd_eval, cmd_gen_data, cmd_render_overlays, cmd_sweep, draw_outline, read_run, sweep_samples, Execution,
    SweepAxis, SweepRun, CURVES_FILE, CURVES_HEADER, GT_INTENSITY, PRED_INTENSITY, SWEEP_FILE, SWEEP_HEADER,
};
pub use config::{EvalConfig, ModelKind, OptimConfig, RunConfig};
pub use train::{
    cmd_train, files, ground_truths, load_split, train_samples, write_run, EpochRecord, RunRecord, TrainedModel,
    RECORD_HEADER,
};
