//! Training, evaluation, ablation and prediction commands.

mod ablate;
pub mod config;
pub mod dataset;
mod eval;
pub mod log;
mod predict;
mod train;

pub use ablate::{ablation_csv, cmd_ablate, AblationRow, ABLATE_HEADER};
pub use config::{AblateConfig, DataConfig, Ini, Mode, OptimConfig, RunConfig};
pub use dataset::{
    is_validation, load_frames, prepare, sparse_seed, training_batch, Example, Split,
};
pub use eval::{
    cmd_eval, evaluate_baseline, evaluate_csv, examples_at_density, nearest_valid_baseline,
};
pub use log::{RunLog, StepRecord, STEP_HEADER};
pub use predict::{cmd_predict, error_map, jet, PredictOutput, PredictRequest};
pub use train::{
    cmd_train_cpn, cmd_train_dcn, evaluate_cpn, evaluate_dcn, load_frozen_cpn, TrainOutcome,
    BEST_CHECKPOINT,
};
