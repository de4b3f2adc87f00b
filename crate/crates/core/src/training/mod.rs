//! Splits, the training loop, checkpoints and regression metrics.

pub mod checkpoint;
pub mod evaluate;
pub mod metrics;
pub mod split;
pub mod trainer;

pub use checkpoint::ModelCheckpoint;
pub use evaluate::{evaluate_footprints, evaluate_pixels, predict_samples};
pub use metrics::{regression_metrics, EvalLevel, MetricsReport};
pub use split::{kfold_plan, split_dataset, Split};
pub use trainer::{train, write_history_csv, EpochRecord, TrainConfig, TrainOutcome};
