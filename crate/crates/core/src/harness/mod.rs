//! Training, evaluation, ablation, transfer, and rendering harness.

mod ablate;
mod adam;
mod checkpoint;
mod config;
mod eval;
mod render;
mod train;

pub use ablate::{ablate, AblationTable, CellOutcome, ALL_CELLS};
pub use adam::Adam;
pub use checkpoint::{Checkpoint, TensorEntry, MAGIC, VERSION};
pub use config::{lr_at, ModelScale, TrainConfig};
pub use eval::{evaluate, evaluate_checkpoint, sweep_iters, transfer, EVAL_BATCH};
pub use render::render;
pub use train::{model_from_checkpoint, train, train_resumed, StepLog, TrainOutcome};
