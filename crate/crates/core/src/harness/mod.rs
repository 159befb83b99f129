//! Desk-scale objectives and the training loop that wires every regime.

mod objective;
mod train;

pub use objective::{objective_eval, GroupInfo, Objective, ObjectiveSpec};
pub use train::{
    consecutive_error_metrics, run_training, LrSchedule, MetricRow, RunRecord, TrainConfig,
    DIVERGENCE_LOSS,
};
