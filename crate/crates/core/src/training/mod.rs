//! Loss, Jacobian penalty, reverse passes, optimizer and the epoch loop.

pub mod backward;
pub mod engine;
pub mod gate;
pub mod loss;
pub mod optim;
pub mod penalty;

pub use backward::{backward_ift, backward_run, jacobian_penalty, BackwardMode, BackwardStats, GradientBundle};
pub use engine::{evaluate_mse, train, LogRecord, LossBreakdown, TrainConfig, TrainOutput, TrainPair, TrainResult};
pub use gate::{gradient_check, require_gradient_check, GateReport, GATE_TOLERANCE};
pub use loss::{mse_loss, standardize_columns, standardized_mse};
pub use optim::{Adam, AdamConfig};
pub use penalty::hutchinson_penalty;
