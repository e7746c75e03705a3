//! Loss, regularization, optimizer, schedule, clipping and the training loop.

pub mod config;
pub mod loss;
pub mod optim;
pub mod regularization;
pub mod schedule;
pub mod trainer;

pub use config::TrainConfig;
pub use loss::{cross_entropy, smoothed_target};
pub use optim::{adam_step, clip_gradients, OptimizerState};
pub use regularization::{dropout_apply, dropout_backward};
pub use schedule::lr;
pub use trainer::{evaluate, held_out_set, teacher_forcing, train, StepRecord, TrainOutcome};
