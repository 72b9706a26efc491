//! Adam, the triangular cyclic learning rate, and the training loop.

mod adam;
mod schedule;
mod train;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPS};
pub use schedule::{cyclic_lr, CyclicLr};
pub use train::{
    select_subset, train, write_loss_log, Initial, LogRow, TrainConfig, TrainOutcome, TrainingCase, SYNTHETIC_FRACTIONS,
};
