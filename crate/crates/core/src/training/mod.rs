//! Desk-scale optimization of a completion network: loss, optimizers,
//! plateau learning-rate schedule, augmentation, and the training loop.

mod augment;
mod loss;
mod optimizer;
mod run;
mod schedule;

pub use augment::{augment, AugmentConfig};
pub use loss::{completion_loss, completion_loss_on_tape, LossConfig};
pub use optimizer::{optimizer_step, OptimizerConfig, OptimizerMode, OptimizerState};
pub use run::{
    stack_samples, train_loop, Dataset, EpochLog, ScheduleConfig, TrainOptions, TrainReport,
    TrainSample,
};
pub use schedule::{plateau_schedule, PlateauTracker, LR_FLOOR};
