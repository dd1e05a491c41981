//! The distillation engine: losses, configuration, optimizer, training loop
//! and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod kd;
pub mod optim;
pub mod trainer;

pub use checkpoint::{DistillCheckpoint, NetworkCheckpoint};
pub use config::{DistillConfig, EncoderMode, Objective, Schedule};
pub use kd::{cross_entropy_with_grad, relational_reduction_loss, total_loss, vanilla_kd_loss, vanilla_kd_with_grad};
pub use optim::Sgd;
pub use trainer::{evaluate, pretrain_teacher, EpochMetrics, StepMetrics, TeacherOutputs, TrainState, Trainer};
