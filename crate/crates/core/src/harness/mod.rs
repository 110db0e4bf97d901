//! Training, evaluation, checkpoints, configuration and the command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod eval;
pub mod gradsuite;
pub mod model;
pub mod optim;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use eval::{evaluate, Evaluation};
pub use model::Model;
pub use optim::AdamW;
pub use train::{continue_training, train, RunDir, TrainOutcome};
