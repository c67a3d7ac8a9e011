//! Optimization, synthetic data, augmentation, checkpoints and the variant
//! comparison harness.

pub mod ablation;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod synth;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use trainer::{evaluate, test_set, EvalReport, StepStats, TrainData, Trainer};
