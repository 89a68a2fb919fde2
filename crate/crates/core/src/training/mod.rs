//! Optimisation, the training loop and gradient verification.

pub mod ablation;
pub mod config;
pub mod gradcheck;
pub mod optim;
pub mod trainer;

pub use self::ablation::{run_ablation, AblationPlan, AblationRow};
pub use self::config::TrainConfig;
pub use self::optim::{adam_step, poly_lr, AdamConfig, AdamState};
pub use self::trainer::{evaluate, train, StepRecord, TrainSummary, Trainer};
