//! Toy decoder-only language model, its checkpoints and training loop.

pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod params;
pub mod train;
pub mod transformer;

pub use checkpoint::{init_model, Checkpoint, TrainState};
pub use config::ModelConfig;
pub use optim::AdamW;
pub use params::{ParamLayout, Params, TensorInfo};
pub use train::{run_schedule, Stage, StageCurve, TrainOutcome, TrainSchedule};
pub use transformer::{target_log_probs, KvCache, Transformer};
