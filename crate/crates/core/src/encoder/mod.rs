//! Trainable transformer encoder, its optimizer and checkpoint format.

pub mod checkpoint;
pub mod config;
pub mod model;
pub(crate) mod ops;
pub mod optim;
pub mod params;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint, Manifest};
pub use config::EncoderConfig;
pub use model::{seeded_rng, Encoder, ForwardOutput, Mode, TaskHead, Tape, TrainRng};
pub use ops::{log_softmax, softmax_in_place};
pub use optim::{adamw_step, AdamWConfig, LrSchedule, OptimizerState};
pub use params::{Gradients, ParameterStore, Tensor};
