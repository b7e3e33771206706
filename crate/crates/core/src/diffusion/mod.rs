//! Toy conditional diffusion model over 2-D points.

pub mod data;
pub mod model;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use data::{Condition, Style, ToyDataset};
pub use model::{ffn_layer_name, ActivationRecorder, GegluFfn, ModelConfig, ToyDenoiser};
pub use sampler::sample;
pub use schedule::{forward_noise, make_schedule, DiffusionSchedule, ScheduleParams};
pub use train::{train, TrainConfig, TrainReport, UpdateRule};
