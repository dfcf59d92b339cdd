//! Noise schedule, the forward/reverse diffusion algebra and training.

mod normalize;
mod schedule;
pub mod train;

pub use normalize::{Normalizer, MIN_STD};
pub use schedule::{make_schedule, DiffusionSchedule, ScheduleSpec};
pub use train::{train, write_loss_csv, TrainConfig, TrainReport};
