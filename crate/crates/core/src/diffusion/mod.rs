//! Noise schedule, chunk layout, chunk-parallel training, token fusion and samplers.

mod fusion;
mod layout;
mod sample;
mod schedule;
mod train;

pub use fusion::{drop_local, fuse_tokens, fuse_value, fusion_active, FusionConfig, FusionMode};
pub use layout::{make_chunk_layout, ChunkLayout};
pub use sample::{
    ar_plan, sample, sample_autoregressive, sample_monolithic, ArWindow, ChunkOrder, SampleOptions, SampleOutput,
    SampleStats,
};
pub use schedule::{add_noise, add_noise_with, build_schedule, ddpm_step, ddpm_update, NoiseSchedule};
pub use train::{draw_noise, loss_and_grads, train_step, LossOutput, StepNoise, TrainExample, TrainOptions};
