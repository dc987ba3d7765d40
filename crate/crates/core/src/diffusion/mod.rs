//! Latent diffusion generator: orthogonal codec, cosine noise schedule,
//! conditional transformer denoiser with low-rank adapters, and DDIM.

pub mod codec;
pub mod denoiser;
pub mod pretrain;
pub mod sample;
pub mod schedule;

pub use codec::Codec;
pub use denoiser::{attach_adapters, denoiser_forward, init_denoiser, AdapterConfig};
pub use schedule::{add_noise, ddim_step, make_schedule, NoiseSchedule, ScheduleKind};
