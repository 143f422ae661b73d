//! Forward/reverse diffusion processes, the noise-prediction training loss,
//! ancestral sampling, the denoiser network and an optional KL-regularized
//! latent codec.

pub mod codec;
pub mod model;
pub mod ops;
pub mod sampler;
pub mod schedule;

pub use codec::LatentCodec;
pub use model::{ArchConfig, BackwardResult, DenoiserModel};
pub use ops::{forward_sample, loss_eps, loss_eps_with_grads, x0_from_eps};
pub use sampler::{ancestral_sample, ancestral_sample_with};
pub use schedule::{make_schedule, NoiseSchedule, ScheduleKind};
