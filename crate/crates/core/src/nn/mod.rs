//! Minimal f64 neural-network toolkit with explicit backprop.
//!
//! Everything here is deterministic: forward passes are pure functions of
//! (parameters, inputs), gradients are computed analytically, and parameter
//! updates happen only through the optimizers. The denoiser, the latent
//! codec, the hypernetwork, the segmentor and the probe classifiers are all
//! built from these pieces.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod store;

pub use layers::{silu, silu_grad, AvgPool2, Conv2d, Linear, UpsampleNearest2};
pub use optim::{Adam, Optimizer, Sgd};
pub use store::{Grads, ParamId, ParamStore};
