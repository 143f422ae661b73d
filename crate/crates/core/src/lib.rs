//! Core library for the crackforge pipeline.
//!
//! The pipeline adapts a small pixel-space denoising diffusion model to a new
//! visual concept (with class-specific prior preservation), then trains a
//! hypernetwork that conditions generation on topological drivers carrying
//! exact defect masks. Around that sit the dataset tooling (COCO-style
//! annotations, a procedural crack-texture generator, offline augmentation,
//! SADF pairing), the self-annotated synthesis pipeline, the evaluation
//! metrics (FID, pairwise L2, mutual information, IoU, Hausdorff, mAP), and a
//! downstream segmentation harness used to compare training regimes.
//!
//! All stochastic operations take explicit seeds; there is no hidden global
//! RNG. Numeric code is `f64` end to end so analytic gradients can be checked
//! against finite differences.

pub mod checkpoint;
pub mod concept;
pub mod condition;
pub mod dataset;
pub mod diffusion;
pub mod driver;
pub mod error;
pub mod hash;
pub mod imgproc;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod segmentation;
pub mod synthesis;
pub mod text;

pub use error::{CoreError, Result};
