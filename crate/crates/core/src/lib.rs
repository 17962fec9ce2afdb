//! Similarity-based self-supervised denoising.
//!
//! Training pairs are built from a single noisy image or volume: similar
//! pixels found by patch search stand in for independent noisy targets in
//! 2D, neighbouring slices (with a dissimilarity mask) in 3D/4D. A small
//! residual UNet is trained on those pairs with a hand-written backward
//! pass, Adam and a cosine learning-rate schedule.

pub mod error;
pub mod metrics;
pub mod nn;
pub mod noise;
pub mod rng;
pub mod search;
pub mod tensor;
pub mod textures;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{AxisLabel, Domain, Tensor};
