//! Small convolutional denoiser: kernels, model, optimizer and checkpoints.

pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod optim;

pub use checkpoint::{load_model, save_model, Checkpoint};
pub use model::{
    Architecture, DenoiserModel, Gradients, ModelCache, Normalization, Pattern, Session,
};
pub use optim::{adam_step, cosine_lr, OptimState, DEFAULT_LR};
