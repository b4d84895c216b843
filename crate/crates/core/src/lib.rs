//! Differentiable volumetric rendering with multiscale vector-matrix factorized
//! feature fields and an anisotropic spherical Gaussian (ASG) encoding of view
//! dependent appearance.
//!
//! The crate is organised bottom-up:
//!
//! * [`field`] stores the factorized feature grids and samples them.
//! * [`encoding`] builds the fixed lobe frames and evaluates the ASG encoding.
//! * [`net`] holds the spatial/directional MLPs and the parameter decoding heads.
//! * [`render`] generates rays, marches them and composites samples, with a
//!   hand-derived reverse pass for training.
//! * [`diff`] groups all learnable tensors and checks gradients numerically.
//! * [`train`] implements the loss, Adam and the training loop.
//! * [`metrics`] and [`io`] cover evaluation, datasets and checkpoints.
//!
//! Everything numeric is generic over [`Real`] so that training can run in
//! `f32` while gradient checks run in `f64`.

pub mod cli;
pub mod config;
pub mod diff;
pub mod encoding;
pub mod error;
pub mod field;
pub mod io;
pub mod metrics;
pub mod net;
pub mod par;
pub mod real;
pub mod render;
pub mod train;
mod vec3;

pub use config::{ModelConfig, Precision, ReeSpace, RenderConfig, RunConfig};
pub use diff::{GradientReport, ParameterSet};
pub use error::{Error, Result};
pub use field::{FeatureField, FieldConfig};
pub use real::Real;
pub use render::Camera;
pub use train::{TrainConfig, TrainState};
