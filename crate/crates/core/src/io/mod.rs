//! Datasets, image files and checkpoints.

pub mod checkpoint;
pub mod dataset;
pub mod images;
pub mod procedural;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use dataset::{load_nerf_synthetic, Dataset, Split, View};
pub use procedural::{procedural_scene, ProceduralConfig, SceneSpec};
