//! Posed image collections and the NeRF-synthetic loader.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::images::load_rgba_over;
use super::procedural::procedural_scene;
use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::metrics::Image;
use crate::render::Camera;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidInput(format!("unknown split {s:?} (train, val, test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub image: Image,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub views: Vec<View>,
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
}

impl Dataset {
    pub fn new(views: Vec<View>, bbox_min: [f64; 3], bbox_max: [f64; 3]) -> Result<Self> {
        if let Some(first) = views.first() {
            let (w, h) = (first.image.width(), first.image.height());
            for v in &views {
                if v.image.width() != w || v.image.height() != h {
                    return Err(Error::Dataset("images differ in size".into()));
                }
                if v.camera.width as usize != w || v.camera.height as usize != h {
                    return Err(Error::Dataset("camera size does not match its image".into()));
                }
            }
        }
        if (0..3).any(|k| bbox_min[k] >= bbox_max[k]) {
            return Err(Error::Dataset("scene bbox is empty".into()));
        }
        Ok(Dataset {
            views,
            bbox_min,
            bbox_max,
        })
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&View> {
        self.views.iter().filter(|v| v.split == split).collect()
    }

    /// Views of `split`, falling back to the training views when it is empty.
    pub fn eval_views(&self, split: Split) -> Vec<&View> {
        let views = self.split(split);
        if views.is_empty() {
            self.split(Split::Train)
        } else {
            views
        }
    }
}

#[derive(Deserialize)]
struct Transforms {
    camera_angle_x: f64,
    frames: Vec<Frame>,
}

#[derive(Deserialize)]
struct Frame {
    file_path: String,
    transform_matrix: Vec<Vec<f64>>,
}

fn parse_matrix(m: &[Vec<f64>], frame: usize) -> Result<[[f64; 4]; 4]> {
    if m.len() != 4 || m.iter().any(|r| r.len() != 4) {
        return Err(Error::Dataset(format!("frame {frame}: transform_matrix is not 4x4")));
    }
    Ok(std::array::from_fn(|r| std::array::from_fn(|c| m[r][c])))
}

/// Box-filter downscale by an integer factor (trailing rows/columns dropped).
fn downscale(image: &Image, factor: usize) -> Result<Image> {
    if factor == 1 {
        return Ok(image.clone());
    }
    let (w, h) = (image.width() / factor, image.height() / factor);
    if w == 0 || h == 0 {
        return Err(Error::Dataset(format!("downscale factor {factor} too large")));
    }
    let norm = 1.0 / (factor * factor) as f64;
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for dy in 0..factor {
                for dx in 0..factor {
                    let p = image.pixel(x * factor + dx, y * factor + dy);
                    for c in 0..3 {
                        acc[c] += p[c] as f64;
                    }
                }
            }
            data.extend(acc.iter().map(|a| a * norm));
        }
    }
    Image::from_clamped(w, h, data)
}

/// Loads `transforms_{split}.json` and its RGBA frames from `dir`.
pub fn load_nerf_synthetic(dir: &Path, split: Split, background: [f64; 3]) -> Result<Dataset> {
    load_nerf_synthetic_scaled(dir, split, background, 1)
}

pub fn load_nerf_synthetic_scaled(dir: &Path, split: Split, background: [f64; 3], factor: usize) -> Result<Dataset> {
    if factor == 0 {
        return Err(Error::InvalidInput("downscale factor must be >= 1".into()));
    }
    let path = dir.join(format!("transforms_{}.json", split.as_str()));
    let text = std::fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
    let tf: Transforms =
        serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let mut views = Vec::with_capacity(tf.frames.len());
    for (i, frame) in tf.frames.iter().enumerate() {
        let pose = parse_matrix(&frame.transform_matrix, i)?;
        let mut file = PathBuf::from(&frame.file_path);
        if file.extension().is_none() {
            file.set_extension("png");
        }
        let image = downscale(&load_rgba_over(&dir.join(&file), background)?, factor)?;
        let camera = Camera::new(image.width() as u32, image.height() as u32, tf.camera_angle_x, pose)
            .map_err(|e| Error::Dataset(format!("frame {i}: {e}")))?;
        views.push(View { camera, image, split });
    }
    Dataset::new(views, [-1.5; 3], [1.5; 3])
}

/// Builds the dataset described by a run configuration.
pub fn load_data(cfg: &DataConfig, background: [f64; 3]) -> Result<Dataset> {
    match cfg {
        DataConfig::Procedural(p) => procedural_scene(p),
        DataConfig::NerfSynthetic { dir, downscale } => {
            let mut views = Vec::new();
            for split in [Split::Train, Split::Test] {
                views.extend(load_nerf_synthetic_scaled(dir, split, background, *downscale)?.views);
            }
            Dataset::new(views, [-1.5; 3], [1.5; 3])
        }
    }
}
