//! Run configuration: one JSON document holding the model, renderer,
//! training and data sections. Missing keys take the full-scale defaults;
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::io::procedural::{ProceduralConfig, SceneSpec};
use crate::par::Exec;
use crate::train::TrainConfig;

/// Where the rendering equation encoding lives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReeSpace {
    /// Concatenated ASG responses feed a directional MLP.
    #[default]
    Feature,
    /// Ablation: 3-wide ASG features are summed straight into the specular
    /// color; the directional MLP is unused.
    Color,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub appearance: FieldConfig,
    pub density: FieldConfig,
    /// Added to the summed density features before the softplus.
    pub density_shift: f64,
    pub lobe_rows: usize,
    pub lobe_cols: usize,
    /// Width of each per-lobe feature `a_i` in feature-space mode.
    pub asg_channels: usize,
    pub bottleneck: usize,
    pub spatial_hidden: usize,
    /// Number of affine layers, output layer included.
    pub spatial_layers: usize,
    pub directional_hidden: usize,
    pub directional_layers: usize,
    pub ree_space: ReeSpace,
    /// Use `-d` instead of the ray direction in the reflection.
    pub negate_view: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            appearance: FieldConfig::appearance(),
            density: FieldConfig::density(),
            density_shift: 0.0,
            lobe_rows: 8,
            lobe_cols: 16,
            asg_channels: 2,
            bottleneck: 128,
            spatial_hidden: 256,
            spatial_layers: 3,
            directional_hidden: 256,
            directional_layers: 6,
            ree_space: ReeSpace::Feature,
            negate_view: false,
        }
    }
}

impl ModelConfig {
    /// Desk-scale model: 4 levels from 16 to 64 and 64-unit MLPs.
    pub fn desk() -> Self {
        let appearance = FieldConfig {
            n_min: 16,
            n_max: 64,
            levels: 4,
            ..FieldConfig::appearance()
        };
        ModelConfig {
            density: FieldConfig {
                channels: 2,
                ..appearance.clone()
            },
            appearance,
            spatial_hidden: 64,
            directional_hidden: 64,
            ..Self::default()
        }
    }

    /// Gradient-check scale: 2 levels 4→8, 2 channels, 4 lobes, 16-unit MLPs.
    pub fn tiny() -> Self {
        let appearance = FieldConfig {
            n_min: 4,
            n_max: 8,
            levels: 2,
            channels: 2,
            bbox_min: [-1.0; 3],
            bbox_max: [1.0; 3],
            init_std: 0.5,
        };
        ModelConfig {
            density: appearance.clone(),
            appearance,
            density_shift: 0.0,
            lobe_rows: 2,
            lobe_cols: 2,
            asg_channels: 2,
            bottleneck: 4,
            spatial_hidden: 16,
            spatial_layers: 2,
            directional_hidden: 16,
            directional_layers: 2,
            ree_space: ReeSpace::Feature,
            negate_view: false,
        }
    }

    pub fn n_lobes(&self) -> usize {
        self.lobe_rows * self.lobe_cols
    }

    /// Width of each `a_i` as produced by the spatial MLP.
    pub fn lobe_feature_width(&self) -> usize {
        match self.ree_space {
            ReeSpace::Feature => self.asg_channels,
            ReeSpace::Color => 3,
        }
    }

    pub fn raw_width(&self) -> usize {
        9 + self.bottleneck + (self.lobe_feature_width() + 2) * self.n_lobes()
    }

    pub fn directional_input(&self) -> usize {
        self.n_lobes() * self.asg_channels + self.bottleneck
    }

    pub fn spatial_widths(&self) -> Vec<usize> {
        layer_widths(
            self.appearance.feature_len(),
            self.spatial_hidden,
            self.spatial_layers,
            self.raw_width(),
        )
    }

    pub fn directional_widths(&self) -> Vec<usize> {
        layer_widths(
            self.directional_input(),
            self.directional_hidden,
            self.directional_layers,
            3,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.appearance.validate()?;
        self.density.validate()?;
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.lobe_rows == 0 || self.lobe_cols == 0 {
            return bad("lobe grid must be at least 1x1");
        }
        if self.asg_channels == 0 {
            return bad("asg_channels must be >= 1");
        }
        if self.spatial_layers == 0 || self.directional_layers == 0 {
            return bad("MLPs need at least one layer");
        }
        if (self.spatial_layers > 1 && self.spatial_hidden == 0)
            || (self.directional_layers > 1 && self.directional_hidden == 0)
        {
            return bad("hidden widths must be >= 1");
        }
        if !self.density_shift.is_finite() {
            return bad("density_shift must be finite");
        }
        Ok(())
    }
}

fn layer_widths(input: usize, hidden: usize, layers: usize, output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend(std::iter::repeat_n(hidden, layers - 1));
    w.push(output);
    w
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub samples_per_ray: usize,
    /// Samples with compositing weight at or below this skip the appearance path.
    pub weight_threshold: f64,
    pub background: [f64; 3],
    /// Rays processed together through the batched MLPs.
    pub chunk_rays: usize,
    pub exec: Exec,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            samples_per_ray: 512,
            weight_threshold: 1e-4,
            background: [1.0; 3],
            chunk_rays: 256,
            exec: Exec::Parallel,
        }
    }
}

impl RenderConfig {
    pub fn desk() -> Self {
        RenderConfig {
            samples_per_ray: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray == 0 || self.chunk_rays == 0 {
            return Err(Error::InvalidConfig(
                "samples_per_ray and chunk_rays must be >= 1".into(),
            ));
        }
        if !(self.weight_threshold >= 0.0) {
            return Err(Error::InvalidConfig("weight_threshold must be >= 0".into()));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidConfig("background must lie in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// `transforms_{split}.json` + RGBA PNG layout; train and test splits
    /// are loaded, images box-downscaled by `downscale`.
    NerfSynthetic {
        dir: PathBuf,
        #[serde(default = "one")]
        downscale: usize,
    },
    Procedural(ProceduralConfig),
}

fn one() -> usize {
    1
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Procedural(ProceduralConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub render: RenderConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub precision: Precision,
}

impl RunConfig {
    /// Desk-scale overfit: procedural specular sphere, 16 train + 4 test views
    /// at 64×64, 5000 steps of 1024 rays.
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            render: RenderConfig::desk(),
            train: TrainConfig::desk(),
            data: DataConfig::Procedural(ProceduralConfig {
                scene: SceneSpec::specular_sphere(),
                n_views: 20,
                resolution: 64,
                seed: 0,
                holdout_every: 5,
                ..ProceduralConfig::default()
            }),
            precision: Precision::F32,
        }
    }

    /// A short run on a small procedural scene, for smoke tests.
    pub fn smoke() -> Self {
        let mut cfg = Self::desk();
        cfg.model.appearance.n_max = 32;
        cfg.model.appearance.levels = 2;
        cfg.model.density.n_max = 32;
        cfg.model.density.levels = 2;
        cfg.model.lobe_rows = 4;
        cfg.model.lobe_cols = 8;
        cfg.model.bottleneck = 16;
        cfg.model.spatial_hidden = 32;
        cfg.model.directional_hidden = 32;
        cfg.render.samples_per_ray = 32;
        cfg.train.steps = 200;
        cfg.train.batch_rays = 256;
        cfg.train.eval_every = 100;
        cfg.train.checkpoint_every = 100;
        if let DataConfig::Procedural(p) = &mut cfg.data {
            p.resolution = 24;
            p.n_views = 5;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.render.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::file(path, e))
    }
}
