//! Analytic ground truth: a tiny ray tracer over spheres and disks with
//! Lambertian + Phong shading (no shadows), viewed by cameras on a sphere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Split, View};
use crate::error::{Error, Result};
use crate::metrics::Image;
use crate::par::{self, Exec};
use crate::render::{Camera, Ray};
use crate::vec3::{self, V3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub albedo: [f64; 3],
    pub specular: [f64; 3],
    /// Phong exponent.
    pub shininess: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    /// Two-sided flat disk.
    Disk {
        center: [f64; 3],
        normal: [f64; 3],
        radius: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub material: Material,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Light {
    /// `direction` points from the scene toward the light.
    Directional { direction: [f64; 3], intensity: [f64; 3] },
    /// No distance falloff.
    Point { position: [f64; 3], intensity: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub background: [f64; 3],
    pub ambient: [f64; 3],
    pub objects: Vec<Object>,
    pub lights: Vec<Light>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self::specular_sphere()
    }
}

impl SceneSpec {
    /// Reddish sphere with a strong white highlight under two lights.
    pub fn specular_sphere() -> Self {
        SceneSpec {
            background: [1.0; 3],
            ambient: [0.15; 3],
            objects: vec![Object {
                shape: Shape::Sphere {
                    center: [0.0; 3],
                    radius: 1.0,
                },
                material: Material {
                    albedo: [0.7, 0.25, 0.2],
                    specular: [0.8; 3],
                    shininess: 32.0,
                },
            }],
            lights: vec![
                Light::Directional {
                    direction: [0.5, 0.4, 0.75],
                    intensity: [0.75; 3],
                },
                Light::Point {
                    position: [-3.0, 2.0, 1.5],
                    intensity: [0.45; 3],
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for o in &self.objects {
            let ok = match &o.shape {
                Shape::Sphere { radius, .. } => *radius > 0.0,
                Shape::Disk { normal, radius, .. } => *radius > 0.0 && vec3::normalize(*normal).is_some(),
            };
            if !ok || o.material.shininess < 0.0 {
                return Err(Error::InvalidConfig("degenerate procedural object".into()));
            }
        }
        for l in &self.lights {
            if let Light::Directional { direction, .. } = l {
                if vec3::normalize(*direction).is_none() {
                    return Err(Error::InvalidConfig("zero light direction".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProceduralConfig {
    pub scene: SceneSpec,
    pub n_views: usize,
    pub resolution: u32,
    pub seed: u64,
    /// Every `holdout_every`-th view (1-based) goes to the test split; 0 keeps
    /// everything for training.
    pub holdout_every: usize,
    pub camera_radius: f64,
    pub fov_x: f64,
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
}

impl Default for ProceduralConfig {
    fn default() -> Self {
        ProceduralConfig {
            scene: SceneSpec::specular_sphere(),
            n_views: 20,
            resolution: 64,
            seed: 0,
            holdout_every: 5,
            camera_radius: 4.0,
            fov_x: 0.7,
            bbox_min: [-1.5; 3],
            bbox_max: [1.5; 3],
        }
    }
}

struct Hit {
    t: f64,
    normal: V3<f64>,
    object: usize,
}

fn intersect(shape: &Shape, ray: &Ray<f64>) -> Option<(f64, V3<f64>)> {
    const T_MIN: f64 = 1e-9;
    match shape {
        Shape::Sphere { center, radius } => {
            let oc = vec3::sub(ray.origin, *center);
            let b = vec3::dot(oc, ray.dir);
            let c = vec3::dot(oc, oc) - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t = if -b - sq > T_MIN { -b - sq } else { -b + sq };
            if t <= T_MIN {
                return None;
            }
            let n = vec3::scale(vec3::sub(ray.at(t), *center), 1.0 / radius);
            Some((t, n))
        }
        Shape::Disk { center, normal, radius } => {
            let n = vec3::normalize(*normal)?;
            let denom = vec3::dot(n, ray.dir);
            if denom.abs() < 1e-12 {
                return None;
            }
            let t = vec3::dot(vec3::sub(*center, ray.origin), n) / denom;
            if t <= T_MIN {
                return None;
            }
            let off = vec3::sub(ray.at(t), *center);
            if vec3::dot(off, off) > radius * radius {
                return None;
            }
            Some((t, if denom > 0.0 { vec3::scale(n, -1.0) } else { n }))
        }
    }
}

fn nearest(scene: &SceneSpec, ray: &Ray<f64>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, o) in scene.objects.iter().enumerate() {
        if let Some((t, normal)) = intersect(&o.shape, ray) {
            if best.as_ref().is_none_or(|b| t < b.t) {
                best = Some(Hit { t, normal, object: i });
            }
        }
    }
    best
}

/// Lambertian + Phong radiance leaving `point` with normal `n` toward the
/// viewer along `-view_dir`, clamped to `[0, 1]`.
pub fn shade(scene: &SceneSpec, material: &Material, point: V3<f64>, n: V3<f64>, view_dir: V3<f64>) -> [f64; 3] {
    let v = vec3::scale(view_dir, -1.0);
    let mut diffuse = scene.ambient;
    let mut specular = [0.0; 3];
    for light in &scene.lights {
        let (l, intensity) = match light {
            Light::Directional { direction, intensity } => (vec3::normalize(*direction).expect("validated"), *intensity),
            Light::Point { position, intensity } => match vec3::normalize(vec3::sub(*position, point)) {
                Some(l) => (l, *intensity),
                None => continue,
            },
        };
        let nl = vec3::dot(n, l);
        if nl <= 0.0 {
            continue;
        }
        let r = vec3::sub(vec3::scale(n, 2.0 * nl), l);
        let rv = vec3::dot(r, v).max(0.0).powf(material.shininess);
        for c in 0..3 {
            diffuse[c] += intensity[c] * nl;
            specular[c] += intensity[c] * rv;
        }
    }
    std::array::from_fn(|c| (material.albedo[c] * diffuse[c] + material.specular[c] * specular[c]).clamp(0.0, 1.0))
}

/// Color seen along `ray`.
pub fn trace(scene: &SceneSpec, ray: &Ray<f64>) -> [f64; 3] {
    match nearest(scene, ray) {
        None => scene.background,
        Some(hit) => shade(
            scene,
            &scene.objects[hit.object].material,
            ray.at(hit.t),
            hit.normal,
            ray.dir,
        ),
    }
}

pub fn render_view(scene: &SceneSpec, camera: &Camera) -> Result<Image> {
    let (w, h) = (camera.width, camera.height);
    let mut data = Vec::with_capacity((w * h * 3) as usize);
    for y in 0..h {
        for x in 0..w {
            data.extend(trace(scene, &camera.ray(x, y)));
        }
    }
    Image::from_clamped(w as usize, h as usize, data)
}

/// Camera positions on a golden spiral over the full sphere, rotated about
/// +z by a seed-dependent angle.
pub fn camera_ring(cfg: &ProceduralConfig) -> Result<Vec<Camera>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let phase = rng.random::<f64>() * std::f64::consts::TAU;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..cfg.n_views)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / cfg.n_views as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = phase + golden * i as f64;
            let eye = vec3::scale([r * phi.cos(), r * phi.sin(), z], cfg.camera_radius);
            Camera::look_at(eye, [0.0; 3], cfg.resolution, cfg.resolution, cfg.fov_x)
        })
        .collect()
}

/// Renders the configured scene from `n_views` cameras.
pub fn procedural_scene(cfg: &ProceduralConfig) -> Result<Dataset> {
    cfg.scene.validate()?;
    if cfg.resolution == 0 || cfg.camera_radius <= 0.0 {
        return Err(Error::InvalidConfig("procedural resolution and camera radius must be positive".into()));
    }
    let cameras = camera_ring(cfg)?;
    let images: Vec<Image> = par::map(Exec::Parallel, &cameras, |c| render_view(&cfg.scene, c))
        .into_iter()
        .collect::<Result<_>>()?;
    let views = cameras
        .into_iter()
        .zip(images)
        .enumerate()
        .map(|(i, (camera, image))| {
            let split = if cfg.holdout_every > 0 && i % cfg.holdout_every == cfg.holdout_every - 1 {
                Split::Test
            } else {
                Split::Train
            };
            View { camera, image, split }
        })
        .collect();
    Dataset::new(views, cfg.bbox_min, cfg.bbox_max)
}
