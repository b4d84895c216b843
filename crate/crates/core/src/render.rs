//! Ray generation, marching, compositing and the batched render pipeline.
//!
//! [`Pipeline`] evaluates rays in chunks: densities for every sample, then the
//! full appearance path (field → spatial MLP → decode → reflect → ASG encode →
//! directional MLP → sigmoid) only for samples whose compositing weight
//! exceeds the threshold. Skipped samples hand their weight to the
//! background. The same chunk structure runs in reverse for training.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, ReeSpace, RenderConfig};
use crate::diff::ParameterSet;
use crate::encoding::{self, build_lobe_frames, AsgFrame};
use crate::error::{Error, Result};
use crate::net::{
    decode_normal, decode_normal_backward, decode_params, final_color, MlpTrace, ParamBundle, ParamLayout,
};
use crate::par;
use crate::real::{sigmoid, softplus, softplus_with_slope, Real};
use crate::vec3::{self, V3};

/// Pinhole camera. `pose` is camera-to-world with the camera looking down
/// its local −z axis, +y up and +x right.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: u32,
    pub height: u32,
    /// Horizontal field of view in radians.
    pub fov_x: f64,
    pub pose: [[f64; 4]; 4],
}

impl Camera {
    pub fn new(width: u32, height: u32, fov_x: f64, pose: [[f64; 4]; 4]) -> Result<Self> {
        let cam = Camera {
            width,
            height,
            fov_x,
            pose,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("camera must have nonzero size".into()));
        }
        if !(self.fov_x > 0.0 && self.fov_x < std::f64::consts::PI) {
            return Err(Error::InvalidInput(format!("fov_x {} outside (0, π)", self.fov_x)));
        }
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| self.pose[k][i] * self.pose[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-4 {
                    return Err(Error::InvalidInput("camera rotation is not orthonormal".into()));
                }
            }
        }
        Ok(())
    }

    pub fn focal(&self) -> f64 {
        0.5 * self.width as f64 / (0.5 * self.fov_x).tan()
    }

    pub fn origin(&self) -> V3<f64> {
        [self.pose[0][3], self.pose[1][3], self.pose[2][3]]
    }

    /// Ray through the center of pixel `(px, py)`; row 0 is the top row.
    pub fn ray(&self, px: u32, py: u32) -> Ray<f64> {
        let f = self.focal();
        let x = (px as f64 + 0.5 - 0.5 * self.width as f64) / f;
        let y = -(py as f64 + 0.5 - 0.5 * self.height as f64) / f;
        let local = [x, y, -1.0];
        let p = &self.pose;
        let world: V3<f64> = std::array::from_fn(|r| p[r][0] * local[0] + p[r][1] * local[1] + p[r][2] * local[2]);
        Ray {
            origin: self.origin(),
            dir: vec3::normalize(world).expect("nonzero pixel direction"),
        }
    }

    /// Camera on a sphere around `target`, looking at it with +z as up hint.
    pub fn look_at(eye: V3<f64>, target: V3<f64>, width: u32, height: u32, fov_x: f64) -> Result<Self> {
        let back = vec3::normalize(vec3::sub(eye, target))
            .ok_or_else(|| Error::InvalidInput("eye coincides with target".into()))?;
        let up_hint = if back[2].abs() > 0.999 { [0.0, 1.0, 0.0] } else { [0.0, 0.0, 1.0] };
        let right = vec3::normalize(vec3::cross(up_hint, back)).expect("non-degenerate basis");
        let up = vec3::cross(back, right);
        let mut pose = [[0.0; 4]; 4];
        for r in 0..3 {
            pose[r][0] = right[r];
            pose[r][1] = up[r];
            pose[r][2] = back[r];
            pose[r][3] = eye[r];
        }
        pose[3][3] = 1.0;
        Camera::new(width, height, fov_x, pose)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray<T> {
    pub origin: V3<T>,
    /// Unit direction from the camera into the scene.
    pub dir: V3<T>,
}

impl Ray<f64> {
    pub fn cast<T: Real>(&self) -> Ray<T> {
        Ray {
            origin: vec3::cast(self.origin),
            dir: vec3::cast(self.dir),
        }
    }
}

impl<T: Real> Ray<T> {
    #[inline(always)]
    pub fn at(&self, t: T) -> V3<T> {
        vec3::add(self.origin, vec3::scale(self.dir, t))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RayBatch<T> {
    pub origins: Vec<V3<T>>,
    pub directions: Vec<V3<T>>,
    pub gt_colors: Option<Vec<V3<T>>>,
}

impl<T: Real> RayBatch<T> {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn rays(&self) -> Vec<Ray<T>> {
        self.origins
            .iter()
            .zip(&self.directions)
            .map(|(&origin, &dir)| Ray { origin, dir })
            .collect()
    }
}

pub fn generate_rays(camera: &Camera, pixels: &[(u32, u32)]) -> Result<RayBatch<f64>> {
    let mut batch = RayBatch::default();
    for &(px, py) in pixels {
        if px >= camera.width || py >= camera.height {
            return Err(Error::InvalidInput(format!(
                "pixel ({px}, {py}) outside {}x{} image",
                camera.width, camera.height
            )));
        }
        let ray = camera.ray(px, py);
        batch.origins.push(ray.origin);
        batch.directions.push(ray.dir);
    }
    Ok(batch)
}

/// Slab intersection with an axis-aligned box. Returns `(max(t_near, 0), t_far)`
/// or `None` when `t_far <= max(t_near, 0)`.
pub fn clip_to_bbox<T: Real>(origin: V3<T>, dir: V3<T>, bmin: V3<T>, bmax: V3<T>) -> Option<(T, T)> {
    let mut t_near = T::neg_infinity();
    let mut t_far = T::infinity();
    for k in 0..3 {
        if dir[k] == T::zero() {
            if origin[k] < bmin[k] || origin[k] > bmax[k] {
                return None;
            }
            continue;
        }
        let inv = T::one() / dir[k];
        let t1 = (bmin[k] - origin[k]) * inv;
        let t2 = (bmax[k] - origin[k]) * inv;
        t_near = t_near.max(t1.min(t2));
        t_far = t_far.min(t1.max(t2));
    }
    let start = t_near.max(T::zero());
    if t_far <= start {
        None
    } else {
        Some((start, t_far))
    }
}

/// Depths and intervals of stratified samples.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet<T> {
    pub t: Vec<T>,
    pub deltas: Vec<T>,
}

/// `n` stratified samples on `[t_near, t_far]`. Bin `i` holds
/// `t_near + (i + u_i) h` with `u_i = ½` or the given offsets in `[0, 1)`;
/// `Δ_i = t_{i+1} − t_i` and the last interval is the bin width.
pub fn stratified_depths<T: Real>(t_near: T, t_far: T, n: usize, offsets: Option<&[T]>) -> SampleSet<T> {
    let h = (t_far - t_near) / T::lit(n as f64);
    let half = T::lit(0.5);
    let t: Vec<T> = (0..n)
        .map(|i| {
            let u = offsets.map_or(half, |o| o[i]);
            t_near + (T::lit(i as f64) + u) * h
        })
        .collect();
    let mut deltas: Vec<T> = t.windows(2).map(|w| w[1] - w[0]).collect();
    deltas.push(h);
    SampleSet { t, deltas }
}

/// Spec-level sampler: jitters within bins when an RNG is supplied.
pub fn sample_points<T: Real, R: Rng>(
    ray: &Ray<T>,
    t_near: T,
    t_far: T,
    n: usize,
    rng: Option<&mut R>,
) -> (Vec<V3<T>>, SampleSet<T>) {
    let offsets: Option<Vec<T>> = rng.map(|r| (0..n).map(|_| T::lit(r.random::<f64>())).collect());
    let set = stratified_depths(t_near, t_far, n, offsets.as_deref());
    let points = set.t.iter().map(|&t| ray.at(t)).collect();
    (points, set)
}

/// Compositing weights `w_i = T_i (1 − e^{−σ_i Δ_i})` and the final
/// transmittance `T_S`.
pub fn composite_weights<T: Real>(sigma: &[T], delta: &[T]) -> (Vec<T>, T) {
    let mut weights = Vec::with_capacity(sigma.len());
    let mut optical = T::zero();
    for (&s, &d) in sigma.iter().zip(delta) {
        let tau = s * d;
        let trans = (-optical).exp();
        weights.push(trans * -(-tau).exp_m1());
        optical += tau;
    }
    (weights, (-optical).exp())
}

/// Result of rendering one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RayOutput<T> {
    pub color: V3<T>,
    /// Expected depth `Σ w_i t_i`.
    pub depth: T,
    pub opacity: T,
    pub t: Vec<T>,
    pub weights: Vec<T>,
    /// Decoded normal for samples that went through the appearance path.
    pub normals: Vec<Option<V3<T>>>,
    /// Per-sample colors (background for skipped samples).
    pub colors: Vec<V3<T>>,
}

/// Density pass over one ray.
struct March<T> {
    ray: Ray<T>,
    t: Vec<T>,
    delta: Vec<T>,
    pre: Vec<T>,
    weights: Vec<T>,
    /// `T_k` for k = 0..=S (last entry is the final transmittance).
    trans: Vec<T>,
    kept: Vec<usize>,
}

impl<T: Real> March<T> {
    fn final_trans(&self) -> T {
        self.trans.last().copied().unwrap_or(T::one())
    }
}

/// Forward state of a chunk of rays.
struct Chunk<T> {
    marches: Vec<March<T>>,
    /// `(ray, sample)` for every kept sample.
    rows: Vec<(usize, usize)>,
    positions: Vec<V3<T>>,
    spatial: Option<MlpTrace<T>>,
    directional: Option<MlpTrace<T>>,
    /// Per row: λ, μ, then their softplus slopes, `n_lobes` each.
    bandwidths: Array2<T>,
    /// Normal, raw normal length and reflected direction per row.
    geometry: Vec<(V3<T>, T, V3<T>)>,
    /// Specular color per row, `rows × 3`.
    specular: Array2<T>,
    colors: Vec<V3<T>>,
    orient: Vec<T>,
    /// Composited color and orientation sum per ray.
    ray_colors: Vec<V3<T>>,
    ray_orient: Vec<T>,
}

/// Ray batch with ground truth for training.
#[derive(Clone, Debug)]
pub struct TrainBatch<T> {
    pub rays: Vec<Ray<T>>,
    pub gt: Vec<V3<T>>,
    /// `rays.len() × samples_per_ray` bin offsets in `[0, 1)`; bin centers
    /// when absent.
    pub jitter: Option<Vec<T>>,
}

/// Weights of the regularizers.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights<T> {
    pub alpha: T,
    pub beta: T,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub mse: f64,
    pub orientation: f64,
    pub density_l1: f64,
    pub total: f64,
    /// Samples evaluated through the appearance path.
    pub kept_samples: usize,
}

/// Immutable rendering context shared by inference and training.
pub struct Pipeline<T> {
    pub model: ModelConfig,
    pub render: RenderConfig,
    frames: Vec<AsgFrame<T>>,
    layout: ParamLayout,
    shift: T,
    threshold: T,
    background: V3<T>,
    bbox: (V3<T>, V3<T>),
}

impl<T: Real> Pipeline<T> {
    pub fn new(model: &ModelConfig, render: &RenderConfig) -> Result<Self> {
        model.validate()?;
        render.validate()?;
        let frames = build_lobe_frames(model.lobe_rows, model.lobe_cols)?.cast::<T>().frames;
        let layout = ParamLayout {
            n_lobes: model.n_lobes(),
            lobe_width: model.lobe_feature_width(),
            bottleneck: model.bottleneck,
        };
        // rays are clipped to the union of both field boxes
        let bmin: V3<f64> = std::array::from_fn(|k| model.appearance.bbox_min[k].min(model.density.bbox_min[k]));
        let bmax: V3<f64> = std::array::from_fn(|k| model.appearance.bbox_max[k].max(model.density.bbox_max[k]));
        Ok(Pipeline {
            model: model.clone(),
            render: render.clone(),
            frames,
            layout,
            shift: T::lit(model.density_shift),
            threshold: T::lit(render.weight_threshold),
            background: vec3::cast(render.background),
            bbox: (vec3::cast(bmin), vec3::cast(bmax)),
        })
    }

    pub fn layout(&self) -> ParamLayout {
        self.layout
    }

    fn check_params(&self, params: &ParameterSet<T>) -> Result<()> {
        let want = self.model.spatial_widths();
        if params.spatial.widths() != want {
            return Err(Error::InvalidInput(format!(
                "spatial MLP widths {:?} do not match model {:?}",
                params.spatial.widths(),
                want
            )));
        }
        if params.directional.widths() != self.model.directional_widths() {
            return Err(Error::InvalidInput("directional MLP widths do not match model".into()));
        }
        if params.appearance.config != self.model.appearance || params.density.config != self.model.density {
            return Err(Error::InvalidInput("field configuration does not match model".into()));
        }
        Ok(())
    }

    fn march(&self, params: &ParameterSet<T>, ray: Ray<T>, offsets: Option<&[T]>) -> Result<March<T>> {
        let s = self.render.samples_per_ray;
        let Some((t_near, t_far)) = clip_to_bbox(ray.origin, ray.dir, self.bbox.0, self.bbox.1) else {
            return Ok(March {
                ray,
                t: Vec::new(),
                delta: Vec::new(),
                pre: Vec::new(),
                weights: Vec::new(),
                trans: vec![T::one()],
                kept: Vec::new(),
            });
        };
        let set = stratified_depths(t_near, t_far, s, offsets);
        let mut pre = Vec::with_capacity(s);
        let mut weights = Vec::with_capacity(s);
        let mut trans = Vec::with_capacity(s + 1);
        let mut kept = Vec::new();
        let mut optical = T::zero();
        for (k, (&t, &d)) in set.t.iter().zip(&set.deltas).enumerate() {
            let p = self.shift + params.density.feature_sum(ray.at(t));
            let sigma = softplus(p);
            if !sigma.is_finite() {
                return Err(Error::non_finite("density field"));
            }
            let tau = sigma * d;
            let tk = (-optical).exp();
            let w = tk * -(-tau).exp_m1();
            if w > self.threshold {
                kept.push(k);
            }
            pre.push(p);
            weights.push(w);
            trans.push(tk);
            optical += tau;
        }
        trans.push((-optical).exp());
        Ok(March {
            ray,
            t: set.t,
            delta: set.deltas,
            pre,
            weights,
            trans,
            kept,
        })
    }

    fn forward_chunk(&self, params: &ParameterSet<T>, rays: &[Ray<T>], jitter: Option<&[T]>) -> Result<Chunk<T>> {
        let exec = self.render.exec;
        let s = self.render.samples_per_ray;
        let marches: Vec<March<T>> = par::map_range(exec, rays.len(), |i| {
            self.march(params, rays[i], jitter.map(|j| &j[i * s..(i + 1) * s]))
        })
        .into_iter()
        .collect::<Result<_>>()?;

        let rows: Vec<(usize, usize)> = marches
            .iter()
            .enumerate()
            .flat_map(|(r, m)| m.kept.iter().map(move |&k| (r, k)))
            .collect();
        let positions: Vec<V3<T>> = rows.iter().map(|&(r, k)| marches[r].ray.at(marches[r].t[k])).collect();
        let m = rows.len();

        let mut chunk = Chunk {
            marches,
            rows,
            positions,
            spatial: None,
            directional: None,
            bandwidths: Array2::zeros((0, 0)),
            geometry: Vec::new(),
            specular: Array2::zeros((m, 3)),
            colors: Vec::new(),
            orient: Vec::new(),
            ray_colors: Vec::new(),
            ray_orient: Vec::new(),
        };

        if m > 0 {
            self.appearance_forward(params, &mut chunk)?;
        }
        self.composite(&mut chunk);
        Ok(chunk)
    }

    fn appearance_forward(&self, params: &ParameterSet<T>, chunk: &mut Chunk<T>) -> Result<()> {
        let exec = self.render.exec;
        let m = chunk.rows.len();
        let layout = self.layout;
        let width = layout.lobe_width;
        let n_lobes = layout.n_lobes;

        let flen = params.appearance.feature_len();
        let mut features = Array2::<T>::zeros((m, flen));
        {
            let positions = &chunk.positions;
            par::for_each_row(exec, features.as_slice_mut().expect("standard layout"), flen, |r, row| {
                params.appearance.appearance_into(positions[r], row)
            });
        }
        let spatial = params.spatial.forward_batch(features);
        if spatial.output.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("spatial MLP forward"));
        }
        let raw = &spatial.output;

        let negate = self.model.negate_view;
        let geometry: Vec<(V3<T>, T, V3<T>)> = par::map_range(exec, m, |r| {
            let row = raw.row(r);
            let (n, len) = decode_normal([row[ParamLayout::N], row[ParamLayout::N + 1], row[ParamLayout::N + 2]]);
            let (ray, _) = chunk.rows[r];
            let d = chunk.marches[ray].ray.dir;
            let d = if negate { vec3::scale(d, -T::one()) } else { d };
            (n, len, encoding::reflect(d, n))
        });

        let lam_at = layout.lambda();
        let mut bandwidths = Array2::<T>::zeros((m, 4 * n_lobes));
        par::for_each_row(exec, bandwidths.as_slice_mut().expect("standard layout"), 4 * n_lobes, |r, out| {
            let row = raw.row(r);
            let src = &row.as_slice().expect("contiguous row")[lam_at..lam_at + 2 * n_lobes];
            let (values, slopes) = out.split_at_mut(2 * n_lobes);
            for ((v, sl), &x) in values.iter_mut().zip(slopes).zip(src) {
                (*v, *sl) = softplus_with_slope(x);
            }
        });

        match self.model.ree_space {
            ReeSpace::Feature => {
                let din = self.model.directional_input();
                let bottleneck = layout.bottleneck;
                let mut input = Array2::<T>::zeros((m, din));
                par::for_each_row(exec, input.as_slice_mut().expect("standard layout"), din, |r, out| {
                    let row = raw.row(r);
                    let raw_slice = row.as_slice().expect("contiguous row");
                    let bw = bandwidths.row(r);
                    let (lam, mu) = bw.as_slice().expect("contiguous row")[..2 * n_lobes].split_at(n_lobes);
                    let a = &raw_slice[layout.a()..layout.lambda()];
                    let (g, b) = out.split_at_mut(n_lobes * width);
                    encoding::encode_into(&self.frames, geometry[r].2, a, lam, mu, width, g, false);
                    b.copy_from_slice(&raw_slice[ParamLayout::B..ParamLayout::B + bottleneck]);
                });
                let dir = params.directional.forward_batch(input);
                chunk.specular = dir.output.clone();
                chunk.directional = Some(dir);
            }
            ReeSpace::Color => {
                let mut spec = Array2::<T>::zeros((m, 3));
                par::for_each_row(exec, spec.as_slice_mut().expect("standard layout"), 3, |r, out| {
                    let row = raw.row(r);
                    let raw_slice = row.as_slice().expect("contiguous row");
                    let bw = bandwidths.row(r);
                    let (lam, mu) = bw.as_slice().expect("contiguous row")[..2 * n_lobes].split_at(n_lobes);
                    let a = &raw_slice[layout.a()..layout.lambda()];
                    encoding::encode_into(&self.frames, geometry[r].2, a, lam, mu, 3, out, true);
                });
                chunk.specular = spec;
            }
        }

        let specular = &chunk.specular;
        let (colors, orient): (Vec<V3<T>>, Vec<T>) = par::map_range(exec, m, |r| {
            let row = raw.row(r);
            let c_d = [row[0], row[1], row[2]];
            let s = [row[3], row[4], row[5]];
            let cs = [specular[[r, 0]], specular[[r, 1]], specular[[r, 2]]];
            let c = final_color(c_d, s, cs);
            let (ray, _) = chunk.rows[r];
            let dn = vec3::dot(chunk.marches[ray].ray.dir, geometry[r].0).max(T::zero());
            (c, dn * dn)
        })
        .into_iter()
        .unzip();
        if colors.iter().any(|c| !vec3::is_finite(*c)) {
            return Err(Error::non_finite("color head"));
        }

        chunk.geometry = geometry;
        chunk.bandwidths = bandwidths;
        chunk.colors = colors;
        chunk.orient = orient;
        chunk.spatial = Some(spatial);
        Ok(())
    }

    fn composite(&self, chunk: &mut Chunk<T>) {
        let n = chunk.marches.len();
        let mut ray_colors = Vec::with_capacity(n);
        let mut ray_orient = vec![T::zero(); n];
        let mut kept_color = vec![[T::zero(); 3]; n];
        let mut kept_weight = vec![T::zero(); n];
        for (row, &(r, k)) in chunk.rows.iter().enumerate() {
            let w = chunk.marches[r].weights[k];
            let c = chunk.colors[row];
            for ch in 0..3 {
                kept_color[r][ch] += w * c[ch];
            }
            kept_weight[r] += w;
            ray_orient[r] += w * chunk.orient[row];
        }
        for r in 0..n {
            // skipped samples and the leftover transmittance see the background
            let rest = (T::one() - kept_weight[r]).max(T::zero());
            ray_colors.push(std::array::from_fn(|ch| kept_color[r][ch] + rest * self.background[ch]));
        }
        chunk.ray_colors = ray_colors;
        chunk.ray_orient = ray_orient;
    }

    /// Decoded spatial parameters at a point inside the appearance box.
    pub fn probe(&self, params: &ParameterSet<T>, point: V3<T>) -> Result<ParamBundle<T>> {
        self.check_params(params)?;
        let cfg = &self.model.appearance;
        if (0..3).any(|k| {
            let v = point[k].as_f64();
            !(v >= cfg.bbox_min[k] && v <= cfg.bbox_max[k])
        }) {
            return Err(Error::InvalidInput(format!(
                "probe point {:?} outside the scene box",
                vec3::to_f64(point)
            )));
        }
        let features = params.appearance.sample_appearance(point)?;
        let raw = params.spatial.forward(&features)?;
        decode_params(&raw, &self.layout)
    }

    /// Renders one ray with deterministic bin-center samples.
    pub fn render_ray(&self, params: &ParameterSet<T>, ray: Ray<T>) -> Result<RayOutput<T>> {
        Ok(self.render_rays_detailed(params, &[ray])?.pop().expect("one ray"))
    }

    /// Full per-ray output including per-sample weights.
    pub fn render_rays_detailed(&self, params: &ParameterSet<T>, rays: &[Ray<T>]) -> Result<Vec<RayOutput<T>>> {
        self.check_params(params)?;
        let mut out = Vec::with_capacity(rays.len());
        for chunk_rays in rays.chunks(self.render.chunk_rays) {
            let chunk = self.forward_chunk(params, chunk_rays, None)?;
            let mut row_of = std::collections::HashMap::new();
            for (row, &rk) in chunk.rows.iter().enumerate() {
                row_of.insert(rk, row);
            }
            for (r, m) in chunk.marches.iter().enumerate() {
                let mut normals = vec![None; m.t.len()];
                let mut colors = vec![self.background; m.t.len()];
                for &k in &m.kept {
                    let row = row_of[&(r, k)];
                    normals[k] = Some(chunk.geometry[row].0);
                    colors[k] = chunk.colors[row];
                }
                out.push(RayOutput {
                    color: chunk.ray_colors[r],
                    depth: m.weights.iter().zip(&m.t).map(|(&w, &t)| w * t).sum(),
                    opacity: m.weights.iter().copied().sum(),
                    t: m.t.clone(),
                    weights: m.weights.clone(),
                    normals,
                    colors,
                });
            }
        }
        Ok(out)
    }

    /// Colors and expected depths for many rays.
    pub fn render_rays(&self, params: &ParameterSet<T>, rays: &[Ray<T>]) -> Result<(Vec<V3<T>>, Vec<T>)> {
        self.check_params(params)?;
        let mut colors = Vec::with_capacity(rays.len());
        let mut depths = Vec::with_capacity(rays.len());
        for chunk_rays in rays.chunks(self.render.chunk_rays) {
            let chunk = self.forward_chunk(params, chunk_rays, None)?;
            colors.extend_from_slice(&chunk.ray_colors);
            depths.extend(
                chunk
                    .marches
                    .iter()
                    .map(|m| m.weights.iter().zip(&m.t).map(|(&w, &t)| w * t).sum::<T>()),
            );
        }
        Ok((colors, depths))
    }

    /// Loss on a batch and, when `grad` is given, its gradient accumulated
    /// into `grad` (which is not cleared first).
    pub fn loss_and_grad(
        &self,
        params: &ParameterSet<T>,
        batch: &TrainBatch<T>,
        weights: LossWeights<T>,
        mut grad: Option<&mut ParameterSet<T>>,
    ) -> Result<LossTerms> {
        self.check_params(params)?;
        let b = batch.rays.len();
        if b == 0 || batch.gt.len() != b {
            return Err(Error::shape("training batch ground truth", b, batch.gt.len()));
        }
        let s = self.render.samples_per_ray;
        if let Some(j) = &batch.jitter {
            if j.len() != b * s {
                return Err(Error::shape("jitter offsets", b * s, j.len()));
            }
        }
        let mse_scale = T::lit(2.0) / T::lit((3 * b) as f64);
        let orient_scale = weights.alpha / T::lit((b * s) as f64);

        let mut sq_err = T::zero();
        let mut orient_sum = T::zero();
        let mut kept = 0;
        let chunk_len = self.render.chunk_rays;
        for (ci, rays) in batch.rays.chunks(chunk_len).enumerate() {
            let start = ci * chunk_len;
            let jitter = batch.jitter.as_ref().map(|j| &j[start * s..(start + rays.len()) * s]);
            let chunk = self.forward_chunk(params, rays, jitter)?;
            kept += chunk.rows.len();
            let gt = &batch.gt[start..start + rays.len()];
            let mut dcolor = Vec::with_capacity(rays.len());
            for (c, g) in chunk.ray_colors.iter().zip(gt) {
                let diff = vec3::sub(*c, *g);
                sq_err += vec3::dot(diff, diff);
                dcolor.push(vec3::scale(diff, mse_scale));
            }
            orient_sum += chunk.ray_orient.iter().copied().sum::<T>();
            if let Some(g) = grad.as_deref_mut() {
                self.backward_chunk(params, &chunk, &dcolor, orient_scale, g);
            }
        }

        let m = params.density.param_count();
        let l1_sum: T = params.density.tensors().iter().flat_map(|t| t.iter()).map(|v| v.abs()).sum();
        if let Some(g) = grad {
            let k = weights.beta / T::lit(m as f64);
            for (gt, pt) in g.density.tensors_mut().into_iter().zip(params.density.tensors()) {
                for (d, &v) in gt.iter_mut().zip(pt) {
                    // zero subgradient at 0
                    if v > T::zero() {
                        *d += k;
                    } else if v < T::zero() {
                        *d -= k;
                    }
                }
            }
        }

        let mse = sq_err / T::lit((3 * b) as f64);
        let orientation = weights.alpha * orient_sum / T::lit((b * s) as f64);
        let density_l1 = weights.beta * l1_sum / T::lit(m as f64);
        let total = mse + orientation + density_l1;
        if !total.is_finite() {
            return Err(Error::non_finite("loss"));
        }
        Ok(LossTerms {
            mse: mse.as_f64(),
            orientation: orientation.as_f64(),
            density_l1: density_l1.as_f64(),
            total: total.as_f64(),
            kept_samples: kept,
        })
    }

    fn backward_chunk(
        &self,
        params: &ParameterSet<T>,
        chunk: &Chunk<T>,
        dcolor: &[V3<T>],
        dorient: T,
        grad: &mut ParameterSet<T>,
    ) {
        let exec = self.render.exec;
        let m = chunk.rows.len();

        if m > 0 {
            let layout = self.layout;
            let width = layout.lobe_width;
            let n_lobes = layout.n_lobes;
            let spatial = chunk.spatial.as_ref().expect("spatial trace");
            let raw = &spatial.output;

            // color head → ∂/∂c_s
            let head: Vec<(V3<T>, V3<T>)> = par::map_range(exec, m, |r| {
                let (ray, k) = chunk.rows[r];
                let w = chunk.marches[ray].weights[k];
                let c = chunk.colors[r];
                let dz: V3<T> = std::array::from_fn(|ch| w * dcolor[ray][ch] * c[ch] * (T::one() - c[ch]));
                let ds: V3<T> = std::array::from_fn(|ch| dz[ch] * chunk.specular[[r, ch]]);
                (dz, ds)
            });
            let mut dspec = Array2::<T>::zeros((m, 3));
            for r in 0..m {
                for ch in 0..3 {
                    dspec[[r, ch]] = head[r].0[ch] * raw[[r, 3 + ch]];
                }
            }

            let dinput = match self.model.ree_space {
                ReeSpace::Feature => {
                    let dir = chunk.directional.as_ref().expect("directional trace");
                    Some(params.directional.backward_batch(dir, dspec.clone(), &mut grad.directional))
                }
                ReeSpace::Color => None,
            };

            let rw = layout.width();
            let mut draw = Array2::<T>::zeros((m, rw));
            let lam_at = layout.lambda();
            let bottleneck = layout.bottleneck;
            let summed = self.model.ree_space == ReeSpace::Color;
            let negate = self.model.negate_view;
            par::for_each_row(exec, draw.as_slice_mut().expect("standard layout"), rw, |r, out| {
                let row = raw.row(r);
                let raw_slice = row.as_slice().expect("contiguous row");
                let (ray, k) = chunk.rows[r];
                let dir = chunk.marches[ray].ray.dir;
                let w = chunk.marches[ray].weights[k];
                let (dz, ds) = head[r];
                out[ParamLayout::C_D..ParamLayout::C_D + 3].copy_from_slice(&dz);
                out[ParamLayout::S..ParamLayout::S + 3].copy_from_slice(&ds);

                let bw = chunk.bandwidths.row(r);
                let bw = bw.as_slice().expect("contiguous row");
                let (lam, mu) = bw[..2 * n_lobes].split_at(n_lobes);
                let slopes = &bw[2 * n_lobes..];
                let (n, len, omega) = chunk.geometry[r];
                let a = &raw_slice[layout.a()..lam_at];
                let dg_owned;
                let dg: &[T] = match &dinput {
                    Some(d) => {
                        let drow = d.row(r);
                        let dslice = drow.to_slice().expect("contiguous row");
                        out[ParamLayout::B..ParamLayout::B + bottleneck]
                            .copy_from_slice(&dslice[n_lobes * width..n_lobes * width + bottleneck]);
                        dg_owned = dslice[..n_lobes * width].to_vec();
                        &dg_owned
                    }
                    None => {
                        dg_owned = vec![dspec[[r, 0]], dspec[[r, 1]], dspec[[r, 2]]];
                        &dg_owned
                    }
                };
                let (head_part, tail) = out.split_at_mut(lam_at);
                let (dl, dm) = tail.split_at_mut(n_lobes);
                let domega = encoding::encode_backward(
                    &self.frames,
                    omega,
                    a,
                    lam,
                    mu,
                    width,
                    dg,
                    summed,
                    &mut head_part[layout.a()..],
                    dl,
                    dm,
                );
                for (d, &sl) in dl.iter_mut().chain(dm.iter_mut()).zip(slopes) {
                    *d *= sl;
                }

                // reflection ω = 2(d·n)n − d
                let d = if negate { vec3::scale(dir, -T::one()) } else { dir };
                let two = T::lit(2.0);
                let dn_dot = vec3::dot(d, n);
                let n_dw = vec3::dot(n, domega);
                let mut dn: V3<T> = std::array::from_fn(|q| two * d[q] * n_dw + two * dn_dot * domega[q]);
                // orientation term w·max(0, d·n)² uses the ray direction itself
                let dot = vec3::dot(dir, n);
                if dot > T::zero() {
                    let k2 = dorient * w * two * dot;
                    for q in 0..3 {
                        dn[q] += k2 * dir[q];
                    }
                }
                let dn_raw = decode_normal_backward(n, len, dn);
                out[ParamLayout::N..ParamLayout::N + 3].copy_from_slice(&dn_raw);
            });

            let dfeatures = params.spatial.backward_batch(spatial, draw, &mut grad.spatial);
            for (r, pos) in chunk.positions.iter().enumerate() {
                let row = dfeatures.row(r);
                params
                    .appearance
                    .accumulate_appearance_grad(*pos, row.as_slice().expect("contiguous row"), &mut grad.appearance);
            }
        }

        // densities: ∂/∂τ_k = T_{k+1} v_k − Σ_{i>k} w_i v_i − T_S v_S
        let mut row_of = vec![Vec::new(); chunk.marches.len()];
        for (row, &(r, k)) in chunk.rows.iter().enumerate() {
            row_of[r].push((k, row));
        }
        let dpre: Vec<Vec<T>> = par::map_range(exec, chunk.marches.len(), |r| {
            let m = &chunk.marches[r];
            let s = m.t.len();
            if s == 0 {
                return Vec::new();
            }
            let dc = dcolor[r];
            let bg_value = vec3::dot(dc, self.background);
            let mut value = vec![bg_value; s];
            for &(k, row) in &row_of[r] {
                value[k] = vec3::dot(dc, chunk.colors[row]) + dorient * chunk.orient[row];
            }
            let mut out = vec![T::zero(); s];
            let mut suffix = m.final_trans() * bg_value;
            for k in (0..s).rev() {
                let dtau = m.trans[k + 1] * value[k] - suffix;
                suffix += m.weights[k] * value[k];
                out[k] = dtau * m.delta[k] * sigmoid(m.pre[k]);
            }
            out
        });
        for (m, dp) in chunk.marches.iter().zip(&dpre) {
            for (k, &d) in dp.iter().enumerate() {
                params.density.accumulate_sum_grad(m.ray.at(m.t[k]), d, &mut grad.density);
            }
        }
    }
}
