//! Multiscale vector-matrix factorized feature fields.
//!
//! Each level stores three plane maps (xy, xz, yz) and three line vectors
//! (z, y, x). A point's feature at one level is the element-wise product of a
//! bilinearly interpolated plane feature with a linearly interpolated line
//! feature, for each of the three (plane, line) pairs. Levels grow
//! geometrically from `n_min` to `n_max` nodes per axis.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{softplus, Real};

/// Plane axes and the complementary line axis for each of the three pairs,
/// in concatenation order: (xy, z), (xz, y), (yz, x).
pub const PAIRS: [([usize; 2], usize); 3] = [([0, 1], 2), ([0, 2], 1), ([1, 2], 0)];

const PLANE_NAMES: [&str; 3] = ["plane_xy", "plane_xz", "plane_yz"];
const LINE_NAMES: [&str; 3] = ["line_z", "line_y", "line_x"];

fn default_init_std() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub n_min: usize,
    pub n_max: usize,
    pub levels: usize,
    pub channels: usize,
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl FieldConfig {
    /// Full-scale appearance field: 16 levels from 16 to 512, 4 channels.
    pub fn appearance() -> Self {
        FieldConfig {
            n_min: 16,
            n_max: 512,
            levels: 16,
            channels: 4,
            bbox_min: [-1.5; 3],
            bbox_max: [1.5; 3],
            init_std: default_init_std(),
        }
    }

    /// Full-scale density field; same schedule as appearance, 2 channels.
    pub fn density() -> Self {
        FieldConfig {
            channels: 2,
            ..Self::appearance()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_min < 2 {
            return bad(format!("n_min must be >= 2, got {}", self.n_min));
        }
        if self.n_max < self.n_min {
            return bad(format!("n_max {} < n_min {}", self.n_max, self.n_min));
        }
        if self.levels == 0 || self.channels == 0 {
            return bad("levels and channels must be >= 1".into());
        }
        for k in 0..3 {
            if !(self.bbox_min[k] < self.bbox_max[k]) {
                return bad(format!("bbox_min[{k}] must be < bbox_max[{k}]"));
            }
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return bad(format!("init_std must be finite and >= 0, got {}", self.init_std));
        }
        Ok(())
    }

    /// Per-level growth factor `b`; 1 for a single level.
    pub fn growth_factor(&self) -> f64 {
        if self.levels <= 1 {
            return 1.0;
        }
        (((self.n_max as f64).ln() - (self.n_min as f64).ln()) / (self.levels - 1) as f64).exp()
    }

    pub fn resolutions(&self) -> Vec<usize> {
        level_resolutions(self)
    }

    /// Length of the concatenated appearance feature.
    pub fn feature_len(&self) -> usize {
        3 * self.channels * self.levels
    }

    pub fn param_count(&self) -> usize {
        self.resolutions()
            .iter()
            .map(|&n| 3 * (n * n + n) * self.channels)
            .sum()
    }
}

/// `floor(n_min * b^l)` for every level; a single level sits at `n_max`.
pub fn level_resolutions(config: &FieldConfig) -> Vec<usize> {
    if config.levels <= 1 {
        return vec![config.n_max];
    }
    let ln_min = (config.n_min as f64).ln();
    let step = ((config.n_max as f64).ln() - ln_min) / (config.levels - 1) as f64;
    (0..config.levels)
        .map(|l| {
            // the epsilon absorbs rounding at exact powers (e.g. 16 * 2 = 32)
            let n = (ln_min + step * l as f64).exp() + 1e-9;
            (n.floor() as usize).clamp(config.n_min, config.n_max)
        })
        .collect()
}

/// One level of the pyramid.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelGrid<T> {
    pub res: usize,
    /// `res * res * channels` each, node `(i, j)` (i along the first plane
    /// axis) at offset `(j * res + i) * channels`.
    pub planes: [Vec<T>; 3],
    /// `res * channels` each.
    pub lines: [Vec<T>; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureField<T> {
    pub config: FieldConfig,
    pub levels: Vec<LevelGrid<T>>,
}

/// Linear interpolation stencil on one axis: nodes `i0`, `i0 + 1`.
#[derive(Clone, Copy, Debug)]
struct Lerp<T> {
    i0: usize,
    f: T,
}

#[inline(always)]
fn lerp_coord<T: Real>(t: T, res: usize) -> Lerp<T> {
    let last = T::lit((res - 1) as f64);
    let pos = t.max(T::zero()).min(T::one()) * last;
    let i0 = pos.floor().to_usize().unwrap_or(0).min(res - 2);
    Lerp {
        i0,
        f: pos - T::lit(i0 as f64),
    }
}

/// Node offsets (without the channel term) and weights for one pair.
#[derive(Clone, Copy, Debug)]
struct PairTaps<T> {
    plane: [(usize, T); 4],
    line: [(usize, T); 2],
}

#[inline(always)]
fn pair_taps<T: Real>(res: usize, lu: Lerp<T>, lv: Lerp<T>, ll: Lerp<T>) -> PairTaps<T> {
    let one = T::one();
    let row0 = lv.i0 * res;
    let row1 = row0 + res;
    PairTaps {
        plane: [
            (row0 + lu.i0, (one - lu.f) * (one - lv.f)),
            (row0 + lu.i0 + 1, lu.f * (one - lv.f)),
            (row1 + lu.i0, (one - lu.f) * lv.f),
            (row1 + lu.i0 + 1, lu.f * lv.f),
        ],
        line: [(ll.i0, one - ll.f), (ll.i0 + 1, ll.f)],
    }
}

#[inline(always)]
fn level_taps<T: Real>(res: usize, u: [T; 3]) -> [PairTaps<T>; 3] {
    let l = [lerp_coord(u[0], res), lerp_coord(u[1], res), lerp_coord(u[2], res)];
    PAIRS.map(|([a, b], c)| pair_taps(res, l[a], l[b], l[c]))
}

#[inline(always)]
fn gather<T: Real, const K: usize>(data: &[T], taps: &[(usize, T); K], channels: usize, c: usize) -> T {
    let mut acc = T::zero();
    for &(node, w) in taps {
        acc += w * data[node * channels + c];
    }
    acc
}

/// Bilinear interpolation of a `res × res × channels` plane at `uv ∈ [0,1]²`.
/// Coordinates outside the unit square are clamped.
pub fn interp2d<T: Real>(plane: &[T], res: usize, channels: usize, uv: [T; 2]) -> Vec<T> {
    assert!(res >= 2 && plane.len() == res * res * channels);
    let lu = lerp_coord(uv[0], res);
    let lv = lerp_coord(uv[1], res);
    let taps = pair_taps(res, lu, lv, Lerp { i0: 0, f: T::zero() });
    (0..channels)
        .map(|c| gather(plane, &taps.plane, channels, c))
        .collect()
}

/// Linear interpolation of a `res × channels` line at `t ∈ [0,1]`.
pub fn interp1d<T: Real>(line: &[T], res: usize, channels: usize, t: T) -> Vec<T> {
    assert!(res >= 2 && line.len() == res * channels);
    let l = lerp_coord(t, res);
    let taps = [(l.i0, T::one() - l.f), (l.i0 + 1, l.f)];
    (0..channels)
        .map(|c| gather(line, &taps, channels, c))
        .collect()
}

impl<T: Real> FeatureField<T> {
    pub fn zeros(config: FieldConfig) -> Result<Self> {
        config.validate()?;
        let levels = config
            .resolutions()
            .into_iter()
            .map(|res| LevelGrid {
                res,
                planes: std::array::from_fn(|_| vec![T::zero(); res * res * config.channels]),
                lines: std::array::from_fn(|_| vec![T::zero(); res * config.channels]),
            })
            .collect();
        Ok(FeatureField { config, levels })
    }

    /// I.i.d. zero-mean Gaussian features with `config.init_std`.
    pub fn init(config: FieldConfig, seed: u64) -> Result<Self> {
        let std = config.init_std;
        let mut field = Self::zeros(config)?;
        if std == 0.0 {
            return Ok(field);
        }
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for tensor in field.tensors_mut() {
            for v in tensor.iter_mut() {
                *v = T::lit(normal.sample(&mut rng));
            }
        }
        Ok(field)
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    pub fn feature_len(&self) -> usize {
        self.config.feature_len()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Tensors in checkpoint order: per level, planes xy/xz/yz then lines z/y/x.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(self.levels.len() * 6);
        for level in &self.levels {
            out.extend(level.planes.iter().map(|p| p.as_slice()));
            out.extend(level.lines.iter().map(|l| l.as_slice()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(self.levels.len() * 6);
        for level in &mut self.levels {
            let LevelGrid { planes, lines, .. } = level;
            out.extend(planes.iter_mut().map(|p| p.as_mut_slice()));
            out.extend(lines.iter_mut().map(|l| l.as_mut_slice()));
        }
        out
    }

    /// `(name, shape)` for each tensor, matching [`Self::tensors`].
    pub fn tensor_specs(&self, prefix: &str) -> Vec<(String, Vec<usize>)> {
        let c = self.config.channels;
        let mut out = Vec::with_capacity(self.levels.len() * 6);
        for (l, level) in self.levels.iter().enumerate() {
            let n = level.res;
            for name in PLANE_NAMES {
                out.push((format!("{prefix}.level{l}.{name}"), vec![n, n, c]));
            }
            for name in LINE_NAMES {
                out.push((format!("{prefix}.level{l}.{name}"), vec![n, c]));
            }
        }
        out
    }

    /// Maps a world point into the unit cube of the bounding box, clamped.
    #[inline]
    pub fn normalize(&self, x: [T; 3]) -> [T; 3] {
        let lo = &self.config.bbox_min;
        let hi = &self.config.bbox_max;
        std::array::from_fn(|k| {
            let t = (x[k] - T::lit(lo[k])) / T::lit(hi[k] - lo[k]);
            t.max(T::zero()).min(T::one())
        })
    }

    fn check_point(x: [T; 3]) -> Result<()> {
        if x.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("non-finite sample point {x:?}")))
        }
    }

    /// Concatenated per-level, per-pair products; length `3 * channels * levels`.
    pub fn sample_appearance(&self, x: [T; 3]) -> Result<Vec<T>> {
        Self::check_point(x)?;
        let mut out = vec![T::zero(); self.feature_len()];
        self.appearance_into(x, &mut out);
        Ok(out)
    }

    /// Unchecked variant of [`Self::sample_appearance`] writing into `out`.
    pub fn appearance_into(&self, x: [T; 3], out: &mut [T]) {
        let c = self.config.channels;
        debug_assert_eq!(out.len(), self.feature_len());
        let u = self.normalize(x);
        let mut k = 0;
        for level in &self.levels {
            let taps = level_taps(level.res, u);
            for (p, tap) in taps.iter().enumerate() {
                let plane = &level.planes[p];
                let line = &level.lines[p];
                for ch in 0..c {
                    out[k] = gather(plane, &tap.plane, c, ch) * gather(line, &tap.line, c, ch);
                    k += 1;
                }
            }
        }
    }

    /// Sum of every product over levels, pairs and channels (the density
    /// pre-activation before the shift).
    pub fn feature_sum(&self, x: [T; 3]) -> T {
        let c = self.config.channels;
        let u = self.normalize(x);
        let mut acc = T::zero();
        for level in &self.levels {
            let taps = level_taps(level.res, u);
            for (p, tap) in taps.iter().enumerate() {
                let plane = &level.planes[p];
                let line = &level.lines[p];
                for ch in 0..c {
                    acc += gather(plane, &tap.plane, c, ch) * gather(line, &tap.line, c, ch);
                }
            }
        }
        acc
    }

    /// `softplus(shift + feature_sum(x))`.
    pub fn sample_density(&self, x: [T; 3], shift: T) -> Result<T> {
        Self::check_point(x)?;
        Ok(softplus(shift + self.feature_sum(x)))
    }

    /// Adds `∂(dout · appearance(x)) / ∂features` into `grad`.
    pub fn accumulate_appearance_grad(&self, x: [T; 3], dout: &[T], grad: &mut FeatureField<T>) {
        let c = self.config.channels;
        debug_assert_eq!(dout.len(), self.feature_len());
        let u = self.normalize(x);
        let mut k = 0;
        for (level, glevel) in self.levels.iter().zip(grad.levels.iter_mut()) {
            let taps = level_taps(level.res, u);
            for (p, tap) in taps.iter().enumerate() {
                let plane = &level.planes[p];
                let line = &level.lines[p];
                for ch in 0..c {
                    let d = dout[k];
                    k += 1;
                    if d == T::zero() {
                        continue;
                    }
                    let fp = gather(plane, &tap.plane, c, ch);
                    let fl = gather(line, &tap.line, c, ch);
                    for &(node, w) in &tap.plane {
                        glevel.planes[p][node * c + ch] += w * d * fl;
                    }
                    for &(node, w) in &tap.line {
                        glevel.lines[p][node * c + ch] += w * d * fp;
                    }
                }
            }
        }
    }

    /// Adds `dsum * ∂feature_sum(x) / ∂features` into `grad`.
    pub fn accumulate_sum_grad(&self, x: [T; 3], dsum: T, grad: &mut FeatureField<T>) {
        if dsum == T::zero() {
            return;
        }
        let c = self.config.channels;
        let u = self.normalize(x);
        for (level, glevel) in self.levels.iter().zip(grad.levels.iter_mut()) {
            let taps = level_taps(level.res, u);
            for (p, tap) in taps.iter().enumerate() {
                let plane = &level.planes[p];
                let line = &level.lines[p];
                for ch in 0..c {
                    let fp = gather(plane, &tap.plane, c, ch);
                    let fl = gather(line, &tap.line, c, ch);
                    for &(node, w) in &tap.plane {
                        glevel.planes[p][node * c + ch] += w * dsum * fl;
                    }
                    for &(node, w) in &tap.line {
                        glevel.lines[p][node * c + ch] += w * dsum * fp;
                    }
                }
            }
        }
    }
}
