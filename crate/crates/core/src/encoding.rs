//! Anisotropic spherical Gaussian encoding of the reflected view direction.
//!
//! A fixed set of orthonormal frames (lobe, tangent, bitangent) is laid out
//! on a `rows × cols` spherical grid. For a reparameterized direction `ω_o`
//! each frame produces `a_i · max(ω_o·lobe, 0) · exp(-λ(ω_o·t)² - μ(ω_o·b)²)`
//! and the responses are concatenated frame by frame.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::vec3::{self, V3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AsgFrame<T = f64> {
    pub lobe: V3<T>,
    pub tangent: V3<T>,
    pub bitangent: V3<T>,
}

impl AsgFrame<f64> {
    pub fn cast<T: Real>(&self) -> AsgFrame<T> {
        AsgFrame {
            lobe: vec3::cast(self.lobe),
            tangent: vec3::cast(self.tangent),
            bitangent: vec3::cast(self.bitangent),
        }
    }
}

/// Row-major list of frames; row `r` sweeps the polar angle, column `c` the
/// azimuth.
#[derive(Clone, Debug, PartialEq)]
pub struct AsgFrameSet<T = f64> {
    pub rows: usize,
    pub cols: usize,
    pub frames: Vec<AsgFrame<T>>,
}

impl<T> AsgFrameSet<T> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

impl AsgFrameSet<f64> {
    pub fn cast<T: Real>(&self) -> AsgFrameSet<T> {
        AsgFrameSet {
            rows: self.rows,
            cols: self.cols,
            frames: self.frames.iter().map(AsgFrame::cast).collect(),
        }
    }
}

/// z-up spherical direction, `theta` measured from +z.
fn spherical(theta: f64, phi: f64) -> V3<f64> {
    [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]
}

/// Lobes at `θ = π(r + ½)/rows`, `φ = 2πc/cols`. The tangent is the lobe
/// advanced by `π/2` in `θ`; the bitangent is `lobe × tangent`, i.e. the
/// tangent rotated a quarter turn about the lobe.
pub fn build_lobe_frames(rows: usize, cols: usize) -> Result<AsgFrameSet> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidConfig(format!(
            "lobe grid must be at least 1x1, got {rows}x{cols}"
        )));
    }
    let mut frames = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let theta = PI * (r as f64 + 0.5) / rows as f64;
        for c in 0..cols {
            let phi = 2.0 * PI * c as f64 / cols as f64;
            let lobe = spherical(theta, phi);
            let tangent = spherical(theta + PI / 2.0, phi);
            let bitangent = vec3::cross(lobe, tangent);
            frames.push(AsgFrame {
                lobe,
                tangent,
                bitangent,
            });
        }
    }
    Ok(AsgFrameSet { rows, cols, frames })
}

/// Reflects `d` about `n`: `2(d·n)n − d`.
pub fn reparameterize<T: Real>(d: V3<T>, n: V3<T>) -> Result<V3<T>> {
    let nd = vec3::norm(d);
    let nn = vec3::norm(n);
    if !(nd > T::zero() && nn > T::zero()) {
        return Err(Error::InvalidInput("zero-length direction or normal".into()));
    }
    Ok(reflect(d, n))
}

#[inline(always)]
pub(crate) fn reflect<T: Real>(d: V3<T>, n: V3<T>) -> V3<T> {
    let k = T::lit(2.0) * vec3::dot(d, n);
    [k * n[0] - d[0], k * n[1] - d[1], k * n[2] - d[2]]
}

/// Scalar envelope `max(ω·lobe, 0) · exp(−λ(ω·t)² − μ(ω·b)²)`.
#[inline(always)]
pub fn envelope<T: Real>(frame: &AsgFrame<T>, omega: V3<T>, lambda: T, mu: T) -> T {
    let s = vec3::dot(omega, frame.lobe);
    if s <= T::zero() {
        return T::zero();
    }
    let dt = vec3::dot(omega, frame.tangent);
    let db = vec3::dot(omega, frame.bitangent);
    s * (-lambda * dt * dt - mu * db * db).exp()
}

pub fn asg_response<T: Real>(
    frame: &AsgFrame<T>,
    omega: V3<T>,
    a: &[T],
    lambda: T,
    mu: T,
) -> Result<Vec<T>> {
    if !(lambda > T::zero() && mu > T::zero()) {
        return Err(Error::InvalidInput(format!(
            "ASG bandwidths must be positive, got λ={lambda}, μ={mu}"
        )));
    }
    let e = envelope(frame, omega, lambda, mu);
    Ok(a.iter().map(|&v| v * e).collect())
}

/// Envelope of one lobe on a `width × height` equirectangular grid
/// (row 0 at +z, column 0 at azimuth 0), row-major.
pub fn envelope_map(frame: &AsgFrame<f64>, lambda: f64, mu: f64, width: usize, height: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(width * height);
    for r in 0..height {
        let theta = PI * (r as f64 + 0.5) / height as f64;
        for c in 0..width {
            let phi = 2.0 * PI * (c as f64 + 0.5) / width as f64;
            out.push(envelope(frame, spherical(theta, phi), lambda, mu));
        }
    }
    out
}

/// Concatenated encoding `g`; `a` holds `frames.len()` feature vectors of
/// equal width, flattened frame-major.
pub fn encode<T: Real>(
    frames: &AsgFrameSet<T>,
    omega: V3<T>,
    a: &[T],
    lambda: &[T],
    mu: &[T],
) -> Result<Vec<T>> {
    let n = frames.len();
    if lambda.len() != n {
        return Err(Error::shape("encode λ", n, lambda.len()));
    }
    if mu.len() != n {
        return Err(Error::shape("encode μ", n, mu.len()));
    }
    if n == 0 || !a.len().is_multiple_of(n) {
        return Err(Error::shape("encode feature matrix", n, a.len()));
    }
    let width = a.len() / n;
    let mut g = Vec::with_capacity(a.len());
    for (i, frame) in frames.frames.iter().enumerate() {
        g.extend(asg_response(frame, omega, &a[i * width..(i + 1) * width], lambda[i], mu[i])?);
    }
    Ok(g)
}

/// Unchecked forward used by the renderer. `out` has `frames.len() * width`
/// entries; with `sum_into` set the responses are summed into a single
/// `width` vector instead (color-space variant).
#[inline]
pub(crate) fn encode_into<T: Real>(
    frames: &[AsgFrame<T>],
    omega: V3<T>,
    a: &[T],
    lambda: &[T],
    mu: &[T],
    width: usize,
    out: &mut [T],
    sum_into: bool,
) {
    if sum_into {
        out[..width].fill(T::zero());
    }
    for (i, frame) in frames.iter().enumerate() {
        let e = envelope(frame, omega, lambda[i], mu[i]);
        let ai = &a[i * width..(i + 1) * width];
        if sum_into {
            for (o, &v) in out[..width].iter_mut().zip(ai) {
                *o += v * e;
            }
        } else {
            for (o, &v) in out[i * width..(i + 1) * width].iter_mut().zip(ai) {
                *o = v * e;
            }
        }
    }
}

/// Reverse pass of [`encode_into`]. Writes `da`, `dlambda`, `dmu` (overwriting)
/// and returns `∂/∂ω`. In summed mode `dg` has length `width` and is shared
/// by every frame.
#[inline]
#[allow(clippy::too_many_arguments)]
pub(crate) fn encode_backward<T: Real>(
    frames: &[AsgFrame<T>],
    omega: V3<T>,
    a: &[T],
    lambda: &[T],
    mu: &[T],
    width: usize,
    dg: &[T],
    summed: bool,
    da: &mut [T],
    dlambda: &mut [T],
    dmu: &mut [T],
) -> V3<T> {
    let two = T::lit(2.0);
    let mut domega = [T::zero(); 3];
    for (i, frame) in frames.iter().enumerate() {
        let gi = if summed {
            &dg[..width]
        } else {
            &dg[i * width..(i + 1) * width]
        };
        let ai = &a[i * width..(i + 1) * width];
        let s = vec3::dot(omega, frame.lobe);
        let dai = &mut da[i * width..(i + 1) * width];
        if s <= T::zero() {
            // clamp region: zero response, zero subgradient
            dai.fill(T::zero());
            dlambda[i] = T::zero();
            dmu[i] = T::zero();
            continue;
        }
        let dt = vec3::dot(omega, frame.tangent);
        let db = vec3::dot(omega, frame.bitangent);
        let ex = (-lambda[i] * dt * dt - mu[i] * db * db).exp();
        let env = s * ex;
        let mut denv = T::zero();
        for ((d, &g), &av) in dai.iter_mut().zip(gi).zip(ai) {
            *d = g * env;
            denv += g * av;
        }
        dlambda[i] = -denv * env * dt * dt;
        dmu[i] = -denv * env * db * db;
        // ∂env/∂ω = ex·lobe − 2·env·(λ(ω·t)t + μ(ω·b)b)
        let kt = two * env * lambda[i] * dt;
        let kb = two * env * mu[i] * db;
        for k in 0..3 {
            domega[k] += denv * (ex * frame.lobe[k] - kt * frame.tangent[k] - kb * frame.bitangent[k]);
        }
    }
    domega
}
