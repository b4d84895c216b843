//! Spatial and directional MLPs, the raw-output decoder and the color heads.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::real::{sigmoid, softplus, Real};
use crate::vec3::{self, V3};

/// Below this raw length the decoded normal falls back to +z.
pub const NORMAL_EPS: f64 = 1e-6;

/// Affine layer `y = x W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

/// Rectifier MLP; the last layer is affine only.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

/// Activations kept from a batched forward pass.
pub struct MlpTrace<T> {
    /// Input of every layer (post-rectifier for all but the first).
    inputs: Vec<Array2<T>>,
    pub output: Array2<T>,
}

impl<T: Real> Mlp<T> {
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidConfig(format!("bad MLP widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .map(|w| Linear {
                weight: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Ok(Mlp { layers })
    }

    /// Uniform fan-in scaled weights `U(±sqrt(6 / fan_in))`, zero biases.
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        let mut mlp = Self::zeros(widths)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut mlp.layers {
            let bound = (6.0 / layer.weight.nrows() as f64).sqrt();
            layer
                .weight
                .mapv_inplace(|_| T::lit(rng.random_range(-bound..bound)));
        }
        Ok(mlp)
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(self.layers.iter().map(|l| l.bias.len()));
        w
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(|l| l.bias.len()).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            let Linear { weight, bias } = l;
            out.push(weight.as_slice_mut().expect("standard layout"));
            out.push(bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn tensor_specs(&self, prefix: &str) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (k, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.layer{k}.weight"), l.weight.shape().to_vec()));
            out.push((format!("{prefix}.layer{k}.bias"), vec![l.bias.len()]));
        }
        out
    }

    /// Single-vector forward pass.
    pub fn forward(&self, input: &[T]) -> Result<Vec<T>> {
        if input.len() != self.input_width() {
            return Err(Error::shape("MLP input", self.input_width(), input.len()));
        }
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row view");
        Ok(self.forward_batch(x.to_owned()).output.into_raw_vec_and_offset().0)
    }

    /// Row-batched forward pass; `x` is `rows × input_width`.
    pub fn forward_batch(&self, x: Array2<T>) -> MlpTrace<T> {
        debug_assert_eq!(x.ncols(), self.input_width());
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x;
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight);
            z += &layer.bias;
            if k != last {
                z.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
            }
            inputs.push(h);
            h = z;
        }
        MlpTrace { inputs, output: h }
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the batch input. The rectifier derivative at 0 is 0.
    pub fn backward_batch(&self, trace: &MlpTrace<T>, dout: Array2<T>, grad: &mut Mlp<T>) -> Array2<T> {
        let mut dz = dout;
        for k in (0..self.layers.len()).rev() {
            let h = &trace.inputs[k];
            let layer = &self.layers[k];
            let g = &mut grad.layers[k];
            general_mat_mul(T::one(), &h.t(), &dz, T::one(), &mut g.weight);
            g.bias += &dz.sum_axis(Axis(0));
            let mut dh = dz.dot(&layer.weight.t());
            if k > 0 {
                ndarray::Zip::from(&mut dh).and(h).for_each(|d, &a| {
                    if a <= T::zero() {
                        *d = T::zero();
                    }
                });
            }
            dz = dh;
        }
        dz
    }
}

/// Offsets of the decoded parameters inside the spatial MLP's raw output:
/// `c_d | s | n | b | a (n_lobes × lobe_width) | λ | μ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub n_lobes: usize,
    pub lobe_width: usize,
    pub bottleneck: usize,
}

impl ParamLayout {
    pub const C_D: usize = 0;
    pub const S: usize = 3;
    pub const N: usize = 6;
    pub const B: usize = 9;

    /// Feature-space layout with 2-wide `a_i` and a 128-wide bottleneck.
    pub fn for_lobes(n_lobes: usize) -> Self {
        ParamLayout {
            n_lobes,
            lobe_width: 2,
            bottleneck: 128,
        }
    }

    pub fn a(&self) -> usize {
        Self::B + self.bottleneck
    }

    pub fn lambda(&self) -> usize {
        self.a() + self.n_lobes * self.lobe_width
    }

    pub fn mu(&self) -> usize {
        self.lambda() + self.n_lobes
    }

    pub fn width(&self) -> usize {
        self.mu() + self.n_lobes
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBundle<T> {
    /// Diffuse color before the final sigmoid.
    pub c_d: V3<T>,
    pub s: V3<T>,
    pub n: V3<T>,
    pub b: Vec<T>,
    /// `n_lobes × lobe_width`, lobe-major.
    pub a: Vec<T>,
    pub lambda: Vec<T>,
    pub mu: Vec<T>,
}

#[inline(always)]
fn v3<T: Copy>(s: &[T]) -> V3<T> {
    [s[0], s[1], s[2]]
}

/// Normalized normal and the raw length, or `+z` and zero under the guard.
#[inline]
pub(crate) fn decode_normal<T: Real>(raw: V3<T>) -> (V3<T>, T) {
    let len = vec3::norm(raw);
    if len > T::lit(NORMAL_EPS) {
        (vec3::scale(raw, T::one() / len), len)
    } else {
        ([T::zero(), T::zero(), T::one()], T::zero())
    }
}

/// Reverse of [`decode_normal`]; the fallback branch is constant.
#[inline]
pub(crate) fn decode_normal_backward<T: Real>(n: V3<T>, len: T, dn: V3<T>) -> V3<T> {
    if len == T::zero() {
        return [T::zero(); 3];
    }
    let proj = vec3::dot(n, dn);
    std::array::from_fn(|k| (dn[k] - n[k] * proj) / len)
}

pub fn decode_params<T: Real>(raw: &[T], layout: &ParamLayout) -> Result<ParamBundle<T>> {
    if raw.len() != layout.width() {
        return Err(Error::shape("raw parameter vector", layout.width(), raw.len()));
    }
    let (n, _) = decode_normal(v3(&raw[ParamLayout::N..]));
    Ok(ParamBundle {
        c_d: v3(&raw[ParamLayout::C_D..]),
        s: v3(&raw[ParamLayout::S..]),
        n,
        b: raw[ParamLayout::B..layout.a()].to_vec(),
        a: raw[layout.a()..layout.lambda()].to_vec(),
        lambda: raw[layout.lambda()..layout.mu()].iter().map(|&v| softplus(v)).collect(),
        mu: raw[layout.mu()..layout.width()].iter().map(|&v| softplus(v)).collect(),
    })
}

/// Runs the directional MLP on `[g, b]`.
pub fn specular_color<T: Real>(dir_mlp: &Mlp<T>, g: &[T], b: &[T]) -> Result<V3<T>> {
    if dir_mlp.output_width() != 3 {
        return Err(Error::shape("directional MLP output", 3, dir_mlp.output_width()));
    }
    let input: Vec<T> = g.iter().chain(b).copied().collect();
    let out = dir_mlp.forward(&input)?;
    Ok(v3(&out))
}

/// `sigmoid(c_d + s ⊙ c_s)`.
#[inline]
pub fn final_color<T: Real>(c_d: V3<T>, s: V3<T>, c_s: V3<T>) -> V3<T> {
    std::array::from_fn(|k| sigmoid(c_d[k] + s[k] * c_s[k]))
}
