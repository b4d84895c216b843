//! Learnable parameters, gradient plumbing and a finite-difference oracle.
//!
//! Gradients are produced by hand-derived reverse passes in [`crate::render`]
//! and [`crate::net`]; a gradient has the same type as the parameters it
//! differentiates. [`finite_diff_check`] compares any [`Objective`]'s
//! analytic gradient with central differences.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::field::FeatureField;
use crate::net::Mlp;
use crate::real::Real;

/// Learning-rate group of a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Field,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: Group,
}

/// All learnable tensors: two feature fields and two MLPs.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T> {
    pub appearance: FeatureField<T>,
    pub density: FeatureField<T>,
    pub spatial: Mlp<T>,
    pub directional: Mlp<T>,
}

impl<T: Real> ParameterSet<T> {
    pub fn init(model: &ModelConfig, seed: u64) -> Result<Self> {
        model.validate()?;
        // independent streams per component
        Ok(ParameterSet {
            appearance: FeatureField::init(model.appearance.clone(), seed.wrapping_mul(4).wrapping_add(1))?,
            density: FeatureField::init(model.density.clone(), seed.wrapping_mul(4).wrapping_add(2))?,
            spatial: Mlp::new(&model.spatial_widths(), seed.wrapping_mul(4).wrapping_add(3))?,
            directional: Mlp::new(&model.directional_widths(), seed.wrapping_mul(4).wrapping_add(4))?,
        })
    }

    pub fn zeros(model: &ModelConfig) -> Result<Self> {
        Ok(ParameterSet {
            appearance: FeatureField::zeros(model.appearance.clone())?,
            density: FeatureField::zeros(model.density.clone())?,
            spatial: Mlp::zeros(&model.spatial_widths())?,
            directional: Mlp::zeros(&model.directional_widths())?,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(T::zero());
        z
    }

    /// Names, shapes and groups in the canonical order shared by
    /// [`Self::tensors`], [`Self::tensors_mut`] and the checkpoint format.
    pub fn specs(&self) -> Vec<TensorSpec> {
        let field = |f: &FeatureField<T>, p: &str| {
            f.tensor_specs(p).into_iter().map(|(name, shape)| TensorSpec {
                name,
                shape,
                group: Group::Field,
            })
        };
        let mlp = |m: &Mlp<T>, p: &str| {
            m.tensor_specs(p).into_iter().map(|(name, shape)| TensorSpec {
                name,
                shape,
                group: Group::Mlp,
            })
        };
        field(&self.appearance, "appearance")
            .chain(field(&self.density, "density"))
            .chain(mlp(&self.spatial, "spatial"))
            .chain(mlp(&self.directional, "directional"))
            .collect()
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out = self.appearance.tensors();
        out.extend(self.density.tensors());
        out.extend(self.spatial.tensors());
        out.extend(self.directional.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let ParameterSet {
            appearance,
            density,
            spatial,
            directional,
        } = self;
        let mut out = appearance.tensors_mut();
        out.extend(density.tensors_mut());
        out.extend(spatial.tensors_mut());
        out.extend(directional.tensors_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn fill(&mut self, value: T) {
        for t in self.tensors_mut() {
            t.fill(value);
        }
    }

    /// `self += k * other`.
    pub fn add_scaled(&mut self, other: &Self, k: T) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += k * y;
            }
        }
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.specs()
            .into_iter()
            .zip(self.tensors())
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(s, _)| s.name)
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        let mut out = ParameterSet::<U> {
            appearance: FeatureField::zeros(self.appearance.config.clone()).expect("valid config"),
            density: FeatureField::zeros(self.density.config.clone()).expect("valid config"),
            spatial: Mlp::zeros(&self.spatial.widths()).expect("valid widths"),
            directional: Mlp::zeros(&self.directional.widths()).expect("valid widths"),
        };
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = U::lit(s.as_f64());
            }
        }
        out
    }
}

/// A scalar function of the parameters with an analytic gradient.
pub trait Objective<T: Real> {
    fn loss(&self, params: &ParameterSet<T>) -> Result<T>;
    fn loss_and_grad(&self, params: &ParameterSet<T>) -> Result<(T, ParameterSet<T>)>;
}

/// Reverse-mode gradient of `objective` at `params`.
pub fn grad<T: Real, O: Objective<T> + ?Sized>(objective: &O, params: &ParameterSet<T>) -> Result<ParameterSet<T>> {
    let (loss, g) = objective.loss_and_grad(params)?;
    if !loss.is_finite() {
        return Err(Error::non_finite("loss"));
    }
    if let Some(name) = g.first_non_finite() {
        return Err(Error::non_finite(format!("gradient of {name}")));
    }
    Ok(g)
}

/// `Σ p²` over one named tensor (by index in canonical order).
pub struct SquaredNorm {
    pub tensor: usize,
}

impl<T: Real> Objective<T> for SquaredNorm {
    fn loss(&self, params: &ParameterSet<T>) -> Result<T> {
        Ok(params.tensors()[self.tensor].iter().map(|&v| v * v).sum())
    }

    fn loss_and_grad(&self, params: &ParameterSet<T>) -> Result<(T, ParameterSet<T>)> {
        let mut g = params.zeros_like();
        let two = T::lit(2.0);
        for (d, &v) in g.tensors_mut()[self.tensor].iter_mut().zip(params.tensors()[self.tensor]) {
            *d = two * v;
        }
        Ok((self.loss(params)?, g))
    }
}

/// Sum of two objectives.
pub struct Sum<A, B>(pub A, pub B);

impl<T: Real, A: Objective<T>, B: Objective<T>> Objective<T> for Sum<A, B> {
    fn loss(&self, params: &ParameterSet<T>) -> Result<T> {
        Ok(self.0.loss(params)? + self.1.loss(params)?)
    }

    fn loss_and_grad(&self, params: &ParameterSet<T>) -> Result<(T, ParameterSet<T>)> {
        let (la, mut ga) = self.0.loss_and_grad(params)?;
        let (lb, gb) = self.1.loss_and_grad(params)?;
        ga.add_scaled(&gb, T::one());
        Ok((la + lb, ga))
    }
}

#[derive(Clone, Debug)]
pub struct FdOptions {
    pub eps: f64,
    /// Check at most this many random coordinates per tensor.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
    /// One-sided slope gap below which a coordinate is never flagged.
    pub kink_floor: f64,
    /// Allowed disagreement between the `eps` and `eps/2` stencils.
    pub step_tolerance: f64,
    /// Floor of the relative-error denominator. Central differences carry
    /// roundoff of about `|f|·2⁻⁵²/eps`, so gradients much smaller than
    /// this cannot be resolved to a relative tolerance.
    pub rel_floor: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            eps: 1e-5,
            max_coords_per_tensor: None,
            seed: 0,
            kink_floor: 1e-7,
            step_tolerance: 1e-9,
            rel_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorReport {
    pub name: String,
    pub checked: usize,
    pub flagged: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradientReport {
    pub tensors: Vec<TensorReport>,
    pub checked: usize,
    /// Coordinates excluded as kinks or discontinuities.
    pub flagged: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst: Option<(String, usize)>,
}

impl GradientReport {
    pub fn passed(&self, threshold: f64) -> bool {
        self.max_rel_error < threshold
    }
}

/// Relative error with the `max(|a|, |n|, floor)` denominator.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `grad(objective)` against central differences.
///
/// A coordinate is flagged (and excluded from the error statistics) when a
/// kink or jump lies inside the stencil. Two symptoms are checked, each
/// against `kink_floor`: one-sided slopes whose gap does not shrink when the
/// step is halved (smooth curvature makes it scale with the step), and
/// central differences at `eps` and `eps/2` that disagree (smooth functions
/// agree to `O(eps²)`; a kink between `eps/2` and `eps` does not).
pub fn finite_diff_check<O: Objective<f64> + ?Sized>(
    objective: &O,
    params: &ParameterSet<f64>,
    opts: &FdOptions,
) -> Result<GradientReport> {
    let analytic = grad(objective, params)?;
    let f0 = objective.loss(params)?;
    let specs = params.specs();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut reports = Vec::with_capacity(specs.len());

    for (t, spec) in specs.iter().enumerate() {
        let len = params.tensors()[t].len();
        let coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(k) if k < len => {
                let mut c = sample(&mut rng, len, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..len).collect(),
        };
        let mut rep = TensorReport {
            name: spec.name.clone(),
            checked: 0,
            flagged: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: None,
        };
        for i in coords {
            let p0 = params.tensors()[t][i];
            let mut eval = |delta: f64| -> Result<f64> {
                work.tensors_mut()[t][i] = p0 + delta;
                let v = objective.loss(&work);
                work.tensors_mut()[t][i] = p0;
                v
            };
            let h = opts.eps;
            let fp = eval(h)?;
            let fm = eval(-h)?;
            let fp2 = eval(h / 2.0)?;
            let fm2 = eval(-h / 2.0)?;
            let gap1 = (fp - f0) / h - (f0 - fm) / h;
            let gap2 = (fp2 - f0) / (h / 2.0) - (f0 - fm2) / (h / 2.0);
            let central1 = (fp - fm) / (2.0 * h);
            let central2 = (fp2 - fm2) / h;
            let stuck = gap1.abs() > opts.kink_floor && gap2.abs() > 0.75 * gap1.abs();
            // smooth: gap(ε) = 2 gap(ε/2) + O(ε³) and the two central
            // differences agree to O(ε²)
            // plus the roundoff each difference quotient carries from f itself
            let tol = opts.step_tolerance + 64.0 * f64::EPSILON * f0.abs() / h;
            let unscaled = (gap1 - 2.0 * gap2).abs() > tol;
            if stuck || unscaled || (central1 - central2).abs() > tol {
                rep.flagged += 1;
                continue;
            }
            let numeric = central1;
            let a = analytic.tensors()[t][i];
            let rel = relative_error(a, numeric, opts.rel_floor);
            let abs = (a - numeric).abs();
            rep.checked += 1;
            rep.max_abs_error = rep.max_abs_error.max(abs);
            if rel > rep.max_rel_error || rep.worst_index.is_none() {
                rep.max_rel_error = rep.max_rel_error.max(rel);
                rep.worst_index = Some(i);
            }
        }
        reports.push(rep);
    }

    let worst = reports
        .iter()
        .filter(|r| r.worst_index.is_some())
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .map(|r| (r.name.clone(), r.worst_index.unwrap_or(0)));
    Ok(GradientReport {
        checked: reports.iter().map(|r| r.checked).sum(),
        flagged: reports.iter().map(|r| r.flagged).sum(),
        max_rel_error: reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max),
        max_abs_error: reports.iter().map(|r| r.max_abs_error).fold(0.0, f64::max),
        worst,
        tensors: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_params() -> ParameterSet<f64> {
        ParameterSet::init(&ModelConfig::tiny(), 3).unwrap()
    }

    #[test]
    fn specs_align_with_tensors() {
        let p = tiny_params();
        let specs = p.specs();
        let tensors = p.tensors();
        assert_eq!(specs.len(), tensors.len());
        for (s, t) in specs.iter().zip(&tensors) {
            assert_eq!(s.shape.iter().product::<usize>(), t.len(), "{}", s.name);
        }
        let mut names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), specs.len(), "names must be unique");
        assert_eq!(specs.last().unwrap().name, "directional.layer1.bias");
    }

    #[test]
    fn squared_norm_gradient_is_2p() {
        let p = tiny_params();
        let g = grad(&SquaredNorm { tensor: 2 }, &p).unwrap();
        for (t, (gt, pt)) in g.tensors().iter().zip(p.tensors()).enumerate() {
            for (a, b) in gt.iter().zip(pt) {
                if t == 2 {
                    assert_eq!(*a, 2.0 * b);
                } else {
                    assert_eq!(*a, 0.0);
                }
            }
        }
    }

    #[test]
    fn quadratic_passes_fd_check() {
        let p = tiny_params();
        let obj = Sum(SquaredNorm { tensor: 0 }, SquaredNorm { tensor: 7 });
        let rep = finite_diff_check(&obj, &p, &FdOptions::default()).unwrap();
        // central differences are exact on a quadratic; what remains is
        // roundoff of order |f|·2⁻⁵²/ε relative to small gradient entries
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
        assert_eq!(rep.flagged, 0);
        assert_eq!(rep.checked, p.param_count());
    }

    /// `Σ max(0, p)` over one tensor with a coordinate sitting on the kink.
    struct Relu;
    impl Objective<f64> for Relu {
        fn loss(&self, p: &ParameterSet<f64>) -> Result<f64> {
            Ok(p.tensors()[0].iter().map(|v| v.max(0.0)).sum())
        }
        fn loss_and_grad(&self, p: &ParameterSet<f64>) -> Result<(f64, ParameterSet<f64>)> {
            let mut g = p.zeros_like();
            for (d, &v) in g.tensors_mut()[0].iter_mut().zip(p.tensors()[0]) {
                *d = if v > 0.0 { 1.0 } else { 0.0 };
            }
            Ok((self.loss(p)?, g))
        }
    }

    #[test]
    fn kink_coordinate_is_flagged() {
        let mut p = tiny_params();
        p.tensors_mut()[0][5] = 0.0;
        let rep = finite_diff_check(&Relu, &p, &FdOptions::default()).unwrap();
        assert_eq!(rep.flagged, 1);
        assert_eq!(rep.tensors[0].flagged, 1);
        assert!(rep.max_rel_error < 1e-9);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        struct Wrong;
        impl Objective<f64> for Wrong {
            fn loss(&self, p: &ParameterSet<f64>) -> Result<f64> {
                SquaredNorm { tensor: 1 }.loss(p)
            }
            fn loss_and_grad(&self, p: &ParameterSet<f64>) -> Result<(f64, ParameterSet<f64>)> {
                let (l, mut g) = SquaredNorm { tensor: 1 }.loss_and_grad(p)?;
                g.tensors_mut()[1][0] *= 1.01;
                Ok((l, g))
            }
        }
        let p = tiny_params();
        let rep = finite_diff_check(&Wrong, &p, &FdOptions::default()).unwrap();
        assert!(!rep.passed(1e-4));
        assert_eq!(rep.worst.as_ref().unwrap().1, 0);
    }

    #[test]
    fn subsampling_limits_coordinates() {
        let p = tiny_params();
        let opts = FdOptions {
            max_coords_per_tensor: Some(3),
            ..FdOptions::default()
        };
        let rep = finite_diff_check(&SquaredNorm { tensor: 0 }, &p, &opts).unwrap();
        assert!(rep.tensors.iter().all(|t| t.checked + t.flagged <= 3));
    }

    #[test]
    fn cast_roundtrip_f32() {
        let p = tiny_params();
        let q: ParameterSet<f32> = p.cast();
        let back: ParameterSet<f64> = q.cast();
        for (a, b) in p.tensors().iter().zip(back.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
            }
        }
    }
}
