//! Loss, Adam with log-linear learning-rate decay, and the training loop.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{ModelConfig, RenderConfig, RunConfig};
use crate::diff::{finite_diff_check, FdOptions, GradientReport, Group, Objective, ParameterSet};
use crate::error::{Error, Result};
use crate::io::checkpoint::{save_checkpoint, Checkpoint};
use crate::io::dataset::{Dataset, Split, View};
use crate::metrics::{psnr, ssim, Image};
use crate::par::Exec;
use crate::real::Real;
use crate::render::{Camera, LossTerms, LossWeights, Pipeline, Ray, TrainBatch};
use crate::vec3::{self, V3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_rays: usize,
    /// Orientation regularizer weight.
    pub alpha: f64,
    /// Density L1 weight.
    pub beta: f64,
    pub lr_field: f64,
    pub lr_mlp: f64,
    /// Learning rates decay log-linearly to this fraction at the last step.
    pub lr_final_factor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Jitter sample depths within their bins.
    pub jitter: bool,
    /// Held-out evaluation cadence in steps (0 disables).
    pub eval_every: u64,
    /// Evaluate at most this many held-out views (0 = all).
    pub eval_views: usize,
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Force sequential execution everywhere.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 30_000,
            batch_rays: 4096,
            alpha: 0.3,
            beta: 4e-4,
            lr_field: 2e-3,
            lr_mlp: 1e-3,
            lr_final_factor: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            jitter: true,
            eval_every: 1000,
            eval_views: 0,
            checkpoint_every: 5000,
            log_every: 100,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            steps: 5000,
            batch_rays: 1024,
            eval_every: 500,
            checkpoint_every: 1000,
            log_every: 50,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.batch_rays == 0 {
            return bad("batch_rays must be >= 1");
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("loss weights must be >= 0");
        }
        if !(self.lr_field > 0.0 && self.lr_mlp > 0.0 && self.lr_final_factor > 0.0) {
            return bad("learning rates and final factor must be > 0");
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2) && self.adam_eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps be > 0");
        }
        Ok(())
    }
}

/// `lr0 · final_factor^(step / total_steps)`.
pub fn lr_at(step: u64, total_steps: u64, lr0: f64, final_factor: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    lr0 * final_factor.powf(step.min(total_steps) as f64 / total_steps as f64)
}

/// Reference evaluation of the training loss on explicit arrays.
///
/// `weights` and `normals` are `B × S` (row-major by ray); masked samples
/// carry zero weight. `dirs` are the ray directions.
#[allow(clippy::too_many_arguments)]
pub fn loss(
    colors: &[V3<f64>],
    gt: &[V3<f64>],
    weights: &[f64],
    normals: &[V3<f64>],
    dirs: &[V3<f64>],
    density_features: &[f64],
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    let b = colors.len();
    if gt.len() != b || dirs.len() != b {
        return Err(Error::shape("loss batch", b, gt.len().min(dirs.len())));
    }
    if b == 0 || !weights.len().is_multiple_of(b) || normals.len() != weights.len() {
        return Err(Error::InvalidInput("loss sample arrays must be B × S".into()));
    }
    let s = weights.len() / b;
    let mse: f64 = colors
        .iter()
        .zip(gt)
        .map(|(c, g)| {
            let d = vec3::sub(*c, *g);
            vec3::dot(d, d)
        })
        .sum::<f64>()
        / (3 * b) as f64;
    let mut orient = 0.0;
    for r in 0..b {
        for k in 0..s {
            let dn = vec3::dot(dirs[r], normals[r * s + k]).max(0.0);
            orient += weights[r * s + k] * dn * dn;
        }
    }
    let orient = if s == 0 { 0.0 } else { alpha * orient / (b * s) as f64 };
    let l1 = if density_features.is_empty() {
        0.0
    } else {
        beta * density_features.iter().map(|v| v.abs()).sum::<f64>() / density_features.len() as f64
    };
    let total = mse + orient + l1;
    if !total.is_finite() {
        return Err(Error::non_finite("loss"));
    }
    Ok(total)
}

/// Parameters, Adam moments and the step counter. The per-step random
/// stream is derived from `(seed, step)`, so these two fields are the whole
/// RNG state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub params: ParameterSet<T>,
    pub adam_m: ParameterSet<T>,
    pub adam_v: ParameterSet<T>,
    pub step: u64,
    pub seed: u64,
}

impl<T: Real> TrainState<T> {
    pub fn new(params: ParameterSet<T>, seed: u64) -> Self {
        TrainState {
            adam_m: params.zeros_like(),
            adam_v: params.zeros_like(),
            params,
            step: 0,
            seed,
        }
    }

    pub fn init(cfg: &RunConfig) -> Result<Self> {
        Ok(Self::new(ParameterSet::init(&cfg.model, cfg.train.seed)?, cfg.train.seed))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamConfig {
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
        }
    }
}

/// Bias-corrected Adam update; field tensors use `lr_field`, MLP tensors
/// `lr_mlp`. Increments `state.step`.
pub fn adam_step<T: Real>(
    state: &mut TrainState<T>,
    grads: &ParameterSet<T>,
    lr_field: f64,
    lr_mlp: f64,
    adam: AdamConfig,
) -> Result<()> {
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::non_finite(format!("gradient of {name} at step {}", state.step)));
    }
    let specs = state.params.specs();
    let g = grads.tensors();
    if g.len() != specs.len() {
        return Err(Error::shape("gradient tensors", specs.len(), g.len()));
    }
    let t = (state.step + 1) as f64;
    let bc1 = 1.0 - adam.beta1.powf(t);
    let bc2 = 1.0 - adam.beta2.powf(t);
    let (b1, b2, eps) = (T::lit(adam.beta1), T::lit(adam.beta2), T::lit(adam.eps));
    let (one_b1, one_b2) = (T::lit(1.0 - adam.beta1), T::lit(1.0 - adam.beta2));
    let (inv_bc1, inv_bc2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));

    let params = state.params.tensors_mut();
    let ms = state.adam_m.tensors_mut();
    let vs = state.adam_v.tensors_mut();
    for ((((p, m), v), g), spec) in params.into_iter().zip(ms).zip(vs).zip(g).zip(&specs) {
        if p.len() != g.len() {
            return Err(Error::shape(format!("gradient of {}", spec.name), p.len(), g.len()));
        }
        let lr = T::lit(match spec.group {
            Group::Field => lr_field,
            Group::Mlp => lr_mlp,
        });
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + one_b1 * gi;
            v[i] = b2 * v[i] + one_b2 * gi * gi;
            let mh = m[i] * inv_bc1;
            let vh = v[i] * inv_bc2;
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    state.step += 1;
    Ok(())
}

/// Training loss on a fixed batch, usable with [`crate::diff::finite_diff_check`].
pub struct BatchObjective<'a, T> {
    pub pipeline: &'a Pipeline<T>,
    pub batch: &'a TrainBatch<T>,
    pub weights: LossWeights<T>,
}

impl<T: Real> Objective<T> for BatchObjective<'_, T> {
    fn loss(&self, params: &ParameterSet<T>) -> Result<T> {
        let terms = self.pipeline.loss_and_grad(params, self.batch, self.weights, None)?;
        Ok(T::lit(terms.total))
    }

    fn loss_and_grad(&self, params: &ParameterSet<T>) -> Result<(T, ParameterSet<T>)> {
        let mut g = params.zeros_like();
        let terms = self.pipeline.loss_and_grad(params, self.batch, self.weights, Some(&mut g))?;
        Ok((T::lit(terms.total), g))
    }
}

/// Tiny double-precision problem used by `gradcheck`: the tiny model, 4
/// rays of 8 jittered samples each (two chunks of 2), random targets, all
/// loss terms active.
pub fn gradcheck_tiny(seed: u64, opts: &FdOptions) -> Result<GradientReport> {
    let model = ModelConfig::tiny();
    let render = RenderConfig {
        samples_per_ray: 8,
        chunk_rays: 2,
        exec: Exec::Sequential,
        ..RenderConfig::default()
    };
    let pipeline = Pipeline::<f64>::new(&model, &render)?;
    let params = ParameterSet::<f64>::init(&model, seed)?;
    let mut rng = step_rng(seed, u64::MAX);
    let mut rays = Vec::new();
    let mut gt = Vec::new();
    for _ in 0..4 {
        let eye = loop {
            let v: V3<f64> = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            if let Some(u) = vec3::normalize(v) {
                break vec3::scale(u, 2.5);
            }
        };
        let target: V3<f64> = std::array::from_fn(|_| rng.random_range(-0.3..0.3));
        let dir = vec3::normalize(vec3::sub(target, eye)).expect("eye is off target");
        rays.push(Ray { origin: eye, dir });
        gt.push(std::array::from_fn(|_| rng.random::<f64>()));
    }
    let jitter = Some((0..4 * 8).map(|_| rng.random::<f64>()).collect());
    let batch = TrainBatch { rays, gt, jitter };
    let objective = BatchObjective {
        pipeline: &pipeline,
        batch: &batch,
        weights: LossWeights { alpha: 0.3, beta: 4e-4 },
    };
    finite_diff_check(&objective, &params, opts)
}

/// Random stream for one training step.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Draws `n` rays uniformly (with replacement) over all pixels of `views`.
pub fn sample_batch<T: Real>(
    views: &[&View],
    n: usize,
    samples_per_ray: usize,
    jitter: bool,
    rng: &mut impl Rng,
) -> Result<TrainBatch<T>> {
    let first = views.first().ok_or_else(|| Error::Dataset("no training views".into()))?;
    let (w, h) = (first.image.width(), first.image.height());
    let per_view = w * h;
    let total = per_view * views.len();
    let mut rays = Vec::with_capacity(n);
    let mut gt = Vec::with_capacity(n);
    for _ in 0..n {
        let idx = rng.random_range(0..total);
        let view = views[idx / per_view];
        let (x, y) = ((idx % per_view) % w, (idx % per_view) / w);
        rays.push(view.camera.ray(x as u32, y as u32).cast::<T>());
        let p = view.image.pixel(x, y);
        gt.push([T::lit(p[0] as f64), T::lit(p[1] as f64), T::lit(p[2] as f64)]);
    }
    let jitter = jitter.then(|| (0..n * samples_per_ray).map(|_| T::lit(rng.random::<f64>())).collect());
    Ok(TrainBatch { rays, gt, jitter })
}

/// Renders a full view; returns the image and the expected depth per pixel.
pub fn render_view<T: Real>(
    pipeline: &Pipeline<T>,
    params: &ParameterSet<T>,
    camera: &Camera,
) -> Result<(Image, Vec<f64>)> {
    let (w, h) = (camera.width, camera.height);
    let rays: Vec<Ray<T>> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| camera.ray(x, y).cast())
        .collect();
    let (colors, depths) = pipeline.render_rays(params, &rays)?;
    let image = Image::from_clamped(
        w as usize,
        h as usize,
        colors.iter().flat_map(|c| c.iter().map(|v| v.as_f64())),
    )?;
    Ok((image, depths.iter().map(|d| d.as_f64()).collect()))
}

#[derive(Clone, Debug, Serialize)]
pub struct ImageScore {
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub split: Split,
    pub images: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// PSNR / SSIM of renders against the views of `split` (at most `max_views`
/// of them when nonzero).
pub fn evaluate<T: Real>(
    pipeline: &Pipeline<T>,
    params: &ParameterSet<T>,
    dataset: &Dataset,
    split: Split,
    max_views: usize,
) -> Result<EvalReport> {
    let views = dataset.split(split);
    if views.is_empty() {
        return Err(Error::Dataset(format!("split {} is empty", split.as_str())));
    }
    let take = if max_views == 0 { views.len() } else { max_views.min(views.len()) };
    let mut images = Vec::with_capacity(take);
    for (index, view) in views.iter().take(take).enumerate() {
        let (img, _) = render_view(pipeline, params, &view.camera)?;
        let s = if img.width() >= 11 && img.height() >= 11 {
            ssim(&img, &view.image)?
        } else {
            f64::NAN
        };
        images.push(ImageScore {
            index,
            psnr: psnr(&img, &view.image)?,
            ssim: s,
        });
    }
    let n = images.len() as f64;
    Ok(EvalReport {
        split,
        mean_psnr: images.iter().map(|s| s.psnr).sum::<f64>() / n,
        mean_ssim: images.iter().map(|s| s.ssim).sum::<f64>() / n,
        images,
    })
}

/// Loop controls that are not part of the run configuration.
#[derive(Default)]
pub struct TrainOptions {
    /// Checkpoints go here when set.
    pub out_dir: Option<PathBuf>,
    /// Line-delimited JSON metrics sink.
    pub log: Option<Box<dyn Write>>,
    /// Stop early once `state.step` reaches this value.
    pub until: Option<u64>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct TrainSummary {
    pub steps_run: u64,
    pub final_step: u64,
    pub last_terms: LossTerms,
    /// `(step, psnr, ssim)` of every held-out evaluation.
    pub evals: Vec<(u64, f64, f64)>,
    pub wall_time_s: f64,
}

/// Pipeline configured for a run, honoring the determinism flag.
pub fn pipeline_for<T: Real>(cfg: &RunConfig) -> Result<Pipeline<T>> {
    let mut render = cfg.render.clone();
    if cfg.train.deterministic {
        render.exec = Exec::Sequential;
    }
    Pipeline::new(&cfg.model, &render)
}

fn write_record(log: &mut Option<Box<dyn Write>>, value: serde_json::Value) -> Result<()> {
    if let Some(w) = log {
        writeln!(w, "{value}")?;
        w.flush()?;
    }
    Ok(())
}

/// Checkpoint file name for a given step.
pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.ckpt")
}

fn write_checkpoint<T: Real>(cfg: &RunConfig, state: &TrainState<T>, opts: &TrainOptions) -> Result<()> {
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let ckpt = Checkpoint {
            config: cfg.clone(),
            state: state.clone(),
        };
        save_checkpoint(&dir.join(checkpoint_name(state.step)), &ckpt)?;
        save_checkpoint(&dir.join("last.ckpt"), &ckpt)?;
    }
    Ok(())
}

/// Runs training from `state.step` up to `cfg.train.steps` (or `opts.until`).
pub fn train_loop<T: Real>(
    cfg: &RunConfig,
    dataset: &Dataset,
    state: &mut TrainState<T>,
    opts: &mut TrainOptions,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let tc = &cfg.train;
    let pipeline = pipeline_for::<T>(cfg)?;
    let train_views = dataset.split(Split::Train);
    if train_views.is_empty() {
        return Err(Error::Dataset("dataset has no training views".into()));
    }
    let weights = LossWeights {
        alpha: T::lit(tc.alpha),
        beta: T::lit(tc.beta),
    };
    let adam = AdamConfig::from(tc);
    let end = opts.until.map_or(tc.steps, |u| u.min(tc.steps));
    let start = Instant::now();
    let mut summary = TrainSummary {
        final_step: state.step,
        ..TrainSummary::default()
    };

    while state.step < end {
        let step = state.step;
        let mut rng = step_rng(state.seed, step);
        let batch = sample_batch::<T>(
            &train_views,
            tc.batch_rays,
            cfg.render.samples_per_ray,
            tc.jitter,
            &mut rng,
        )?;
        let lr_field = lr_at(step, tc.steps, tc.lr_field, tc.lr_final_factor);
        let lr_mlp = lr_at(step, tc.steps, tc.lr_mlp, tc.lr_final_factor);
        let mut grads = state.params.zeros_like();
        let terms = pipeline
            .loss_and_grad(&state.params, &batch, weights, Some(&mut grads))
            .map_err(|e| match e {
                Error::NonFinite { op } => Error::NonFinite {
                    op: format!("{op} at step {step}"),
                },
                other => other,
            })?;
        adam_step(state, &grads, lr_field, lr_mlp, adam)?;
        summary.steps_run += 1;
        summary.last_terms = terms;
        let now = state.step;

        if tc.log_every > 0 && (now.is_multiple_of(tc.log_every) || now == end) {
            write_record(
                &mut opts.log,
                json!({
                    "step": now,
                    "loss": terms.total,
                    "mse": terms.mse,
                    "orientation": terms.orientation,
                    "density_l1": terms.density_l1,
                    "kept_samples": terms.kept_samples,
                    "lr_field": lr_field,
                    "lr_mlp": lr_mlp,
                    "wall_time_s": start.elapsed().as_secs_f64(),
                }),
            )?;
        }
        if tc.eval_every > 0 && (now.is_multiple_of(tc.eval_every) || now == tc.steps) {
            let report = evaluate(&pipeline, &state.params, dataset, eval_split(dataset), tc.eval_views)?;
            summary.evals.push((now, report.mean_psnr, report.mean_ssim));
            write_record(
                &mut opts.log,
                json!({
                    "step": now,
                    "split": report.split,
                    "eval_psnr": report.mean_psnr,
                    "eval_ssim": report.mean_ssim,
                    "wall_time_s": start.elapsed().as_secs_f64(),
                }),
            )?;
        }
        if tc.checkpoint_every > 0 && now.is_multiple_of(tc.checkpoint_every) {
            write_checkpoint(cfg, state, opts)?;
        }
    }
    // always leave a checkpoint for the step we stopped at
    if summary.steps_run > 0 && !(tc.checkpoint_every > 0 && state.step.is_multiple_of(tc.checkpoint_every)) {
        write_checkpoint(cfg, state, opts)?;
    }
    if summary.steps_run == 0 && opts.out_dir.is_some() {
        write_checkpoint(cfg, state, opts)?;
    }
    summary.final_step = state.step;
    summary.wall_time_s = start.elapsed().as_secs_f64();
    Ok(summary)
}

fn eval_split(dataset: &Dataset) -> Split {
    if dataset.split(Split::Test).is_empty() {
        Split::Train
    } else {
        Split::Test
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_examples() {
        assert_eq!(lr_at(0, 1000, 2e-3, 0.1), 2e-3);
        assert!((lr_at(1000, 1000, 2e-3, 0.1) - 2e-4).abs() < 1e-18);
        assert!((lr_at(500, 1000, 2e-3, 0.1) - 6.324555320336759e-4).abs() < 1e-12);
        assert_eq!(lr_at(5, 0, 1e-3, 0.1), 1e-3);
    }

    #[test]
    fn loss_examples() {
        let zero = loss(&[[0.3; 3]], &[[0.3; 3]], &[0.0], &[[0.0, 0.0, 1.0]], &[[0.0, 0.0, 1.0]], &[0.0; 4], 0.3, 4e-4)
            .unwrap();
        assert_eq!(zero, 0.0);
        let l1 = loss(&[[0.3; 3]], &[[0.3; 3]], &[0.0], &[[0.0; 3]], &[[1.0, 0.0, 0.0]], &[-0.7; 5], 0.3, 4e-4).unwrap();
        assert!((l1 - 4e-4 * 0.7).abs() < 1e-15);
        let d = [1.0, 0.0, 0.0];
        let n = [0.5, (0.75f64).sqrt(), 0.0];
        let o = loss(&[[0.3; 3]], &[[0.3; 3]], &[1.0], &[n], &[d], &[], 0.3, 0.0).unwrap();
        assert!((o - 0.075).abs() < 1e-15);
    }

    #[test]
    fn loss_is_plain_mse_without_regularizers() {
        let c = [[0.1, 0.2, 0.3], [0.9, 0.8, 0.7]];
        let g = [[0.0, 0.2, 0.5], [1.0, 1.0, 1.0]];
        let l = loss(&c, &g, &[0.5, 0.5], &[[0.0, 0.0, 1.0]; 2], &[[0.0, 0.0, 1.0]; 2], &[1.0], 0.0, 0.0).unwrap();
        let want = (0.01 + 0.0 + 0.04 + 0.01 + 0.04 + 0.09) / 6.0;
        assert!((l - want).abs() < 1e-15);
    }

    fn scalar_state(p: f64) -> TrainState<f64> {
        let mut params = ParameterSet::<f64>::zeros(&ModelConfig::tiny()).unwrap();
        params.tensors_mut()[0][0] = p;
        TrainState::new(params, 0)
    }

    #[test]
    fn adam_matches_scalar_trace() {
        let mut state = scalar_state(1.0);
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        let (mut p, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            let g = 2.0 * p - 0.5;
            let mut grads = state.params.zeros_like();
            grads.tensors_mut()[0][0] = g;
            adam_step(&mut state, &grads, lr, 0.123, AdamConfig::default()).unwrap();
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p -= lr * mh / (vh.sqrt() + eps);
            assert!((state.params.tensors()[0][0] - p).abs() < 1e-15);
        }
        assert_eq!(state.step, 5);
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut state = scalar_state(0.7);
        state.adam_m.tensors_mut()[0][0] = 1.0;
        state.adam_v.tensors_mut()[0][0] = 1.0;
        state.step = 10;
        let before = state.params.clone();
        let grads = state.params.zeros_like();
        adam_step(&mut state, &grads, 0.0, 0.0, AdamConfig::default()).unwrap();
        assert_eq!(state.params, before);
        assert!((state.adam_m.tensors()[0][0] - 0.9).abs() < 1e-15);
        assert!((state.adam_v.tensors()[0][0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn tiny_learning_rate_is_a_no_op() {
        let mut state = scalar_state(0.7);
        let before = state.params.clone();
        let mut grads = state.params.zeros_like();
        grads.fill(3.0);
        adam_step(&mut state, &grads, 1e-14, 1e-14, AdamConfig::default()).unwrap();
        for (a, b) in state.params.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut state = scalar_state(0.7);
        let mut grads = state.params.zeros_like();
        grads.tensors_mut()[2][0] = f64::NAN;
        assert!(matches!(
            adam_step(&mut state, &grads, 1e-3, 1e-3, AdamConfig::default()),
            Err(Error::NonFinite { .. })
        ));
        assert_eq!(state.step, 0);
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        assert!(TrainConfig { alpha: -1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr_mlp: 0.0, ..TrainConfig::default() }.validate().is_err());
    }
}
