//! Command-line interface.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Every flag can
//! also be set through a `RADFIELD_`-prefixed environment variable.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::config::{DataConfig, Precision, RunConfig};
use crate::diff::FdOptions;
use crate::encoding::{build_lobe_frames, envelope_map};
use crate::io::checkpoint::{load_checkpoint, read_header, Checkpoint};
use crate::io::dataset::{load_data, load_nerf_synthetic_scaled, Dataset, Split};
use crate::io::images::{save_depth_png, save_gray_png, save_rgb_png};
use crate::metrics::psnr;
use crate::par::{self, Exec};
use crate::real::Real;
use crate::render::{Camera, Ray};
use crate::train::{
    evaluate, gradcheck_tiny, pipeline_for, render_view, sample_batch, step_rng, train_loop, TrainOptions, TrainState,
};

#[derive(Parser, Debug)]
#[command(name = "radfield", version, about = "Factorized radiance fields with ASG appearance encoding")]
pub struct Cli {
    /// Worker threads for data-parallel sections (default: all cores).
    #[arg(long, global = true, env = "RADFIELD_THREADS")]
    pub threads: Option<usize>,

    /// Sequential execution and bitwise-reproducible output.
    #[arg(long, global = true, env = "RADFIELD_DETERMINISTIC")]
    pub deterministic: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write checkpoints plus a JSON-lines metrics log.
    Train(TrainArgs),
    /// Render one view of a checkpoint to PNG.
    Render(RenderArgs),
    /// PSNR / SSIM of a checkpoint over a dataset split.
    Eval(EvalArgs),
    /// Export the ASG envelopes predicted at a point.
    ProbeAsg(ProbeArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Time rendering and training throughput.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run configuration (JSON).
    #[arg(long, env = "RADFIELD_CONFIG", required_unless_present = "resume")]
    pub config: Option<PathBuf>,
    /// Output directory for checkpoints and metrics.jsonl.
    #[arg(long, env = "RADFIELD_OUT", default_value = "runs/latest")]
    pub out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, env = "RADFIELD_SEED")]
    pub seed: Option<u64>,
    /// Overrides the configured step count.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from a checkpoint (its embedded configuration is used).
    #[arg(long, conflicts_with_all = ["config", "seed"])]
    pub resume: Option<PathBuf>,
    /// Stop once this step is reached, writing a checkpoint.
    #[arg(long)]
    pub until: Option<u64>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long, env = "RADFIELD_CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// View index within --split of the checkpoint's dataset.
    #[arg(long, default_value_t = 0, conflicts_with = "pose")]
    pub camera_index: usize,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// JSON file holding a 4×4 camera-to-world matrix, either bare or as
    /// {"transform_matrix": ..., "camera_angle_x": ..., "width": ..., "height": ...}.
    #[arg(long)]
    pub pose: Option<PathBuf>,
    /// Image size and field of view for --pose when the file omits them.
    #[arg(long, default_value_t = 64)]
    pub width: u32,
    #[arg(long, default_value_t = 64)]
    pub height: u32,
    #[arg(long, default_value_t = 0.6911112070083618)]
    pub fov_x: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Optional 16-bit expected-depth map.
    #[arg(long)]
    pub depth: Option<PathBuf>,
    /// Depth mapped to 65535 (default: camera distance plus the box half-diagonal).
    #[arg(long)]
    pub depth_max: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, env = "RADFIELD_CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// NeRF-synthetic scene directory; defaults to the checkpoint's data section.
    #[arg(long, env = "RADFIELD_DATASET")]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Evaluate at most this many views (0 = all).
    #[arg(long, default_value_t = 0)]
    pub max_views: usize,
    /// Integer box-downscale factor for --dataset images.
    #[arg(long, default_value_t = 1)]
    pub downscale: usize,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long, env = "RADFIELD_CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// Query point as X,Y,Z.
    #[arg(long, allow_hyphen_values = true)]
    pub point: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Width of each equirectangular map (height is half).
    #[arg(long, default_value_t = 64)]
    pub map_width: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Scale {
    Tiny,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "tiny")]
    pub scale: Scale,
    /// Maximum allowed relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub threshold: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, env = "RADFIELD_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Check at most this many coordinates per tensor.
    #[arg(long)]
    pub max_coords: Option<usize>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Run configuration (default: desk preset).
    #[arg(long, env = "RADFIELD_CONFIG")]
    pub config: Option<PathBuf>,
    /// Rays rendered for the inference timing.
    #[arg(long, default_value_t = 4096)]
    pub rays: usize,
    /// Training steps timed.
    #[arg(long, default_value_t = 3)]
    pub steps: u64,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<crate::Error> for Failure {
    fn from(e: crate::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `std::env::args` and runs the command.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be >= 1".into()));
        }
        par::init_threads(n);
    }
    let det = cli.deterministic;
    match cli.command {
        Command::Train(a) => cmd_train(a, det),
        Command::Render(a) => cmd_render(a, det),
        Command::Eval(a) => cmd_eval(a, det),
        Command::ProbeAsg(a) => cmd_probe(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Bench(a) => cmd_bench(a, det),
    }
}

fn load_config(path: &Path) -> std::result::Result<RunConfig, Failure> {
    if !path.is_file() {
        return Err(Failure::Usage(format!("config file {} not found", path.display())));
    }
    RunConfig::load(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn parse_split(s: &str) -> std::result::Result<Split, Failure> {
    s.parse().map_err(|e: crate::Error| Failure::Usage(e.to_string()))
}

fn print_json(value: serde_json::Value) {
    println!("{value}");
}

fn cmd_train(a: TrainArgs, det: bool) -> CmdResult {
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    if let Some(path) = &a.resume {
        let header = read_header(path).with_context(|| format!("reading {}", path.display()))?;
        return match header.config.precision {
            Precision::F32 => resume_typed::<f32>(&a, path, det),
            Precision::F64 => resume_typed::<f64>(&a, path, det),
        };
    }
    let mut cfg = load_config(a.config.as_deref().expect("clap enforces --config"))?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(steps) = a.steps {
        cfg.train.steps = steps;
    }
    cfg.train.deterministic |= det;
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    match cfg.precision {
        Precision::F32 => {
            let state = TrainState::<f32>::init(&cfg)?;
            train_typed(&a, cfg, state)
        }
        Precision::F64 => {
            let state = TrainState::<f64>::init(&cfg)?;
            train_typed(&a, cfg, state)
        }
    }
}

fn resume_typed<T: Real>(a: &TrainArgs, path: &Path, det: bool) -> CmdResult {
    let Checkpoint { mut config, state } = load_checkpoint::<T>(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(steps) = a.steps {
        config.train.steps = steps;
    }
    config.train.deterministic |= det;
    train_typed(a, config, state)
}

fn train_typed<T: Real>(a: &TrainArgs, cfg: RunConfig, mut state: TrainState<T>) -> CmdResult {
    let dataset = load_data(&cfg.data, cfg.render.background).context("loading dataset")?;
    let log_path = a.out.join("metrics.jsonl");
    let log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    cfg.save(&a.out.join("config.json"))?;
    let mut opts = TrainOptions {
        out_dir: Some(a.out.clone()),
        log: Some(Box::new(log)),
        until: a.until,
    };
    let summary = train_loop(&cfg, &dataset, &mut state, &mut opts)?;
    print_json(json!({
        "command": "train",
        "final_step": summary.final_step,
        "steps_run": summary.steps_run,
        "loss": summary.last_terms.total,
        "evals": summary.evals,
        "wall_time_s": summary.wall_time_s,
        "out": a.out,
    }));
    Ok(())
}

/// Loads a checkpoint in whatever precision it was saved and runs `f`.
macro_rules! with_checkpoint {
    ($path:expr, |$ckpt:ident : $t:ident| $body:expr) => {{
        let header = read_header($path).with_context(|| format!("reading {}", $path.display()))?;
        match header.config.precision {
            Precision::F32 => {
                type $t = f32;
                let $ckpt = load_checkpoint::<$t>($path)?;
                $body
            }
            Precision::F64 => {
                type $t = f64;
                let $ckpt = load_checkpoint::<$t>($path)?;
                $body
            }
        }
    }};
}

fn set_exec(cfg: &mut RunConfig, det: bool) {
    if det {
        cfg.train.deterministic = true;
        cfg.render.exec = Exec::Sequential;
    }
}

#[derive(serde::Deserialize)]
#[serde(untagged)]
enum PoseFile {
    Bare(Vec<Vec<f64>>),
    Full {
        transform_matrix: Vec<Vec<f64>>,
        camera_angle_x: Option<f64>,
        width: Option<u32>,
        height: Option<u32>,
    },
}

fn pose_camera(a: &RenderArgs, path: &Path) -> std::result::Result<Camera, Failure> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let parsed: PoseFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let (m, fov, w, h) = match parsed {
        PoseFile::Bare(m) => (m, a.fov_x, a.width, a.height),
        PoseFile::Full {
            transform_matrix,
            camera_angle_x,
            width,
            height,
        } => (
            transform_matrix,
            camera_angle_x.unwrap_or(a.fov_x),
            width.unwrap_or(a.width),
            height.unwrap_or(a.height),
        ),
    };
    if m.len() != 4 || m.iter().any(|r| r.len() != 4) {
        return Err(Failure::Runtime(anyhow!("{}: pose is not a 4x4 matrix", path.display())));
    }
    let pose = std::array::from_fn(|r| std::array::from_fn(|c| m[r][c]));
    Ok(Camera::new(w, h, fov, pose)?)
}

fn dataset_for(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    load_data(&cfg.data, cfg.render.background).context("loading dataset")
}

fn cmd_render(a: RenderArgs, det: bool) -> CmdResult {
    let split = parse_split(&a.split)?;
    with_checkpoint!(&a.checkpoint, |ckpt: T| {
        let mut cfg = ckpt.config.clone();
        set_exec(&mut cfg, det);
        let pipeline = pipeline_for::<T>(&cfg)?;
        let (camera, gt) = match &a.pose {
            Some(p) => (pose_camera(&a, p)?, None),
            None => {
                let dataset = dataset_for(&cfg)?;
                let views = dataset.split(split);
                let view = views.get(a.camera_index).ok_or_else(|| {
                    Failure::Usage(format!(
                        "--camera-index {} out of range ({} {} views)",
                        a.camera_index,
                        views.len(),
                        split.as_str()
                    ))
                })?;
                (view.camera.clone(), Some(view.image.clone()))
            }
        };
        let (image, depth) = render_view(&pipeline, &ckpt.state.params, &camera)?;
        save_rgb_png(&a.out, &image)?;
        if let Some(dpath) = &a.depth {
            let max = a.depth_max.unwrap_or_else(|| {
                let half_diag: f64 = (0..3)
                    .map(|k| {
                        let e = cfg.model.appearance.bbox_max[k] - cfg.model.appearance.bbox_min[k];
                        e * e
                    })
                    .sum::<f64>()
                    .sqrt()
                    / 2.0;
                let o = camera.origin();
                (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt() + half_diag
            });
            save_depth_png(dpath, camera.width as usize, camera.height as usize, &depth, max)?;
        }
        let score = match &gt {
            Some(g) => Some(psnr(&image, g)?),
            None => None,
        };
        print_json(json!({
            "command": "render",
            "out": a.out,
            "depth": a.depth,
            "width": camera.width,
            "height": camera.height,
            "psnr": score,
        }));
        Ok(())
    })
}

fn cmd_eval(a: EvalArgs, det: bool) -> CmdResult {
    let split = parse_split(&a.split)?;
    if a.downscale == 0 {
        return Err(Failure::Usage("--downscale must be >= 1".into()));
    }
    with_checkpoint!(&a.checkpoint, |ckpt: T| {
        let mut cfg = ckpt.config.clone();
        set_exec(&mut cfg, det);
        let pipeline = pipeline_for::<T>(&cfg)?;
        let dataset = match &a.dataset {
            Some(dir) => load_nerf_synthetic_scaled(dir, split, cfg.render.background, a.downscale)?,
            None => dataset_for(&cfg)?,
        };
        let report = evaluate(&pipeline, &ckpt.state.params, &dataset, split, a.max_views)?;
        for img in &report.images {
            print_json(json!({"split": split, "index": img.index, "psnr": img.psnr, "ssim": img.ssim}));
        }
        print_json(json!({
            "split": split,
            "images": report.images.len(),
            "mean_psnr": report.mean_psnr,
            "mean_ssim": report.mean_ssim,
        }));
        Ok(())
    })
}

fn parse_point(s: &str) -> std::result::Result<[f64; 3], Failure> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Failure::Usage(format!("--point expects X,Y,Z, got {s:?}")));
    }
    let mut p = [0.0; 3];
    for (v, t) in p.iter_mut().zip(&parts) {
        *v = t
            .parse()
            .map_err(|_| Failure::Usage(format!("--point component {t:?} is not a number")))?;
    }
    Ok(p)
}

fn cmd_probe(a: ProbeArgs) -> CmdResult {
    let point = parse_point(&a.point)?;
    if a.map_width < 2 {
        return Err(Failure::Usage("--map-width must be >= 2".into()));
    }
    with_checkpoint!(&a.checkpoint, |ckpt: T| {
        let pipeline = pipeline_for::<T>(&ckpt.config)?;
        let bundle = pipeline.probe(&ckpt.state.params, point.map(T::lit))?;
        let model = &ckpt.config.model;
        let frames = build_lobe_frames(model.lobe_rows, model.lobe_cols)?;
        std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
        let (w, h) = (a.map_width, a.map_width / 2);
        let mut sum = vec![0.0; w * h];
        let mut variances = Vec::with_capacity(frames.len());
        for (i, frame) in frames.frames.iter().enumerate() {
            let map = envelope_map(frame, bundle.lambda[i].as_f64(), bundle.mu[i].as_f64(), w, h);
            for (s, v) in sum.iter_mut().zip(&map) {
                *s += v;
            }
            let mean = map.iter().sum::<f64>() / map.len() as f64;
            variances.push(map.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / map.len() as f64);
            save_gray_png(&a.out.join(format!("lobe_{i:03}.png")), w, h, &map)?;
        }
        let peak = sum.iter().copied().fold(0.0, f64::max);
        let normalized: Vec<f64> = sum.iter().map(|v| if peak > 0.0 { v / peak } else { 0.0 }).collect();
        save_gray_png(&a.out.join("envelope_sum.png"), w, h, &normalized)?;
        let summary = json!({
            "command": "probe-asg",
            "point": point,
            "normal": bundle.n.map(|v| v.as_f64()),
            "lambda": bundle.lambda.iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
            "mu": bundle.mu.iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
            "map_variance": variances,
            "maps": frames.len(),
            "out": a.out,
        });
        std::fs::write(a.out.join("probe.json"), summary.to_string()).context("writing probe.json")?;
        print_json(summary);
        Ok(())
    })
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    if !(a.eps > 0.0 && a.threshold > 0.0) {
        return Err(Failure::Usage("--eps and --threshold must be positive".into()));
    }
    let Scale::Tiny = a.scale;
    let start = Instant::now();
    let opts = FdOptions {
        eps: a.eps,
        max_coords_per_tensor: a.max_coords,
        seed: a.seed,
        ..FdOptions::default()
    };
    let report = gradcheck_tiny(a.seed, &opts)?;
    let passed = report.passed(a.threshold);
    print_json(json!({
        "command": "gradcheck",
        "passed": passed,
        "threshold": a.threshold,
        "checked": report.checked,
        "flagged": report.flagged,
        "max_rel_error": report.max_rel_error,
        "max_abs_error": report.max_abs_error,
        "worst": report.worst,
        "wall_time_s": start.elapsed().as_secs_f64(),
    }));
    if passed {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow!(
            "max relative error {:.3e} exceeds {:.1e}",
            report.max_rel_error,
            a.threshold
        )))
    }
}

fn cmd_bench(a: BenchArgs, det: bool) -> CmdResult {
    let mut cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => RunConfig::desk(),
    };
    set_exec(&mut cfg, det);
    if a.rays == 0 {
        return Err(Failure::Usage("--rays must be >= 1".into()));
    }
    match cfg.precision {
        Precision::F32 => bench_typed::<f32>(&a, &cfg),
        Precision::F64 => bench_typed::<f64>(&a, &cfg),
    }
}

fn bench_typed<T: Real>(a: &BenchArgs, cfg: &RunConfig) -> CmdResult {
    let dataset = dataset_for(cfg)?;
    let pipeline = pipeline_for::<T>(cfg)?;
    let mut state = TrainState::<T>::init(cfg)?;
    let views = dataset.split(Split::Train);
    let mut rng = step_rng(cfg.train.seed, 0);
    let batch = sample_batch::<T>(&views, a.rays, cfg.render.samples_per_ray, false, &mut rng)?;
    let rays: Vec<Ray<T>> = batch.rays.clone();

    let t0 = Instant::now();
    pipeline.render_rays(&state.params, &rays)?;
    let render_s = t0.elapsed().as_secs_f64();

    let mut bench_cfg = cfg.clone();
    bench_cfg.train.steps = a.steps;
    bench_cfg.train.eval_every = 0;
    bench_cfg.train.checkpoint_every = 0;
    bench_cfg.train.log_every = 0;
    let t1 = Instant::now();
    train_loop(&bench_cfg, &dataset, &mut state, &mut TrainOptions::default())?;
    let train_s = t1.elapsed().as_secs_f64();

    let data_kind = match &cfg.data {
        DataConfig::Procedural(_) => "procedural",
        DataConfig::NerfSynthetic { .. } => "nerf_synthetic",
    };
    print_json(json!({
        "command": "bench",
        "data": data_kind,
        "exec": cfg.render.exec,
        "threads": par::threads(),
        "render_rays": a.rays,
        "render_rays_per_s": a.rays as f64 / render_s,
        "train_steps": a.steps,
        "train_steps_per_s": a.steps as f64 / train_s,
        "train_rays_per_s": (a.steps as usize * cfg.train.batch_rays) as f64 / train_s,
    }));
    Ok(())
}
