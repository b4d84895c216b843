//! Acceptance suite: one pass/fail line per criterion, nonzero exit if any
//! criterion that ran failed.
//!
//! Criteria 5 to 7 train nine desk-scale models for 5000 steps each and only
//! run with `RADFIELD_ACCEPTANCE_DESK=1`.

mod common;

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use radfield::diff::FdOptions;
use radfield::encoding::{asg_response, build_lobe_frames};
use radfield::io::dataset::load_data;
use radfield::io::Split;
use radfield::render::composite_weights;
use radfield::train::{evaluate, gradcheck_tiny, pipeline_for, train_loop, TrainOptions};
use radfield::{FeatureField, FieldConfig, ParameterSet, ReeSpace, RunConfig, TrainState};

use common::{dense_oracle, product_oracle, rel_err};

enum Outcome {
    Pass(String),
    Fail(String),
    NotRun(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let report = match gradcheck_tiny(0, &FdOptions::default()) {
        Ok(r) => r,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let secs = start.elapsed().as_secs_f64();
    verdict(
        report.passed(1e-4) && secs < 60.0,
        format!(
            "max rel {:.2e} over {} coords ({} flagged), {secs:.1} s",
            report.max_rel_error, report.checked, report.flagged
        ),
    )
}

fn compositing_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let n = rng.random_range(1..=128);
        let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..60.0)).collect();
        let delta: Vec<f64> = (0..n).map(|_| rng.random_range(1e-3..0.1)).collect();
        let (w, t) = composite_weights(&sigma, &delta);
        let (ow, ot) = product_oracle(&sigma, &delta);
        worst64 = worst64.max((w.iter().sum::<f64>() + t - 1.0).abs()).max((t - ot).abs());
        for (a, b) in w.iter().zip(&ow) {
            worst64 = worst64.max((a - b).abs());
        }

        let s32: Vec<f32> = sigma.iter().map(|&v| v as f32).collect();
        let d32: Vec<f32> = delta.iter().map(|&v| v as f32).collect();
        let (w, t) = composite_weights(&s32, &d32);
        let s64: Vec<f64> = s32.iter().map(|&v| v as f64).collect();
        let d64: Vec<f64> = d32.iter().map(|&v| v as f64).collect();
        let (ow, ot) = product_oracle(&s64, &d64);
        let total: f64 = w.iter().map(|&v| v as f64).sum::<f64>() + t as f64;
        worst32 = worst32.max((total - 1.0).abs()).max((t as f64 - ot).abs());
        for (a, b) in w.iter().zip(&ow) {
            worst32 = worst32.max((*a as f64 - b).abs());
        }
    }
    verdict(
        worst64 < 1e-12 && worst32 < 1e-6,
        format!("worst f64 {worst64:.1e}, f32 {worst32:.1e}"),
    )
}

fn field_oracles() -> Outcome {
    let cfg = FieldConfig {
        n_min: 4,
        n_max: 8,
        levels: 2,
        channels: 2,
        bbox_min: [-1.0, -0.5, -2.0],
        bbox_max: [1.0, 1.5, 0.5],
        init_std: 0.7,
    };
    let field = FeatureField::<f64>::init(cfg, 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shift = -0.5;
    let mut worst = 0.0f64;
    let points = 64;
    for _ in 0..points {
        let x: [f64; 3] = std::array::from_fn(|k| rng.random_range(field.config.bbox_min[k]..field.config.bbox_max[k]));
        let want = dense_oracle(&field, x);
        let got = field.sample_appearance(x).unwrap();
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max(rel_err(*g, *w));
        }
        let sigma = (1.0 + (shift + want.iter().sum::<f64>()).exp()).ln();
        worst = worst.max(rel_err(field.sample_density(x, shift).unwrap(), sigma));
    }
    verdict(worst < 1e-12, format!("{points} points, worst rel {worst:.1e}"))
}

fn asg_identities() -> Outcome {
    let frames = build_lobe_frames(8, 16).unwrap();
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let mut ortho = 0.0f64;
    for f in &frames.frames {
        for (a, b) in [(f.lobe, f.tangent), (f.lobe, f.bitangent), (f.tangent, f.bitangent)] {
            ortho = ortho.max(dot(a, b).abs());
        }
        for v in [f.lobe, f.tangent, f.bitangent] {
            ortho = ortho.max((dot(v, v) - 1.0).abs());
        }
    }
    let a = [0.7, -1.3];
    let mut identity = 0.0f64;
    for f in &frames.frames {
        let at_lobe = asg_response(f, f.lobe, &a, 2.0, 9.0).unwrap();
        let behind = asg_response(f, f.lobe.map(|v| -v), &a, 2.0, 9.0).unwrap();
        let tangent = asg_response(f, f.tangent, &a, 2.0, 9.0).unwrap();
        for k in 0..2 {
            identity = identity
                .max((at_lobe[k] - a[k]).abs())
                .max(behind[k].abs())
                .max(tangent[k].abs());
        }
    }
    let one = build_lobe_frames(1, 1).unwrap();
    let f = &one.frames[0];
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let omega: [f64; 3] = std::array::from_fn(|k| h * f.lobe[k] + h * f.bitangent[k]);
    let g = asg_response(f, omega, &[1.0, 1.0], 1.0, 1.0).unwrap()[0];
    let ok = frames.len() == 128 && ortho < 1e-9 && identity < 1e-12 && (g - 0.428882).abs() < 1e-6;
    verdict(
        ok,
        format!("{} frames, orthonormality {ortho:.1e}, identities {identity:.1e}, 45° value {g:.6}", frames.len()),
    )
}

struct DeskRun {
    /// Held-out PSNR at steps 2500 and 5000.
    held_out: [f64; 2],
    train: f64,
}

fn desk_run(cfg: &RunConfig, seed: u64) -> DeskRun {
    let mut cfg = cfg.clone();
    cfg.train.seed = seed;
    cfg.train.eval_every = 2500;
    cfg.train.checkpoint_every = 0;
    let data = load_data(&cfg.data, cfg.render.background).unwrap();
    let mut state = TrainState::<f32>::init(&cfg).unwrap();
    let summary = train_loop(&cfg, &data, &mut state, &mut TrainOptions::default()).unwrap();
    let psnr_at = |s: u64| summary.evals.iter().find(|e| e.0 == s).expect("eval recorded").1;
    let pipeline = pipeline_for::<f32>(&cfg).unwrap();
    let train = evaluate(&pipeline, &state.params, &data, Split::Train, 0).unwrap().mean_psnr;
    DeskRun {
        held_out: [psnr_at(2500), psnr_at(5000)],
        train,
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// The desk model with one level per field, its resolution chosen to match
/// the multiscale model's total parameter count as closely as possible.
fn single_level(cfg: &RunConfig) -> RunConfig {
    let target = ParameterSet::<f32>::init(&cfg.model, 0).unwrap().param_count() as f64;
    let with_res = |n: usize| {
        let mut c = cfg.clone();
        for f in [&mut c.model.appearance, &mut c.model.density] {
            f.levels = 1;
            f.n_min = n;
            f.n_max = n;
        }
        c
    };
    let count = |c: &RunConfig| c.model.appearance.param_count() + c.model.density.param_count();
    let base = cfg.model.appearance.param_count() + cfg.model.density.param_count();
    let best = (cfg.model.appearance.n_max..4 * cfg.model.appearance.n_max)
        .min_by_key(|&n| count(&with_res(n)).abs_diff(base))
        .unwrap();
    let out = with_res(best);
    let got = ParameterSet::<f32>::init(&out.model, 0).unwrap().param_count() as f64;
    assert!((got / target - 1.0).abs() <= 0.05, "unmatched parameter counts {got} vs {target}");
    out
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn desk_criteria() -> [Outcome; 3] {
    if std::env::var_os("RADFIELD_ACCEPTANCE_DESK").is_none() {
        let why = "set RADFIELD_ACCEPTANCE_DESK=1 to train the nine 5000-step desk models".to_string();
        return [Outcome::NotRun(why.clone()), Outcome::NotRun(why.clone()), Outcome::NotRun(why)];
    }
    let cfg = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json")).unwrap();
    let start = Instant::now();
    let full: Vec<DeskRun> = SEEDS.iter().map(|&s| desk_run(&cfg, s)).collect();
    let minutes = start.elapsed().as_secs_f64() / 60.0 / SEEDS.len() as f64;

    let train = median(full.iter().map(|r| r.train).collect());
    let held = median(full.iter().map(|r| r.held_out[1]).collect());
    let overfit = verdict(
        train >= 28.0 && held >= 25.0,
        format!("median train {train:.2} dB, held-out {held:.2} dB, {minutes:.1} min per run"),
    );

    let single_cfg = single_level(&cfg);
    let single: Vec<DeskRun> = SEEDS.iter().map(|&s| desk_run(&single_cfg, s)).collect();
    let m = |runs: &[DeskRun], i: usize| median(runs.iter().map(|r| r.held_out[i]).collect());
    let (l4, l1) = ([m(&full, 0), m(&full, 1)], [m(&single, 0), m(&single, 1)]);
    let multiscale = verdict(
        l4[0] > l1[0] && l4[1] > l1[1],
        format!(
            "L=4 {:.2}/{:.2} dB vs L=1 (res {}) {:.2}/{:.2} dB at 2500/5000",
            l4[0], l4[1], single_cfg.model.appearance.n_max, l1[0], l1[1]
        ),
    );

    let mut color_cfg = cfg.clone();
    color_cfg.model.ree_space = ReeSpace::Color;
    let color: Vec<DeskRun> = SEEDS.iter().map(|&s| desk_run(&color_cfg, s)).collect();
    let gap = l4[1] - m(&color, 1);
    let ree = verdict(gap >= 0.3, format!("feature minus color REE {gap:.2} dB"));
    [overfit, multiscale, ree]
}

fn hyperparameters() -> Outcome {
    let cfg = RunConfig::default();
    let m = &cfg.model;
    let t = &cfg.train;
    let snapshot = [
        (m.appearance.levels, 16),
        (m.appearance.n_min, 16),
        (m.appearance.n_max, 512),
        (m.appearance.channels, 4),
        (m.density.levels, 16),
        (m.density.n_min, 16),
        (m.density.n_max, 512),
        (m.density.channels, 2),
        (m.bottleneck, 128),
        (m.asg_channels, 2),
        (m.n_lobes(), 128),
        (m.spatial_layers, 3),
        (m.directional_layers, 6),
        (m.spatial_hidden, 256),
        (m.directional_hidden, 256),
        (t.batch_rays, 4096),
    ];
    let ints_ok = snapshot.iter().all(|(a, b)| a == b);
    let floats_ok = t.alpha == 0.3
        && t.beta == 4e-4
        && t.lr_field == 2e-3
        && t.lr_mlp == 1e-3
        && t.lr_final_factor == 0.1
        && m.ree_space == ReeSpace::Feature;
    let file = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json"));
    let file_ok = file.as_ref().is_ok_and(|f| *f == cfg);
    let count = m.appearance.param_count();
    let count_ok = (count as f64 / 8.5e6 - 1.0).abs() <= 0.02;
    verdict(
        ints_ok && floats_ok && file_ok && count_ok,
        format!("constants {ints_ok}/{floats_ok}, configs/default.json {file_ok}, appearance params {count}"),
    )
}

fn radfield(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_radfield"))
        .arg("--deterministic")
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn smoke_config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/smoke.json")
        .to_string_lossy()
        .into_owned()
}

fn same_file(a: &Path, b: &Path) -> Result<bool, String> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
    Ok(read(a)? == read(b)?)
}

fn determinism(dir: &Path) -> Outcome {
    let cfg = smoke_config();
    let result = (|| {
        for run in ["a", "b"] {
            let out = dir.join(run);
            radfield(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--steps", "200"])?;
        }
        same_file(&dir.join("a/step_000200.ckpt"), &dir.join("b/step_000200.ckpt"))
    })();
    match result {
        Ok(same) => verdict(same, format!("step-200 checkpoints identical: {same}")),
        Err(e) => Outcome::Fail(e),
    }
}

fn resume(dir: &Path) -> Outcome {
    let cfg = smoke_config();
    let out = dir.join("resumed");
    let out_s = out.to_str().unwrap();
    let result = (|| {
        radfield(&["train", "--config", &cfg, "--out", out_s, "--steps", "200", "--until", "100"])?;
        if out.join("step_000200.ckpt").exists() {
            return Err("interrupted run went past step 100".into());
        }
        let mid = out.join("step_000100.ckpt");
        radfield(&["train", "--resume", mid.to_str().unwrap(), "--out", out_s])?;
        same_file(&out.join("step_000200.ckpt"), &dir.join("a/step_000200.ckpt"))
    })();
    match result {
        Ok(same) => verdict(same, format!("resumed step-200 checkpoint identical: {same}")),
        Err(e) => Outcome::Fail(e),
    }
}

fn main() -> ExitCode {
    // libtest-style filters and flags are passed through by `cargo test`; a
    // filter that names another target's tests means this suite is not wanted
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return ExitCode::SUCCESS;
    }
    let dir = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 gradient oracle", gradient_oracle()),
        ("2 compositing conservation", compositing_conservation()),
        ("3 field oracles", field_oracles()),
        ("4 ASG identities", asg_identities()),
    ];
    let [overfit, multiscale, ree] = desk_criteria();
    results.push(("5 desk overfit", overfit));
    results.push(("6 multiscale convergence", multiscale));
    results.push(("7 REE feature vs color", ree));
    results.push(("8 hyperparameter conformance", hyperparameters()));
    results.push(("9 determinism", determinism(dir.path())));
    results.push(("10 checkpoint resume", resume(dir.path())));

    let mut failed = 0;
    for (name, outcome) in &results {
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::NotRun(d) => ("NOT RUN", d),
        };
        println!("acceptance {name}: {tag} ({detail})");
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
