use radfield::io::dataset::{Dataset, View};
use radfield::io::Split;
use radfield::metrics::Image;
use radfield::train::{evaluate, pipeline_for, train_loop, TrainOptions};
use radfield::{Camera, ModelConfig, RunConfig, TrainState};

const COLOR: [f32; 3] = [0.2, 0.6, 0.4];

fn constant_color_dataset() -> Dataset {
    let eyes = [[3.0, 0.0, 1.0], [-3.0, 0.0, 1.0], [0.0, 3.0, 1.0], [0.0, -3.0, 1.0]];
    let views = eyes
        .iter()
        .map(|&eye| View {
            camera: Camera::look_at(eye, [0.0; 3], 12, 12, 0.5).unwrap(),
            image: Image::filled(12, 12, COLOR).unwrap(),
            split: Split::Train,
        })
        .collect();
    Dataset::new(views, [-1.0; 3], [1.0; 3]).unwrap()
}

fn tiny_config(steps: u64) -> RunConfig {
    let mut cfg = RunConfig::smoke();
    cfg.model = ModelConfig::tiny();
    cfg.render.samples_per_ray = 16;
    cfg.train.steps = steps;
    cfg.train.batch_rays = 128;
    cfg.train.eval_every = 0;
    cfg.train.checkpoint_every = 0;
    cfg.train.log_every = 0;
    cfg.train.deterministic = true;
    // a short run, so a faster schedule than the paper's
    cfg.train.lr_field = 2e-2;
    cfg.train.lr_mlp = 1e-2;
    cfg
}

fn train_mse(cfg: &RunConfig, data: &Dataset, state: &TrainState<f32>) -> f64 {
    let pipeline = pipeline_for::<f32>(cfg).unwrap();
    let report = evaluate(&pipeline, &state.params, data, Split::Train, 0).unwrap();
    report.images.iter().map(|s| 10f64.powf(-s.psnr / 10.0)).sum::<f64>() / report.images.len() as f64
}

#[test]
fn tiny_model_fits_constant_color() {
    let cfg = tiny_config(200);
    let data = constant_color_dataset();
    let mut state = TrainState::<f32>::init(&cfg).unwrap();
    let before = train_mse(&cfg, &data, &state);
    let summary = train_loop(&cfg, &data, &mut state, &mut TrainOptions::default()).unwrap();
    assert_eq!(summary.steps_run, 200);
    let after = train_mse(&cfg, &data, &state);
    assert!(after * 10.0 <= before, "MSE {before} -> {after}");
}

#[test]
fn zero_steps_leave_state_unchanged() {
    let cfg = tiny_config(0);
    let data = constant_color_dataset();
    let mut state = TrainState::<f32>::init(&cfg).unwrap();
    let fresh = state.clone();
    let summary = train_loop(&cfg, &data, &mut state, &mut TrainOptions::default()).unwrap();
    assert_eq!(summary.steps_run, 0);
    assert_eq!(state, fresh);
}
