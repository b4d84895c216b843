use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use radfield::io::dataset::load_data;
use radfield::io::Split;
use radfield::par::Exec;
use radfield::render::{LossWeights, Pipeline};
use radfield::train::{sample_batch, step_rng};
use radfield::{ParameterSet, RunConfig};

const RAYS: usize = 256;

fn setup(exec: Exec) -> (Pipeline<f32>, ParameterSet<f32>, RunConfig) {
    let mut cfg = RunConfig::smoke();
    cfg.render.exec = exec;
    let pipeline = Pipeline::new(&cfg.model, &cfg.render).unwrap();
    let params = ParameterSet::init(&cfg.model, cfg.train.seed).unwrap();
    (pipeline, params, cfg)
}

fn bench_render(c: &mut Criterion) {
    let mut group = c.benchmark_group("render_rays");
    for exec in [Exec::Sequential, Exec::Parallel] {
        let (pipeline, params, cfg) = setup(exec);
        let data = load_data(&cfg.data, cfg.render.background).unwrap();
        let views = data.split(Split::Train);
        let batch = sample_batch::<f32>(&views, RAYS, cfg.render.samples_per_ray, false, &mut step_rng(0, 0)).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &batch, |b, batch| {
            b.iter(|| pipeline.render_rays(&params, &batch.rays).unwrap())
        });
    }
    group.finish();
}

fn bench_loss_and_grad(c: &mut Criterion) {
    let mut group = c.benchmark_group("loss_and_grad");
    for exec in [Exec::Sequential, Exec::Parallel] {
        let (pipeline, params, cfg) = setup(exec);
        let data = load_data(&cfg.data, cfg.render.background).unwrap();
        let views = data.split(Split::Train);
        let batch = sample_batch::<f32>(&views, RAYS, cfg.render.samples_per_ray, true, &mut step_rng(0, 0)).unwrap();
        let weights = LossWeights {
            alpha: cfg.train.alpha as f32,
            beta: cfg.train.beta as f32,
        };
        let mut grad = params.zeros_like();
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &batch, |b, batch| {
            b.iter(|| {
                grad.fill(0.0);
                pipeline.loss_and_grad(&params, batch, weights, Some(&mut grad)).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_render, bench_loss_and_grad
}
criterion_main!(benches);
