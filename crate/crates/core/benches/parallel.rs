//! Sequential vs rayon for the two hot loops: batched sampling and the
//! training gradient. Both modes compute identical values; only wall time differs.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use membasin::config::RunConfig;
use membasin::guide::{GuidancePolicy, PrePhase};
use membasin::model::{Condition, DenoiserParams};
use membasin::par::{set_parallelism, Parallelism};
use membasin::rng::{label, StreamKey};
use membasin::sample::sample_batch;
use membasin::scenario::build_dataset;
use membasin::train::loss_and_grad_sampled;

const MODES: [(&str, Parallelism); 2] = [("sequential", Parallelism::Sequential), ("rayon", Parallelism::Rayon)];

fn setup() -> (RunConfig, DenoiserParams) {
    let cfg = RunConfig::default();
    let params = DenoiserParams::init(cfg.architecture(), StreamKey::root(cfg.seed).split(label::INIT)).unwrap();
    (cfg, params)
}

fn sampling(c: &mut Criterion) {
    let (cfg, params) = setup();
    let schedule = cfg.schedule.build().unwrap();
    let seeds: Vec<u64> = (0..64).collect();
    let policy = GuidancePolicy::dynamic(PrePhase::Zero, cfg.policy.lambda);
    let mut group = c.benchmark_group("sample_batch_64");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            set_parallelism(mode);
            b.iter(|| sample_batch(&schedule, &params, &policy, Condition::Class(0), &seeds, cfg.n_steps).unwrap())
        });
    }
    group.finish();
    set_parallelism(Parallelism::Rayon);
}

fn gradient(c: &mut Criterion) {
    let (cfg, params) = setup();
    let schedule = cfg.schedule.build().unwrap();
    let ds = build_dataset(&cfg.scenario_spec().unwrap()).unwrap();
    let batch: Vec<(&[f64], Condition)> = ds
        .records
        .iter()
        .take(cfg.train.batch_size)
        .map(|r| (r.x0.as_slice(), Condition::Class(r.condition)))
        .collect();
    let mut group = c.benchmark_group("loss_and_grad_256");
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            set_parallelism(mode);
            b.iter(|| loss_and_grad_sampled(&params, &batch, &schedule, StreamKey::root(3), 0.1).unwrap())
        });
    }
    group.finish();
    set_parallelism(Parallelism::Rayon);
}

criterion_group!(benches, sampling, gradient);
criterion_main!(benches);
