use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use entaudit_core::exec::Exec;
use entaudit_core::fixture::{self, FixtureSpec};
use entaudit_core::gateway::{BiasProfile, MockBackend, PromptVariant, RunConfig};
use entaudit_core::runner::{execute, plan_run, ConfigMatrix, ExecuteOptions, ObservationStore};
use entaudit_core::scoring::{score_observations, Observation, ScoreOptions};
use entaudit_core::similarity::{build_vectors, similarity_matrix, VectorValues, DEFAULT_COVERAGE_THRESHOLD};

fn observations() -> (entaudit_core::runner::AuditData, Vec<Observation>) {
    let data = fixture::audit_data(&FixtureSpec { entities: 200, tasks: 2, templates_per_task: 100, ..Default::default() })
        .expect("fixture");
    let matrix = ConfigMatrix {
        tasks: vec![],
        models: vec!["mock".into()],
        languages: vec!["en".into()],
        variants: vec![PromptVariant::ZS_TEXT, PromptVariant::ZS_NUM],
    };
    let shifts = (0..200).map(|i| (format!("e{i:03}"), (i % 7) as f64 / 3.0 - 1.0)).collect();
    let backend = MockBackend::new(BiasProfile { shifts, noise_scale: 0.5, ..Default::default() });
    let manifest = plan_run(&data, &matrix).expect("plan");
    let dir = tempfile::tempdir().expect("tempdir");
    let mut store = ObservationStore::open(dir.path().join("obs.log")).expect("store");
    execute(&manifest, &data, &backend, &mut store, &ExecuteOptions::default()).expect("run");
    let obs = store.index().observations().cloned().collect();
    (data, obs)
}

fn bench(c: &mut Criterion) {
    let (data, obs) = observations();
    let config = RunConfig { task_id: "task0".into(), model_id: "mock".into(), language: "en".into(), variant: PromptVariant::ZS_TEXT };
    let vectors = build_vectors(&obs, &data.schemas, &config, DEFAULT_COVERAGE_THRESHOLD, VectorValues::Raw).expect("vectors");

    let mut scoring = c.benchmark_group("score_observations");
    scoring.sample_size(20);
    for exec in [Exec::Sequential, Exec::Parallel] {
        scoring.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| score_observations(&obs, &data.schemas, &ScoreOptions::default(), exec).expect("score"))
        });
    }
    scoring.finish();

    let mut sim = c.benchmark_group("similarity_matrix");
    sim.sample_size(20);
    for exec in [Exec::Sequential, Exec::Parallel] {
        sim.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| similarity_matrix(&vectors, exec).expect("matrix"))
        });
    }
    sim.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
