use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use flows_core::eval::{evaluate, EvalOptions};
use flows_core::exec::Exec;
use flows_core::scenesynth::{generate_dataset, Split};
use flows_core::{Model, RunConfig, Variant};

// Evaluation of an untrained default-size model on 256 test scenes, chunked
// so that each mode has several independent work items to spread.
fn bench_eval(c: &mut Criterion) {
    let cfg = RunConfig { test_size: 256, ..RunConfig::default() };
    let (scenes, _) = generate_dataset(&cfg.scenario(), Split::Test).unwrap();
    let model = Model::new(&cfg, 1);
    let mut group = c.benchmark_group("evaluate_256_scenes");
    group.sample_size(10);
    for steps in [1, 4] {
        for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
            let opts = EvalOptions { steps, exec, threads: 0, chunk: 16 };
            group.bench_with_input(BenchmarkId::new(name, steps), &opts, |b, opts| {
                b.iter(|| black_box(evaluate(&model, &model.params, &cfg, Variant::Full, &scenes, opts).unwrap()))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, bench_eval);
criterion_main!(benches);
