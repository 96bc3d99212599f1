//! Sequential against rayon-parallel execution of the batch hot paths.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use leaffm::data::{synth_generate, Instance, SynthSpec};
use leaffm::metrics::evaluate;
use leaffm::training::backward_batch;
use leaffm::{build_parameters, ModelConfig, Parallelism, Variant};

const MODES: [(&str, Parallelism); 2] = [("sequential", Parallelism::Sequential), ("parallel", Parallelism::Parallel)];

fn data() -> (Vec<usize>, Vec<Instance>) {
    let spec = SynthSpec { instances: 8192, ..SynthSpec::default() };
    let d = synth_generate(&spec).expect("synth");
    (d.vocab, d.instances)
}

fn backward(c: &mut Criterion) {
    let (vocab, instances) = data();
    let batch: Vec<&Instance> = instances.iter().take(1024).collect();
    let mut group = c.benchmark_group("backward_batch_1024");
    for variant in [Variant::Fm, Variant::LaFm, Variant::LsFm, Variant::LpFm] {
        let params = build_parameters(&ModelConfig {
            u: if variant == Variant::LpFm { 1 } else { 3 },
            ..ModelConfig::new(variant, vocab.clone())
        })
        .expect("params");
        for (name, mode) in MODES {
            group.bench_with_input(BenchmarkId::new(variant.name(), name), &mode, |b, &mode| {
                b.iter(|| black_box(backward_batch(&batch, &params, mode).expect("backward")))
            });
        }
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let (vocab, instances) = data();
    let params = build_parameters(&ModelConfig { u: 3, ..ModelConfig::new(Variant::LaFm, vocab) }).expect("params");
    let mut group = c.benchmark_group("evaluate_8192");
    group.sample_size(20);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::new("la_fm", name), &mode, |b, &mode| {
            b.iter(|| black_box(evaluate(&params, &instances, mode).expect("evaluate")))
        });
    }
    group.finish();
}

criterion_group!(benches, backward, evaluation);
criterion_main!(benches);
