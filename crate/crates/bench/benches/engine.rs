use bdctm::likelihood::{loglik_and_grad, ConditionalPosterior};
use bdctm::model::{assemble_block_precisions, build_design};
use bdctm::sampler::Nuts;
use bdctm::synthetic::{archetype, Archetype};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn gradient(c: &mut Criterion) {
    let mut group = c.benchmark_group("loglik_and_grad");
    for kind in Archetype::ALL {
        let (spec, data) = archetype(kind, 500, 1);
        let md = build_design(&spec, &data).unwrap();
        let beta = md.model.layout.initial_state().beta;
        let mut grad = vec![0.0; beta.len()];
        group.bench_with_input(BenchmarkId::from_parameter(kind.name()), &beta, |b, beta| {
            b.iter(|| loglik_and_grad(&md.model, &md.design, black_box(beta), &mut grad))
        });
    }
    group.finish();
}

fn nuts_transition(c: &mut Criterion) {
    let (spec, data) = archetype(Archetype::ShiftCount, 250, 2);
    let md = build_design(&spec, &data).unwrap();
    let state = md.model.layout.initial_state();
    let precision = assemble_block_precisions(&md.model.layout, &state).unwrap();
    let target = ConditionalPosterior {
        model: &md.model,
        design: &md.design,
        precision: &precision,
    };
    let nuts = Nuts::new(md.model.dim(), 0.1, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    c.bench_function("nuts_transition/shift count", |b| {
        b.iter(|| nuts.transition(&target, black_box(&state.beta), &mut rng).unwrap())
    });
}

criterion_group!(benches, gradient, nuts_transition);
criterion_main!(benches);
