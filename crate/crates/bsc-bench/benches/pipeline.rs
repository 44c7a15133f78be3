use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use bsc_core::harness::{run_placebo_study, Methods};
use bsc_core::nuts::{sample, SamplerSettings};
use bsc_core::pca::fit_pca_prior;
use bsc_core::scm::{fit_scm, simplex_project};
use bsc_core::testutil::{small_hyper, synthetic_context, synthetic_panel};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_gradient(c: &mut Criterion) {
    let ctx = synthetic_context(44, 17, 4, 30, 1);
    let v = ctx.initial_point(1);
    let mut grad = vec![0.0; v.len()];
    c.bench_function("logp_and_grad_germany_sized", |b| {
        b.iter(|| black_box(ctx.logp_and_grad(black_box(&v), &mut grad)))
    });
}

fn bench_pca(c: &mut Criterion) {
    let (panel, _) = synthetic_panel(44, 17, 4, 30, 2);
    c.bench_function("fit_pca_prior_germany_sized", |b| {
        b.iter(|| black_box(fit_pca_prior(black_box(&panel), 4, 2.0).unwrap()))
    });
}

fn bench_simplex_project(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let y: Vec<f64> = (0..38).map(|_| rng.random_range(-2.0..2.0)).collect();
    c.bench_function("simplex_project_38d", |b| {
        b.iter(|| black_box(simplex_project(black_box(&y))))
    });
}

fn bench_scm(c: &mut Criterion) {
    let (panel, _) = synthetic_panel(31, 10, 2, 19, 4);
    c.bench_function("fit_scm", |b| {
        b.iter(|| black_box(fit_scm(black_box(&panel)).unwrap()))
    });
}

fn bench_short_sampling(c: &mut Criterion) {
    let ctx = synthetic_context(12, 5, 2, 8, 5);
    let settings = SamplerSettings {
        chains: 1,
        tune: 100,
        draws: 100,
        target_accept: 0.85,
        max_treedepth: 8,
        seed: 5,
    };
    let mut group = c.benchmark_group("sampler");
    group.sample_size(10);
    group.bench_function("nuts_small_model_100_draws", |b| {
        b.iter(|| black_box(sample(&ctx, &settings).unwrap()))
    });
    group.finish();
}

fn bench_placebo_scm_only(c: &mut Criterion) {
    let (panel, _) = synthetic_panel(20, 8, 2, 14, 6);
    let settings = SamplerSettings {
        chains: 1,
        tune: 50,
        draws: 50,
        target_accept: 0.85,
        max_treedepth: 6,
        seed: 6,
    };
    let mut group = c.benchmark_group("harness");
    group.sample_size(10);
    group.bench_function("placebo_study_scm_only", |b| {
        b.iter(|| {
            black_box(
                run_placebo_study(
                    &panel,
                    &small_hyper(2),
                    &settings,
                    Methods {
                        bsc: false,
                        scm: true,
                    },
                    false,
                )
                .unwrap(),
            )
        })
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_gradient,
    bench_pca,
    bench_simplex_project,
    bench_scm,
    bench_short_sampling,
    bench_placebo_scm_only
);
criterion_main!(benches);
