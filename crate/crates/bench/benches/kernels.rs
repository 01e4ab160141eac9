use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use difflab_core::fokker_planck::solve_leading_l;
use difflab_core::metrics::{w1_1d, w1_sliced_2d};
use difflab_core::oracle::{kl_exact, leading_l_exact};
use difflab_core::samplers::simulate_reverse;
use difflab_core::score_match::{draw, train_dsm, SwissRoll};
use difflab_core::{
    FpOptions, FpProblem, Gaussian1D, GaussianMixture, Grid1D, HProfile, OracleSpec, Perturbation,
    PerturbedScore, SamplerConfig, ScheduleParams, Scheme, TrainConfig, WeightScheme,
};

fn oracle(c: &mut Criterion) {
    let spec = OracleSpec::unit_case(0.2, 2.0, 20.0, 4, 0.02).unwrap();
    c.bench_function("oracle/kl_exact case4", |b| b.iter(|| kl_exact(black_box(&spec)).unwrap()));
    c.bench_function("oracle/leading_l_exact case4", |b| {
        b.iter(|| leading_l_exact(black_box(&spec)).unwrap())
    });
}

fn pde(c: &mut Criterion) {
    let model = Gaussian1D::new(0.5, 2.0).unwrap();
    let fp = FpProblem::new(
        &model,
        model.schedule,
        HProfile::ConstUnitTime(5f64.sqrt()),
        Perturbation::case(1, 1.0).unwrap(),
    )
    .unwrap();
    let grid = Grid1D::new(Grid1D::for_scale(0.5).half_width, 400).unwrap();
    let opts = FpOptions {
        dt: Some(fp.start_dt()),
        ..FpOptions::default()
    };
    let mut g = c.benchmark_group("pde");
    g.sample_size(10);
    g.bench_function("solve_leading_l n=400 fixed dt", |b| {
        b.iter(|| solve_leading_l(&fp, &grid, &opts).unwrap())
    });
    g.finish();
}

fn samplers(c: &mut Criterion) {
    let model = Gaussian1D::new(0.5, 2.0).unwrap();
    let exact = PerturbedScore::exact(&model, 2.0);
    let gm = GaussianMixture::four_mode_2d(ScheduleParams::unit(4.0).unwrap());
    let gm_score = PerturbedScore::exact(&gm, 4.0);
    let mut g = c.benchmark_group("samplers");
    g.sample_size(10);
    for (name, scheme) in [("em", Scheme::EulerMaruyama), ("ei", Scheme::ExponentialIntegrator)] {
        let cfg = SamplerConfig::new(scheme, 1000, 10_000, 0, 1.0);
        g.bench_function(format!("gaussian {name} 1e3 steps x 1e4"), |b| {
            b.iter(|| simulate_reverse(&exact, &model.schedule, &cfg, None).unwrap())
        });
    }
    let cfg = SamplerConfig::new(Scheme::EulerMaruyama, 1000, 10_000, 0, 1.0);
    g.bench_function("gmm2d em 1e3 steps x 1e4", |b| {
        b.iter(|| simulate_reverse(&gm_score, &gm.schedule, &cfg, None).unwrap())
    });
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let roll = SwissRoll::new();
    let a = draw(&roll, 10_000, 1);
    let b2 = draw(&roll, 10_000, 2);
    let xa: Vec<f64> = a.iter().step_by(2).copied().collect();
    let xb: Vec<f64> = b2.iter().step_by(2).copied().collect();
    c.bench_function("metrics/w1_1d 1e4", |b| b.iter(|| w1_1d(black_box(&xa), black_box(&xb)).unwrap()));
    c.bench_function("metrics/w1_sliced_2d 1e4 x 64", |b| {
        b.iter(|| w1_sliced_2d(black_box(&a), black_box(&b2), 64, 0).unwrap())
    });
}

fn training(c: &mut Criterion) {
    let roll = SwissRoll::new();
    let params = ScheduleParams::standard_vp();
    let cfg = TrainConfig {
        steps: 200,
        ..TrainConfig::default()
    };
    let mut g = c.benchmark_group("score_match");
    g.sample_size(10);
    g.bench_function("train_dsm 200 steps batch 400", |b| {
        b.iter_batched(
            || cfg,
            |cfg| train_dsm(&roll, &params, WeightScheme::Default, &cfg).unwrap(),
            BatchSize::SmallInput,
        )
    });
    g.finish();
}

criterion_group!(benches, oracle, pde, samplers, metrics, training);
criterion_main!(benches);
