use criterion::{black_box, criterion_group, criterion_main, Criterion};

use ganuq_core::data::generate_synthetic;
use ganuq_core::distill::{distill, DistillConfig, RegressorConfig};
use ganuq_core::ensemble::train_adversarial_ensemble;
use ganuq_core::gan::train_gan;
use ganuq_core::rng::{rng_from_seed, standard_normal};
use ganuq_core::{AdversarialSchedule, Activation, GanConfig, MlpParams, Normalizer, SystUncertainty, UncertainGenerator};

fn small_gan(steps: usize) -> GanConfig {
    GanConfig {
        batch_size: 128,
        generator_steps: steps,
        d_noise: 4,
        generator_hidden: vec![32, 32],
        critic_hidden: vec![32, 32],
        critic_dim: 8,
        gp_weight: 0.1,
        seed: 1,
        ..GanConfig::default()
    }
}

fn matmul(c: &mut Criterion) {
    let mut rng = rng_from_seed(1);
    let a = standard_normal(256, 64, &mut rng);
    let b = standard_normal(64, 64, &mut rng);
    c.bench_function("matmul 256x64x64", |bench| bench.iter(|| black_box(a.matmul(&b).unwrap())));
}

fn mlp_forward(c: &mut Criterion) {
    let mlp = MlpParams::init(&[8, 64, 64, 5], Activation::LeakyRelu { slope: 0.2 }, Activation::Linear, 2).unwrap();
    let x = standard_normal(1024, 8, &mut rng_from_seed(2));
    c.bench_function("mlp forward 1024 rows", |bench| bench.iter(|| black_box(mlp.forward(&x).unwrap())));
}

fn gan_steps(c: &mut Criterion) {
    let ds = generate_synthetic(&Default::default(), 4_000).unwrap();
    let train = Normalizer::fit(&ds).unwrap().apply(&ds).unwrap();
    let cfg = small_gan(10);
    let mut group = c.benchmark_group("gan");
    group.sample_size(10);
    group.bench_function("10 generator steps with penalty", |bench| bench.iter(|| black_box(train_gan(&cfg, &train).unwrap())));
    group.finish();
}

fn distilled_prediction(c: &mut Criterion) {
    let ds = generate_synthetic(&Default::default(), 4_000).unwrap();
    let train = Normalizer::fit(&ds).unwrap().apply(&ds).unwrap();
    let schedule = AdversarialSchedule { alpha_initial: 1.0, phase1_steps: 5, phase3_steps: 5 };
    let ensemble = train_adversarial_ensemble(&small_gan(5), &schedule, 3, &train).unwrap();
    let cfg = DistillConfig { n_pairs: 2_000, regressor: RegressorConfig { epochs: 1, ..RegressorConfig::default() }, ..DistillConfig::default() };
    let syst = SystUncertainty::new(distill(&ensemble, &train.conditions, &cfg).unwrap());
    let points = train.conditions.clone();
    let mut group = c.benchmark_group("sigma_syst");
    group.bench_function("distilled, 4000 rows", |bench| bench.iter(|| black_box(syst.sigma_syst(&points).unwrap())));
    group.sample_size(10);
    group.bench_function("ensemble sampling, 4000 rows", |bench| {
        let mut rng = rng_from_seed(3);
        bench.iter(|| black_box(ensemble.sample_members(&points, &mut rng).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, matmul, mlp_forward, gan_steps, distilled_prediction);
criterion_main!(benches);
