//! Reverse-mode gradients of the GAN objectives against central differences.

use ganuq_core::gan::{trace_critic_loss, trace_generator_loss};
use ganuq_core::ndmath::MlpParams;
use ganuq_core::rng::{rng_from_seed, standard_normal};
use ganuq_core::{CriticModel, GanConfig, GeneratorModel, Graph, Tensor};
use rand::Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn small_cfg() -> GanConfig {
    GanConfig { d_noise: 3, generator_hidden: vec![6, 5], critic_hidden: vec![7, 5], critic_dim: 4, ..GanConfig::default() }
}

struct Fixture {
    cond: Tensor,
    y_r: Tensor,
    y_g: Tensor,
    y_gp: Tensor,
    z: Tensor,
    zp: Tensor,
    eps: Vec<f64>,
}

fn fixture(rows: usize, cond_dim: usize, resp_dim: usize, d_noise: usize, seed: u64) -> Fixture {
    let mut rng = rng_from_seed(seed);
    Fixture {
        cond: standard_normal(rows, cond_dim, &mut rng),
        y_r: standard_normal(rows, resp_dim, &mut rng),
        y_g: standard_normal(rows, resp_dim, &mut rng),
        y_gp: standard_normal(rows, resp_dim, &mut rng),
        z: standard_normal(rows, d_noise, &mut rng),
        zp: standard_normal(rows, d_noise, &mut rng),
        eps: (0..rows).map(|_| rng.random::<f64>()).collect(),
    }
}

/// Flat copy of every parameter, in `tensors_mut` order.
fn flatten(p: &MlpParams) -> Vec<f64> {
    p.tensors().iter().flat_map(|t| t.as_slice().to_vec()).collect()
}

fn set_flat(p: &mut MlpParams, k: usize, v: f64) {
    let mut k = k;
    for t in p.tensors_mut() {
        if k < t.len() {
            t.as_mut_slice()[k] = v;
            return;
        }
        k -= t.len();
    }
    panic!("parameter index out of range");
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

fn numeric_gradient(params: &MlpParams, f: impl Fn(&MlpParams) -> f64) -> Vec<f64> {
    let base = flatten(params);
    let mut p = params.clone();
    (0..base.len())
        .map(|k| {
            set_flat(&mut p, k, base[k] + H);
            let up = f(&p);
            set_flat(&mut p, k, base[k] - H);
            let down = f(&p);
            set_flat(&mut p, k, base[k]);
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn critic_loss_and_grad(critic: &CriticModel, fx: &Fixture, gp_weight: f64) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let vars = critic.mlp.register(&mut g, true);
    let out = trace_critic_loss(&mut g, critic, &vars, &fx.cond, &fx.y_r, &fx.y_g, &fx.y_gp, &fx.eps, gp_weight).unwrap();
    let grads = vars.gradients(&g.backward(out.total).unwrap(), &critic.mlp);
    (g.value(out.total).item(), grads.iter().flat_map(|t| t.as_slice().to_vec()).collect())
}

#[test]
fn critic_loss_with_penalty_matches_central_differences() {
    let cfg = small_cfg();
    let critic = CriticModel::init(2, 2, &cfg, 11).unwrap();
    let fx = fixture(9, 2, 2, cfg.d_noise, 12);
    let (_, analytic) = critic_loss_and_grad(&critic, &fx, 10.0);
    let numeric = numeric_gradient(&critic.mlp, |p| {
        let c = CriticModel { mlp: p.clone(), cond_dim: critic.cond_dim };
        critic_loss_and_grad(&c, &fx, 10.0).0
    });
    let err = relative_error(&analytic, &numeric);
    assert!(err < TOL, "relative error {err:e}");
}

#[test]
fn critic_surrogate_alone_matches_central_differences() {
    let cfg = small_cfg();
    let critic = CriticModel::init(1, 3, &cfg, 21).unwrap();
    let fx = fixture(7, 1, 3, cfg.d_noise, 22);
    let (_, analytic) = critic_loss_and_grad(&critic, &fx, 0.0);
    let numeric = numeric_gradient(&critic.mlp, |p| {
        let c = CriticModel { mlp: p.clone(), cond_dim: critic.cond_dim };
        critic_loss_and_grad(&c, &fx, 0.0).0
    });
    let err = relative_error(&analytic, &numeric);
    assert!(err < TOL, "relative error {err:e}");
}

fn generator_loss_and_grad(gen: &GeneratorModel, critic: &CriticModel, fx: &Fixture) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let gv = gen.mlp.register(&mut g, true);
    let cv = critic.mlp.register(&mut g, false);
    let c = g.constant(fx.cond.clone());
    let yr = g.constant(fx.y_r.clone());
    let z = g.constant(fx.z.clone());
    let zp = g.constant(fx.zp.clone());
    let yg = gen.trace(&mut g, &gv, c, z, None).unwrap();
    let ygp = gen.trace(&mut g, &gv, c, zp, None).unwrap();
    let loss = trace_generator_loss(&mut g, critic, &cv, c, yr, yg, ygp).unwrap();
    let grads = gv.gradients(&g.backward(loss).unwrap(), &gen.mlp);
    (g.value(loss).item(), grads.iter().flat_map(|t| t.as_slice().to_vec()).collect())
}

#[test]
fn generator_loss_matches_central_differences() {
    let cfg = small_cfg();
    let gen = GeneratorModel::init(2, 2, &cfg, 31).unwrap();
    let critic = CriticModel::init(2, 2, &cfg, 32).unwrap();
    let fx = fixture(8, 2, 2, cfg.d_noise, 33);
    let (_, analytic) = generator_loss_and_grad(&gen, &critic, &fx);
    let numeric = numeric_gradient(&gen.mlp, |p| {
        let m = GeneratorModel { mlp: p.clone(), ..gen.clone() };
        generator_loss_and_grad(&m, &critic, &fx).0
    });
    let err = relative_error(&analytic, &numeric);
    assert!(err < TOL, "relative error {err:e}");
}
