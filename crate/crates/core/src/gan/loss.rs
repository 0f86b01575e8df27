//! Cramer GAN objectives.
//!
//! With `D` the critic embedding and `y'` an independent generated batch,
//! the per-row surrogate is `f(y) = |D(y) - D(y')| - |D(y)|`. The generator
//! minimizes `mean f(y_r) - mean f(y_g)`; the critic maximizes it under a
//! gradient penalty on random interpolates of real and generated rows.

use crate::error::{Error, Result};
use crate::gan::CriticModel;
use crate::ndmath::{Graph, MlpVars, Tensor, Var};

/// Rowwise surrogate `f(y)` given the already traced reference embedding
/// `d_ref = D(y')`. Returns a `rows x 1` column.
pub fn trace_surrogate(
    g: &mut Graph,
    critic: &CriticModel,
    vars: &MlpVars,
    conditions: Var,
    y: Var,
    d_ref: Var,
) -> Result<Var> {
    let d_y = critic.trace(g, vars, conditions, y)?;
    let diff = g.sub(d_y, d_ref)?;
    let to_ref = g.row_norm(diff);
    let own = g.row_norm(d_y);
    g.sub(to_ref, own)
}

/// `mean f(y_r) - mean f(y_g)`.
pub fn trace_generator_loss(
    g: &mut Graph,
    critic: &CriticModel,
    vars: &MlpVars,
    conditions: Var,
    y_real: Var,
    y_gen: Var,
    y_gen_prime: Var,
) -> Result<Var> {
    let d_ref = critic.trace(g, vars, conditions, y_gen_prime)?;
    trace_loss_with_ref(g, critic, vars, conditions, y_real, y_gen, d_ref)
}

fn trace_loss_with_ref(
    g: &mut Graph,
    critic: &CriticModel,
    vars: &MlpVars,
    conditions: Var,
    y_real: Var,
    y_gen: Var,
    d_ref: Var,
) -> Result<Var> {
    let f_real = trace_surrogate(g, critic, vars, conditions, y_real, d_ref)?;
    let f_gen = trace_surrogate(g, critic, vars, conditions, y_gen, d_ref)?;
    let diff = g.sub(f_real, f_gen)?;
    Ok(g.mean(diff))
}

#[derive(Clone, Copy, Debug)]
pub struct CriticLossVars {
    pub total: Var,
    /// `mean f(y_r) - mean f(y_g)`, the quantity the critic maximizes.
    pub surrogate: Var,
    pub penalty: Option<Var>,
}

/// `y_hat = eps * y_r + (1 - eps) * y_g` with one `eps` per row.
pub fn interpolate(y_real: &Tensor, y_gen: &Tensor, eps: &[f64]) -> Result<Tensor> {
    y_real.check_same(y_gen, "interpolate")?;
    if eps.len() != y_real.rows() {
        return Err(Error::dim("interpolate", y_real.rows(), eps.len()));
    }
    let mut out = y_real.clone();
    for (r, &e) in eps.iter().enumerate() {
        for (o, &b) in out.row_mut(r).iter_mut().zip(y_gen.row(r)) {
            *o = e * *o + (1.0 - e) * b;
        }
    }
    Ok(out)
}

/// Critic objective
/// `-(mean f(y_r) - mean f(y_g)) + gp_weight * mean (|grad_y f(y_hat)| - 1)^2`.
///
/// The responses are treated as constants; `eps` holds the interpolation
/// weight for every row.
#[allow(clippy::too_many_arguments)]
pub fn trace_critic_loss(
    g: &mut Graph,
    critic: &CriticModel,
    vars: &MlpVars,
    conditions: &Tensor,
    y_real: &Tensor,
    y_gen: &Tensor,
    y_gen_prime: &Tensor,
    eps: &[f64],
    gp_weight: f64,
) -> Result<CriticLossVars> {
    y_real.check_same(y_gen, "critic_loss")?;
    y_real.check_same(y_gen_prime, "critic_loss")?;
    let c = g.constant(conditions.clone());
    let yr = g.constant(y_real.clone());
    let yg = g.constant(y_gen.clone());
    let ygp = g.constant(y_gen_prime.clone());
    let d_ref = critic.trace(g, vars, c, ygp)?;
    let surrogate = trace_loss_with_ref(g, critic, vars, c, yr, yg, d_ref)?;
    let neg = g.scale(surrogate, -1.0);
    if gp_weight == 0.0 {
        return Ok(CriticLossVars { total: neg, surrogate, penalty: None });
    }
    let y_hat = g.param(interpolate(y_real, y_gen, eps)?);
    let f_hat = trace_surrogate(g, critic, vars, c, y_hat, d_ref)?;
    // f is rowwise, so the gradient of its sum holds every row's gradient.
    let total_f = g.sum(f_hat);
    let grad = g.grad(total_f, &[y_hat])?[0];
    let norm = g.row_norm(grad);
    let dev = g.add_scalar(norm, -1.0);
    let sq = g.square(dev);
    let penalty = g.mean(sq);
    let weighted = g.scale(penalty, gp_weight);
    let total = g.add(neg, weighted)?;
    Ok(CriticLossVars { total, surrogate, penalty: Some(penalty) })
}

/// Rowwise `f(y) = |D(y) - D(y')| - |D(y)|`.
pub fn critic_surrogate_f(
    critic: &CriticModel,
    y: &Tensor,
    y_gen_prime: &Tensor,
    conditions: &Tensor,
) -> Result<Vec<f64>> {
    y.check_same(y_gen_prime, "critic_surrogate_f")?;
    let mut g = Graph::new();
    let vars = critic.mlp.register(&mut g, false);
    let c = g.constant(conditions.clone());
    let yv = g.constant(y.clone());
    let ypv = g.constant(y_gen_prime.clone());
    let d_ref = critic.trace(&mut g, &vars, c, ypv)?;
    let f = trace_surrogate(&mut g, critic, &vars, c, yv, d_ref)?;
    Ok(g.value(f).as_slice().to_vec())
}

/// Batch mean of `f(y_r) - f(y_g)`.
pub fn generator_loss(
    critic: &CriticModel,
    y_real: &Tensor,
    y_gen: &Tensor,
    y_gen_prime: &Tensor,
    conditions: &Tensor,
) -> Result<f64> {
    y_real.check_same(y_gen, "generator_loss")?;
    y_real.check_same(y_gen_prime, "generator_loss")?;
    let mut g = Graph::new();
    let vars = critic.mlp.register(&mut g, false);
    let c = g.constant(conditions.clone());
    let yr = g.constant(y_real.clone());
    let yg = g.constant(y_gen.clone());
    let ygp = g.constant(y_gen_prime.clone());
    let loss = trace_generator_loss(&mut g, critic, &vars, c, yr, yg, ygp)?;
    Ok(g.value(loss).item())
}

pub fn critic_loss(
    critic: &CriticModel,
    y_real: &Tensor,
    y_gen: &Tensor,
    y_gen_prime: &Tensor,
    conditions: &Tensor,
    eps: &[f64],
    gp_weight: f64,
) -> Result<f64> {
    if !(gp_weight >= 0.0) {
        return Err(Error::Config("gradient-penalty weight must be non-negative".into()));
    }
    let mut g = Graph::new();
    let vars = critic.mlp.register(&mut g, true);
    let out = trace_critic_loss(&mut g, critic, &vars, conditions, y_real, y_gen, y_gen_prime, eps, gp_weight)?;
    Ok(g.value(out.total).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gan::GanConfig;
    use crate::ndmath::{Activation, Layer, MlpParams};
    use crate::rng::{rng_from_seed, standard_normal};

    fn small_critic(seed: u64) -> CriticModel {
        let cfg = GanConfig { critic_hidden: vec![6, 6], critic_dim: 4, ..GanConfig::default() };
        CriticModel::init(2, 3, &cfg, seed).unwrap()
    }

    fn batch(seed: u64, rows: usize, cols: usize) -> Tensor {
        standard_normal(rows, cols, &mut rng_from_seed(seed))
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn surrogate_matches_naive_rows() {
        let critic = small_critic(1);
        let (c, y, yp) = (batch(2, 7, 2), batch(3, 7, 3), batch(4, 7, 3));
        let f = critic_surrogate_f(&critic, &y, &yp, &c).unwrap();
        for (r, &fr) in f.iter().enumerate() {
            let cy = Tensor::from_rows(&[c.row(r).to_vec()]).unwrap();
            let dy = critic.embed(&cy, &Tensor::from_rows(&[y.row(r).to_vec()]).unwrap()).unwrap();
            let dp = critic.embed(&cy, &Tensor::from_rows(&[yp.row(r).to_vec()]).unwrap()).unwrap();
            let diff: Vec<f64> = dy.as_slice().iter().zip(dp.as_slice()).map(|(a, b)| a - b).collect();
            let expected = norm(&diff) - norm(dy.as_slice());
            assert!((fr - expected).abs() <= 1e-12 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn surrogate_with_identical_reference_is_minus_norm() {
        let critic = small_critic(1);
        let (c, y) = (batch(2, 5, 2), batch(3, 5, 3));
        let f = critic_surrogate_f(&critic, &y, &y, &c).unwrap();
        let d = critic.embed(&c, &y).unwrap();
        for (r, &fr) in f.iter().enumerate() {
            assert_eq!(fr, -norm(d.row(r)));
            assert!(fr <= 0.0);
        }
    }

    fn zero_critic() -> CriticModel {
        let mut critic = small_critic(1);
        for t in critic.mlp.tensors_mut() {
            t.as_mut_slice().fill(0.0);
        }
        critic
    }

    #[test]
    fn zero_critic_gives_zero_losses() {
        let critic = zero_critic();
        let (c, yr, yg, yp) = (batch(2, 5, 2), batch(3, 5, 3), batch(4, 5, 3), batch(5, 5, 3));
        assert!(critic_surrogate_f(&critic, &yr, &yp, &c).unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(generator_loss(&critic, &yr, &yg, &yp, &c).unwrap(), 0.0);
    }

    #[test]
    fn unpenalized_critic_loss_is_negated_generator_loss() {
        let critic = small_critic(7);
        let (c, yr, yg, yp) = (batch(2, 9, 2), batch(3, 9, 3), batch(4, 9, 3), batch(5, 9, 3));
        let eps = vec![0.5; 9];
        let gl = generator_loss(&critic, &yr, &yg, &yp, &c).unwrap();
        let cl = critic_loss(&critic, &yr, &yg, &yp, &c, &eps, 0.0).unwrap();
        assert_eq!(cl, -gl);
    }

    /// Single linear layer reading response 0 into embedding slot 0, with a
    /// constant `bias` added to the embedding.
    fn linear_critic(bias: Vec<f64>) -> CriticModel {
        let mut weight = Tensor::zeros(5, 2);
        weight.set(2, 0, 1.0);
        CriticModel {
            mlp: MlpParams {
                layers: vec![Layer { weight, bias: Tensor::row_vector(bias), activation: Activation::Linear }],
                seed: 0,
            },
            cond_dim: 2,
        }
    }

    fn first_column(rows: usize, f: impl Fn(usize) -> f64) -> Tensor {
        let mut t = Tensor::zeros(rows, 3);
        for r in 0..rows {
            t.set(r, 0, f(r));
        }
        t
    }

    #[test]
    fn penalty_vanishes_for_unit_gradient_critic() {
        let rows = 4;
        let c = batch(1, rows, 2);
        let eps = vec![0.25; rows];
        // D(y) = (y_0, 1) and y'_0 far above: near y_0 = 0,
        // f(y) = |y_0 - y'_0| - sqrt(y_0^2 + 1) has gradient (-1, 0, 0).
        let critic = linear_critic(vec![0.0, 1.0]);
        let zeros = Tensor::zeros(rows, 3);
        let far = first_column(rows, |_| 1e6);
        let with_gp = critic_loss(&critic, &zeros, &zeros, &far, &c, &eps, 10.0).unwrap();
        let without = critic_loss(&critic, &zeros, &zeros, &far, &c, &eps, 0.0).unwrap();
        assert_eq!(with_gp, without);
    }

    #[test]
    fn penalty_is_one_for_flat_surrogate() {
        let rows = 4;
        let c = batch(1, rows, 2);
        let eps = vec![0.25; rows];
        // D(y) = (y_0, 0), y' = 0, y_0 > 0: f(y) = |y_0| - |y_0| = 0 everywhere.
        let critic = linear_critic(vec![0.0, 0.0]);
        let yr = first_column(rows, |r| 1.0 + r as f64);
        let yg = first_column(rows, |r| 2.0 + r as f64);
        let yp = Tensor::zeros(rows, 3);
        let with_gp = critic_loss(&critic, &yr, &yg, &yp, &c, &eps, 10.0).unwrap();
        let without = critic_loss(&critic, &yr, &yg, &yp, &c, &eps, 0.0).unwrap();
        assert!((with_gp - without - 10.0).abs() < 1e-12);
    }

    #[test]
    fn interpolation_weights_rows() {
        let a = Tensor::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 3.0], vec![4.0, 4.0]]).unwrap();
        let y = interpolate(&a, &b, &[1.0, 0.25]).unwrap();
        assert_eq!(y.as_slice(), &[1.0, 1.0, 3.5, 3.5]);
        assert!(interpolate(&a, &b, &[1.0]).is_err());
    }
}
