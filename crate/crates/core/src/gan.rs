//! Wasserstein GAN with gradient penalty.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad, grad_values, no_grad, Var};
use crate::error::{Error, Result};
use crate::models::{leaves, Module, Pipeline};
use crate::nn::{Adam, AdamConfig, Bound, Net};
use crate::rng;
use crate::tensor::{Float, Tensor};
use crate::vae::{batches, EpochLog, Logger};

/// Local GAN: translator + generator (the generative path) and a critic.
#[derive(Clone, Debug, PartialEq)]
pub struct GanModel<T: Float> {
    pub generator: Pipeline<T>,
    pub critic: Net<T>,
    pub noise_dim: usize,
}

pub struct CriticTerms<T: Float> {
    pub total: Var<T>,
    pub fake_mean: T,
    pub real_mean: T,
    pub penalty: T,
    /// Per-sample interpolation weights and the interpolates they produced.
    pub eps: Vec<T>,
    pub interpolates: Tensor<T>,
}

/// `E[D(fake)] - E[D(real)] + lambda * E[(|grad D(x_hat)| - 1)^2]` with
/// `x_hat = eps * real + (1 - eps) * fake`, one `eps ~ U(0, 1)` per sample.
pub fn critic_loss<T: Float>(
    critic: &Net<T>,
    bound: &Bound<T>,
    x_real: &Tensor<T>,
    x_fake: &Tensor<T>,
    lambda_gp: f64,
    rng: &mut impl Rng,
) -> Result<CriticTerms<T>> {
    let n = x_real.shape()[0];
    if x_fake.shape() != x_real.shape() {
        return Err(Error::Contract(format!(
            "real batch {:?} and fake batch {:?} differ",
            x_real.shape(),
            x_fake.shape()
        )));
    }
    let eps: Vec<T> = (0..n).map(|_| T::of(rng.random::<f64>())).collect();
    let per = x_real.len() / n.max(1);
    let mut hat = Vec::with_capacity(x_real.len());
    for (r, &e) in eps.iter().enumerate() {
        let a = &x_real.data()[r * per..(r + 1) * per];
        let b = &x_fake.data()[r * per..(r + 1) * per];
        hat.extend(a.iter().zip(b).map(|(&x, &y)| e * x + (T::one() - e) * y));
    }
    let interpolates = Tensor::from_vec(x_real.shape(), hat);
    let real = critic.forward(bound, &Var::constant(x_real.clone()), true).mean();
    let fake = critic.forward(bound, &Var::constant(x_fake.clone()), true).mean();
    let x_hat = Var::leaf(interpolates.clone(), true);
    let d_hat = critic.forward(bound, &x_hat, true);
    let g = grad(&d_hat.sum(), std::slice::from_ref(&x_hat), true).remove(0);
    let penalty = g.flatten().row_norm().add_scalar(-T::one()).square().mean();
    let pv = penalty.item();
    if !pv.is_finite() {
        return Err(Error::Numerical(format!("gradient penalty is {pv}")));
    }
    let total = fake.sub(&real).add(&penalty.scale(T::of(lambda_gp)));
    Ok(CriticTerms { fake_mean: fake.item(), real_mean: real.item(), penalty: pv, total, eps, interpolates })
}

/// `-E[D(G(xi))]` for an already generated batch.
pub fn generator_loss<T: Float>(critic: &Net<T>, bound: &Bound<T>, x_fake: &Var<T>) -> Var<T> {
    critic.forward(bound, x_fake, true).mean().neg()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_gp: f64,
    pub critic_steps: usize,
}

impl<T: Float> GanModel<T> {
    pub fn noise(&self, rng: &mut impl Rng, n: usize) -> Tensor<T> {
        rng::normal(rng, &[n, self.noise_dim])
    }

    /// Eval-mode generation for task `task`.
    pub fn generate(&self, xi: &Tensor<T>, task: usize) -> Tensor<T> {
        self.generator.infer(xi, None, &vec![task; xi.shape()[0]])
    }
}

/// Alternating WGAN-GP training on one task's images (already in `[-1, 1]`).
/// The generator steps once per `critic_steps` critic steps.
pub fn train_local_gan<T: Float>(
    model: &mut GanModel<T>,
    images: &Tensor<T>,
    task: usize,
    cfg: &GanTrainConfig,
    rng: &mut impl Rng,
    log: &mut Logger<'_>,
) -> Result<()> {
    let n = images.shape()[0];
    if n == 0 {
        return Err(Error::Contract(format!("task {task} has no samples")));
    }
    let adam = AdamConfig::new(cfg.lr, cfg.decay).with_betas(cfg.beta1, cfg.beta2);
    let mut opt_d = Adam::new(adam);
    let mut opt_g = Adam::new(adam);
    let mut counter = 0usize;
    for epoch in 0..cfg.epochs {
        let (mut w_sum, mut gp_sum, mut g_sum, mut d_steps, mut g_steps) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for idx in batches(rng, n, cfg.batch) {
            let b = idx.len();
            let real = images.select_rows(&idx);
            let tasks = vec![task; b];
            let fake = {
                let _g = no_grad();
                let gb = model.generator.bind(false);
                let xi = Var::constant(model.noise(rng, b));
                let f = model.generator.forward(&gb, &xi, None, &tasks, true).value().clone();
                model.generator.apply_stats(&gb);
                f
            };
            let cb = model.critic.bind(true);
            let terms = critic_loss(&model.critic, &cb, &real, &fake, cfg.lambda_gp, rng)?;
            let loss = terms.total.item().as_f64();
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("critic loss diverged (task {task}, epoch {epoch})")));
            }
            let grads = grad_values(&terms.total, &cb.leaves());
            opt_d.step(&mut [&mut model.critic], &grads);
            w_sum += (terms.real_mean - terms.fake_mean).as_f64();
            gp_sum += terms.penalty.as_f64();
            d_steps += 1;
            counter += 1;
            if counter.is_multiple_of(cfg.critic_steps.max(1)) {
                let gb = model.generator.bind(true);
                let cb = model.critic.bind(false);
                let xi = Var::constant(model.noise(rng, b));
                let f = model.generator.forward(&gb, &xi, None, &tasks, true);
                let gl = generator_loss(&model.critic, &cb, &f);
                let glv = gl.item().as_f64();
                if !glv.is_finite() {
                    return Err(Error::Numerical(format!("generator loss diverged (task {task}, epoch {epoch})")));
                }
                let grads = grad_values(&gl, &leaves(&gb));
                opt_g.step(&mut model.generator.nets_mut(), &grads);
                model.generator.apply_stats(&gb);
                g_sum += glv;
                g_steps += 1;
            }
        }
        opt_d.end_epoch();
        opt_g.end_epoch();
        log(&EpochLog {
            stage: "local_gan",
            task,
            epoch,
            loss: w_sum / d_steps as f64,
            extra: vec![
                ("gradient_penalty", gp_sum / d_steps as f64),
                ("generator", if g_steps > 0 { g_sum / g_steps as f64 } else { f64::NAN }),
            ],
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetBuilder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_critic(w: &[f64], bias: f64) -> Net<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c: Net<f64> = NetBuilder::new(&[w.len()], &mut rng).linear(1).build();
        c.params.values[0] = Tensor::from_vec(&[1, w.len()], w.to_vec());
        c.params.values[1] = Tensor::from_vec(&[1], vec![bias]);
        c
    }

    #[test]
    fn unit_norm_linear_critic_has_no_penalty() {
        let c = linear_critic(&[0.6, 0.8], 0.1);
        let b = c.bind(true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let real = Tensor::from_vec(&[2, 2], vec![1., 2., 3., 4.]);
        let fake = Tensor::from_vec(&[2, 2], vec![0., 0., -1., 1.]);
        let t = critic_loss(&c, &b, &real, &fake, 10.0, &mut rng).unwrap();
        assert!(t.penalty.abs() < 1e-20);
    }

    #[test]
    fn constant_critic_pays_lambda() {
        let c = linear_critic(&[0.0, 0.0], 3.0);
        let b = c.bind(true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let real = Tensor::from_vec(&[1, 2], vec![1., 2.]);
        let t = critic_loss(&c, &b, &real, &real.map(|v| -v), 10.0, &mut rng).unwrap();
        assert!((t.total.item() - 10.0).abs() < 1e-12);
        let g = generator_loss(&c, &b, &Var::constant(real));
        assert!((g.item() + 3.0).abs() < 1e-12);
    }

    #[test]
    fn interpolates_lie_on_segments() {
        let c = linear_critic(&[1.0, -2.0, 0.5], 0.0);
        let b = c.bind(true);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let real = Tensor::from_vec(&[2, 3], vec![1., 2., 3., -1., 0., 2.]);
        let fake = Tensor::from_vec(&[2, 3], vec![0., 1., -1., 4., 4., 4.]);
        let t = critic_loss(&c, &b, &real, &fake, 10.0, &mut rng).unwrap();
        for r in 0..2 {
            for j in 0..3 {
                let i = r * 3 + j;
                let lhs = t.interpolates.data()[i] - real.data()[i];
                let rhs = (1.0 - t.eps[r]) * (fake.data()[i] - real.data()[i]);
                assert!((lhs - rhs).abs() < 1e-12);
            }
        }
    }
}
