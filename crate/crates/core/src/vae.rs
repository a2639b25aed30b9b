//! Two-latent VAE: continuous Gaussian code plus a relaxed-Bernoulli code.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad_values, no_grad, Var};
use crate::error::{Error, Result};
use crate::models::{leaves, Module, Pipeline};
use crate::nn::{Adam, AdamConfig, Bound, Net};
use crate::rng;
use crate::tensor::{Float, Tensor};

pub const OUTPUT_EPS: f64 = 1e-7;
pub const SIGMA_MIN: f64 = 1e-4;
pub const SIGMA_MAX: f64 = 1e4;

/// Encoder heads as graph nodes.
#[derive(Clone, Debug)]
pub struct EncoderOutput<T: Float> {
    pub mu: Var<T>,
    /// Clamped log standard deviation; `sigma = exp(log_sigma)`.
    pub log_sigma: Var<T>,
    /// Pre-sigmoid Bernoulli parameters; `mu_p = sigmoid(logits)`. Width 0 when
    /// the binary latent is disabled.
    pub logits: Var<T>,
}

impl<T: Float> EncoderOutput<T> {
    pub fn sigma(&self) -> Var<T> {
        self.log_sigma.exp()
    }

    pub fn mu_p(&self) -> Var<T> {
        self.logits.sigmoid()
    }

    pub fn bin_dim(&self) -> usize {
        self.logits.shape()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct LatentCode<T: Float> {
    pub cont: Var<T>,
    pub bin: Option<Var<T>>,
}

/// Split the encoder's flat output into its three heads.
pub fn encoder_heads<T: Float>(h: &Var<T>, cont: usize) -> EncoderOutput<T> {
    let width = h.shape()[1];
    let bin = width - 2 * cont;
    let lo = T::of(SIGMA_MIN.ln());
    let hi = T::of(SIGMA_MAX.ln());
    EncoderOutput {
        mu: h.slice_cols(0, cont),
        log_sigma: h.slice_cols(cont, cont).clamp(lo, hi),
        logits: h.slice_cols(2 * cont, bin),
    }
}

pub fn encode_var<T: Float>(enc: &Net<T>, bound: &Bound<T>, x: &Var<T>, cont: usize, train: bool) -> EncoderOutput<T> {
    encoder_heads(&enc.forward(bound, x, train), cont)
}

/// Plain-valued encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderValues<T: Float> {
    pub mu: Tensor<T>,
    pub sigma: Tensor<T>,
    pub mu_p: Tensor<T>,
}

/// Eval-mode encoding with finiteness checks.
pub fn encode<T: Float>(enc: &Net<T>, x: &Tensor<T>, cont: usize) -> Result<EncoderValues<T>> {
    if !x.all_finite() {
        return Err(Error::Numerical(format!("non-finite encoder input (batch of {})", x.shape()[0])));
    }
    let _g = no_grad();
    let b = enc.bind(false);
    let out = encode_var(enc, &b, &Var::constant(x.clone()), cont, false);
    let v = EncoderValues {
        mu: out.mu.value().clone(),
        sigma: out.sigma().value().clone(),
        mu_p: out.mu_p().value().clone(),
    };
    for (name, t) in [("mu", &v.mu), ("sigma", &v.sigma), ("mu_p", &v.mu_p)] {
        if !t.all_finite() {
            return Err(Error::Numerical(format!(
                "encoder head {name} is non-finite (batch of {}, max |value| {})",
                x.shape()[0],
                t.max_abs()
            )));
        }
    }
    Ok(v)
}

/// Reparameterized continuous draw and relaxed binary draw (train), or the
/// means and rounded probabilities (eval).
pub fn sample_latent<T: Float>(out: &EncoderOutput<T>, temperature: f64, mode: SampleMode, rng: &mut impl Rng) -> LatentCode<T> {
    assert!(temperature > 0.0, "temperature must be positive");
    let has_bin = out.bin_dim() > 0;
    match mode {
        SampleMode::Eval => LatentCode {
            cont: out.mu.clone(),
            bin: has_bin.then(|| Var::constant(out.mu_p().value().map(|p| p.round()))),
        },
        SampleMode::Train => {
            let eps = Var::constant(rng::normal(rng, out.mu.shape()));
            let cont = out.mu.add(&out.sigma().mul(&eps));
            let bin = has_bin.then(|| {
                let logistic = Var::constant(logistic_noise(rng, out.logits.shape()));
                out.logits.add(&logistic).scale(T::of(1.0 / temperature)).sigmoid()
            });
            LatentCode { cont, bin }
        }
    }
}

/// `ln u - ln(1 - u)` with `u ~ U(0, 1)`, the difference of two Gumbel draws.
pub fn logistic_noise<T: Float>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(1e-12..1.0 - 1e-12);
            T::of(u.ln() - (1.0 - u).ln())
        })
        .collect();
    Tensor::from_vec(shape, v)
}

pub struct ElboTerms<T: Float> {
    pub total: Var<T>,
    pub recon: Var<T>,
    pub kl: Var<T>,
}

/// Negative ELBO averaged over the batch: Bernoulli NLL summed over pixels
/// plus the closed-form Gaussian KL summed over latent dims.
pub fn elbo_loss<T: Float>(x: &Var<T>, x_hat: &Var<T>, out: &EncoderOutput<T>) -> ElboTerms<T> {
    let n = x.shape()[0];
    let inv_n = T::of(1.0 / n as f64);
    let eps = T::of(OUTPUT_EPS);
    let p = x_hat.flatten().clamp(eps, T::one() - eps);
    let xf = x.flatten();
    let one_minus_x = xf.neg().add_scalar(T::one());
    let one_minus_p = p.neg().add_scalar(T::one());
    let ll = xf.mul(&p.ln()).add(&one_minus_x.mul(&one_minus_p.ln()));
    let recon = ll.sum().scale(-inv_n);
    let two = T::of(2.0);
    let kl_terms = out
        .mu
        .square()
        .add(&out.log_sigma.scale(two).exp())
        .add_scalar(-T::one())
        .sub(&out.log_sigma.scale(two));
    let kl = kl_terms.sum().scale(T::of(0.5) * inv_n);
    ElboTerms { total: recon.add(&kl), recon, kl }
}

/// Per-task estimate of the binary prior: mean of `mu_p` over the training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryPrior {
    pub probs: Vec<f64>,
}

impl BinaryPrior {
    pub fn half(dim: usize) -> Self {
        Self { probs: vec![0.5; dim] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub decay: f64,
    pub temperature: f64,
}

/// The local model: encoder, translator and decoder trained end to end on a
/// single task.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalVae<T: Float> {
    pub encoder: Net<T>,
    pub pipeline: Pipeline<T>,
    pub cont_dim: usize,
}

impl<T: Float> Module<T> for LocalVae<T> {
    fn nets(&self) -> Vec<&Net<T>> {
        let mut v = vec![&self.encoder];
        v.extend(self.pipeline.nets());
        v
    }

    fn nets_mut(&mut self) -> Vec<&mut Net<T>> {
        let mut v = vec![&mut self.encoder];
        v.extend(self.pipeline.nets_mut());
        v
    }
}

impl<T: Float> LocalVae<T> {
    /// One forward pass in train mode; returns the loss terms and `mu_p`.
    pub fn loss(&self, bounds: &[Bound<T>], x: &Tensor<T>, task: usize, temperature: f64, rng: &mut impl Rng) -> (ElboTerms<T>, Tensor<T>) {
        let xv = Var::constant(x.clone());
        let out = encode_var(&self.encoder, &bounds[0], &xv, self.cont_dim, true);
        let lat = sample_latent(&out, temperature, SampleMode::Train, rng);
        let tasks = vec![task; x.shape()[0]];
        let x_hat = self.pipeline.forward(&bounds[1..], &lat.cont, lat.bin.as_ref(), &tasks, true);
        let mu_p = out.mu_p().value().clone();
        (elbo_loss(&xv, &x_hat, &out), mu_p)
    }

    /// Eval-mode latent codes for `x`.
    pub fn latent_eval(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let v = encode(&self.encoder, x, self.cont_dim)?;
        let bin = (v.mu_p.shape()[1] > 0).then(|| v.mu_p.map(|p| p.round()));
        Ok((v.mu, bin))
    }
}

/// Per-epoch record handed to the logger.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub stage: &'static str,
    pub task: usize,
    pub epoch: usize,
    pub loss: f64,
    pub extra: Vec<(&'static str, f64)>,
}

pub type Logger<'a> = dyn FnMut(&EpochLog) + 'a;

/// Mini-batch index lists for one shuffled epoch.
pub fn batches(rng: &mut impl Rng, n: usize, batch: usize) -> Vec<Vec<usize>> {
    rng::permutation(rng, n).chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Train a local VAE on one task's images. Returns the binary prior
/// estimated during the final epoch.
pub fn train_local_vae<T: Float>(
    model: &mut LocalVae<T>,
    images: &Tensor<T>,
    task: usize,
    cfg: &VaeTrainConfig,
    rng: &mut impl Rng,
    log: &mut Logger<'_>,
) -> Result<BinaryPrior> {
    let n = images.shape()[0];
    if n == 0 {
        return Err(Error::Contract(format!("task {task} has no samples")));
    }
    let bin_dim = model.encoder.output_shape[0] - 2 * model.cont_dim;
    let mut opt = Adam::new(AdamConfig::new(cfg.lr, cfg.decay));
    let mut prior_sum = vec![0.0; bin_dim];
    for epoch in 0..cfg.epochs {
        let last = epoch + 1 == cfg.epochs;
        let (mut tot, mut rec, mut kl, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for (step, idx) in batches(rng, n, cfg.batch).into_iter().enumerate() {
            let x = images.select_rows(&idx);
            let bounds = model.bind(true);
            let (terms, mu_p) = model.loss(&bounds, &x, task, cfg.temperature, rng);
            let l = terms.total.item().as_f64();
            if !l.is_finite() {
                return Err(Error::Numerical(format!(
                    "local VAE loss diverged (task {task}, epoch {epoch}, step {step}, recon {}, kl {})",
                    terms.recon.item(),
                    terms.kl.item()
                )));
            }
            let grads = grad_values(&terms.total, &leaves(&bounds));
            opt.step(&mut model.nets_mut(), &grads);
            model.apply_stats(&bounds);
            let b = idx.len();
            tot += l * b as f64;
            rec += terms.recon.item().as_f64() * b as f64;
            kl += terms.kl.item().as_f64() * b as f64;
            seen += b;
            if last {
                for r in 0..b {
                    for (s, &p) in prior_sum.iter_mut().zip(mu_p.row(r)) {
                        *s += p.as_f64();
                    }
                }
            }
        }
        opt.end_epoch();
        let s = seen as f64;
        log(&EpochLog {
            stage: "local_vae",
            task,
            epoch,
            loss: tot / s,
            extra: vec![("recon", rec / s), ("kl", kl / s)],
        });
    }
    let probs = if cfg.epochs == 0 {
        vec![0.5; bin_dim]
    } else {
        prior_sum.iter().map(|s| (s / n as f64).clamp(0.0, 1.0)).collect()
    };
    Ok(BinaryPrior { probs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn heads(mu: Vec<f64>, log_sigma: Vec<f64>, logits: Vec<f64>, n: usize) -> EncoderOutput<f64> {
        let d = mu.len() / n;
        let b = logits.len() / n;
        EncoderOutput {
            mu: Var::constant(Tensor::from_vec(&[n, d], mu)),
            log_sigma: Var::constant(Tensor::from_vec(&[n, d], log_sigma)),
            logits: Var::constant(Tensor::from_vec(&[n, b], logits)),
        }
    }

    #[test]
    fn kl_closed_form_values() {
        let x = Var::constant(Tensor::full(&[1, 4], 0.5));
        let out = heads(vec![0.0], vec![0.0], vec![], 1);
        assert!(elbo_loss(&x, &x, &out).kl.item().abs() < 1e-12);
        let out = heads(vec![1.0], vec![0.0], vec![], 1);
        assert!((elbo_loss(&x, &x, &out).kl.item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn recon_of_half_images_is_n_ln2() {
        let x = Var::constant(Tensor::full(&[2, 784], 0.5));
        let out = heads(vec![0.0, 0.0], vec![0.0, 0.0], vec![], 2);
        let t = elbo_loss(&x, &x, &out);
        assert!((t.recon.item() - 784.0 * 2f64.ln()).abs() < 1e-9);
        assert!((t.total.item() - t.recon.item() - t.kl.item()).abs() < 1e-12);
    }

    #[test]
    fn eval_sampling_is_mean_and_rounded() {
        let out = heads(vec![0.3, -0.2], vec![0.0, 0.0], vec![2.0, -2.0], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = sample_latent(&out, 0.67, SampleMode::Eval, &mut rng);
        assert_eq!(l.cont.value().data(), &[0.3, -0.2]);
        assert_eq!(l.bin.unwrap().value().data(), &[1.0, 0.0]);
    }

    #[test]
    fn tiny_sigma_gives_the_mean() {
        let lo = SIGMA_MIN.ln();
        let out = heads(vec![0.7], vec![lo], vec![], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = sample_latent(&out, 0.67, SampleMode::Train, &mut rng);
        assert!((l.cont.item() - 0.7).abs() < 1e-3);
    }

    #[test]
    fn relaxed_bits_sharpen_at_low_temperature() {
        let p: f64 = 0.999;
        let out = heads(vec![0.0], vec![0.0], vec![(p / (1.0 - p)).ln()], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = sample_latent(&out, 1e-3, SampleMode::Train, &mut rng);
        assert!(l.bin.unwrap().item() > 0.99);
    }
}
