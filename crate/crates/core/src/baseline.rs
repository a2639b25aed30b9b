//! Plain generative replay: one VAE, retrained on every task with samples
//! from a frozen copy of itself.

use rand::Rng;

use crate::alignment::rehearsal_per_batch;
use crate::autograd::grad_values;
use crate::error::{Error, Result};
use crate::models::{leaves, Module, Pipeline, Translator, TranslatorSpec};
use crate::nn::{Adam, AdamConfig, Net};
use crate::rng;
use crate::tensor::{Float, Tensor};
use crate::vae::{batches, encode, EpochLog, LocalVae, Logger, VaeTrainConfig};

/// A single-latent-space VAE. The decoder reads the continuous latent
/// directly; there is no task code and no binary part.
#[derive(Clone, Debug, PartialEq)]
pub struct GrModel<T: Float> {
    pub vae: LocalVae<T>,
}

impl<T: Float> GrModel<T> {
    /// `encoder` must emit `2 * cont_dim` values; `decoder` must read `cont_dim`.
    pub fn new(encoder: Net<T>, decoder: Net<T>, cont_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if encoder.output_shape != [2 * cont_dim] || decoder.input_shape != [cont_dim] {
            return Err(Error::Contract(format!(
                "GR model needs a {}-wide encoder head and a {cont_dim}-wide decoder input, got {:?} and {:?}",
                2 * cont_dim,
                encoder.output_shape,
                decoder.input_shape
            )));
        }
        let spec = TranslatorSpec { cont_dim, bin_dim: 0, code_width: 0, hidden: 0, out_dim: cont_dim, identity: true };
        let translator = Translator::new(spec, rng);
        Ok(Self { vae: LocalVae { encoder, pipeline: Pipeline { translator, net: decoder }, cont_dim } })
    }

    pub fn cont_dim(&self) -> usize {
        self.vae.cont_dim
    }

    /// Decode `z ~ N(0, I)`.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Tensor<T> {
        let z = rng::normal(rng, &[n, self.cont_dim()]);
        self.decode(&z)
    }

    pub fn decode(&self, z: &Tensor<T>) -> Tensor<T> {
        self.vae.pipeline.net.infer(z)
    }

    /// Eval-mode latent means.
    pub fn embed(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(encode(&self.vae.encoder, x, self.cont_dim())?.mu)
    }
}

/// Statistics from one GR task, for the rehearsal-cap checks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GrStats {
    pub losses: Vec<f64>,
    pub max_rehearsal_per_batch: usize,
}

/// Train on task `task`'s images mixed with replay from the model frozen at
/// the start of the task. `cfg.epochs` should equal the local plus global
/// epochs of the aligned method.
pub fn train_gr_task<T: Float>(
    model: &mut GrModel<T>,
    images: &Tensor<T>,
    task: usize,
    cfg: &VaeTrainConfig,
    rng: &mut impl Rng,
    log: &mut Logger<'_>,
) -> Result<GrStats> {
    let n = images.shape()[0];
    if n == 0 {
        return Err(Error::Contract(format!("task {task} has no samples")));
    }
    let frozen = (task > 0).then(|| model.clone());
    let per_batch = rehearsal_per_batch(cfg.batch, task + 1);
    let mut opt = Adam::new(AdamConfig::new(cfg.lr, cfg.decay));
    let mut stats = GrStats::default();
    for epoch in 0..cfg.epochs {
        let (mut tot, mut seen) = (0.0, 0usize);
        for (step, idx) in batches(rng, n, cfg.batch).into_iter().enumerate() {
            let mut x = images.select_rows(&idx);
            if let Some(f) = &frozen {
                let r = if idx.len() == cfg.batch { per_batch } else { per_batch * idx.len() / cfg.batch };
                let replay = f.sample(r, rng);
                stats.max_rehearsal_per_batch = stats.max_rehearsal_per_batch.max(r);
                x = Tensor::cat_rows(&[&x, &replay]);
            }
            let bounds = model.vae.bind(true);
            let (terms, _) = model.vae.loss(&bounds, &x, 0, cfg.temperature, rng);
            let l = terms.total.item().as_f64();
            if !l.is_finite() {
                return Err(Error::Numerical(format!("GR loss diverged (task {task}, epoch {epoch}, step {step})")));
            }
            let grads = grad_values(&terms.total, &leaves(&bounds));
            opt.step(&mut model.vae.nets_mut(), &grads);
            model.vae.apply_stats(&bounds);
            let b = x.shape()[0];
            tot += l * b as f64;
            seen += b;
        }
        opt.end_epoch();
        let l = tot / seen.max(1) as f64;
        stats.losses.push(l);
        log(&EpochLog { stage: "gr", task, epoch, loss: l, extra: vec![] });
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{vae_decoder, vae_encoder, VaeArch};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64) -> GrModel<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = vae_encoder(VaeArch::Dense, [1, 28, 28], 4, 0, &mut rng).unwrap();
        let dec = vae_decoder(VaeArch::Dense, [1, 28, 28], 4, &mut rng).unwrap();
        GrModel::new(enc, dec, 4, &mut rng).unwrap()
    }

    #[test]
    fn replay_respects_the_rehearsal_cap() {
        let mut m = tiny(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Tensor<f32> = rng::uniform(&mut rng, &[40, 1, 28, 28]);
        let cfg = VaeTrainConfig { epochs: 1, batch: 16, lr: 1e-3, decay: 1.0, temperature: 0.67 };
        let s0 = train_gr_task(&mut m, &x, 0, &cfg, &mut rng, &mut |_| {}).unwrap();
        assert_eq!(s0.max_rehearsal_per_batch, 0);
        let s2 = train_gr_task(&mut m, &x, 2, &cfg, &mut rng, &mut |_| {}).unwrap();
        assert_eq!(s2.max_rehearsal_per_batch, rehearsal_per_batch(16, 3));
        assert!(s2.max_rehearsal_per_batch <= 16 * 3 / 2);
    }

    #[test]
    fn seeded_training_is_deterministic() {
        let run = || {
            let mut m = tiny(3);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let x: Tensor<f32> = rng::uniform(&mut rng, &[24, 1, 28, 28]);
            let cfg = VaeTrainConfig { epochs: 2, batch: 8, lr: 1e-3, decay: 0.98, temperature: 0.67 };
            train_gr_task(&mut m, &x, 0, &cfg, &mut rng, &mut |_| {}).unwrap();
            train_gr_task(&mut m, &x, 1, &cfg, &mut rng, &mut |_| {}).unwrap();
            m
        };
        assert!(run().vae.pipeline.net.params.bit_eq(&run().vae.pipeline.net.params));
    }
}
