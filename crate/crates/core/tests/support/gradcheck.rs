//! Analytic versus central-difference gradients on micro-nets in f64.

use multiband::alignment::phase_loss;
use multiband::autograd::{grad_values, Var};
use multiband::classifier::fe_loss;
use multiband::gan::{critic_loss, generator_loss};
use multiband::models::{leaves, Module, Pipeline, Translator, TranslatorSpec};
use multiband::nn::{Bound, Net, NetBuilder};
use multiband::rng;
use multiband::tensor::Tensor;
use multiband::vae::LocalVae;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
/// Entries probed per parameter tensor.
pub const PROBES: usize = 6;

/// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)` over
/// probed entries of every trainable tensor.
pub fn max_rel_error<M: Module<f64> + Clone>(
    module: &M,
    trainable: &[bool],
    loss: impl Fn(&M, &[Bound<f64>]) -> Var<f64>,
) -> f64 {
    let bind = |m: &M| -> Vec<Bound<f64>> { m.nets().iter().zip(trainable).map(|(n, &t)| n.bind(t)).collect() };
    let bounds = bind(module);
    let grads = grad_values(&loss(module, &bounds), &leaves(&bounds));
    let value = |m: &M| loss(m, &bind(m)).item();
    let mut pick = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    let mut g = grads.iter();
    for (ni, net) in module.nets().iter().enumerate() {
        if !trainable[ni] {
            continue;
        }
        for (pi, p) in net.params.values.iter().enumerate() {
            let analytic = g.next().expect("one gradient per trainable tensor");
            for _ in 0..PROBES.min(p.len()) {
                let j = pick.random_range(0..p.len());
                let at = |delta: f64| {
                    let mut m = module.clone();
                    m.nets_mut()[ni].params.values[pi].data_mut()[j] += delta;
                    value(&m)
                };
                let numeric = (at(STEP) - at(-STEP)) / (2.0 * STEP);
                let a = analytic.data()[j];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
    }
    assert!(g.next().is_none(), "unused gradients");
    worst
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn translator_spec() -> TranslatorSpec {
    TranslatorSpec { cont_dim: 2, bin_dim: 2, code_width: 3, hidden: 5, out_dim: 4, identity: false }
}

fn decoder(z: usize, r: &mut ChaCha8Rng) -> Net<f64> {
    NetBuilder::new(&[z], r).linear(6).batch_norm().leaky_relu(0.2).linear(9).sigmoid().reshape(&[1, 3, 3]).build()
}

/// Negative ELBO of a local VAE (encoder, translator, decoder) with fixed
/// reparameterization noise.
pub fn elbo() -> f64 {
    let mut r = rng(1);
    let spec = translator_spec();
    let encoder = NetBuilder::new(&[1, 3, 3], &mut r).flatten().linear(7).tanh().linear(2 * 2 + 2).build();
    let translator = Translator::new(spec, &mut r);
    let vae = LocalVae { encoder, pipeline: Pipeline { translator, net: decoder(spec.out_dim, &mut r) }, cont_dim: 2 };
    let x: Tensor<f64> = rng::uniform(&mut r, &[5, 1, 3, 3]);
    let trainable = vec![true; vae.nets().len()];
    max_rel_error(&vae, &trainable, |m, b| m.loss(b, &x, 1, 0.67, &mut rng(7)).0.total)
}

fn critic(r: &mut ChaCha8Rng) -> Net<f64> {
    NetBuilder::new(&[1, 4, 4], r).conv(2, 3, 1, 1, true).leaky_relu(0.2).flatten().layer_norm().linear(5).tanh().linear(1).build()
}

/// WGAN critic loss including the gradient penalty (second-order terms).
pub fn critic_with_penalty() -> f64 {
    let mut r = rng(2);
    let net = critic(&mut r);
    let real: Tensor<f64> = rng::uniform(&mut r, &[4, 1, 4, 4]);
    let fake: Tensor<f64> = rng::normal(&mut r, &[4, 1, 4, 4]);
    max_rel_error(&net, &[true], |m, b| critic_loss(m, &b[0], &real, &fake, 10.0, &mut rng(8)).expect("critic loss").total)
}

/// Generator loss through a frozen critic, gradients on the generator pipeline.
pub fn generator() -> f64 {
    let mut r = rng(3);
    let spec = TranslatorSpec { bin_dim: 0, ..translator_spec() };
    let gen = Pipeline {
        translator: Translator::new(spec, &mut r),
        net: NetBuilder::new(&[spec.out_dim], &mut r).linear(16).tanh().reshape(&[1, 4, 4]).build(),
    };
    let critic = critic(&mut r);
    let xi: Tensor<f64> = rng::normal(&mut r, &[4, 2]);
    let cb = critic.bind(false);
    let trainable = vec![true; gen.nets().len()];
    max_rel_error(&gen, &trainable, |m, b| {
        let x = m.forward(b, &Var::constant(xi.clone()), None, &[0, 1, 1, 2], true);
        generator_loss(&critic, &cb, &x)
    })
}

fn phase_setup(seed: u64) -> (Pipeline<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut r = rng(seed);
    let spec = translator_spec();
    let global = Pipeline { translator: Translator::new(spec, &mut r), net: decoder(spec.out_dim, &mut r) };
    let cont = rng::normal(&mut r, &[6, 2]);
    let bin = Tensor::from_vec(&[6, 2], (0..12).map(|i| ((i * 5) % 3 == 0) as u8 as f64).collect());
    let targets = rng::uniform(&mut r, &[6, 1, 3, 3]);
    (global, cont, bin, targets)
}

const PHASE_TASKS: [usize; 6] = [0, 0, 1, 1, 2, 2];

/// Translator-only phase: the decoder is bound frozen.
pub fn phase1() -> f64 {
    let (g, cont, bin, targets) = phase_setup(4);
    let mut trainable = vec![true; g.nets().len()];
    *trainable.last_mut().unwrap() = false;
    max_rel_error(&g, &trainable, |m, b| phase_loss(m, b, &cont, Some(&bin), &PHASE_TASKS, &targets, true))
}

/// Joint translator and decoder phase.
pub fn phase2() -> f64 {
    let (g, cont, bin, targets) = phase_setup(5);
    let trainable = vec![true; g.nets().len()];
    max_rel_error(&g, &trainable, |m, b| phase_loss(m, b, &cont, Some(&bin), &PHASE_TASKS, &targets, true))
}

/// Feature-extractor regression onto global latents.
pub fn feature_extractor() -> f64 {
    let mut r = rng(6);
    let fe = NetBuilder::new(&[1, 3, 3], &mut r).flatten().linear(8).batch_norm().leaky_relu(0.2).linear(4).build();
    let x: Tensor<f64> = rng::uniform(&mut r, &[5, 1, 3, 3]);
    let z: Tensor<f64> = rng::normal(&mut r, &[5, 4]);
    max_rel_error(&fe, &[true], |m, b| fe_loss(m, &b[0], &x, &z))
}

pub fn all() -> Vec<(&'static str, f64)> {
    vec![
        ("elbo", elbo()),
        ("critic + gradient penalty", critic_with_penalty()),
        ("generator", generator()),
        ("translator phase 1", phase1()),
        ("translator + decoder phase 2", phase2()),
        ("feature extractor", feature_extractor()),
    ]
}
