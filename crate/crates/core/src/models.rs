//! Network architectures and the translator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Bound, Net, NetBuilder};
use crate::tensor::{Float, Tensor};

pub const LEAKY: f64 = 0.01;
pub const CRITIC_LEAKY: f64 = 0.2;

/// Anything made of [`Net`]s that trains as a unit.
pub trait Module<T: Float> {
    fn nets(&self) -> Vec<&Net<T>>;
    fn nets_mut(&mut self) -> Vec<&mut Net<T>>;

    fn bind(&self, trainable: bool) -> Vec<Bound<T>> {
        self.nets().iter().map(|n| n.bind(trainable)).collect()
    }

    fn apply_stats(&mut self, bounds: &[Bound<T>]) {
        for (n, b) in self.nets_mut().into_iter().zip(bounds) {
            n.apply_stats(b);
        }
    }

    fn num_params(&self) -> usize {
        self.nets().iter().map(|n| n.num_params()).sum()
    }
}

impl<T: Float> Module<T> for Net<T> {
    fn nets(&self) -> Vec<&Net<T>> {
        vec![self]
    }

    fn nets_mut(&mut self) -> Vec<&mut Net<T>> {
        vec![self]
    }
}

pub fn leaves<T: Float>(bounds: &[Bound<T>]) -> Vec<Var<T>> {
    bounds.iter().flat_map(|b| b.leaves()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VaeArch {
    Dense,
    Conv,
    ConvCeleba,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanArch {
    /// Small MLP pair; handy for quick runs and tests.
    Dense,
    Conv,
    ConvCifar,
}

fn check_side(shape: [usize; 3], side: usize, what: &str) -> Result<()> {
    if shape[1] != side || shape[2] != side {
        return Err(Error::Config(format!("{what} expects {side}x{side} images, got {:?}", shape)));
    }
    Ok(())
}

/// Encoder trunk plus one linear head emitting `[mu (dc) | log sigma (dc) | logits (db)]`.
pub fn vae_encoder<T: Float>(
    arch: VaeArch,
    image: [usize; 3],
    cont: usize,
    bin: usize,
    rng: &mut impl Rng,
) -> Result<Net<T>> {
    let heads = 2 * cont + bin;
    Ok(match arch {
        VaeArch::Dense => NetBuilder::new(&image, rng)
            .linear(512)
            .leaky_relu(LEAKY)
            .linear(128)
            .leaky_relu(LEAKY)
            .linear(64)
            .leaky_relu(LEAKY)
            .linear(heads)
            .build(),
        VaeArch::Conv => {
            check_side(image, 28, "conv encoder")?;
            let mut b = NetBuilder::new(&image, rng);
            for _ in 0..3 {
                b = b.conv(32, 4, 2, 1, true).batch_norm().leaky_relu(LEAKY);
            }
            b.flatten().linear(heads).build()
        }
        VaeArch::ConvCeleba => {
            check_side(image, 32, "celeba encoder")?;
            let mut b = NetBuilder::new(&image, rng);
            for ch in [50, 100, 200] {
                b = b.conv(ch, 5, 2, 1, true).batch_norm().leaky_relu(LEAKY);
            }
            b.flatten().linear(200).leaky_relu(LEAKY).linear(heads).build()
        }
    })
}

/// Decoder from a global latent of width `z` to `[0, 1]` images.
pub fn vae_decoder<T: Float>(arch: VaeArch, image: [usize; 3], z: usize, rng: &mut impl Rng) -> Result<Net<T>> {
    let pixels: usize = image.iter().product();
    Ok(match arch {
        VaeArch::Dense => NetBuilder::new(&[z], rng)
            .linear(512)
            .leaky_relu(LEAKY)
            .linear(1024)
            .leaky_relu(LEAKY)
            .linear(pixels)
            .sigmoid()
            .reshape(&image)
            .build(),
        VaeArch::Conv => {
            check_side(image, 28, "conv decoder")?;
            conv_decoder_body(NetBuilder::new(&[z], rng), image[0]).sigmoid().build()
        }
        VaeArch::ConvCeleba => {
            check_side(image, 32, "celeba decoder")?;
            let mut b = NetBuilder::new(&[z], rng).reshape(&[z / 16, 4, 4]);
            for ch in [400, 200, 100] {
                b = b.conv_t(ch, 4, 2, 1).batch_norm().leaky_relu(LEAKY);
            }
            b.conv(image[0], 3, 1, 1, true).sigmoid().build()
        }
    })
}

fn conv_decoder_body<T: Float, R: Rng>(b: NetBuilder<'_, T, R>, channels: usize) -> NetBuilder<'_, T, R> {
    let b = b.linear(2048).leaky_relu(LEAKY).reshape(&[128, 4, 4]);
    b.conv_t(128, 4, 2, 0)
        .batch_norm()
        .leaky_relu(LEAKY)
        .conv_t(64, 4, 2, 0)
        .batch_norm()
        .leaky_relu(LEAKY)
        .conv_t(32, 4, 1, 0)
        .batch_norm()
        .leaky_relu(LEAKY)
        .conv_t(channels, 4, 1, 0)
}

/// Critic: the encoder with layer norm in place of batch norm and a scalar output.
pub fn gan_critic<T: Float>(arch: GanArch, image: [usize; 3], rng: &mut impl Rng) -> Result<Net<T>> {
    Ok(match arch {
        GanArch::Dense => NetBuilder::new(&image, rng)
            .linear(512)
            .layer_norm()
            .leaky_relu(CRITIC_LEAKY)
            .linear(128)
            .layer_norm()
            .leaky_relu(CRITIC_LEAKY)
            .linear(64)
            .leaky_relu(CRITIC_LEAKY)
            .linear(1)
            .build(),
        GanArch::Conv => {
            check_side(image, 28, "conv critic")?;
            let mut b = NetBuilder::new(&image, rng);
            for _ in 0..3 {
                b = b.conv(32, 4, 2, 1, true).layer_norm().leaky_relu(CRITIC_LEAKY);
            }
            b.flatten().linear(1).build()
        }
        GanArch::ConvCifar => {
            check_side(image, 32, "cifar critic")?;
            let mut b = NetBuilder::new(&image, rng);
            for ch in [128, 256, 512, 1024] {
                b = b.conv(ch, 4, 2, 1, false).layer_norm().leaky_relu(CRITIC_LEAKY);
            }
            b.conv(1024, 3, 1, 1, false).layer_norm().leaky_relu(CRITIC_LEAKY).flatten().linear(1).build()
        }
    })
}

/// Generator: the decoder with a tanh output, images in `[-1, 1]`.
pub fn gan_generator<T: Float>(arch: GanArch, image: [usize; 3], z: usize, rng: &mut impl Rng) -> Result<Net<T>> {
    let pixels: usize = image.iter().product();
    Ok(match arch {
        GanArch::Dense => NetBuilder::new(&[z], rng)
            .linear(512)
            .leaky_relu(LEAKY)
            .linear(1024)
            .leaky_relu(LEAKY)
            .linear(pixels)
            .tanh()
            .reshape(&image)
            .build(),
        GanArch::Conv => {
            check_side(image, 28, "conv generator")?;
            conv_decoder_body(NetBuilder::new(&[z], rng), image[0]).tanh().build()
        }
        GanArch::ConvCifar => {
            check_side(image, 32, "cifar generator")?;
            NetBuilder::new(&[z], rng)
                .reshape(&[z, 1, 1])
                .conv_t(1024, 4, 2, 0)
                .batch_norm()
                .leaky_relu(LEAKY)
                .conv_t(512, 4, 2, 1)
                .batch_norm()
                .leaky_relu(LEAKY)
                .conv_t(256, 4, 2, 1)
                .batch_norm()
                .leaky_relu(LEAKY)
                .conv_t(128, 4, 2, 1)
                .batch_norm()
                .leaky_relu(LEAKY)
                .conv_t(image[0], 5, 1, 2)
                .tanh()
                .build()
        }
    })
}

// ----- translator -----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslatorSpec {
    /// Width of the continuous input (latent λ_c or noise ξ).
    pub cont_dim: usize,
    /// Width of the binary input; 0 disables the binary branch.
    pub bin_dim: usize,
    pub code_width: usize,
    pub hidden: usize,
    pub out_dim: usize,
    /// Pass `[λ_c, λ_b, code]` through unchanged instead of learning a map.
    pub identity: bool,
}

impl TranslatorSpec {
    pub const TASK_BRANCH: [usize; 2] = [18, 12];
    pub const BIN_BRANCH: [usize; 2] = [8, 12];

    pub fn global_dim(&self) -> usize {
        if self.identity {
            self.cont_dim + self.bin_dim + self.code_width
        } else {
            self.out_dim
        }
    }

    fn concat_dim(&self) -> usize {
        self.cont_dim + Self::TASK_BRANCH[1] + if self.bin_dim > 0 { Self::BIN_BRANCH[1] } else { 0 }
    }
}

/// Plain binary code of `task`, least significant bit first.
pub fn task_code<T: Float>(tasks: &[usize], width: usize) -> Tensor<T> {
    let mut v = Vec::with_capacity(tasks.len() * width);
    for &t in tasks {
        assert!(width >= usize::BITS as usize || t < (1usize << width), "task {t} does not fit {width} bits");
        v.extend((0..width).map(|b| if (t >> b) & 1 == 1 { T::one() } else { T::zero() }));
    }
    Tensor::from_vec(&[tasks.len(), width], v)
}

/// Maps per-task latents (or noise) plus a task code into the global latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct Translator<T: Float> {
    pub spec: TranslatorSpec,
    pub task_branch: Option<Net<T>>,
    pub bin_branch: Option<Net<T>>,
    pub head: Option<Net<T>>,
}

impl<T: Float> Translator<T> {
    pub fn new(spec: TranslatorSpec, rng: &mut impl Rng) -> Self {
        if spec.identity {
            return Self { spec, task_branch: None, bin_branch: None, head: None };
        }
        let [t1, t2] = TranslatorSpec::TASK_BRANCH;
        let task_branch = NetBuilder::new(&[spec.code_width], rng)
            .linear(t1)
            .leaky_relu(LEAKY)
            .linear(t2)
            .leaky_relu(LEAKY)
            .build();
        let bin_branch = (spec.bin_dim > 0).then(|| {
            let [b1, b2] = TranslatorSpec::BIN_BRANCH;
            NetBuilder::new(&[spec.bin_dim], rng).linear(b1).leaky_relu(LEAKY).linear(b2).leaky_relu(LEAKY).build()
        });
        let head = NetBuilder::new(&[spec.concat_dim()], rng)
            .linear(spec.hidden)
            .leaky_relu(LEAKY)
            .linear(spec.out_dim)
            .build();
        Self { spec, task_branch: Some(task_branch), bin_branch, head: Some(head) }
    }

    pub fn out_dim(&self) -> usize {
        self.spec.global_dim()
    }

    /// `bounds` comes from [`Module::bind`] on this translator.
    pub fn forward(&self, bounds: &[Bound<T>], cont: &Var<T>, bin: Option<&Var<T>>, tasks: &[usize]) -> Var<T> {
        let code = Var::constant(task_code(tasks, self.spec.code_width));
        if self.spec.identity {
            let mut parts = vec![cont.clone()];
            parts.extend(bin.cloned());
            parts.push(code);
            return Var::concat_cols(&parts);
        }
        let mut it = bounds.iter();
        let tb = it.next().expect("translator bounds");
        let t = self.task_branch.as_ref().expect("task branch").forward(tb, &code, false);
        let mut parts = vec![cont.clone(), t];
        if let Some(net) = &self.bin_branch {
            let bb = it.next().expect("binary branch bounds");
            parts.push(net.forward(bb, bin.expect("binary input required"), false));
        }
        let hb = it.next().expect("head bounds");
        self.head.as_ref().expect("head").forward(hb, &Var::concat_cols(&parts), false)
    }

    /// No-grad evaluation on plain tensors.
    pub fn infer(&self, cont: &Tensor<T>, bin: Option<&Tensor<T>>, tasks: &[usize]) -> Tensor<T> {
        let _g = crate::autograd::no_grad();
        let b = self.bind(false);
        let bin = bin.map(|t| Var::constant(t.clone()));
        self.forward(&b, &Var::constant(cont.clone()), bin.as_ref(), tasks).value().clone()
    }
}

impl<T: Float> Module<T> for Translator<T> {
    fn nets(&self) -> Vec<&Net<T>> {
        [&self.task_branch, &self.bin_branch, &self.head].into_iter().flatten().collect()
    }

    fn nets_mut(&mut self) -> Vec<&mut Net<T>> {
        [&mut self.task_branch, &mut self.bin_branch, &mut self.head].into_iter().flatten().collect()
    }
}

/// Translator followed by a decoder or generator: `x = g(t(λ, i))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pipeline<T: Float> {
    pub translator: Translator<T>,
    pub net: Net<T>,
}

impl<T: Float> Pipeline<T> {
    pub fn forward(
        &self,
        bounds: &[Bound<T>],
        cont: &Var<T>,
        bin: Option<&Var<T>>,
        tasks: &[usize],
        train: bool,
    ) -> Var<T> {
        let (tb, nb) = bounds.split_at(bounds.len() - 1);
        let z = self.translator.forward(tb, cont, bin, tasks);
        self.net.forward(&nb[0], &z, train)
    }

    /// Eval-mode, no-grad generation.
    pub fn infer(&self, cont: &Tensor<T>, bin: Option<&Tensor<T>>, tasks: &[usize]) -> Tensor<T> {
        let _g = crate::autograd::no_grad();
        let z = self.translator.infer(cont, bin, tasks);
        self.net.infer(&z)
    }
}

impl<T: Float> Module<T> for Pipeline<T> {
    fn nets(&self) -> Vec<&Net<T>> {
        let mut v = self.translator.nets();
        v.push(&self.net);
        v
    }

    fn nets_mut(&mut self) -> Vec<&mut Net<T>> {
        let mut v = self.translator.nets_mut();
        v.push(&mut self.net);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(cont: usize, bin: usize, out: usize) -> TranslatorSpec {
        TranslatorSpec { cont_dim: cont, bin_dim: bin, code_width: 8, hidden: 192, out_dim: out, identity: false }
    }

    #[test]
    fn translator_concat_width_matches_published_sizes() {
        assert_eq!(spec(8, 4, 384).concat_dim(), 32);
        assert_eq!(spec(12, 4, 384).concat_dim(), 36);
    }

    #[test]
    fn task_codes_are_plain_binary() {
        let c = task_code::<f32>(&[0, 1, 5], 4);
        assert_eq!(c.data(), &[0., 0., 0., 0., 1., 0., 0., 0., 1., 0., 1., 0.]);
    }

    #[test]
    fn dense_vae_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc: Net<f32> = vae_encoder(VaeArch::Dense, [1, 28, 28], 8, 4, &mut rng).unwrap();
        let dec: Net<f32> = vae_decoder(VaeArch::Dense, [1, 28, 28], 384, &mut rng).unwrap();
        assert_eq!(enc.output_shape, vec![20]);
        assert_eq!(dec.output_shape, vec![1, 28, 28]);
        let t: Translator<f32> = Translator::new(spec(8, 4, 384), &mut rng);
        let z = t.infer(&Tensor::zeros(&[3, 8]), Some(&Tensor::zeros(&[3, 4])), &[0, 1, 2]);
        assert_eq!(z.shape(), &[3, 384]);
    }

    #[test]
    fn conv_and_celeba_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc: Net<f32> = vae_encoder(VaeArch::ConvCeleba, [3, 32, 32], 32, 8, &mut rng).unwrap();
        assert_eq!(enc.output_shape, vec![72]);
        let dec: Net<f32> = vae_decoder(VaeArch::ConvCeleba, [3, 32, 32], 1600, &mut rng).unwrap();
        assert_eq!(dec.output_shape, vec![3, 32, 32]);
        let g: Net<f32> = gan_generator(GanArch::Conv, [1, 28, 28], 100, &mut rng).unwrap();
        assert_eq!(g.output_shape, vec![1, 28, 28]);
        let c: Net<f32> = gan_critic(GanArch::Conv, [1, 28, 28], &mut rng).unwrap();
        assert_eq!(c.output_shape, vec![1]);
        assert!(vae_encoder::<f32>(VaeArch::Conv, [1, 32, 32], 8, 4, &mut rng).is_err());
    }

    #[test]
    fn critic_never_uses_batch_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for arch in [GanArch::Dense, GanArch::Conv] {
            let c: Net<f32> = gan_critic(arch, [1, 28, 28], &mut rng).unwrap();
            assert!(c.layers.iter().all(|l| !matches!(l, crate::nn::Layer::BatchNorm { .. })));
        }
    }

    #[test]
    fn identity_translator_concatenates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = TranslatorSpec { identity: true, ..spec(2, 1, 384) };
        let t: Translator<f64> = Translator::new(s, &mut rng);
        assert_eq!(t.out_dim(), 11);
        let z = t.infer(&Tensor::from_vec(&[1, 2], vec![0.5, -1.0]), Some(&Tensor::ones(&[1, 1])), &[3]);
        assert_eq!(&z.data()[..5], &[0.5, -1.0, 1.0, 1.0, 1.0]);
        assert!(t.nets().is_empty());
    }
}
