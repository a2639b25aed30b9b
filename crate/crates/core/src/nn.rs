//! Sequential networks, parameter storage and the Adam optimizer.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;

use crate::autograd::{ConvGeom, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// Weight `[out, in]`, bias `[out]`.
    Linear { w: usize, b: usize },
    /// Weight `[oc, ic, k, k]`, bias `[oc]`.
    Conv2d { w: usize, b: Option<usize>, stride: usize, pad: usize },
    /// Weight `[ic, oc, k, k]`, bias `[oc]`.
    ConvTranspose2d { w: usize, b: usize, stride: usize, pad: usize },
    /// Normalizes over the batch per channel (axis 1).
    BatchNorm { gamma: usize, beta: usize, mean: usize, var: usize },
    /// Normalizes each sample over all of its features.
    LayerNorm { gamma: usize, beta: usize },
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    /// Reshape trailing (per-sample) axes.
    Reshape(Vec<usize>),
    Flatten,
    MaxPool2,
}

/// Named trainable tensors plus non-trainable buffers (batch-norm statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Float> {
    pub names: Vec<String>,
    pub values: Vec<Tensor<T>>,
    pub buffer_names: Vec<String>,
    pub buffers: Vec<Tensor<T>>,
}

impl<T: Float> ParamSet<T> {
    fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), buffer_names: Vec::new(), buffers: Vec::new() }
    }

    pub fn num_params(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Exact bitwise equality of all parameters and buffers.
    pub fn bit_eq(&self, other: &Self) -> bool {
        let same = |a: &[Tensor<T>], b: &[Tensor<T>]| {
            a.len() == b.len()
                && a.iter().zip(b).all(|(x, y)| {
                    x.shape() == y.shape()
                        && x.data().iter().zip(y.data()).all(|(p, q)| p.as_f64().to_bits() == q.as_f64().to_bits())
                })
        };
        same(&self.values, &other.values) && same(&self.buffers, &other.buffers)
    }
}

/// Leaf vars for one forward pass, plus batch-norm statistics produced by it.
pub struct Bound<T: Float> {
    pub vars: Vec<Var<T>>,
    stats: RefCell<Vec<(usize, Tensor<T>)>>,
}

impl<T: Float> Bound<T> {
    /// Trainable leaves (empty when bound frozen).
    pub fn leaves(&self) -> Vec<Var<T>> {
        self.vars.iter().filter(|v| v.requires_grad()).cloned().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Net<T: Float> {
    pub layers: Vec<Layer>,
    pub params: ParamSet<T>,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
}

impl<T: Float> Net<T> {
    pub fn bind(&self, trainable: bool) -> Bound<T> {
        Bound {
            vars: self.params.values.iter().map(|v| Var::leaf(v.clone(), trainable)).collect(),
            stats: RefCell::new(Vec::new()),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    /// Forward pass. `train` selects batch statistics for batch norm and
    /// records running-average updates into `bound`.
    pub fn forward(&self, bound: &Bound<T>, x: &Var<T>, train: bool) -> Var<T> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = self.apply(layer, bound, &h, train);
        }
        h
    }

    /// Fold batch-norm running statistics recorded during `bound`'s forward
    /// passes into the buffers.
    pub fn apply_stats(&mut self, bound: &Bound<T>) {
        for (idx, t) in bound.stats.borrow_mut().drain(..) {
            self.params.buffers[idx] = t;
        }
    }

    /// Convenience: a no-grad, eval-mode forward on a plain tensor.
    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let _g = crate::autograd::no_grad();
        let b = self.bind(false);
        self.forward(&b, &Var::constant(x.clone()), false).value().clone()
    }

    fn apply(&self, layer: &Layer, bound: &Bound<T>, h: &Var<T>, train: bool) -> Var<T> {
        let p = &bound.vars;
        match layer {
            Layer::Linear { w, b } => {
                let x = h.flatten();
                x.matmul_t(&p[*w], false, true).add_row(&p[*b])
            }
            Layer::Conv2d { w, b, stride, pad } => conv2d(h, &p[*w], b.map(|b| &p[b]), *stride, *pad),
            Layer::ConvTranspose2d { w, b, stride, pad } => conv_transpose2d(h, &p[*w], &p[*b], *stride, *pad),
            Layer::BatchNorm { gamma, beta, mean, var } => {
                let (y, stats) = batch_norm(
                    h,
                    &p[*gamma],
                    &p[*beta],
                    &self.params.buffers[*mean],
                    &self.params.buffers[*var],
                    train,
                );
                if let Some((m, v)) = stats {
                    let mut s = bound.stats.borrow_mut();
                    s.push((*mean, m));
                    s.push((*var, v));
                }
                y
            }
            Layer::LayerNorm { gamma, beta } => layer_norm(h, &p[*gamma], &p[*beta]),
            Layer::LeakyRelu(s) => h.leaky_relu(T::of(*s)),
            Layer::Sigmoid => h.sigmoid(),
            Layer::Tanh => h.tanh(),
            Layer::Reshape(shape) => {
                let mut full = vec![h.shape()[0]];
                full.extend_from_slice(shape);
                h.reshape(&full)
            }
            Layer::Flatten => h.flatten(),
            Layer::MaxPool2 => max_pool2(h),
        }
    }

    /// Tensors under `prefix.<name>`; buffers included.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let p = self.params.names.iter().zip(&self.params.values);
        let b = self.params.buffer_names.iter().zip(&self.params.buffers);
        p.chain(b).map(|(n, t)| (format!("{prefix}.{n}"), t.clone())).collect()
    }

    pub fn load_named(&mut self, prefix: &str, map: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        let ParamSet { names, values, buffer_names, buffers } = &mut self.params;
        for (n, slot) in names.iter().zip(values.iter_mut()).chain(buffer_names.iter().zip(buffers.iter_mut())) {
            let key = format!("{prefix}.{n}");
            let t = map.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {key} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    /// Reinterpret all tensors in another precision.
    pub fn cast<U: Float>(&self) -> Net<U> {
        Net {
            layers: self.layers.clone(),
            params: ParamSet {
                names: self.params.names.clone(),
                values: self.params.values.iter().map(Tensor::cast).collect(),
                buffer_names: self.params.buffer_names.clone(),
                buffers: self.params.buffers.iter().map(Tensor::cast).collect(),
            },
            input_shape: self.input_shape.clone(),
            output_shape: self.output_shape.clone(),
        }
    }
}

pub fn conv2d<T: Float>(x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>, stride: usize, pad: usize) -> Var<T> {
    let s = x.shape();
    let ws = w.shape();
    let geom = ConvGeom {
        batch: s[0],
        channels: s[1],
        height: s[2],
        width: s[3],
        kernel_h: ws[2],
        kernel_w: ws[3],
        stride,
        pad,
    };
    let (oh, ow, oc) = (geom.out_h(), geom.out_w(), ws[0]);
    let cols = x.im2col(geom);
    let mut y = cols.matmul_t(&w.reshape(&[oc, ws[1] * ws[2] * ws[3]]), false, true);
    if let Some(b) = b {
        y = y.add_row(b);
    }
    y.reshape(&[s[0], oh, ow, oc]).permute(&[0, 3, 1, 2])
}

pub fn conv_transpose2d<T: Float>(x: &Var<T>, w: &Var<T>, b: &Var<T>, stride: usize, pad: usize) -> Var<T> {
    let s = x.shape();
    let ws = w.shape();
    let (n, ic, h, wd) = (s[0], s[1], s[2], s[3]);
    let (oc, kh, kw) = (ws[1], ws[2], ws[3]);
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (wd - 1) * stride + kw - 2 * pad;
    let geom = ConvGeom { batch: n, channels: oc, height: oh, width: ow, kernel_h: kh, kernel_w: kw, stride, pad };
    debug_assert_eq!((geom.out_h(), geom.out_w()), (h, wd));
    let rows = x.permute(&[0, 2, 3, 1]).reshape(&[n * h * wd, ic]);
    let cols = rows.matmul(&w.reshape(&[ic, oc * kh * kw]));
    let y = cols.col2im(geom);
    y.add(&b.expand_chan(y.shape()))
}

fn batch_norm<T: Float>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    run_mean: &Tensor<T>,
    run_var: &Tensor<T>,
    train: bool,
) -> (Var<T>, Option<(Tensor<T>, Tensor<T>)>) {
    let shape = x.shape().to_vec();
    // Per-channel reductions over every axis except 1; rank-2 inputs are
    // viewed as [n, c, 1].
    let xs = if shape.len() == 2 { x.reshape(&[shape[0], shape[1], 1]) } else { x.clone() };
    let full = xs.shape().to_vec();
    let count = full[0] * full[2..].iter().product::<usize>();
    let eps = T::of(BN_EPS);
    let (y, stats) = if train {
        let inv_n = T::of(1.0 / count as f64);
        let mean = xs.sum_chan().scale(inv_n);
        let centered = xs.sub(&mean.expand_chan(&full));
        let var = centered.square().sum_chan().scale(inv_n);
        let inv_std = var.add_scalar(eps).sqrt().recip();
        let y = centered.mul(&inv_std.mul(gamma).expand_chan(&full)).add(&beta.expand_chan(&full));
        let m = T::of(BN_MOMENTUM);
        let unbias = if count > 1 { count as f64 / (count as f64 - 1.0) } else { 1.0 };
        let new_mean = run_mean.zip_map(mean.value(), |r, b| (T::one() - m) * r + m * b);
        let new_var = run_var.zip_map(var.value(), |r, b| (T::one() - m) * r + m * b * T::of(unbias));
        (y, Some((new_mean, new_var)))
    } else {
        let inv_std = Var::constant(run_var.map(|v| (v + eps).sqrt().recip()));
        let centered = xs.sub(&Var::constant(run_mean.clone()).expand_chan(&full));
        (centered.mul(&inv_std.mul(gamma).expand_chan(&full)).add(&beta.expand_chan(&full)), None)
    };
    (y.reshape(&shape), stats)
}

fn layer_norm<T: Float>(x: &Var<T>, gamma: &Var<T>, beta: &Var<T>) -> Var<T> {
    let shape = x.shape().to_vec();
    let flat = x.flatten();
    let (n, d) = flat.value().dims2();
    let inv_d = T::of(1.0 / d as f64);
    let mean = flat.sum_rows().scale(inv_d);
    let centered = flat.sub(&mean.expand_cols(d));
    let var = centered.square().sum_rows().scale(inv_d);
    let inv_std = var.add_scalar(T::of(LN_EPS)).sqrt().recip();
    let y = centered.mul_col(&inv_std).mul(&gamma.expand_rows(n)).add_row(beta);
    y.reshape(&shape)
}

fn max_pool2<T: Float>(x: &Var<T>) -> Var<T> {
    let s = x.shape().to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    let d = x.value().data();
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * w + 2 * xx + dx;
                    if d[i] > d[best] {
                        best = i;
                    }
                }
                idx.push(best);
            }
        }
    }
    x.gather(Rc::new(idx), &[n, c, oh, ow])
}

/// Incrementally builds a [`Net`], tracking the per-sample shape.
pub struct NetBuilder<'r, T: Float, R: Rng> {
    rng: &'r mut R,
    shape: Vec<usize>,
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    params: ParamSet<T>,
}

impl<'r, T: Float, R: Rng> NetBuilder<'r, T, R> {
    pub fn new(input_shape: &[usize], rng: &'r mut R) -> Self {
        Self {
            rng,
            shape: input_shape.to_vec(),
            input_shape: input_shape.to_vec(),
            layers: Vec::new(),
            params: ParamSet::new(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn push_param(&mut self, name: &str, t: Tensor<T>) -> usize {
        let i = self.params.values.len();
        self.params.names.push(format!("{}.{name}", self.layers.len()));
        self.params.values.push(t);
        i
    }

    fn push_buffer(&mut self, name: &str, t: Tensor<T>) -> usize {
        let i = self.params.buffers.len();
        self.params.buffer_names.push(format!("{}.{name}", self.layers.len()));
        self.params.buffers.push(t);
        i
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let v = (0..n).map(|_| T::of(self.rng.random_range(-bound..=bound))).collect();
        Tensor::from_vec(shape, v)
    }

    pub fn linear(mut self, out: usize) -> Self {
        let fan_in: usize = self.shape.iter().product();
        let bound = 1.0 / (fan_in as f64).sqrt();
        let wt = self.uniform(&[out, fan_in], bound);
        let bt = self.uniform(&[out], bound);
        let w = self.push_param("weight", wt);
        let b = self.push_param("bias", bt);
        self.layers.push(Layer::Linear { w, b });
        self.shape = vec![out];
        self
    }

    pub fn conv(mut self, out_ch: usize, kernel: usize, stride: usize, pad: usize, bias: bool) -> Self {
        let [c, h, w]: [usize; 3] = self.shape[..].try_into().expect("conv expects [c, h, w] input");
        let fan_in = c * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let wt = self.uniform(&[out_ch, c, kernel, kernel], bound);
        let wi = self.push_param("weight", wt);
        let bi = bias.then(|| {
            let bt = self.uniform(&[out_ch], bound);
            self.push_param("bias", bt)
        });
        self.layers.push(Layer::Conv2d { w: wi, b: bi, stride, pad });
        self.shape = vec![out_ch, (h + 2 * pad - kernel) / stride + 1, (w + 2 * pad - kernel) / stride + 1];
        self
    }

    pub fn conv_t(mut self, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        let [c, h, w]: [usize; 3] = self.shape[..].try_into().expect("conv_t expects [c, h, w] input");
        let fan_in = out_ch * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let wt = self.uniform(&[c, out_ch, kernel, kernel], bound);
        let bt = self.uniform(&[out_ch], bound);
        let wi = self.push_param("weight", wt);
        let bi = self.push_param("bias", bt);
        self.layers.push(Layer::ConvTranspose2d { w: wi, b: bi, stride, pad });
        self.shape = vec![out_ch, (h - 1) * stride + kernel - 2 * pad, (w - 1) * stride + kernel - 2 * pad];
        self
    }

    pub fn batch_norm(mut self) -> Self {
        let c = self.shape[0];
        let gamma = self.push_param("gamma", Tensor::ones(&[c]));
        let beta = self.push_param("beta", Tensor::zeros(&[c]));
        let mean = self.push_buffer("running_mean", Tensor::zeros(&[c]));
        let var = self.push_buffer("running_var", Tensor::ones(&[c]));
        self.layers.push(Layer::BatchNorm { gamma, beta, mean, var });
        self
    }

    pub fn layer_norm(mut self) -> Self {
        let d: usize = self.shape.iter().product();
        let gamma = self.push_param("gamma", Tensor::ones(&[d]));
        let beta = self.push_param("beta", Tensor::zeros(&[d]));
        self.layers.push(Layer::LayerNorm { gamma, beta });
        self
    }

    pub fn leaky_relu(mut self, slope: f64) -> Self {
        self.layers.push(Layer::LeakyRelu(slope));
        self
    }

    pub fn relu(self) -> Self {
        self.leaky_relu(0.0)
    }

    pub fn sigmoid(mut self) -> Self {
        self.layers.push(Layer::Sigmoid);
        self
    }

    pub fn tanh(mut self) -> Self {
        self.layers.push(Layer::Tanh);
        self
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.shape.iter().product::<usize>(), "reshape size");
        self.layers.push(Layer::Reshape(shape.to_vec()));
        self.shape = shape.to_vec();
        self
    }

    pub fn flatten(mut self) -> Self {
        self.layers.push(Layer::Flatten);
        self.shape = vec![self.shape.iter().product()];
        self
    }

    pub fn max_pool2(mut self) -> Self {
        self.layers.push(Layer::MaxPool2);
        self.shape = vec![self.shape[0], self.shape[1] / 2, self.shape[2] / 2];
        self
    }

    pub fn build(self) -> Net<T> {
        Net { layers: self.layers, params: self.params, input_shape: self.input_shape, output_shape: self.shape }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplicative learning-rate decay applied once per epoch.
    pub decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, decay }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }
}

/// Adam with a per-epoch exponential learning-rate schedule.
pub struct Adam<T: Float> {
    cfg: AdamConfig,
    lr: f64,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, lr: cfg.lr, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Advance the schedule by one epoch.
    pub fn end_epoch(&mut self) {
        self.lr *= self.cfg.decay;
    }

    /// Update every trainable tensor of `nets`, in order, from `grads`.
    pub fn step(&mut self, nets: &mut [&mut Net<T>], grads: &[Tensor<T>]) {
        let mut params: Vec<&mut Tensor<T>> = nets.iter_mut().flat_map(|n| n.params.values.iter_mut()).collect();
        assert_eq!(params.len(), grads.len(), "optimizer got {} grads for {} params", grads.len(), params.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let step = T::of(self.lr * c2.sqrt() / c1);
        let eps_hat = T::of(self.cfg.eps * c2.sqrt());
        let (b1, b2) = (T::of(b1), T::of(b2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let pd = p.data_mut();
            for (((x, &gi), mi), vi) in pd.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + ob1 * gi;
                *vi = b2 * *vi + ob2 * gi * gi;
                *x -= step * *mi / (vi.sqrt() + eps_hat);
            }
        }
    }
}

/// Leaves of several bound nets, in `Adam::step` order.
pub fn trainable_leaves<T: Float>(bounds: &[&Bound<T>]) -> Vec<Var<T>> {
    bounds.iter().flat_map(|b| b.leaves()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_values;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_shapes_follow_the_usual_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc: Net<f32> = NetBuilder::new(&[1, 28, 28], &mut rng)
            .conv(32, 4, 2, 1, true)
            .conv(32, 4, 2, 1, true)
            .conv(32, 4, 2, 1, true)
            .flatten()
            .build();
        assert_eq!(enc.output_shape, vec![288]);
        let dec: Net<f32> = NetBuilder::new(&[128, 4, 4], &mut rng)
            .conv_t(128, 4, 2, 0)
            .conv_t(64, 4, 2, 0)
            .conv_t(32, 4, 1, 0)
            .conv_t(1, 4, 1, 0)
            .build();
        assert_eq!(dec.output_shape, vec![1, 28, 28]);
        let x = Tensor::<f32>::zeros(&[2, 128, 4, 4]);
        assert_eq!(dec.infer(&x).shape(), &[2, 1, 28, 28]);
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net: Net<f64> = NetBuilder::new(&[2, 5, 4], &mut rng).conv(3, 3, 2, 1, true).build();
        let x: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 / 10.0 - 0.5).collect();
        let y = net.infer(&Tensor::from_vec(&[1, 2, 5, 4], x.clone()));
        let w = &net.params.values[0];
        let b = &net.params.values[1];
        let (oh, ow) = (3, 2);
        assert_eq!(y.shape(), &[1, 3, oh, ow]);
        for o in 0..3 {
            for yy in 0..oh {
                for xx in 0..ow {
                    let mut s = b.data()[o];
                    for c in 0..2 {
                        for i in 0..3 {
                            for j in 0..3 {
                                let iy = (yy * 2 + i) as isize - 1;
                                let ix = (xx * 2 + j) as isize - 1;
                                if (0..5).contains(&iy) && (0..4).contains(&ix) {
                                    s += w.data()[((o * 2 + c) * 3 + i) * 3 + j]
                                        * x[(c * 5 + iy as usize) * 4 + ix as usize];
                                }
                            }
                        }
                    }
                    let got = y.data()[(o * oh + yy) * ow + xx];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn layer_and_batch_norm_gradients_are_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net: Net<f64> = NetBuilder::new(&[2, 3, 3], &mut rng)
            .conv(2, 2, 1, 0, true)
            .batch_norm()
            .leaky_relu(0.2)
            .layer_norm()
            .flatten()
            .linear(1)
            .build();
        let x = Tensor::from_vec(&[3, 2, 3, 3], (0..54).map(|i| ((i * 13) % 17) as f64 / 8.0 - 1.0).collect());
        let loss = |n: &Net<f64>| {
            let b = n.bind(true);
            let out = n.forward(&b, &Var::constant(x.clone()), true).square().sum();
            (out.item(), grad_values(&out, &b.leaves()))
        };
        let (_, g) = loss(&net);
        let h = 1e-6;
        for (pi, gt) in g.iter().enumerate() {
            for k in 0..gt.len() {
                let mut p = net.clone();
                p.params.values[pi].data_mut()[k] += h;
                let mut m = net.clone();
                m.params.values[pi].data_mut()[k] -= h;
                let num = (loss(&p).0 - loss(&m).0) / (2.0 * h);
                let ana = gt.data()[k];
                assert!((num - ana).abs() <= 1e-5 * (1.0 + num.abs()), "param {pi}[{k}]: {ana} vs {num}");
            }
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net: Net<f64> = NetBuilder::new(&[3], &mut rng).linear(1).build();
        let x = Tensor::from_vec(&[4, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1., 1., 1., 1.]);
        let y = Var::constant(Tensor::from_vec(&[4, 1], vec![1., 2., 3., 6.]));
        let mut opt = Adam::new(AdamConfig::new(0.05, 1.0));
        let mut last = f64::INFINITY;
        for _ in 0..2000 {
            let b = net.bind(true);
            let loss = net.forward(&b, &Var::constant(x.clone()), true).sub(&y).square().mean();
            last = loss.item();
            let g = grad_values(&loss, &b.leaves());
            opt.step(&mut [&mut net], &g);
        }
        assert!(last < 1e-8, "loss {last}");
    }
}
