//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every backward rule is itself written with differentiable [`Var`] ops, so
//! gradients computed with `create_graph = true` can be differentiated again.
//! The WGAN-GP critic penalty relies on this.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::tensor::{Float, Tensor};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<usize> = const { Cell::new(0) };
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

fn next_id() -> usize {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Disables graph recording until dropped.
pub struct NoGradGuard {
    prev: bool,
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

type BackwardFn<T> = Box<dyn Fn(&[Var<T>], &Var<T>, &Var<T>) -> Vec<Option<Var<T>>>>;

struct Node<T: Float> {
    id: usize,
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
}

/// A node in the computation graph.
#[derive(Clone)]
pub struct Var<T: Float>(Rc<Node<T>>);

impl<T: Float> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.0.id, self.0.value)
    }
}

/// Convolution geometry shared by `im2col` / `col2im`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }

    fn col_cols(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    /// Visit every in-bounds run of kernel columns as
    /// `(col buffer start, image start, length)`; both sides are contiguous.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let cols = self.col_cols();
        let (kh, kw, s, p) = (self.kernel_h, self.kernel_w, self.stride as isize, self.pad as isize);
        let (h, w) = (self.height as isize, self.width as isize);
        for n in 0..self.batch {
            for y in 0..oh {
                for x in 0..ow {
                    let row = (n * oh + y) * ow + x;
                    let x0 = x as isize * s - p;
                    let j_lo = (-x0).max(0) as usize;
                    let j_hi = (w - x0).min(kw as isize);
                    if j_hi <= j_lo as isize {
                        continue;
                    }
                    let len = j_hi as usize - j_lo;
                    let ix = (x0 + j_lo as isize) as usize;
                    for c in 0..self.channels {
                        for i in 0..kh {
                            let iy = y as isize * s + i as isize - p;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            let col = (c * kh + i) * kw + j_lo;
                            let img = ((n * self.channels + c) * self.height + iy as usize) * self.width + ix;
                            f(row * cols + col, img, len);
                        }
                    }
                }
            }
        }
    }
}

impl<T: Float> Var<T> {
    fn make(value: Tensor<T>, requires_grad: bool, parents: Vec<Var<T>>, backward: Option<BackwardFn<T>>) -> Self {
        Var(Rc::new(Node { id: next_id(), value, requires_grad, parents, backward }))
    }

    pub fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Self::make(value, requires_grad, Vec::new(), None)
    }

    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, false)
    }

    pub fn scalar(v: T) -> Self {
        Self::constant(Tensor::scalar(v))
    }

    fn record(
        value: Tensor<T>,
        parents: Vec<Var<T>>,
        backward: impl Fn(&[Var<T>], &Var<T>, &Var<T>) -> Vec<Option<Var<T>>> + 'static,
    ) -> Self {
        if grad_enabled() && parents.iter().any(|p| p.requires_grad()) {
            Self::make(value, true, parents, Some(Box::new(backward)))
        } else {
            Self::constant(value)
        }
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    /// The single element of a one-element var.
    pub fn item(&self) -> T {
        assert_eq!(self.0.value.len(), 1, "item() on non-scalar");
        self.0.value.get(0)
    }

    // ----- elementwise binary -------------------------------------------------

    pub fn add(&self, o: &Self) -> Self {
        let v = self.value().zip_map(o.value(), |a, b| a + b);
        Self::record(v, vec![self.clone(), o.clone()], |_, _, g| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&self, o: &Self) -> Self {
        let v = self.value().zip_map(o.value(), |a, b| a - b);
        Self::record(v, vec![self.clone(), o.clone()], |_, _, g| vec![Some(g.clone()), Some(g.neg())])
    }

    pub fn mul(&self, o: &Self) -> Self {
        let v = self.value().zip_map(o.value(), |a, b| a * b);
        Self::record(v, vec![self.clone(), o.clone()], |p, _, g| {
            vec![
                p[0].requires_grad().then(|| g.mul(&p[1])),
                p[1].requires_grad().then(|| g.mul(&p[0])),
            ]
        })
    }

    pub fn div(&self, o: &Self) -> Self {
        let v = self.value().zip_map(o.value(), |a, b| a / b);
        Self::record(v, vec![self.clone(), o.clone()], |p, out, g| {
            vec![
                p[0].requires_grad().then(|| g.div(&p[1])),
                p[1].requires_grad().then(|| g.mul(out).div(&p[1]).neg()),
            ]
        })
    }

    // ----- elementwise unary --------------------------------------------------

    pub fn scale(&self, s: T) -> Self {
        let v = self.value().map(|a| a * s);
        Self::record(v, vec![self.clone()], move |_, _, g| vec![Some(g.scale(s))])
    }

    pub fn neg(&self) -> Self {
        self.scale(-T::one())
    }

    pub fn add_scalar(&self, s: T) -> Self {
        let v = self.value().map(|a| a + s);
        Self::record(v, vec![self.clone()], |_, _, g| vec![Some(g.clone())])
    }

    pub fn square(&self) -> Self {
        let v = self.value().map(|a| a * a);
        Self::record(v, vec![self.clone()], |p, _, g| vec![Some(g.mul(&p[0]).scale(T::of(2.0)))])
    }

    pub fn sqrt(&self) -> Self {
        let v = self.value().map(|a| a.sqrt());
        Self::record(v, vec![self.clone()], |_, out, g| vec![Some(g.div(out).scale(T::of(0.5)))])
    }

    pub fn recip(&self) -> Self {
        let v = self.value().map(|a| a.recip());
        Self::record(v, vec![self.clone()], |_, out, g| vec![Some(g.mul(&out.square()).neg())])
    }

    pub fn exp(&self) -> Self {
        let v = self.value().map(|a| a.exp());
        Self::record(v, vec![self.clone()], |_, out, g| vec![Some(g.mul(out))])
    }

    pub fn ln(&self) -> Self {
        let v = self.value().map(|a| a.ln());
        Self::record(v, vec![self.clone()], |p, _, g| vec![Some(g.div(&p[0]))])
    }

    pub fn sigmoid(&self) -> Self {
        let v = self.value().map(sigmoid);
        Self::record(v, vec![self.clone()], |_, out, g| {
            let one_minus = out.neg().add_scalar(T::one());
            vec![Some(g.mul(out).mul(&one_minus))]
        })
    }

    pub fn tanh(&self) -> Self {
        let v = self.value().map(|a| a.tanh());
        Self::record(v, vec![self.clone()], |_, out, g| {
            vec![Some(g.mul(&out.square().neg().add_scalar(T::one())))]
        })
    }

    pub fn leaky_relu(&self, slope: T) -> Self {
        let mask = self.value().map(|a| if a > T::zero() { T::one() } else { slope });
        let v = self.value().zip_map(&mask, |a, m| a * m);
        Self::record(v, vec![self.clone()], move |_, _, g| vec![Some(g.mul(&Var::constant(mask.clone())))])
    }

    pub fn relu(&self) -> Self {
        self.leaky_relu(T::zero())
    }

    /// Clamp with a zero gradient outside `[lo, hi]`.
    pub fn clamp(&self, lo: T, hi: T) -> Self {
        let mask = self.value().map(|a| if a >= lo && a <= hi { T::one() } else { T::zero() });
        let v = self.value().map(|a| a.max(lo).min(hi));
        Self::record(v, vec![self.clone()], move |_, _, g| vec![Some(g.mul(&Var::constant(mask.clone())))])
    }

    // ----- linear algebra -----------------------------------------------------

    /// `op(self) · op(o)` for 2-D operands (higher ranks are flattened over the
    /// trailing axes).
    pub fn matmul_t(&self, o: &Self, trans_a: bool, trans_b: bool) -> Self {
        let v = self.value().matmul(o.value(), trans_a, trans_b);
        let a_shape = self.shape().to_vec();
        let b_shape = o.shape().to_vec();
        Self::record(v, vec![self.clone(), o.clone()], move |p, _, g| {
            let ga = p[0].requires_grad().then(|| {
                let d = if trans_a { p[1].matmul_t(g, trans_b, true) } else { g.matmul_t(&p[1], false, !trans_b) };
                d.reshape(&a_shape)
            });
            let gb = p[1].requires_grad().then(|| {
                let d = if trans_b { g.matmul_t(&p[0], true, trans_a) } else { p[0].matmul_t(g, !trans_a, false) };
                d.reshape(&b_shape)
            });
            vec![ga, gb]
        })
    }

    pub fn matmul(&self, o: &Self) -> Self {
        self.matmul_t(o, false, false)
    }

    // ----- broadcasting and reductions ---------------------------------------

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Self {
        let v = Tensor::scalar(self.value().sum());
        let shape = self.shape().to_vec();
        Self::record(v, vec![self.clone()], move |_, _, g| vec![Some(g.expand_all(&shape))])
    }

    pub fn mean(&self) -> Self {
        let n = self.value().len().max(1);
        self.sum().scale(T::of(1.0 / n as f64))
    }

    /// Broadcast a one-element var to `shape`.
    pub fn expand_all(&self, shape: &[usize]) -> Self {
        assert_eq!(self.value().len(), 1, "expand_all expects one element");
        let v = Tensor::full(shape, self.value().get(0));
        let own = self.shape().to_vec();
        Self::record(v, vec![self.clone()], move |_, _, g| vec![Some(g.sum().reshape(&own))])
    }

    /// Column sums of an `[n, m]` matrix, shape `[m]`.
    pub fn sum_cols(&self) -> Self {
        let (n, m) = self.value().dims2();
        let mut out = vec![T::zero(); m];
        for r in 0..n {
            for (o, &x) in out.iter_mut().zip(self.value().row(r)) {
                *o += x;
            }
        }
        let shape = self.shape().to_vec();
        Self::record(Tensor::from_vec(&[m], out), vec![self.clone()], move |_, _, g| {
            vec![Some(g.expand_rows(n).reshape(&shape))]
        })
    }

    /// Repeat an `[m]` vector as `n` rows.
    pub fn expand_rows(&self, n: usize) -> Self {
        let m = self.value().len();
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(self.value().data());
        }
        let own = self.shape().to_vec();
        Self::record(Tensor::from_vec(&[n, m], out), vec![self.clone()], move |_, _, g| {
            vec![Some(g.sum_cols().reshape(&own))]
        })
    }

    /// Row sums of an `[n, m]` matrix, shape `[n, 1]`.
    pub fn sum_rows(&self) -> Self {
        let (n, m) = self.value().dims2();
        let out: Vec<T> = (0..n).map(|r| self.value().row(r).iter().copied().sum()).collect();
        let shape = self.shape().to_vec();
        Self::record(Tensor::from_vec(&[n, 1], out), vec![self.clone()], move |_, _, g| {
            vec![Some(g.expand_cols(m).reshape(&shape))]
        })
    }

    /// Repeat an `[n, 1]` column `m` times.
    pub fn expand_cols(&self, m: usize) -> Self {
        let n = self.value().len();
        let mut out = Vec::with_capacity(n * m);
        for &x in self.value().data() {
            out.extend(std::iter::repeat_n(x, m));
        }
        let own = self.shape().to_vec();
        Self::record(Tensor::from_vec(&[n, m], out), vec![self.clone()], move |_, _, g| {
            vec![Some(g.sum_rows().reshape(&own))]
        })
    }

    /// `[n, m] + [m]` broadcast over rows.
    pub fn add_row(&self, b: &Self) -> Self {
        let (_, m) = self.value().dims2();
        assert_eq!(b.value().len(), m, "add_row width mismatch");
        let mut out = self.value().data().to_vec();
        for row in out.chunks_mut(m.max(1)) {
            for (o, &x) in row.iter_mut().zip(b.value().data()) {
                *o += x;
            }
        }
        let b_shape = b.shape().to_vec();
        Self::record(Tensor::from_vec(self.shape(), out), vec![self.clone(), b.clone()], move |p, _, g| {
            vec![Some(g.clone()), p[1].requires_grad().then(|| g.sum_cols().reshape(&b_shape))]
        })
    }

    /// `[n, m] * [n, 1]` broadcast over columns.
    pub fn mul_col(&self, c: &Self) -> Self {
        let (_, m) = self.value().dims2();
        let x = self.reshape(&[self.value().dims2().0, m]);
        x.mul(&c.expand_cols(m)).reshape(self.shape())
    }

    // ----- shape ops ----------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Self {
        if shape == self.shape() {
            return self.clone();
        }
        let v = self.value().reshape(shape);
        let own = self.shape().to_vec();
        Self::record(v, vec![self.clone()], move |_, _, g| vec![Some(g.reshape(&own))])
    }

    /// Flatten all axes after the first.
    pub fn flatten(&self) -> Self {
        let (n, m) = self.value().dims2();
        self.reshape(&[n, m])
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Self {
        let v = permute_tensor(self.value(), perm);
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        Self::record(v, vec![self.clone()], move |_, _, g| vec![Some(g.permute(&inv))])
    }

    /// Concatenate `[n, m_i]` matrices along columns.
    pub fn concat_cols(parts: &[Var<T>]) -> Self {
        assert!(!parts.is_empty());
        let n = parts[0].value().dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (r, c) = p.value().dims2();
                assert_eq!(r, n, "concat_cols row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for p in parts {
                out.extend_from_slice(p.value().row(r));
            }
        }
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        Self::record(Tensor::from_vec(&[n, total], out), parts.to_vec(), move |p, _, g| {
            let mut off = 0;
            widths
                .iter()
                .zip(&shapes)
                .zip(p)
                .map(|((&w, s), pv)| {
                    let piece = pv.requires_grad().then(|| g.slice_cols(off, w).reshape(s));
                    off += w;
                    piece
                })
                .collect()
        })
    }

    /// Columns `[off, off + w)` of an `[n, m]` matrix.
    pub fn slice_cols(&self, off: usize, w: usize) -> Self {
        let (n, m) = self.value().dims2();
        assert!(off + w <= m, "slice_cols out of range");
        let mut out = Vec::with_capacity(n * w);
        for r in 0..n {
            out.extend_from_slice(&self.value().row(r)[off..off + w]);
        }
        let shape = self.shape().to_vec();
        Self::record(Tensor::from_vec(&[n, w], out), vec![self.clone()], move |_, _, g| {
            vec![Some(g.pad_cols(off, m).reshape(&shape))]
        })
    }

    /// Embed an `[n, w]` matrix at column `off` of a zero `[n, total]` matrix.
    pub fn pad_cols(&self, off: usize, total: usize) -> Self {
        let (n, w) = self.value().dims2();
        let mut out = vec![T::zero(); n * total];
        for r in 0..n {
            out[r * total + off..r * total + off + w].copy_from_slice(self.value().row(r));
        }
        let shape = self.shape().to_vec();
        Self::record(Tensor::from_vec(&[n, total], out), vec![self.clone()], move |_, _, g| {
            vec![Some(g.slice_cols(off, w).reshape(&shape))]
        })
    }

    /// Per-channel sums of an `[N, C, ...]` tensor, shape `[C]`.
    pub fn sum_chan(&self) -> Self {
        let shape = self.shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let mut out = vec![T::zero(); c];
        let d = self.value().data();
        for b in 0..n {
            for (ch, o) in out.iter_mut().enumerate() {
                let s = (b * c + ch) * spatial;
                *o += d[s..s + spatial].iter().copied().sum();
            }
        }
        Self::record(Tensor::from_vec(&[c], out), vec![self.clone()], move |_, _, g| {
            vec![Some(g.expand_chan(&shape))]
        })
    }

    /// Broadcast a `[C]` vector over an `[N, C, ...]` shape.
    pub fn expand_chan(&self, shape: &[usize]) -> Self {
        let (n, c) = (shape[0], shape[1]);
        assert_eq!(self.value().len(), c, "expand_chan channel mismatch");
        let spatial: usize = shape[2..].iter().product();
        let mut out = Vec::with_capacity(n * c * spatial);
        for _ in 0..n {
            for &x in self.value().data() {
                out.extend(std::iter::repeat_n(x, spatial));
            }
        }
        let own = self.shape().to_vec();
        Self::record(Tensor::from_vec(shape, out), vec![self.clone()], move |_, _, g| {
            vec![Some(g.sum_chan().reshape(&own))]
        })
    }

    /// Unfold `[N, C, H, W]` patches into `[N·OH·OW, C·KH·KW]`.
    pub fn im2col(&self, geom: ConvGeom) -> Self {
        assert_eq!(self.shape(), [geom.batch, geom.channels, geom.height, geom.width], "im2col input shape");
        let src = self.value().data();
        let mut out = vec![T::zero(); geom.col_rows() * geom.col_cols()];
        geom.for_each_run(|ci, ii, len| out[ci..ci + len].copy_from_slice(&src[ii..ii + len]));
        Self::record(
            Tensor::from_vec(&[geom.col_rows(), geom.col_cols()], out),
            vec![self.clone()],
            move |_, _, g| vec![Some(g.col2im(geom))],
        )
    }

    /// Adjoint of [`Var::im2col`]: scatter-add columns back into an image.
    pub fn col2im(&self, geom: ConvGeom) -> Self {
        assert_eq!(self.shape(), [geom.col_rows(), geom.col_cols()], "col2im input shape");
        let src = self.value().data();
        let mut out = vec![T::zero(); geom.batch * geom.channels * geom.height * geom.width];
        geom.for_each_run(|ci, ii, len| {
            for (o, &v) in out[ii..ii + len].iter_mut().zip(&src[ci..ci + len]) {
                *o += v;
            }
        });
        Self::record(
            Tensor::from_vec(&[geom.batch, geom.channels, geom.height, geom.width], out),
            vec![self.clone()],
            move |_, _, g| vec![Some(g.im2col(geom))],
        )
    }

    /// `out[i] = self[idx[i]]` over flattened storage.
    pub fn gather(&self, idx: Rc<Vec<usize>>, out_shape: &[usize]) -> Self {
        let src = self.value().data();
        let out: Vec<T> = idx.iter().map(|&i| src[i]).collect();
        let in_shape = self.shape().to_vec();
        Self::record(Tensor::from_vec(out_shape, out), vec![self.clone()], move |_, _, g| {
            vec![Some(g.scatter_add(Rc::clone(&idx), &in_shape))]
        })
    }

    /// Adjoint of [`Var::gather`].
    pub fn scatter_add(&self, idx: Rc<Vec<usize>>, out_shape: &[usize]) -> Self {
        let src = self.value().data();
        let mut out = vec![T::zero(); out_shape.iter().product()];
        for (&i, &v) in idx.iter().zip(src) {
            out[i] += v;
        }
        let own = self.shape().to_vec();
        Self::record(Tensor::from_vec(out_shape, out), vec![self.clone()], move |_, _, g| {
            vec![Some(g.gather(Rc::clone(&idx), &own))]
        })
    }

    // ----- composites ---------------------------------------------------------

    /// Euclidean norm of each row of an `[n, m]` matrix, shape `[n, 1]`.
    ///
    /// The gradient at a zero row is taken as zero. The backward pass treats
    /// `1 / norm` as a constant, so it is exact to first order only.
    pub fn row_norm(&self) -> Self {
        let (n, m) = self.value().dims2();
        let norms: Vec<T> = (0..n).map(|r| self.value().row(r).iter().map(|&v| v * v).sum::<T>().sqrt()).collect();
        let inv = Tensor::from_vec(&[n, 1], norms.iter().map(|&v| if v > T::zero() { v.recip() } else { T::zero() }).collect());
        let shape = self.shape().to_vec();
        Self::record(Tensor::from_vec(&[n, 1], norms), vec![self.clone()], move |p, _, g| {
            let scale = g.mul(&Var::constant(inv.clone()));
            vec![Some(p[0].reshape(&[n, m]).mul_col(&scale).reshape(&shape))]
        })
    }

    /// Row-wise log-softmax of an `[n, m]` matrix.
    pub fn log_softmax(&self) -> Self {
        let (n, m) = self.value().dims2();
        let maxes: Vec<T> = (0..n)
            .map(|r| self.value().row(r).iter().copied().fold(T::neg_infinity(), T::max))
            .collect();
        let shift = Var::constant(Tensor::from_vec(&[n, 1], maxes)).expand_cols(m);
        let z = self.reshape(&[n, m]).sub(&shift);
        let lse = z.exp().sum_rows().ln();
        z.sub(&lse.expand_cols(m))
    }
}

fn sigmoid<T: Float>(a: T) -> T {
    if a >= T::zero() {
        T::one() / (T::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}

pub fn permute_tensor<T: Float>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = t.shape();
    assert_eq!(perm.len(), shape.len(), "permute rank mismatch");
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(t.len());
    if rank == 0 || t.is_empty() {
        out.extend_from_slice(t.data());
    } else {
        permute_rec(t.data(), &out_shape, &out_strides, 0, 0, &mut out);
    }
    Tensor::from_vec(&out_shape, out)
}

fn permute_rec<T: Copy>(src: &[T], shape: &[usize], strides: &[usize], axis: usize, base: usize, out: &mut Vec<T>) {
    let (n, st) = (shape[axis], strides[axis]);
    if axis + 1 == shape.len() {
        if st == 1 {
            out.extend_from_slice(&src[base..base + n]);
        } else {
            out.extend((0..n).map(|i| src[base + i * st]));
        }
        return;
    }
    for i in 0..n {
        permute_rec(src, shape, strides, axis + 1, base + i * st, out);
    }
}

/// Gradients of a one-element `output` with respect to `inputs`.
///
/// With `create_graph`, the returned vars are themselves differentiable.
/// Inputs that do not influence `output` get a zero gradient.
pub fn grad<T: Float>(output: &Var<T>, inputs: &[Var<T>], create_graph: bool) -> Vec<Var<T>> {
    assert_eq!(output.value().len(), 1, "grad of a non-scalar output");
    let _guard = (!create_graph).then(no_grad);

    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack = vec![(output.clone(), false)];
    while let Some((v, done)) = stack.pop() {
        if done {
            order.push(v);
            continue;
        }
        if !v.requires_grad() || !visited.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        for p in &v.0.parents {
            if p.requires_grad() && !visited.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }

    let keep: HashSet<usize> = inputs.iter().map(Var::id).collect();
    let mut grads: HashMap<usize, Var<T>> = HashMap::new();
    grads.insert(output.id(), Var::constant(Tensor::ones(output.shape())));
    for node in order.iter().rev() {
        let g = if keep.contains(&node.id()) { grads.get(&node.id()).cloned() } else { grads.remove(&node.id()) };
        let (Some(g), Some(backward)) = (g, node.0.backward.as_ref()) else {
            continue;
        };
        let parent_grads = backward(&node.0.parents, node, &g);
        for (p, pg) in node.0.parents.iter().zip(parent_grads) {
            let Some(pg) = pg else { continue };
            if !p.requires_grad() {
                continue;
            }
            debug_assert_eq!(pg.shape(), p.shape(), "gradient shape for {:?}", p);
            let acc = match grads.remove(&p.id()) {
                Some(prev) => prev.add(&pg),
                None => pg,
            };
            grads.insert(p.id(), acc);
        }
    }
    inputs
        .iter()
        .map(|v| grads.get(&v.id()).cloned().unwrap_or_else(|| Var::constant(Tensor::zeros(v.shape()))))
        .collect()
}

/// Plain-tensor gradients; the common first-order case.
pub fn grad_values<T: Float>(output: &Var<T>, inputs: &[Var<T>]) -> Vec<Tensor<T>> {
    grad(output, inputs, false).into_iter().map(|g| g.value().clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec())
    }

    /// Central-difference gradient of `f` at `x`.
    fn numeric(f: &dyn Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn check(f: impl Fn(&Var<f64>) -> Var<f64>, x: Tensor<f64>) {
        let xv = Var::leaf(x.clone(), true);
        let g = grad_values(&f(&xv), std::slice::from_ref(&xv)).remove(0);
        let eval = |p: &Tensor<f64>| f(&Var::constant(p.clone())).item();
        let n = numeric(&eval, &x);
        for (a, b) in g.data().iter().zip(&n) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "analytic {a} vs numeric {b}");
        }
    }

    #[test]
    fn unary_gradients_match_finite_differences() {
        let x = t(&[2, 3], &[0.3, -0.7, 1.2, 0.5, 2.0, -1.5]);
        check(|v| v.sigmoid().sum(), x.clone());
        check(|v| v.tanh().square().sum(), x.clone());
        check(|v| v.exp().mean(), x.clone());
        check(|v| v.square().add_scalar(1.0).ln().sum(), x.clone());
        check(|v| v.square().add_scalar(0.5).sqrt().recip().sum(), x.clone());
        check(|v| v.leaky_relu(0.2).square().sum(), x.clone());
        check(|v| v.log_softmax().slice_cols(1, 1).sum(), x.clone());
    }

    #[test]
    fn shape_op_gradients_match_finite_differences() {
        let x = t(&[2, 3], &[0.3, -0.7, 1.2, 0.5, 2.0, -1.5]);
        let w = t(&[3], &[0.1, 0.2, -0.3]);
        check(|v| v.sum_cols().square().sum(), x.clone());
        check(|v| v.sum_rows().square().sum(), x.clone());
        check(|v| v.add_row(&Var::constant(w.clone())).square().sum(), x.clone());
        check(|v| v.permute(&[1, 0]).slice_cols(0, 1).square().sum(), x.clone());
        check(
            |v| Var::concat_cols(&[v.clone(), v.square()]).slice_cols(2, 3).sum(),
            x.clone(),
        );
        let m = t(&[3, 2], &[1.0, -2.0, 0.5, 0.25, 3.0, 1.0]);
        check(|v| v.matmul(&Var::constant(m.clone())).square().sum(), x.clone());
        check(|v| Var::constant(m.clone()).matmul_t(v, true, true).square().sum(), x.clone());
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let geom = ConvGeom { batch: 1, channels: 2, height: 4, width: 5, kernel_h: 3, kernel_w: 2, stride: 2, pad: 1 };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let xv = Var::constant(t(&[1, 2, 4, 5], &x));
        let cols = xv.im2col(geom);
        let y: Vec<f64> = (0..cols.value().len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let yv = Var::constant(Tensor::from_vec(cols.shape(), y));
        let lhs: f64 = cols.mul(&yv).sum().item();
        let rhs: f64 = xv.mul(&yv.col2im(geom)).sum().item();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn second_order_matches_analytic_hessian_vector() {
        // f(x) = sum(sigmoid(x)^2); grad norm^2 differentiated again.
        let x = t(&[1, 3], &[0.2, -0.4, 0.9]);
        let xv = Var::leaf(x.clone(), true);
        let g = grad(&xv.sigmoid().square().sum(), std::slice::from_ref(&xv), true).remove(0);
        let pen = g.square().sum();
        let gg = grad_values(&pen, std::slice::from_ref(&xv)).remove(0);
        let eval = |p: &Tensor<f64>| {
            let v = Var::leaf(p.clone(), true);
            let g = grad(&v.sigmoid().square().sum(), std::slice::from_ref(&v), false).remove(0);
            g.value().data().iter().map(|a| a * a).sum::<f64>()
        };
        let n = numeric(&eval, &x);
        for (a, b) in gg.data().iter().zip(&n) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn unreachable_inputs_get_zero_gradient() {
        let a = Var::leaf(t(&[2], &[1.0, 2.0]), true);
        let b = Var::leaf(t(&[2], &[3.0, 4.0]), true);
        let g = grad_values(&a.square().sum(), &[a.clone(), b.clone()]);
        assert_eq!(g[0].data(), &[2.0, 4.0]);
        assert_eq!(g[1].data(), &[0.0, 0.0]);
    }
}
