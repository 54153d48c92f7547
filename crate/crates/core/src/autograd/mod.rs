//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation eagerly: values are computed when a
//! node is pushed, and [`Graph::backward`] walks the tape in reverse to
//! accumulate adjoints. Image-like tensors use planar `C x H x W` layout;
//! attention tensors are `B x M x N` batches of matrices.

mod kernels;
mod tensor;

use alloc::vec;
use alloc::vec::Vec;

pub use kernels::gaussian_taps;
pub use tensor::Tensor;

use kernels::{ConvGeom, MatView};

use crate::real::Real;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    /// `x * s` with `s` a one-element tensor.
    ScaleBy(Var, Var),
    /// `x[c, ..] * v[c]`.
    ChannelScale(Var, Var),
    /// `x[c, ..] + v[c]`.
    ChannelShift(Var, Var),
    Abs(Var),
    Gelu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    MeanDim0(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Concat(Vec<Var>),
    Slice {
        input: Var,
        start: usize,
    },
    Upsample2x(Var),
    ChannelNorm {
        input: Var,
        rstd: Vec<T>,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    SoftmaxLast(Var),
    L2NormalizeLast {
        input: Var,
        norms: Vec<T>,
    },
    Sobel(Var),
    FilterValid {
        input: Var,
        taps: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Eager tape of tensor operations.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn chw(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected a C x H x W tensor, got {shape:?}");
    (shape[0], shape[1], shape[2])
}

fn bmn(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected a B x M x N tensor, got {shape:?}");
    (shape[0], shape[1], shape[2])
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "node is not a scalar");
        t.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshaped(shape);
        self.push(v, Op::Reshape(x), &[x])
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "element-wise operands differ in shape");
        Tensor::new(
            ta.shape(),
            ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect(),
        )
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(x);
        Tensor::new(t.shape(), t.data().iter().map(|v| f(*v)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x / y);
        self.push(v, Op::Div(a, b), &[a, b])
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let v = self.map(x, |a| a + s);
        self.push(v, Op::AddScalar(x), &[x])
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Var {
        let v = self.map(x, |a| a * s);
        self.push(v, Op::MulScalar(x, s), &[x])
    }

    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let v = self.map(x, |a| a * sv);
        self.push(v, Op::ScaleBy(x, s), &[x, s])
    }

    fn per_channel(&self, x: Var, v: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let t = self.value(x);
        let c = t.shape()[0];
        let vv = self.value(v);
        assert_eq!(vv.len(), c, "per-channel vector length");
        let inner = t.len() / c;
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, a)| f(*a, vv.data()[i / inner]))
            .collect();
        Tensor::new(t.shape(), data)
    }

    pub fn channel_scale(&mut self, x: Var, v: Var) -> Var {
        let out = self.per_channel(x, v, |a, s| a * s);
        self.push(out, Op::ChannelScale(x, v), &[x, v])
    }

    pub fn channel_shift(&mut self, x: Var, v: Var) -> Var {
        let out = self.per_channel(x, v, |a, s| a + s);
        self.push(out, Op::ChannelShift(x, v), &[x, v])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| a.abs());
        self.push(v, Op::Abs(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.map(x, gelu);
        self.push(v, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.map(x, sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum::<T>() / T::lit(t.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean over the leading axis.
    pub fn mean_dim0(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d0 = t.shape()[0];
        let inner = t.len() / d0;
        let mut out = vec![T::zero(); inner];
        for r in 0..d0 {
            for (o, v) in out.iter_mut().zip(&t.data()[r * inner..(r + 1) * inner]) {
                *o += *v;
            }
        }
        let inv = T::one() / T::lit(d0 as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let shape = if t.shape().len() > 1 { t.shape()[1..].to_vec() } else { vec![1] };
        self.push(Tensor::new(&shape, out), Op::MeanDim0(x), &[x])
    }

    /// 2-D convolution of a `C x H x W` input with a `Cout x Cin/groups x k x k` kernel.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize, groups: usize) -> Var {
        let (cin, h, w) = chw(self.shape(input));
        let ws = self.shape(weight).to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be 4-D");
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(ws[1] * groups, cin, "conv input channels {cin} vs weight {ws:?} groups {groups}");
        assert_eq!(cout % groups, 0);
        let geom = ConvGeom::new(cin, h, w, cout, k, stride, pad, groups);
        let mut out = Tensor::zeros(&[cout, geom.ho, geom.wo]);
        kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            out.data_mut(),
        );
        let mut parents = vec![input, weight];
        parents.extend(bias);
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &parents,
        )
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let first = self.shape(parts[0]).to_vec();
        let mut d0 = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(&t.shape()[1..], &first[1..], "concat operands differ beyond axis 0");
            d0 += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = first;
        shape[0] = d0;
        self.push(Tensor::new(&shape, data), Op::Concat(parts.to_vec()), parts)
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let inner = t.len() / t.shape()[0];
        assert!(start + len <= t.shape()[0], "slice out of range");
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let v = Tensor::new(&shape, t.data()[start * inner..(start + len) * inner].to_vec());
        self.push(v, Op::Slice { input: x, start }, &[x])
    }

    /// Bilinear x2 upsampling of a `C x H x W` tensor.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (c, h, w) = chw(self.shape(x));
        let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
        kernels::upsample2x_forward(c, h, w, self.value(x).data(), out.data_mut());
        self.push(out, Op::Upsample2x(x), &[x])
    }

    /// Normalization over the leading axis at every trailing position (no affine).
    pub fn channel_norm(&mut self, x: Var, eps: T) -> Var {
        let t = self.value(x);
        let c = t.shape()[0];
        let inner = t.len() / c;
        let d = t.data();
        let mut out = vec![T::zero(); t.len()];
        let mut rstd = vec![T::zero(); inner];
        let inv_c = T::one() / T::lit(c as f64);
        for p in 0..inner {
            let mean = (0..c).map(|ch| d[ch * inner + p]).sum::<T>() * inv_c;
            let var = (0..c)
                .map(|ch| {
                    let z = d[ch * inner + p] - mean;
                    z * z
                })
                .sum::<T>()
                * inv_c;
            let r = T::one() / (var + eps).sqrt();
            rstd[p] = r;
            for ch in 0..c {
                out[ch * inner + p] = (d[ch * inner + p] - mean) * r;
            }
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::new(&shape, out), Op::ChannelNorm { input: x, rstd }, &[x])
    }

    /// Batched matrix product `op(a) @ op(b)` where `op` optionally transposes.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ba, a0, a1) = bmn(self.shape(a));
        let (bb, b0, b1) = bmn(self.shape(b));
        assert_eq!(ba, bb, "matmul batch sizes differ");
        let (m, k) = if ta { (a1, a0) } else { (a0, a1) };
        let (k2, n) = if tb { (b1, b0) } else { (b0, b1) };
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let av = if ta { MatView { rs: 1, cs: m } } else { MatView { rs: k, cs: 1 } };
        let bv = if tb { MatView { rs: 1, cs: k } } else { MatView { rs: n, cs: 1 } };
        let mut out = Tensor::zeros(&[ba, m, n]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for bi in 0..ba {
            kernels::gemm_acc(
                m,
                n,
                k,
                &ad[bi * m * k..(bi + 1) * m * k],
                av,
                &bd[bi * k * n..(bi + 1) * k * n],
                bv,
                &mut out.data_mut()[bi * m * n..(bi + 1) * m * n],
                n,
            );
        }
        self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = *t.shape().last().unwrap();
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::new(&shape, out), Op::SoftmaxLast(x), &[x])
    }

    /// Rows scaled to unit L2 norm (norms floored at `eps`).
    pub fn l2_normalize_last(&mut self, x: Var, eps: T) -> Var {
        let t = self.value(x);
        let n = *t.shape().last().unwrap();
        let mut out = t.data().to_vec();
        let mut norms = Vec::with_capacity(t.len() / n);
        for row in out.chunks_exact_mut(n) {
            let nr = row.iter().map(|v| *v * *v).sum::<T>().sqrt().max(eps);
            norms.push(nr);
            row.iter_mut().for_each(|v| *v /= nr);
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::new(&shape, out), Op::L2NormalizeLast { input: x, norms }, &[x])
    }

    /// `|Sobel_x * x| + |Sobel_y * x|` per channel with replicate padding.
    pub fn sobel_magnitude(&mut self, x: Var) -> Var {
        let (c, h, w) = chw(self.shape(x));
        let mut out = Tensor::zeros(&[c, h, w]);
        kernels::sobel_forward(c, h, w, self.value(x).data(), out.data_mut());
        self.push(out, Op::Sobel(x), &[x])
    }

    /// Separable 'valid' filter of every channel with the outer product of `taps`.
    pub fn filter_valid(&mut self, x: Var, taps: &[T]) -> Var {
        let (c, h, w) = chw(self.shape(x));
        let k = taps.len();
        assert!(h >= k && w >= k, "filter of {k} taps exceeds {h}x{w}");
        let mut out = Tensor::zeros(&[c, h + 1 - k, w + 1 - k]);
        kernels::filter_valid_forward(c, h, w, taps, self.value(x).data(), out.data_mut());
        self.push(
            out,
            Op::FilterValid {
                input: x,
                taps: taps.to_vec(),
            },
            &[x],
        )
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        self.backward_scaled(output, T::one())
    }

    /// Reverse sweep seeding `d output = seed`.
    pub fn backward_scaled(&self, output: Var, seed: T) -> Gradients<T> {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(seed));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Mutable adjoint buffer for `v`, zero-initialized if absent.
    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> &'g mut Tensor<T> {
        grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                Self::accumulate(grads, *x, g.clone().reshaped(&shape));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        Self::accumulate(grads, v, g.clone());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    Self::accumulate(grads, *b, Tensor::new(g.shape(), gd.iter().map(|v| -*v).collect()));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let d = gd.iter().zip(vb).map(|(g, y)| *g * *y).collect();
                    Self::accumulate(grads, *a, Tensor::new(g.shape(), d));
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(va).map(|(g, x)| *g * *x).collect();
                    Self::accumulate(grads, *b, Tensor::new(g.shape(), d));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let d = gd.iter().zip(vb).map(|(g, y)| *g / *y).collect();
                    Self::accumulate(grads, *a, Tensor::new(g.shape(), d));
                }
                if self.wants(*b) {
                    let d = gd
                        .iter()
                        .zip(va.iter().zip(vb))
                        .map(|(g, (x, y))| -*g * *x / (*y * *y))
                        .collect();
                    Self::accumulate(grads, *b, Tensor::new(g.shape(), d));
                }
            }
            Op::AddScalar(x) => Self::accumulate(grads, *x, g.clone()),
            Op::MulScalar(x, s) => {
                Self::accumulate(grads, *x, Tensor::new(g.shape(), gd.iter().map(|v| *v * *s).collect()));
            }
            Op::ScaleBy(x, s) => {
                let sv = self.scalar(*s);
                if self.wants(*x) {
                    Self::accumulate(grads, *x, Tensor::new(g.shape(), gd.iter().map(|v| *v * sv).collect()));
                }
                if self.wants(*s) {
                    let ds: T = gd.iter().zip(self.value(*x).data()).map(|(a, b)| *a * *b).sum();
                    Self::accumulate(grads, *s, Tensor::scalar(ds));
                }
            }
            Op::ChannelScale(x, v) | Op::ChannelShift(x, v) => {
                let is_scale = matches!(node.op, Op::ChannelScale(..));
                let vv = self.value(*v).data();
                let c = vv.len();
                let inner = gd.len() / c;
                if self.wants(*x) {
                    let d = if is_scale {
                        gd.iter().enumerate().map(|(i, g)| *g * vv[i / inner]).collect()
                    } else {
                        gd.to_vec()
                    };
                    Self::accumulate(grads, *x, Tensor::new(g.shape(), d));
                }
                if self.wants(*v) {
                    let xv = self.value(*x).data();
                    let mut d = vec![T::zero(); c];
                    for (ch, dv) in d.iter_mut().enumerate() {
                        let r = ch * inner..(ch + 1) * inner;
                        *dv = if is_scale {
                            gd[r.clone()].iter().zip(&xv[r]).map(|(a, b)| *a * *b).sum()
                        } else {
                            gd[r].iter().copied().sum()
                        };
                    }
                    let shape = self.shape(*v).to_vec();
                    Self::accumulate(grads, *v, Tensor::new(&shape, d));
                }
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, x)| {
                        if *x > T::zero() {
                            *g
                        } else if *x < T::zero() {
                            -*g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                Self::accumulate(grads, *x, Tensor::new(g.shape(), d));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let d = gd.iter().zip(xv).map(|(g, x)| *g * gelu_grad(*x)).collect();
                Self::accumulate(grads, *x, Tensor::new(g.shape(), d));
            }
            Op::Sigmoid(x) => {
                let d = gd.iter().zip(out).map(|(g, y)| *g * *y * (T::one() - *y)).collect();
                Self::accumulate(grads, *x, Tensor::new(g.shape(), d));
            }
            Op::Sum(x) => {
                let shape = self.shape(*x).to_vec();
                Self::accumulate(grads, *x, Tensor::full(&shape, gd[0]));
            }
            Op::Mean(x) => {
                let shape = self.shape(*x).to_vec();
                let n = T::lit(self.value(*x).len() as f64);
                Self::accumulate(grads, *x, Tensor::full(&shape, gd[0] / n));
            }
            Op::MeanDim0(x) => {
                let shape = self.shape(*x).to_vec();
                let d0 = shape[0];
                let inv = T::one() / T::lit(d0 as f64);
                let mut d = Vec::with_capacity(gd.len() * d0);
                for _ in 0..d0 {
                    d.extend(gd.iter().map(|v| *v * inv));
                }
                Self::accumulate(grads, *x, Tensor::new(&shape, d));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let iv = self.value(*input).data();
                let wv = self.value(*weight).data();
                let want_in = self.wants(*input);
                let want_w = self.wants(*weight);
                let want_b = bias.is_some_and(|b| self.wants(b));
                let mut gin = want_in.then(|| vec![T::zero(); iv.len()]);
                let mut gw = want_w.then(|| vec![T::zero(); wv.len()]);
                let mut gb = want_b.then(|| vec![T::zero(); geom.cout]);
                kernels::conv2d_backward(geom, iv, wv, gd, gin.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut());
                if let Some(d) = gin {
                    let shape = self.shape(*input).to_vec();
                    Self::accumulate(grads, *input, Tensor::new(&shape, d));
                }
                if let Some(d) = gw {
                    let shape = self.shape(*weight).to_vec();
                    Self::accumulate(grads, *weight, Tensor::new(&shape, d));
                }
                if let (Some(d), Some(b)) = (gb, bias) {
                    let shape = self.shape(*b).to_vec();
                    Self::accumulate(grads, *b, Tensor::new(&shape, d));
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.wants(p) {
                        let shape = self.shape(p).to_vec();
                        Self::accumulate(grads, p, Tensor::new(&shape, gd[off..off + n].to_vec()));
                    }
                    off += n;
                }
            }
            Op::Slice { input, start } => {
                let inner = gd.len() / g.shape()[0];
                let dst = self.slot(grads, *input);
                let off = start * inner;
                for (d, v) in dst.data_mut()[off..off + gd.len()].iter_mut().zip(gd) {
                    *d += *v;
                }
            }
            Op::Upsample2x(x) => {
                let (c, h, w) = chw(self.shape(*x));
                let dst = self.slot(grads, *x);
                kernels::upsample2x_backward(c, h, w, gd, dst.data_mut());
            }
            Op::ChannelNorm { input, rstd } => {
                let c = g.shape()[0];
                let inner = gd.len() / c;
                let inv_c = T::one() / T::lit(c as f64);
                let mut d = vec![T::zero(); gd.len()];
                for p in 0..inner {
                    let mut mg = T::zero();
                    let mut mgy = T::zero();
                    for ch in 0..c {
                        let i = ch * inner + p;
                        mg += gd[i];
                        mgy += gd[i] * out[i];
                    }
                    mg *= inv_c;
                    mgy *= inv_c;
                    for ch in 0..c {
                        let i = ch * inner + p;
                        d[i] = rstd[p] * (gd[i] - mg - out[i] * mgy);
                    }
                }
                Self::accumulate(grads, *input, Tensor::new(g.shape(), d));
            }
            Op::MatMul { a, b, ta, tb } => self.matmul_backward(*a, *b, *ta, *tb, gd, grads),
            Op::SoftmaxLast(x) => {
                let n = *g.shape().last().unwrap();
                let mut d = vec![T::zero(); gd.len()];
                for ((drow, grow), yrow) in d.chunks_exact_mut(n).zip(gd.chunks_exact(n)).zip(out.chunks_exact(n)) {
                    let dot: T = grow.iter().zip(yrow).map(|(a, b)| *a * *b).sum();
                    for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dv = *yv * (*gv - dot);
                    }
                }
                Self::accumulate(grads, *x, Tensor::new(g.shape(), d));
            }
            Op::L2NormalizeLast { input, norms } => {
                let n = *g.shape().last().unwrap();
                let xv = self.value(*input).data();
                let mut d = vec![T::zero(); gd.len()];
                for (r, nr) in norms.iter().enumerate() {
                    let rng = r * n..(r + 1) * n;
                    let raw_norm = xv[rng.clone()].iter().map(|v| *v * *v).sum::<T>().sqrt();
                    let grow = &gd[rng.clone()];
                    let yrow = &out[rng.clone()];
                    if raw_norm < *nr {
                        // Floored norm is a constant divisor.
                        for (dv, gv) in d[rng].iter_mut().zip(grow) {
                            *dv = *gv / *nr;
                        }
                    } else {
                        let dot: T = grow.iter().zip(yrow).map(|(a, b)| *a * *b).sum();
                        for ((dv, gv), yv) in d[rng].iter_mut().zip(grow).zip(yrow) {
                            *dv = (*gv - *yv * dot) / *nr;
                        }
                    }
                }
                Self::accumulate(grads, *input, Tensor::new(g.shape(), d));
            }
            Op::Sobel(x) => {
                let (c, h, w) = chw(self.shape(*x));
                let xv = self.value(*x).data();
                let mut d = vec![T::zero(); xv.len()];
                kernels::sobel_backward(c, h, w, xv, gd, &mut d);
                Self::accumulate(grads, *x, Tensor::new(&[c, h, w], d));
            }
            Op::FilterValid { input, taps } => {
                let (c, h, w) = chw(self.shape(*input));
                let dst = self.slot(grads, *input);
                kernels::filter_valid_backward(c, h, w, taps, gd, dst.data_mut());
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, ta: bool, tb: bool, gd: &[T], grads: &mut [Option<Tensor<T>>]) {
        let (ba, a0, a1) = bmn(self.shape(a));
        let (_, b0, b1) = bmn(self.shape(b));
        let (m, k) = if ta { (a1, a0) } else { (a0, a1) };
        let n = if tb { b0 } else { b1 };
        let av = if ta { MatView { rs: 1, cs: m } } else { MatView { rs: k, cs: 1 } };
        let bv = if tb { MatView { rs: 1, cs: k } } else { MatView { rs: n, cs: 1 } };
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let dc = MatView { rs: n, cs: 1 };
        let dct = MatView { rs: 1, cs: n };
        if self.wants(a) {
            let mut da = vec![T::zero(); ad.len()];
            for bi in 0..ba {
                let gs = &gd[bi * m * n..(bi + 1) * m * n];
                let bs = &bd[bi * k * n..(bi + 1) * k * n];
                let out = &mut da[bi * m * k..(bi + 1) * m * k];
                if ta {
                    // stored K x M: B . dC^T
                    kernels::gemm_acc(k, m, n, bs, bv, gs, dct, out, m);
                } else {
                    // stored M x K: dC . B^T
                    kernels::gemm_acc(m, k, n, gs, dc, bs, MatView { rs: bv.cs, cs: bv.rs }, out, k);
                }
            }
            let shape = self.shape(a).to_vec();
            Self::accumulate(grads, a, Tensor::new(&shape, da));
        }
        if self.wants(b) {
            let mut db = vec![T::zero(); bd.len()];
            for bi in 0..ba {
                let gs = &gd[bi * m * n..(bi + 1) * m * n];
                let as_ = &ad[bi * m * k..(bi + 1) * m * k];
                let out = &mut db[bi * k * n..(bi + 1) * k * n];
                if tb {
                    // stored N x K: dC^T . A
                    kernels::gemm_acc(n, k, m, gs, dct, as_, av, out, k);
                } else {
                    // stored K x N: A^T . dC
                    kernels::gemm_acc(k, n, m, as_, MatView { rs: av.cs, cs: av.rs }, gs, dc, out, n);
                }
            }
            let shape = self.shape(b).to_vec();
            Self::accumulate(grads, b, Tensor::new(&shape, db));
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests;
