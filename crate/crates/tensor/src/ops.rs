//! Elementwise, broadcasting, reduction and reshaping operations.

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::scalar::Scalar;
use crate::tensor::{numel, Backward, Tensor};

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &d) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    strides
}

/// Numpy-style broadcast of two shapes, or `None` when incompatible.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides into `src` (left-padded to `target.len()`), zero on broadcast axes.
fn broadcast_strides(src: &[usize], target: &[usize]) -> Vec<usize> {
    let pad = target.len() - src.len();
    let base = contiguous_strides(src);
    (0..target.len())
        .map(|i| {
            if i < pad || src[i - pad] == 1 {
                0
            } else {
                base[i - pad]
            }
        })
        .collect()
}

/// Visits every multi-index of `shape` in row-major order, passing the linear
/// index and the offset computed with `strides`. The innermost axis is walked
/// directly; the odometer only advances once per row.
fn for_each_offset(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    if shape.is_empty() {
        f(0, 0);
        return;
    }
    let rank = shape.len();
    let (row_len, row_stride) = (shape[rank - 1], strides[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    let mut linear = 0usize;
    while linear < total {
        let mut off = base;
        for i in linear..linear + row_len {
            f(i, off);
            off += row_stride;
        }
        linear += row_len;
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            base -= strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

struct BroadcastTo {
    input_shape: Vec<usize>,
}

impl<T: Scalar> Backward<T> for BroadcastTo {
    fn name(&self) -> &'static str {
        "broadcast_to"
    }

    fn backward(&self, _: &[Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(grad.sum_to(&self.input_shape))]
    }
}

struct SumTo {
    input_shape: Vec<usize>,
}

impl<T: Scalar> Backward<T> for SumTo {
    fn name(&self) -> &'static str {
        "sum_to"
    }

    fn backward(&self, _: &[Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(grad.broadcast_to(&self.input_shape))]
    }
}

struct Reshape {
    input_shape: Vec<usize>,
}

impl<T: Scalar> Backward<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, _: &[Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(grad.reshape(&self.input_shape))]
    }
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct Binary(BinaryKind);

impl<T: Scalar> Backward<T> for Binary {
    fn name(&self) -> &'static str {
        match self.0 {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }

    fn backward(
        &self,
        inputs: &[Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        match self.0 {
            BinaryKind::Add => vec![Some(grad.clone()), Some(grad.clone())],
            BinaryKind::Sub => vec![Some(grad.clone()), Some(grad.neg())],
            BinaryKind::Mul => vec![
                a.requires_grad().then(|| grad.mul(b)),
                b.requires_grad().then(|| grad.mul(a)),
            ],
            BinaryKind::Div => {
                let ga = grad.div(b);
                let gb = b.requires_grad().then(|| ga.mul(output).neg());
                vec![Some(ga), gb]
            }
        }
    }
}

#[derive(Clone, Copy)]
enum UnaryKind {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Log,
    Sqrt,
    RecipOrZero,
    Square,
    Sigmoid,
    Tanh,
    LeakyRelu(f64),
    Abs,
}

struct Unary(UnaryKind);

impl<T: Scalar> Backward<T> for Unary {
    fn name(&self) -> &'static str {
        match self.0 {
            UnaryKind::Neg => "neg",
            UnaryKind::Scale(_) => "scale",
            UnaryKind::AddScalar(_) => "add_scalar",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::RecipOrZero => "recip_or_zero",
            UnaryKind::Square => "square",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Tanh => "tanh",
            UnaryKind::LeakyRelu(_) => "leaky_relu",
            UnaryKind::Abs => "abs",
        }
    }

    fn backward(
        &self,
        inputs: &[Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        let x = &inputs[0];
        let g = match self.0 {
            UnaryKind::Neg => grad.neg(),
            UnaryKind::Scale(c) => grad.scale(c),
            UnaryKind::AddScalar(_) => grad.clone(),
            UnaryKind::Exp => grad.mul(output),
            UnaryKind::Log => grad.div(x),
            // d sqrt(x) = 1 / (2 sqrt(x)); the zero point takes the zero subgradient.
            UnaryKind::Sqrt => grad.mul(&output.recip_or_zero()).scale(0.5),
            UnaryKind::RecipOrZero => {
                let r = output;
                grad.mul(&r.square()).neg()
            }
            UnaryKind::Square => grad.mul(x).scale(2.0),
            UnaryKind::Sigmoid => {
                let one_minus = output.neg().add_scalar(1.0);
                grad.mul(&output.mul(&one_minus))
            }
            UnaryKind::Tanh => grad.mul(&output.square().neg().add_scalar(1.0)),
            UnaryKind::LeakyRelu(slope) => grad.mul(&x.leaky_relu_mask(slope)),
            UnaryKind::Abs => grad.mul(&x.sign()),
        };
        vec![Some(g)]
    }
}

struct SumAll {
    input_shape: Vec<usize>,
}

impl<T: Scalar> Backward<T> for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, _: &[Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(grad.broadcast_to(&self.input_shape))]
    }
}

struct Transpose2;

impl<T: Scalar> Backward<T> for Transpose2 {
    fn name(&self) -> &'static str {
        "transpose"
    }

    fn backward(&self, _: &[Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(grad.t())]
    }
}

struct SliceAxis1 {
    input_shape: Vec<usize>,
    start: usize,
}

impl<T: Scalar> Backward<T> for SliceAxis1 {
    fn name(&self) -> &'static str {
        "narrow"
    }

    fn backward(&self, _: &[Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(grad.pad_axis1(&self.input_shape, self.start))]
    }
}

struct PadAxis1 {
    start: usize,
    len: usize,
}

impl<T: Scalar> Backward<T> for PadAxis1 {
    fn name(&self) -> &'static str {
        "pad_axis1"
    }

    fn backward(&self, _: &[Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(grad.narrow1(self.start, self.len))]
    }
}

struct Concat1 {
    sizes: Vec<usize>,
}

impl<T: Scalar> Backward<T> for Concat1 {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, _: &[Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let mut start = 0;
        self.sizes
            .iter()
            .map(|&len| {
                let g = grad.narrow1(start, len);
                start += len;
                Some(g)
            })
            .collect()
    }
}

/// Splits a shape into (outer, axis-1 extent, inner) block sizes.
fn axis1_blocks(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "axis-1 op needs rank >= 2, got {shape:?}");
    (shape[0], shape[1], shape[2..].iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor<T> {
        if self.shape() == shape {
            return self.clone();
        }
        let ok = broadcast_shapes(self.shape(), shape).is_some_and(|s| s == shape);
        assert!(ok, "cannot broadcast {:?} to {:?}", self.shape(), shape);
        let strides = broadcast_strides(self.shape(), shape);
        let src = self.data();
        let mut out = vec![T::zero(); numel(shape)];
        for_each_offset(shape, &strides, |i, off| out[i] = src[off]);
        Tensor::from_op(
            out,
            shape.to_vec(),
            vec![self.clone()],
            BroadcastTo {
                input_shape: self.shape().to_vec(),
            },
        )
    }

    /// Sums over axes so the result has `shape`; inverse of [`Tensor::broadcast_to`].
    pub fn sum_to(&self, shape: &[usize]) -> Tensor<T> {
        if self.shape() == shape {
            return self.clone();
        }
        let ok = broadcast_shapes(shape, self.shape()).is_some_and(|s| s == self.shape());
        assert!(ok, "cannot reduce {:?} to {:?}", self.shape(), shape);
        let strides = broadcast_strides(shape, self.shape());
        let src = self.data();
        let mut out = vec![T::zero(); numel(shape)];
        for_each_offset(self.shape(), &strides, |i, off| out[off] = out[off] + src[i]);
        Tensor::from_op(
            out,
            shape.to_vec(),
            vec![self.clone()],
            SumTo {
                input_shape: self.shape().to_vec(),
            },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        assert_eq!(
            numel(shape),
            self.numel(),
            "cannot reshape {:?} to {:?}",
            self.shape(),
            shape
        );
        Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Reshape {
                input_shape: self.shape().to_vec(),
            },
        )
    }

    fn binary(&self, other: &Tensor<T>, kind: BinaryKind) -> Tensor<T> {
        let shape = broadcast_shapes(self.shape(), other.shape()).unwrap_or_else(|| {
            panic!(
                "incompatible shapes {:?} and {:?}",
                self.shape(),
                other.shape()
            )
        });
        let a = self.broadcast_to(&shape);
        let b = other.broadcast_to(&shape);
        let f: fn(T, T) -> T = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
            BinaryKind::Div => |x, y| x / y,
        };
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_op(data, shape, vec![a, b], Binary(kind))
    }

    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(&self, other: &Tensor<T>) -> Tensor<T> {
        self.binary(other, BinaryKind::Div)
    }

    fn unary(&self, kind: UnaryKind) -> Tensor<T> {
        let f: Box<dyn Fn(T) -> T> = match kind {
            UnaryKind::Neg => Box::new(|x: T| -x),
            UnaryKind::Scale(c) => {
                let c = T::lit(c);
                Box::new(move |x| x * c)
            }
            UnaryKind::AddScalar(c) => {
                let c = T::lit(c);
                Box::new(move |x| x + c)
            }
            UnaryKind::Exp => Box::new(|x: T| x.exp()),
            UnaryKind::Log => Box::new(|x: T| x.ln()),
            UnaryKind::Sqrt => Box::new(|x: T| x.sqrt()),
            UnaryKind::RecipOrZero => Box::new(|x: T| if x == T::zero() { T::zero() } else { x.recip() }),
            UnaryKind::Square => Box::new(|x: T| x * x),
            UnaryKind::Sigmoid => Box::new(|x: T| {
                // Branching keeps exp() from overflowing for large |x|.
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            }),
            UnaryKind::Tanh => Box::new(|x: T| x.tanh()),
            UnaryKind::LeakyRelu(slope) => {
                let s = T::lit(slope);
                Box::new(move |x| if x > T::zero() { x } else { x * s })
            }
            UnaryKind::Abs => Box::new(|x: T| x.abs()),
        };
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], Unary(kind))
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary(UnaryKind::Neg)
    }

    pub fn scale(&self, c: f64) -> Tensor<T> {
        self.unary(UnaryKind::Scale(c))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        self.unary(UnaryKind::AddScalar(c))
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary(UnaryKind::Exp)
    }

    pub fn ln(&self) -> Tensor<T> {
        self.unary(UnaryKind::Log)
    }

    /// Square root whose derivative at exactly zero is taken as zero.
    pub fn sqrt(&self) -> Tensor<T> {
        self.unary(UnaryKind::Sqrt)
    }

    /// `1/x`, with `1/0` defined as `0`.
    pub fn recip_or_zero(&self) -> Tensor<T> {
        self.unary(UnaryKind::RecipOrZero)
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary(UnaryKind::Square)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.unary(UnaryKind::Tanh)
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor<T> {
        self.unary(UnaryKind::LeakyRelu(slope))
    }

    pub fn relu(&self) -> Tensor<T> {
        self.leaky_relu(0.0)
    }

    pub fn abs(&self) -> Tensor<T> {
        self.unary(UnaryKind::Abs)
    }

    /// Constant (graph-free) derivative mask of `leaky_relu`.
    fn leaky_relu_mask(&self, slope: f64) -> Tensor<T> {
        let s = T::lit(slope);
        let data = self
            .data()
            .iter()
            .map(|&x| if x > T::zero() { T::one() } else { s })
            .collect();
        Tensor::raw(data, self.shape().to_vec())
    }

    fn sign(&self) -> Tensor<T> {
        let data = self
            .data()
            .iter()
            .map(|&x| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            })
            .collect();
        Tensor::raw(data, self.shape().to_vec())
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum();
        Tensor::from_op(
            vec![s],
            Vec::new(),
            vec![self.clone()],
            SumAll {
                input_shape: self.shape().to_vec(),
            },
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums the given axes, keeping them with extent 1.
    pub fn sum_keepdim(&self, axes: &[usize]) -> Tensor<T> {
        let mut shape = self.shape().to_vec();
        for &ax in axes {
            shape[ax] = 1;
        }
        self.sum_to(&shape)
    }

    pub fn mean_keepdim(&self, axes: &[usize]) -> Tensor<T> {
        let n: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.sum_keepdim(axes).scale(1.0 / n as f64)
    }

    /// Transpose of a matrix.
    pub fn t(&self) -> Tensor<T> {
        assert_eq!(self.ndim(), 2, "t() expects a matrix, got {:?}", self.shape());
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let src = self.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Tensor::from_op(out, vec![c, r], vec![self.clone()], Transpose2)
    }

    /// Slice `start..start+len` along axis 1.
    pub fn narrow1(&self, start: usize, len: usize) -> Tensor<T> {
        let (outer, extent, inner) = axis1_blocks(self.shape());
        assert!(start + len <= extent, "narrow {start}+{len} out of {extent}");
        let src = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[1] = len;
        Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            SliceAxis1 {
                input_shape: self.shape().to_vec(),
                start,
            },
        )
    }

    /// Embeds `self` at `start` along axis 1 of a zero tensor of `shape`.
    fn pad_axis1(&self, shape: &[usize], start: usize) -> Tensor<T> {
        let (outer, extent, inner) = axis1_blocks(shape);
        let len = self.shape()[1];
        let src = self.data();
        let mut out = vec![T::zero(); numel(shape)];
        for o in 0..outer {
            let dst = (o * extent + start) * inner;
            let from = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&src[from..from + len * inner]);
        }
        Tensor::from_op(out, shape.to_vec(), vec![self.clone()], PadAxis1 { start, len })
    }

    /// Concatenates along axis 1; all other extents must agree.
    pub fn concat1(parts: &[Tensor<T>]) -> Tensor<T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = parts[0].shape();
        let mut shape = first.to_vec();
        shape[1] = 0;
        for p in parts {
            let s = p.shape();
            assert!(
                s.len() == first.len() && s[0] == first[0] && s[2..] == first[2..],
                "concat shape mismatch {:?} vs {:?}",
                s,
                first
            );
            shape[1] += s[1];
        }
        let (outer, _, inner) = axis1_blocks(&shape);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let block = p.shape()[1] * inner;
                out.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
            }
        }
        let sizes = parts.iter().map(|p| p.shape()[1]).collect();
        Tensor::from_op(out, shape, parts.to_vec(), Concat1 { sizes })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Tensor<T> {
        let last = self.ndim() - 1;
        let width = self.shape()[last];
        let mut max_shape = self.shape().to_vec();
        max_shape[last] = 1;
        let max: Vec<T> = self
            .data()
            .chunks(width)
            .map(|row| row.iter().copied().fold(T::neg_infinity(), T::max))
            .collect();
        // The shift is a constant: log-sum-exp is invariant to it.
        let shift = Tensor::raw(max, max_shape);
        let shifted = self.sub(&shift);
        let lse = shifted.exp().sum_keepdim(&[last]).ln();
        shifted.sub(&lse)
    }
}

macro_rules! binop_impl {
    ($tr:ident, $m:ident) => {
        impl<T: Scalar> $tr<&Tensor<T>> for &Tensor<T> {
            type Output = Tensor<T>;
            fn $m(self, rhs: &Tensor<T>) -> Tensor<T> {
                Tensor::$m(self, rhs)
            }
        }
    };
}

binop_impl!(Add, add);
binop_impl!(Sub, sub);
binop_impl!(Mul, mul);
binop_impl!(Div, div);

impl<T: Scalar> Neg for &Tensor<T> {
    type Output = Tensor<T>;
    fn neg(self) -> Tensor<T> {
        Tensor::neg(self)
    }
}
