//! 2-D convolution as three mutually-differentiating bilinear primitives.
//!
//! With `T(x, w, g) = <g, conv(x, w)>`, the forward convolution and its two
//! adjoints are the partial derivatives of one trilinear form. Each one's
//! backward rule is therefore written with the other two, which keeps the set
//! closed under repeated differentiation (needed for gradient penalties).

use crate::scalar::Scalar;
use crate::tensor::{Backward, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    in_h: usize,
    in_w: usize,
    k_h: usize,
    k_w: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn cols_rows(&self) -> usize {
        self.in_ch * self.k_h * self.k_w
    }

    fn cols_len(&self) -> usize {
        self.out_h * self.out_w
    }

    fn x_shape(&self) -> Vec<usize> {
        vec![self.batch, self.in_ch, self.in_h, self.in_w]
    }

    fn w_shape(&self) -> Vec<usize> {
        vec![self.out_ch, self.in_ch, self.k_h, self.k_w]
    }

    fn y_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_ch, self.out_h, self.out_w]
    }
}

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let (h, w, s, p) = (g.in_h as isize, g.in_w as isize, g.stride as isize, g.pad as isize);
    let hw_out = g.cols_len();
    for c in 0..g.in_ch {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let row = (c * g.k_h + ky) * g.k_w + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.out_h {
                    let iy = oy as isize * s + ky as isize - p;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= h {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize - p;
                        *v = if ix < 0 || ix >= w { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &Geometry, x: &mut [T]) {
    let (h, w, s, p) = (g.in_h as isize, g.in_w as isize, g.stride as isize, g.pad as isize);
    let hw_out = g.cols_len();
    for c in 0..g.in_ch {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let row = (c * g.k_h + ky) * g.k_w + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.out_h {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn forward_kernel<T: Scalar>(x: &[T], w: &[T], g: &Geometry) -> Vec<T> {
    let (rows, len) = (g.cols_rows(), g.cols_len());
    let mut cols = vec![T::zero(); rows * len];
    let mut y = vec![T::zero(); g.batch * g.out_ch * len];
    let x_stride = g.in_ch * g.in_h * g.in_w;
    for n in 0..g.batch {
        im2col(&x[n * x_stride..(n + 1) * x_stride], g, &mut cols);
        let out = &mut y[n * g.out_ch * len..(n + 1) * g.out_ch * len];
        // SAFETY: w is (out_ch, rows), cols is (rows, len), out is (out_ch, len).
        unsafe {
            T::gemm(
                g.out_ch,
                rows,
                len,
                T::one(),
                w.as_ptr(),
                rows as isize,
                1,
                cols.as_ptr(),
                len as isize,
                1,
                T::zero(),
                out.as_mut_ptr(),
                len as isize,
                1,
            );
        }
    }
    y
}

fn input_grad_kernel<T: Scalar>(gy: &[T], w: &[T], g: &Geometry) -> Vec<T> {
    let (rows, len) = (g.cols_rows(), g.cols_len());
    let mut cols = vec![T::zero(); rows * len];
    let x_stride = g.in_ch * g.in_h * g.in_w;
    let mut dx = vec![T::zero(); g.batch * x_stride];
    for n in 0..g.batch {
        let gn = &gy[n * g.out_ch * len..(n + 1) * g.out_ch * len];
        // SAFETY: w^T is (rows, out_ch) via swapped strides; gn is (out_ch, len).
        unsafe {
            T::gemm(
                rows,
                g.out_ch,
                len,
                T::one(),
                w.as_ptr(),
                1,
                rows as isize,
                gn.as_ptr(),
                len as isize,
                1,
                T::zero(),
                cols.as_mut_ptr(),
                len as isize,
                1,
            );
        }
        col2im(&cols, g, &mut dx[n * x_stride..(n + 1) * x_stride]);
    }
    dx
}

fn weight_grad_kernel<T: Scalar>(x: &[T], gy: &[T], g: &Geometry) -> Vec<T> {
    let (rows, len) = (g.cols_rows(), g.cols_len());
    let mut cols = vec![T::zero(); rows * len];
    let mut dw = vec![T::zero(); g.out_ch * rows];
    let x_stride = g.in_ch * g.in_h * g.in_w;
    for n in 0..g.batch {
        im2col(&x[n * x_stride..(n + 1) * x_stride], g, &mut cols);
        let gn = &gy[n * g.out_ch * len..(n + 1) * g.out_ch * len];
        // SAFETY: gn is (out_ch, len); cols^T is (len, rows) via swapped strides.
        unsafe {
            T::gemm(
                g.out_ch,
                len,
                rows,
                T::one(),
                gn.as_ptr(),
                len as isize,
                1,
                cols.as_ptr(),
                1,
                len as isize,
                T::one(),
                dw.as_mut_ptr(),
                rows as isize,
                1,
            );
        }
    }
    dw
}

struct ConvForward(Geometry);
struct ConvInputGrad(Geometry);
struct ConvWeightGrad(Geometry);

impl<T: Scalar> Backward<T> for ConvForward {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (x, w) = (&inputs[0], &inputs[1]);
        vec![
            x.requires_grad().then(|| input_grad(grad, w, &self.0)),
            w.requires_grad().then(|| weight_grad(x, grad, &self.0)),
        ]
    }
}

impl<T: Scalar> Backward<T> for ConvInputGrad {
    fn name(&self) -> &'static str {
        "conv2d_input_grad"
    }

    // inputs: (gy, w); upstream has the shape of x.
    fn backward(&self, inputs: &[Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (gy, w) = (&inputs[0], &inputs[1]);
        vec![
            gy.requires_grad().then(|| forward(grad, w, &self.0)),
            w.requires_grad().then(|| weight_grad(grad, gy, &self.0)),
        ]
    }
}

impl<T: Scalar> Backward<T> for ConvWeightGrad {
    fn name(&self) -> &'static str {
        "conv2d_weight_grad"
    }

    // inputs: (x, gy); upstream has the shape of w.
    fn backward(&self, inputs: &[Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (x, gy) = (&inputs[0], &inputs[1]);
        vec![
            x.requires_grad().then(|| input_grad(gy, grad, &self.0)),
            gy.requires_grad().then(|| forward(x, grad, &self.0)),
        ]
    }
}

fn forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: &Geometry) -> Tensor<T> {
    debug_assert_eq!(x.shape(), g.x_shape());
    debug_assert_eq!(w.shape(), g.w_shape());
    let y = forward_kernel(x.data(), w.data(), g);
    Tensor::from_op(y, g.y_shape(), vec![x.clone(), w.clone()], ConvForward(*g))
}

fn input_grad<T: Scalar>(gy: &Tensor<T>, w: &Tensor<T>, g: &Geometry) -> Tensor<T> {
    debug_assert_eq!(gy.shape(), g.y_shape());
    let dx = input_grad_kernel(gy.data(), w.data(), g);
    Tensor::from_op(dx, g.x_shape(), vec![gy.clone(), w.clone()], ConvInputGrad(*g))
}

fn weight_grad<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>, g: &Geometry) -> Tensor<T> {
    debug_assert_eq!(x.shape(), g.x_shape());
    let dw = weight_grad_kernel(x.data(), gy.data(), g);
    Tensor::from_op(dw, g.w_shape(), vec![x.clone(), gy.clone()], ConvWeightGrad(*g))
}

impl<T: Scalar> Tensor<T> {
    /// Cross-correlation of an `(N, C, H, W)` input with `(O, C, kh, kw)` filters,
    /// zero padding `pad` on every side.
    pub fn conv2d(&self, weight: &Tensor<T>, stride: usize, pad: usize) -> Tensor<T> {
        let (xs, ws) = (self.shape(), weight.shape());
        assert!(
            xs.len() == 4 && ws.len() == 4 && xs[1] == ws[1],
            "conv2d shape mismatch: input {xs:?}, weight {ws:?}"
        );
        let out_h = conv_out_size(xs[2], ws[2], stride, pad)
            .unwrap_or_else(|| panic!("kernel {ws:?} larger than padded input {xs:?}"));
        let out_w = conv_out_size(xs[3], ws[3], stride, pad)
            .unwrap_or_else(|| panic!("kernel {ws:?} larger than padded input {xs:?}"));
        let g = Geometry {
            batch: xs[0],
            in_ch: xs[1],
            out_ch: ws[0],
            in_h: xs[2],
            in_w: xs[3],
            k_h: ws[2],
            k_w: ws[3],
            out_h,
            out_w,
            stride,
            pad,
        };
        forward(self, weight, &g)
    }

    /// Transposed convolution (adjoint of [`Tensor::conv2d`]). The filter has
    /// shape `(C_in, C_out, kh, kw)`; output extent is `(H-1)*stride - 2*pad + k`.
    pub fn conv_transpose2d(&self, weight: &Tensor<T>, stride: usize, pad: usize) -> Tensor<T> {
        let (xs, ws) = (self.shape(), weight.shape());
        assert!(
            xs.len() == 4 && ws.len() == 4 && xs[1] == ws[0],
            "conv_transpose2d shape mismatch: input {xs:?}, weight {ws:?}"
        );
        let full_h = (xs[2] - 1) * stride + ws[2];
        let full_w = (xs[3] - 1) * stride + ws[3];
        assert!(
            full_h > 2 * pad && full_w > 2 * pad,
            "padding {pad} too large for {xs:?}"
        );
        let g = Geometry {
            batch: xs[0],
            in_ch: ws[1],
            out_ch: ws[0],
            in_h: full_h - 2 * pad,
            in_w: full_w - 2 * pad,
            k_h: ws[2],
            k_w: ws[3],
            out_h: xs[2],
            out_w: xs[3],
            stride,
            pad,
        };
        input_grad(self, weight, &g)
    }
}
