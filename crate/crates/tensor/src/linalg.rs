use crate::scalar::Scalar;
use crate::tensor::{Backward, Tensor};

struct MatMul;

impl<T: Scalar> Backward<T> for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, inputs: &[Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        vec![
            a.requires_grad().then(|| grad.matmul(&b.t())),
            b.requires_grad().then(|| a.t().matmul(grad)),
        ]
    }
}

impl<T: Scalar> Tensor<T> {
    /// Matrix product of `(m, k)` and `(k, n)`.
    pub fn matmul(&self, other: &Tensor<T>) -> Tensor<T> {
        assert!(
            self.ndim() == 2 && other.ndim() == 2 && self.shape()[1] == other.shape()[0],
            "matmul shape mismatch {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        let (m, k, n) = (self.shape()[0], self.shape()[1], other.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        if m * n > 0 && k > 0 {
            // SAFETY: buffers are contiguous row-major with the stated extents.
            unsafe {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    self.data().as_ptr(),
                    k as isize,
                    1,
                    other.data().as_ptr(),
                    n as isize,
                    1,
                    T::zero(),
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        Tensor::from_op(out, vec![m, n], vec![self.clone(), other.clone()], MatMul)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let b = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], &[3, 2]).unwrap();
        assert_eq!(a.matmul(&b).data(), &[4.0, 5.0, 10.0, 11.0]);
    }
}
