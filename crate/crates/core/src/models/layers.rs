use attnage_tensor::{Scalar, Tensor};
use rand::Rng;

fn uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::parameter(data, shape).expect("shape matches generated data")
}

/// Collects `(name, tensor)` pairs in a fixed traversal order.
pub trait Params<T: Scalar> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>);
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>);
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(rng: &mut impl Rng, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        Conv2d {
            weight: uniform(rng, &[cout, cin, k, k], bound),
            bias: uniform(rng, &[cout], bound),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let c = self.bias.numel();
        x.conv2d(&self.weight, self.stride, self.pad)
            .add(&self.bias.reshape(&[1, c, 1, 1]))
    }
}

impl<T: Scalar> Params<T> for Conv2d<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

/// Stride-2 learned upsampling; weight layout `(C_in, C_out, k, k)`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new(rng: &mut impl Rng, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        let bound = 1.0 / ((cout * k * k) as f64).sqrt();
        ConvTranspose2d {
            weight: uniform(rng, &[cin, cout, k, k], bound),
            bias: uniform(rng, &[cout], bound),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let c = self.bias.numel();
        x.conv_transpose2d(&self.weight, self.stride, self.pad)
            .add(&self.bias.reshape(&[1, c, 1, 1]))
    }
}

impl<T: Scalar> Params<T> for ConvTranspose2d<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Linear {
            weight: uniform(rng, &[fan_in, fan_out], bound),
            bias: uniform(rng, &[fan_out], bound),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        x.matmul(&self.weight).add(&self.bias)
    }
}

impl<T: Scalar> Params<T> for Linear<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

/// Per-sample, per-channel normalization with a learned affine map.
#[derive(Debug, Clone)]
pub struct InstanceNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> InstanceNorm<T> {
    const EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        InstanceNorm {
            gamma: Tensor::parameter(vec![T::one(); channels], &[channels]).expect("shape"),
            beta: Tensor::parameter(vec![T::zero(); channels], &[channels]).expect("shape"),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let c = self.gamma.numel();
        let centered = x.sub(&x.mean_keepdim(&[2, 3]));
        let var = centered.square().mean_keepdim(&[2, 3]);
        let normed = centered.div(&var.add_scalar(Self::EPS).sqrt());
        normed
            .mul(&self.gamma.reshape(&[1, c, 1, 1]))
            .add(&self.beta.reshape(&[1, c, 1, 1]))
    }
}

impl<T: Scalar> Params<T> for InstanceNorm<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }
}

impl<T: Scalar, P: Params<T>> Params<T> for Option<P> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        if let Some(p) = self {
            p.collect(prefix, out);
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        if let Some(p) = self {
            p.collect_mut(out);
        }
    }
}

impl<T: Scalar, P: Params<T>> Params<T> for Vec<P> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        for (i, p) in self.iter().enumerate() {
            p.collect(&join(prefix, &i.to_string()), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        for p in self.iter_mut() {
            p.collect_mut(out);
        }
    }
}

/// Flat views over a model's parameters.
pub trait ParamsExt<T: Scalar>: Params<T> {
    fn named_parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn parameters(&self) -> Vec<&Tensor<T>> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        self.collect_mut(&mut out);
        out
    }

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.numel()).sum()
    }
}

impl<T: Scalar, P: Params<T>> ParamsExt<T> for P {}
