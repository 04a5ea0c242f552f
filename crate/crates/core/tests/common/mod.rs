#![allow(dead_code)]

use attnage_core::conditioning::AgeGroupLabel;
use attnage_core::losses::Critic;
use attnage_core::models::{Discriminator, Generator, ModelConfig, ParamsExt};
use attnage_core::Result;
use attnage_tensor::{grad, no_grad, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TINY: (usize, usize) = (8, 8);

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tiny float64 generator / discriminator pair at 8x8.
pub fn tiny_models(seed: u64) -> (Generator<f64>, Discriminator<f64>) {
    let mut r = rng(seed);
    let cfg = ModelConfig::tiny();
    (
        Generator::new(&cfg, TINY, &mut r).unwrap(),
        Discriminator::new(&cfg, TINY, &mut r).unwrap(),
    )
}

pub fn random_images(n: usize, (h, w): (usize, usize), seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let data = (0..n * 3 * h * w).map(|_| r.random_range(-1.0..=1.0)).collect();
    Tensor::from_vec(data, &[n, 3, h, w]).unwrap()
}

pub fn labels(indices: &[usize]) -> Vec<AgeGroupLabel> {
    indices.iter().map(|&k| AgeGroupLabel::new(k).unwrap()).collect()
}

/// One analytic-versus-central-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct Probe {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    /// `|a - n| / max(|a|, |n|)`, with an absolute floor for coordinates
    /// whose derivative is essentially zero.
    pub fn relative_error(&self) -> f64 {
        let diff = (self.analytic - self.numeric).abs();
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale < 1e-7 {
            diff / 1e-7
        } else {
            diff / scale
        }
    }
}

/// Compares the autograd gradient of `loss(model)` with central differences
/// at `count` random coordinates of the model's parameters.
pub fn check_gradients<M: ParamsExt<f64> + Clone>(
    model: &M,
    loss: impl Fn(&M) -> Tensor<f64>,
    count: usize,
    seed: u64,
) -> Vec<Probe> {
    let params: Vec<Tensor<f64>> = model.parameters().into_iter().cloned().collect();
    let refs: Vec<&Tensor<f64>> = params.iter().collect();
    let analytic = grad(&loss(model), &refs, false).unwrap();
    let sizes: Vec<usize> = params.iter().map(|p| p.numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut r = rng(seed);
    let h = 1e-6;
    (0..count)
        .map(|_| {
            let mut flat = r.random_range(0..total);
            let mut tensor = 0;
            while flat >= sizes[tensor] {
                flat -= sizes[tensor];
                tensor += 1;
            }
            let eval = |delta: f64| {
                let mut m = model.clone();
                let mut ps = m.parameters_mut();
                let p = &mut *ps[tensor];
                let mut data = p.to_vec();
                data[flat] += delta;
                *p = Tensor::parameter(data, p.shape()).unwrap();
                no_grad(|| loss(&m).item())
            };
            Probe {
                tensor,
                index: flat,
                analytic: analytic[tensor].data()[flat],
                numeric: (eval(h) - eval(-h)) / (2.0 * h),
            }
        })
        .collect()
}

pub fn max_relative_error(probes: &[Probe]) -> f64 {
    probes.iter().map(Probe::relative_error).fold(0.0, f64::max)
}

/// Brute-force TV sum over one `h x w` mask, truncated at the border.
pub fn tv_oracle(mask: &[f64], h: usize, w: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..h {
        for j in 0..w {
            let a = mask[i * w + j];
            if i + 1 < h {
                s += (mask[(i + 1) * w + j] - a).powi(2);
            }
            if j + 1 < w {
                s += (mask[i * w + j + 1] - a).powi(2);
            }
        }
    }
    s
}

pub fn l2_oracle(mask: &[f64]) -> f64 {
    mask.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Per-sample `-log softmax(logits)[label]`, computed term by term.
pub fn cross_entropy_oracle(logits: &[f64], label: usize) -> f64 {
    let z: f64 = logits.iter().map(|v| v.exp()).sum();
    -(logits[label].exp() / z).ln()
}

pub fn params_snapshot<M: ParamsExt<f32>>(m: &M) -> Vec<Vec<u32>> {
    m.parameters()
        .iter()
        .map(|t| t.data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

/// `critic(x) = scale * <w, flatten(x)>` with a unit vector `w`.
pub struct LinearCritic {
    pub w: Tensor<f64>,
    scale: f64,
}

impl LinearCritic {
    pub fn new(features: usize, scale: f64, seed: u64) -> Self {
        let mut r = rng(seed);
        let raw: Vec<f64> = (0..features).map(|_| r.random_range(-1.0..1.0)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let w = Tensor::from_vec(raw.iter().map(|v| v / norm).collect(), &[features, 1]).unwrap();
        LinearCritic { w, scale }
    }
}

impl Critic<f64> for LinearCritic {
    fn critic(&self, images: &Tensor<f64>) -> Result<Tensor<f64>> {
        let n = images.shape()[0];
        let f = images.numel() / n;
        Ok(images.reshape(&[n, f]).matmul(&self.w).reshape(&[n]).scale(self.scale))
    }
}
