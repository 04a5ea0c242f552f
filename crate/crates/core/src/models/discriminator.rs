use attnage_tensor::{Scalar, Tensor};
use rand::Rng;

use super::layers::{Conv2d, Linear, Params};
use super::{check_finite, ModelConfig};
use crate::conditioning::NUM_GROUPS;
use crate::error::{Error, Result};

/// Strided-conv trunk with two linear heads: an unbounded critic score and
/// five age-group logits. No normalization layers, so every sample's score
/// depends on that sample alone.
#[derive(Debug, Clone)]
pub struct Discriminator<T: Scalar> {
    resolution: (usize, usize),
    slope: f64,
    trunk: Vec<Conv2d<T>>,
    critic_head: Linear<T>,
    classifier_head: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorOutput<T: Scalar> {
    /// `(N,)` critic scores.
    pub critic: Tensor<T>,
    /// `(N, 5)` unnormalized age-group logits.
    pub logits: Tensor<T>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(config: &ModelConfig, resolution: (usize, usize), rng: &mut impl Rng) -> Result<Self> {
        config.validate(resolution)?;
        let mut ch_in = 3;
        let mut ch = config.disc_base_channels;
        let mut trunk = Vec::new();
        for _ in 0..config.disc_downsamples {
            trunk.push(Conv2d::new(rng, ch_in, ch, 4, 2, 1));
            ch_in = ch;
            ch *= 2;
        }
        let scale = 1 << config.disc_downsamples;
        let features = ch_in * (resolution.0 / scale) * (resolution.1 / scale);
        Ok(Discriminator {
            resolution,
            slope: config.disc_leaky_slope,
            trunk,
            critic_head: Linear::new(rng, features, 1),
            classifier_head: Linear::new(rng, features, NUM_GROUPS),
        })
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    /// Flattened trunk features `(N, F)`.
    pub fn features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = self.resolution;
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != h || s[3] != w {
            return Err(Error::Shape(format!(
                "discriminator expects (N,3,{h},{w}) images, got {s:?}"
            )));
        }
        let mut x = images.clone();
        for (i, conv) in self.trunk.iter().enumerate() {
            x = check_finite(conv.forward(&x).leaky_relu(self.slope), || {
                format!("discriminator.trunk.{i}")
            })?;
        }
        let n = s[0];
        let f = x.numel() / n.max(1);
        Ok(x.reshape(&[n, f]))
    }

    pub fn critic_from_features(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let n = features.shape()[0];
        check_finite(
            self.critic_head.forward(features).reshape(&[n]),
            "discriminator.critic_head",
        )
    }

    pub fn logits_from_features(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        check_finite(
            self.classifier_head.forward(features),
            "discriminator.classifier_head",
        )
    }

    pub fn forward(&self, images: &Tensor<T>) -> Result<DiscriminatorOutput<T>> {
        let features = self.features(images)?;
        Ok(DiscriminatorOutput {
            critic: self.critic_from_features(&features)?,
            logits: self.logits_from_features(&features)?,
        })
    }

    pub fn critic_head_mut(&mut self) -> &mut Linear<T> {
        &mut self.critic_head
    }

    pub fn classifier_head_mut(&mut self) -> &mut Linear<T> {
        &mut self.classifier_head
    }

    pub fn trunk_parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        self.trunk.collect_mut(&mut out);
        out
    }

    pub fn classifier_head_parameters(&self) -> Vec<&Tensor<T>> {
        vec![&self.classifier_head.weight, &self.classifier_head.bias]
    }

    pub fn critic_head_parameters(&self) -> Vec<&Tensor<T>> {
        vec![&self.critic_head.weight, &self.critic_head.bias]
    }
}

impl<T: Scalar> Params<T> for Discriminator<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        self.trunk.collect(&p("trunk"), out);
        self.critic_head.collect(&p("critic_head"), out);
        self.classifier_head.collect(&p("classifier_head"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.trunk.collect_mut(out);
        self.critic_head.collect_mut(out);
        self.classifier_head.collect_mut(out);
    }
}
