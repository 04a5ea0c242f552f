use attnage_tensor::{Scalar, Tensor};
use rand::Rng;

use super::layers::{Conv2d, ConvTranspose2d, InstanceNorm, Params};
use super::{check_finite, ModelConfig};
use crate::conditioning::NUM_GROUPS;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct NormConv<T: Scalar> {
    conv: Conv2d<T>,
    norm: Option<InstanceNorm<T>>,
}

impl<T: Scalar> NormConv<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.conv.forward(x);
        match &self.norm {
            Some(n) => n.forward(&y),
            None => y,
        }
    }
}

impl<T: Scalar> Params<T> for NormConv<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.conv.collect(&format!("{prefix}.conv"), out);
        self.norm.collect(&format!("{prefix}.norm"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.conv.collect_mut(out);
        self.norm.collect_mut(out);
    }
}

#[derive(Debug, Clone)]
struct Residual<T: Scalar> {
    first: NormConv<T>,
    second: NormConv<T>,
}

impl<T: Scalar> Params<T> for Residual<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.first.collect(&format!("{prefix}.first"), out);
        self.second.collect(&format!("{prefix}.second"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.first.collect_mut(out);
        self.second.collect_mut(out);
    }
}

#[derive(Debug, Clone)]
struct Upsample<T: Scalar> {
    deconv: ConvTranspose2d<T>,
    norm: Option<InstanceNorm<T>>,
}

impl<T: Scalar> Params<T> for Upsample<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.deconv.collect(&format!("{prefix}.deconv"), out);
        self.norm.collect(&format!("{prefix}.norm"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.deconv.collect_mut(out);
        self.norm.collect_mut(out);
    }
}

/// Attention and color masks for a batch, `(N,1,H,W)` and `(N,3,H,W)`.
#[derive(Debug, Clone)]
pub struct MaskBatch<T: Scalar> {
    pub attention: Tensor<T>,
    pub color: Tensor<T>,
}

/// Encoder / residual bottleneck / decoder trunk shared by two final
/// convolutions: a sigmoid attention head and a tanh color head.
#[derive(Debug, Clone)]
pub struct Generator<T: Scalar> {
    resolution: (usize, usize),
    stem: NormConv<T>,
    down: Vec<NormConv<T>>,
    residual: Vec<Residual<T>>,
    up: Vec<Upsample<T>>,
    attention_head: Conv2d<T>,
    color_head: Conv2d<T>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(config: &ModelConfig, resolution: (usize, usize), rng: &mut impl Rng) -> Result<Self> {
        config.validate(resolution)?;
        let norm = |c: usize| config.gen_instance_norm.then(|| InstanceNorm::new(c));
        let base = config.gen_base_channels;
        let k = config.gen_stem_kernel;
        let stem = NormConv {
            conv: Conv2d::new(rng, 3 + NUM_GROUPS, base, k, 1, k / 2),
            norm: norm(base),
        };
        let mut ch = base;
        let mut down = Vec::new();
        for _ in 0..config.gen_downsamples {
            down.push(NormConv {
                conv: Conv2d::new(rng, ch, ch * 2, 4, 2, 1),
                norm: norm(ch * 2),
            });
            ch *= 2;
        }
        let residual = (0..config.gen_residual_blocks)
            .map(|_| Residual {
                first: NormConv {
                    conv: Conv2d::new(rng, ch, ch, 3, 1, 1),
                    norm: norm(ch),
                },
                second: NormConv {
                    conv: Conv2d::new(rng, ch, ch, 3, 1, 1),
                    norm: norm(ch),
                },
            })
            .collect();
        let mut up = Vec::new();
        for _ in 0..config.gen_downsamples {
            up.push(Upsample {
                deconv: ConvTranspose2d::new(rng, ch, ch / 2, 4, 2, 1),
                norm: norm(ch / 2),
            });
            ch /= 2;
        }
        let hk = config.gen_head_kernel;
        let mut attention_head = Conv2d::new(rng, ch, 1, hk, 1, hk / 2);
        attention_head.bias = Tensor::parameter(vec![T::lit(config.attention_bias_init)], &[1])?;
        let color_head = Conv2d::new(rng, ch, 3, hk, 1, hk / 2);
        Ok(Generator {
            resolution,
            stem,
            down,
            residual,
            up,
            attention_head,
            color_head,
        })
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    /// Shared trunk output for `images` `(N,3,H,W)` under conditions `(N,5,H,W)`.
    pub fn trunk(&self, images: &Tensor<T>, conditions: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = self.resolution;
        let is = images.shape();
        let cs = conditions.shape();
        if is.len() != 4 || is[1] != 3 || is[2] != h || is[3] != w {
            return Err(Error::Shape(format!(
                "generator expects (N,3,{h},{w}) images, got {is:?}"
            )));
        }
        if cs != [is[0], NUM_GROUPS, h, w] {
            return Err(Error::Shape(format!(
                "condition maps {cs:?} do not match images {is:?}"
            )));
        }
        let input = Tensor::concat1(&[images.clone(), conditions.clone()]);
        let mut x = check_finite(self.stem.forward(&input).relu(), "generator.stem")?;
        for (i, d) in self.down.iter().enumerate() {
            x = check_finite(d.forward(&x).relu(), || format!("generator.down.{i}"))?;
        }
        for (i, r) in self.residual.iter().enumerate() {
            let y = r.second.forward(&r.first.forward(&x).relu());
            x = check_finite(x.add(&y), || format!("generator.residual.{i}"))?;
        }
        for (i, u) in self.up.iter().enumerate() {
            let mut y = u.deconv.forward(&x);
            if let Some(n) = &u.norm {
                y = n.forward(&y);
            }
            x = check_finite(y.relu(), || format!("generator.up.{i}"))?;
        }
        Ok(x)
    }

    pub fn forward(&self, images: &Tensor<T>, conditions: &Tensor<T>) -> Result<MaskBatch<T>> {
        let features = self.trunk(images, conditions)?;
        let attention = check_finite(
            self.attention_head.forward(&features).sigmoid(),
            "generator.attention_head",
        )?;
        let color = check_finite(self.color_head.forward(&features).tanh(), "generator.color_head")?;
        Ok(MaskBatch { attention, color })
    }

    pub fn attention_head_mut(&mut self) -> &mut Conv2d<T> {
        &mut self.attention_head
    }

    pub fn color_head_mut(&mut self) -> &mut Conv2d<T> {
        &mut self.color_head
    }

    /// Parameters of the shared trunk only (everything but the two heads).
    pub fn trunk_parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        self.stem.collect_mut(&mut out);
        self.down.collect_mut(&mut out);
        self.residual.collect_mut(&mut out);
        self.up.collect_mut(&mut out);
        out
    }
}

impl<T: Scalar> Params<T> for Generator<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        self.stem.collect(&p("stem"), out);
        self.down.collect(&p("down"), out);
        self.residual.collect(&p("residual"), out);
        self.up.collect(&p("up"), out);
        self.attention_head.collect(&p("attention_head"), out);
        self.color_head.collect(&p("color_head"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.stem.collect_mut(out);
        self.down.collect_mut(out);
        self.residual.collect_mut(out);
        self.up.collect_mut(out);
        self.attention_head.collect_mut(out);
        self.color_head.collect_mut(out);
    }
}
