//! Generator, discriminator and the attention/color composition operator.

mod discriminator;
mod generator;
pub mod layers;

use attnage_tensor::{no_grad, Scalar, Tensor};
use serde::{Deserialize, Serialize};

pub use discriminator::{Discriminator, DiscriminatorOutput};
pub use generator::{Generator, MaskBatch};
pub use layers::{Params, ParamsExt};

use crate::conditioning::{AgeGroupLabel, NUM_GROUPS};
use crate::error::{Error, Result};
use crate::image::{stack_images, unstack, FeatureMap, ImageTensor};

/// Layer layout of both networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub gen_base_channels: usize,
    pub gen_stem_kernel: usize,
    pub gen_downsamples: usize,
    pub gen_residual_blocks: usize,
    pub gen_head_kernel: usize,
    pub gen_instance_norm: bool,
    /// Initial bias of the attention head; positive values start the
    /// generator close to the identity map.
    pub attention_bias_init: f64,
    pub disc_base_channels: usize,
    pub disc_downsamples: usize,
    pub disc_leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            gen_base_channels: 8,
            gen_stem_kernel: 3,
            gen_downsamples: 2,
            gen_residual_blocks: 2,
            gen_head_kernel: 3,
            gen_instance_norm: true,
            attention_bias_init: 3.0,
            disc_base_channels: 16,
            disc_downsamples: 3,
            disc_leaky_slope: 0.2,
        }
    }
}

impl ModelConfig {
    /// Two-conv-layer generator and one-conv discriminator for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            gen_base_channels: 4,
            gen_stem_kernel: 3,
            gen_downsamples: 0,
            gen_residual_blocks: 0,
            gen_head_kernel: 3,
            gen_instance_norm: false,
            attention_bias_init: 0.0,
            disc_base_channels: 4,
            disc_downsamples: 1,
            disc_leaky_slope: 0.2,
        }
    }

    pub fn validate(&self, resolution: (usize, usize)) -> Result<()> {
        let (h, w) = resolution;
        if h == 0 || w == 0 {
            return Err(Error::Config(format!("resolution {h}x{w} is empty")));
        }
        if self.gen_base_channels == 0 || self.disc_base_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.gen_stem_kernel.is_multiple_of(2) || self.gen_head_kernel.is_multiple_of(2) {
            return Err(Error::Config(
                "gen_stem_kernel and gen_head_kernel must be odd".into(),
            ));
        }
        let scale = 1usize << self.gen_downsamples.max(self.disc_downsamples);
        if h % scale != 0 || w % scale != 0 {
            return Err(Error::Config(format!(
                "resolution {h}x{w} is not divisible by 2^{} required by the downsampling depth",
                scale.trailing_zeros()
            )));
        }
        if !(self.disc_leaky_slope >= 0.0 && self.disc_leaky_slope < 1.0) {
            return Err(Error::Config("disc_leaky_slope must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

pub(crate) trait Location {
    fn describe(self) -> String;
}

impl Location for &str {
    fn describe(self) -> String {
        self.to_string()
    }
}

impl<F: FnOnce() -> String> Location for F {
    fn describe(self) -> String {
        self()
    }
}

pub(crate) fn check_finite<T: Scalar>(t: Tensor<T>, location: impl Location) -> Result<Tensor<T>> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(Error::Numeric {
            location: location.describe(),
        })
    }
}

/// Attention mask `A` (one channel, values in `[0,1]`) and color mask `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    pub attention: FeatureMap,
    pub color: ImageTensor,
}

/// `(N, 5, H, W)` condition maps for a batch of labels.
pub fn condition_batch<T: Scalar>(labels: &[AgeGroupLabel], h: usize, w: usize) -> Tensor<T> {
    let plane = h * w;
    let mut data = vec![T::zero(); labels.len() * NUM_GROUPS * plane];
    for (n, label) in labels.iter().enumerate() {
        let start = (n * NUM_GROUPS + label.index()) * plane;
        data[start..start + plane].fill(T::one());
    }
    Tensor::from_vec(data, &[labels.len(), NUM_GROUPS, h, w]).expect("sized above")
}

/// `(1 - A) * C + A * x`, with `A` broadcast over the color channels.
pub fn compose_tensors<T: Scalar>(input: &Tensor<T>, attention: &Tensor<T>, color: &Tensor<T>) -> Tensor<T> {
    let keep = attention.mul(input);
    let replace = attention.neg().add_scalar(1.0).mul(color);
    replace.add(&keep)
}

/// Per-pixel blend of input and color mask under the attention mask.
pub fn compose(input: &ImageTensor, masks: &MaskPair) -> Result<ImageTensor> {
    let a = &masks.attention;
    if a.channels() != 1 || !a.same_spatial(input.map()) || !masks.color.map().same_spatial(input.map()) {
        return Err(Error::Shape(format!(
            "masks {}x{}x{} / {}x{} do not match input {}x{}",
            a.channels(),
            a.height(),
            a.width(),
            masks.color.height(),
            masks.color.width(),
            input.height(),
            input.width()
        )));
    }
    if let Some(v) = a.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Invariant(format!("attention value {v} outside [0, 1]")));
    }
    let plane = input.height() * input.width();
    let mut out = Vec::with_capacity(3 * plane);
    for c in 0..3 {
        let xs = input.map().plane(c);
        let cs = masks.color.map().plane(c);
        out.extend(
            a.data()
                .iter()
                .zip(xs)
                .zip(cs)
                .map(|((&a, &x), &col)| (1.0 - a) * col + a * x),
        );
    }
    ImageTensor::new(input.height(), input.width(), out)
}

/// Masks for one image under a target group, computed without recording a graph.
pub fn generator_forward<T: Scalar>(
    model: &Generator<T>,
    image: &ImageTensor,
    target: AgeGroupLabel,
) -> Result<MaskPair> {
    let (h, w) = model.resolution();
    if (image.height(), image.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "image is {}x{} but the generator was built for {h}x{w}",
            image.height(),
            image.width()
        )));
    }
    let x = stack_images::<T>(&[image])?;
    let cond = condition_batch::<T>(&[target], h, w);
    let masks = no_grad(|| model.forward(&x, &cond))?;
    let attention = unstack(&masks.attention)?.remove(0);
    let color = ImageTensor::from_map(unstack(&masks.color)?.remove(0))?;
    Ok(MaskPair { attention, color })
}

/// Generator output for one image: masks plus their composition.
pub fn generate<T: Scalar>(
    model: &Generator<T>,
    image: &ImageTensor,
    target: AgeGroupLabel,
) -> Result<(MaskPair, ImageTensor)> {
    let masks = generator_forward(model, image, target)?;
    let out = compose(image, &masks)?;
    Ok((masks, out))
}

/// Critic score and age logits for one image.
pub fn discriminator_forward<T: Scalar>(
    model: &Discriminator<T>,
    image: &ImageTensor,
) -> Result<(f64, [f64; NUM_GROUPS])> {
    let (h, w) = model.resolution();
    if (image.height(), image.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "image is {}x{} but the discriminator was built for {h}x{w}",
            image.height(),
            image.width()
        )));
    }
    let x = stack_images::<T>(&[image])?;
    let out = no_grad(|| model.forward(&x))?;
    let mut logits = [0.0; NUM_GROUPS];
    for (dst, v) in logits.iter_mut().zip(out.logits.data()) {
        *dst = v.as_f64();
    }
    Ok((out.critic.item().as_f64(), logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(h: usize, w: usize, seed: u64) -> ImageTensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * h * w).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
        ImageTensor::new(h, w, data).unwrap()
    }

    fn masks(h: usize, w: usize, a: f32, color: &ImageTensor) -> MaskPair {
        MaskPair {
            attention: FeatureMap::filled(1, h, w, a),
            color: color.clone(),
        }
    }

    #[test]
    fn compose_reference_cases() {
        let x = image(5, 4, 1);
        let c = image(5, 4, 2);
        assert_eq!(compose(&x, &masks(5, 4, 1.0, &c)).unwrap(), x);
        assert_eq!(compose(&x, &masks(5, 4, 0.0, &c)).unwrap(), c);
        let zero = ImageTensor::filled(5, 4, 0.0);
        let half = compose(&x, &masks(5, 4, 0.5, &zero)).unwrap();
        for (o, i) in half.data().iter().zip(x.data()) {
            assert_eq!(*o, 0.5 * i);
        }
    }

    #[test]
    fn compose_rejects_bad_attention() {
        let x = image(2, 2, 3);
        let err = compose(&x, &masks(2, 2, 1.5, &x)).unwrap_err();
        assert!(matches!(err, Error::Invariant(_)));
        let err = compose(&x, &masks(3, 2, 0.5, &image(3, 2, 4))).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn config_validation() {
        let c = ModelConfig::default();
        assert!(c.validate((64, 64)).is_ok());
        assert!(c.validate((36, 36)).is_err());
        let mut even = ModelConfig::tiny();
        even.gen_stem_kernel = 4;
        assert!(even.validate((8, 8)).is_err());
    }

    #[test]
    fn generator_resolution_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = Generator::<f32>::new(&ModelConfig::tiny(), (8, 8), &mut rng).unwrap();
        let err = generator_forward(&g, &image(6, 8, 0), AgeGroupLabel::new(0).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Generator::<f64>::new(&ModelConfig::tiny(), (8, 8), &mut rng).unwrap();
        let head = g.color_head_mut();
        let mut w = head.weight.to_vec();
        w[0] = f64::INFINITY;
        head.weight = Tensor::parameter(w, head.weight.shape()).unwrap();
        let err = generator_forward(&g, &image(8, 8, 1), AgeGroupLabel::new(2).unwrap()).unwrap_err();
        match err {
            Error::Numeric { location } => assert_eq!(location, "generator.color_head"),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn compose_is_convex_and_identity(
            seed in any::<u64>(),
            h in 1usize..6,
            w in 1usize..6,
        ) {
            use rand::Rng;
            let x = image(h, w, seed);
            let c = image(h, w, seed.wrapping_add(1));
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let a = FeatureMap::new(1, h, w, (0..h * w).map(|_| rng.random_range(0.0f32..=1.0)).collect()).unwrap();
            let out = compose(&x, &MaskPair { attention: a, color: c.clone() }).unwrap();
            for i in 0..out.data().len() {
                let (lo, hi) = (x.data()[i].min(c.data()[i]), x.data()[i].max(c.data()[i]));
                prop_assert!(out.data()[i] >= lo - 1e-6 && out.data()[i] <= hi + 1e-6);
            }
            let ident = compose(&x, &masks(h, w, 1.0, &c)).unwrap();
            let dev = ident.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            prop_assert!(dev <= 1e-6);
        }
    }
}
