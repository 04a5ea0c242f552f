//! Adversarial (Wasserstein with gradient penalty), attention and age
//! classification losses, and their weighted combination.

use attnage_tensor::{enable_grad, grad, Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{AgeGroupLabel, NUM_GROUPS};
use crate::error::{Error, Result};
use crate::models::Discriminator;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_att: f64,
    pub lambda_cls: f64,
    pub lambda_gp: f64,
    pub lambda_tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_adv: 10.0,
            lambda_att: 2.0,
            lambda_cls: 100.0,
            lambda_gp: 10.0,
            lambda_tv: 5e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_adv", self.lambda_adv),
            ("lambda_att", self.lambda_att),
            ("lambda_cls", self.lambda_cls),
            ("lambda_gp", self.lambda_gp),
            ("lambda_tv", self.lambda_tv),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        LossWeights {
            lambda_adv: self.lambda_adv * factor,
            lambda_att: self.lambda_att * factor,
            lambda_cls: self.lambda_cls * factor,
            lambda_gp: self.lambda_gp * factor,
            lambda_tv: self.lambda_tv * factor,
        }
    }
}

/// Per-term scalar losses of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv: f64,
    pub att: f64,
    pub cls: f64,
    pub total: f64,
    /// Gradient penalty, already multiplied by `lambda_gp`.
    pub gp: f64,
    /// Raw total-variation sum, before `lambda_tv`.
    pub tv: f64,
    pub l2: f64,
    pub cls_fake: f64,
    pub cls_real: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,adv,gp,tv,l2,cls_fake,cls_real,total";

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{},{},{},{}",
            self.adv, self.gp, self.tv, self.l2, self.cls_fake, self.cls_real, self.total
        )
    }

    fn terms(&self) -> [(&'static str, f64); 9] {
        [
            ("adv", self.adv),
            ("att", self.att),
            ("cls", self.cls),
            ("total", self.total),
            ("gp", self.gp),
            ("tv", self.tv),
            ("l2", self.l2),
            ("cls_fake", self.cls_fake),
            ("cls_real", self.cls_real),
        ]
    }

    /// First non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        self.terms().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }

    pub fn dump(&self) -> String {
        self.terms()
            .iter()
            .map(|(n, v)| format!("{n}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Raw loss terms before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub adv: f64,
    pub att: f64,
    pub cls: f64,
    pub gp: f64,
    pub tv: f64,
    pub l2: f64,
    pub cls_fake: f64,
    pub cls_real: f64,
}

/// `total = lambda_adv * adv + lambda_att * att + lambda_cls * cls`.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<LossBreakdown> {
    let b = LossBreakdown {
        adv: terms.adv,
        att: terms.att,
        cls: terms.cls,
        total: weights.lambda_adv * terms.adv + weights.lambda_att * terms.att + weights.lambda_cls * terms.cls,
        gp: terms.gp,
        tv: terms.tv,
        l2: terms.l2,
        cls_fake: terms.cls_fake,
        cls_real: terms.cls_real,
    };
    if let Some(term) = b.non_finite_term() {
        return Err(Error::NonFiniteLoss {
            term: term.to_string(),
            dump: b.dump(),
        });
    }
    Ok(b)
}

/// Anything that scores an `(N,3,H,W)` batch with one real number per image.
pub trait Critic<T: Scalar> {
    fn critic(&self, images: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Scalar> Critic<T> for Discriminator<T> {
    fn critic(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let f = self.features(images)?;
        self.critic_from_features(&f)
    }
}

/// Anything producing `(N, 5)` age-group logits.
pub trait AgeClassifier<T: Scalar> {
    fn age_logits(&self, images: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Scalar> AgeClassifier<T> for Discriminator<T> {
    fn age_logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let f = self.features(images)?;
        self.logits_from_features(&f)
    }
}

fn check_batches<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>) -> Result<()> {
    if real.shape() != fake.shape() || real.ndim() != 4 || real.shape()[0] == 0 {
        return Err(Error::Shape(format!(
            "real batch {:?} and fake batch {:?} must be equal nonempty NCHW batches",
            real.shape(),
            fake.shape()
        )));
    }
    Ok(())
}

/// Per-sample interpolation weights, uniform on `[0, 1]`.
pub fn sample_interpolation(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.0..=1.0)).collect()
}

/// `lambda_gp * mean_i (||grad_x critic(x_i)|| - 1)^2` at `x_i = e_i real_i + (1 - e_i) fake_i`.
///
/// The result stays differentiable w.r.t. the critic's parameters.
pub fn gradient_penalty<T: Scalar>(
    critic: &impl Critic<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    lambda_gp: f64,
    epsilon: &[f64],
) -> Result<Tensor<T>> {
    check_batches(real, fake)?;
    let n = real.shape()[0];
    if epsilon.len() != n {
        return Err(Error::Shape(format!(
            "{} interpolation weights for a batch of {n}",
            epsilon.len()
        )));
    }
    let eps = Tensor::from_vec(epsilon.iter().map(|&e| T::lit(e)).collect(), &[n, 1, 1, 1])?;
    let one_minus = Tensor::from_vec(epsilon.iter().map(|&e| T::lit(1.0 - e)).collect(), &[n, 1, 1, 1])?;
    let mixed = real.detach().mul(&eps).add(&fake.detach().mul(&one_minus));
    let mixed = mixed.detach_requires_grad();
    // The input gradient needs a recorded graph whatever the caller's mode.
    let g = enable_grad(|| -> Result<Tensor<T>> {
        let scores = critic.critic(&mixed)?;
        Ok(grad(&scores.sum(), &[&mixed], true)?.remove(0))
    })?;
    let norms = g.square().sum_keepdim(&[1, 2, 3]).sqrt();
    if let Some(i) = norms.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            location: format!("gradient penalty norm of sample {i}"),
        });
    }
    Ok(norms.add_scalar(-1.0).square().mean().scale(lambda_gp))
}

/// Critic-side adversarial objective and its weighted penalty.
#[derive(Debug, Clone)]
pub struct AdversarialTerms<T: Scalar> {
    /// `mean critic(real) - mean critic(fake) - gp`; the critic maximizes it.
    pub loss: Tensor<T>,
    pub gp: Tensor<T>,
}

pub fn adversarial_loss<T: Scalar>(
    critic: &impl Critic<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    lambda_gp: f64,
    rng: &mut impl Rng,
) -> Result<AdversarialTerms<T>> {
    let eps = sample_interpolation(rng, real.shape().first().copied().unwrap_or(0));
    adversarial_loss_with(critic, real, fake, lambda_gp, &eps)
}

/// [`adversarial_loss`] with explicit interpolation weights.
pub fn adversarial_loss_with<T: Scalar>(
    critic: &impl Critic<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    lambda_gp: f64,
    epsilon: &[f64],
) -> Result<AdversarialTerms<T>> {
    check_batches(real, fake)?;
    let gp = gradient_penalty(critic, real, fake, lambda_gp, epsilon)?;
    let loss = critic
        .critic(real)?
        .mean()
        .sub(&critic.critic(fake)?.mean())
        .sub(&gp);
    Ok(AdversarialTerms { loss, gp })
}

/// The generator's share of the adversarial objective: `-mean critic(fake)`.
pub fn generator_adversarial_loss<T: Scalar>(critic_scores: &Tensor<T>) -> Tensor<T> {
    critic_scores.mean().neg()
}

#[derive(Debug, Clone)]
pub struct AttentionTerms<T: Scalar> {
    /// `lambda_tv * tv + l2`.
    pub loss: Tensor<T>,
    /// Batch mean of the summed squared neighbour differences.
    pub tv: Tensor<T>,
    /// Batch mean of the per-sample Euclidean norm.
    pub l2: Tensor<T>,
}

/// Smoothness and magnitude penalties on `(N,1,H,W)` attention masks.
/// Differences that would reach past the border are left out.
pub fn attention_loss<T: Scalar>(attention: &Tensor<T>, lambda_tv: f64) -> Result<AttentionTerms<T>> {
    let s = attention.shape();
    if s.len() != 4 || s[1] != 1 || s[0] == 0 {
        return Err(Error::Shape(format!(
            "attention masks must be (N,1,H,W), got {s:?}"
        )));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let rows = attention.reshape(&[n, h, w]);
    let mut per_sample = Tensor::zeros(&[]);
    if h > 1 {
        let dv = rows.narrow1(1, h - 1).sub(&rows.narrow1(0, h - 1));
        per_sample = per_sample.add(&dv.square().sum());
    }
    if w > 1 {
        let cols = attention.reshape(&[n * h, w, 1]);
        let dh = cols.narrow1(1, w - 1).sub(&cols.narrow1(0, w - 1));
        per_sample = per_sample.add(&dh.square().sum());
    }
    let tv = per_sample.scale(1.0 / n as f64);
    let l2 = attention.square().sum_keepdim(&[1, 2, 3]).sqrt().mean();
    let loss = tv.scale(lambda_tv).add(&l2);
    Ok(AttentionTerms { loss, tv, l2 })
}

/// `(N, 5)` one-hot rows for the labels.
pub fn onehot_batch<T: Scalar>(labels: &[AgeGroupLabel]) -> Tensor<T> {
    let mut data = vec![T::zero(); labels.len() * NUM_GROUPS];
    for (row, l) in labels.iter().enumerate() {
        data[row * NUM_GROUPS + l.index()] = T::one();
    }
    Tensor::from_vec(data, &[labels.len(), NUM_GROUPS]).expect("sized above")
}

/// Mean softmax cross-entropy of `(N, 5)` logits against one-hot targets.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, onehot: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.shape() != onehot.shape() || logits.ndim() != 2 || logits.shape()[1] != NUM_GROUPS {
        return Err(Error::Shape(format!(
            "logits {:?} vs labels {:?}",
            logits.shape(),
            onehot.shape()
        )));
    }
    for row in onehot.data().chunks(NUM_GROUPS) {
        let as_f32: Vec<f32> = row.iter().map(|v| v.as_f64() as f32).collect();
        AgeGroupLabel::from_onehot(&as_f32)?;
    }
    let n = logits.shape()[0] as f64;
    Ok(logits.log_softmax().mul(onehot).sum().scale(-1.0 / n))
}

#[derive(Debug, Clone)]
pub struct ClassificationTerms<T: Scalar> {
    /// Generated images against their target groups; drives the generator.
    pub fake: Tensor<T>,
    /// Real images against their source groups; drives the classifier.
    pub real: Tensor<T>,
}

pub fn classification_loss<T: Scalar>(
    classifier: &impl AgeClassifier<T>,
    fake: &Tensor<T>,
    target_labels: &Tensor<T>,
    real: &Tensor<T>,
    source_labels: &Tensor<T>,
) -> Result<ClassificationTerms<T>> {
    Ok(ClassificationTerms {
        fake: softmax_cross_entropy(&classifier.age_logits(fake)?, target_labels)?,
        real: softmax_cross_entropy(&classifier.age_logits(real)?, source_labels)?,
    })
}
