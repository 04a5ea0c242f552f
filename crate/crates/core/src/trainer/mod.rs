//! Alternating critic / generator optimization, checkpoints and run
//! directories.

mod checkpoint;
mod run;

use attnage_tensor::{grad, no_grad, Adam, AdamConfig, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint_meta, save_checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use run::{run_training, RunDirectory, TrainingData, RUN_LAYOUT_VERSION};

use crate::conditioning::{AgeGroupLabel, AgeGroupScheme, NUM_GROUPS};
use crate::error::{Error, Result};
use crate::losses::{
    attention_loss, generator_adversarial_loss, gradient_penalty, onehot_batch, sample_interpolation,
    softmax_cross_entropy, total_loss, LossBreakdown, LossTerms, LossWeights,
};
use crate::models::{compose_tensors, condition_batch, Discriminator, Generator, ModelConfig, Params, ParamsExt};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub weights: LossWeights,
    /// Adam step size for the generator, and for the discriminator unless
    /// `disc_learning_rate` is set.
    pub learning_rate: f64,
    pub disc_learning_rate: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub epochs: u64,
    /// Step budget; overrides `epochs` when set.
    pub max_steps: Option<u64>,
    pub critic_steps_per_gen_step: usize,
    pub seed: u64,
    /// `[height, width]` of every image seen by the networks.
    pub resolution: [usize; 2],
    pub checkpoint_interval: u64,
    /// Draw target groups from the four groups other than the source.
    pub exclude_source_target: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            learning_rate: 1e-4,
            disc_learning_rate: None,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 64,
            epochs: 100,
            max_steps: None,
            critic_steps_per_gen_step: 1,
            seed: 0,
            resolution: [64, 64],
            checkpoint_interval: 1000,
            exclude_source_target: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let lrs = [Some(self.learning_rate), self.disc_learning_rate];
        if lrs.iter().flatten().any(|lr| !lr.is_finite() || *lr < 0.0) {
            return Err(Error::Config("learning rates must be finite and >= 0".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be >= 2 for the gradient penalty, got {}",
                self.batch_size
            )));
        }
        if self.critic_steps_per_gen_step < 1 {
            return Err(Error::Config("critic_steps_per_gen_step must be >= 1".into()));
        }
        if self.resolution.contains(&0) {
            return Err(Error::Config(format!("resolution {:?} is empty", self.resolution)));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("checkpoint_interval must be >= 1".into()));
        }
        Ok(())
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.resolution[0], self.resolution[1])
    }

    pub fn gen_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            ..AdamConfig::default()
        }
    }

    pub fn disc_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.disc_learning_rate.unwrap_or(self.learning_rate),
            ..self.gen_adam()
        }
    }

    /// Number of generator steps for a dataset of `len` records.
    pub fn total_steps(&self, len: usize) -> u64 {
        self.max_steps
            .unwrap_or_else(|| self.epochs * len.div_ceil(self.batch_size.max(1)) as u64)
    }
}

/// Everything a training run mutates.
#[derive(Debug, Clone)]
pub struct TrainState<T: Scalar> {
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
    pub gen_opt: Adam<T>,
    pub disc_opt: Adam<T>,
    /// Completed generator steps.
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub model_config: ModelConfig,
    pub scheme: AgeGroupScheme,
}

impl<T: Scalar> TrainState<T> {
    /// Fresh networks initialized from `config.seed`. Initialization and the
    /// training stream (targets, interpolation weights) use separate streams.
    pub fn new(model_config: &ModelConfig, scheme: &AgeGroupScheme, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = Generator::new(model_config, config.resolution(), &mut init)?;
        let discriminator = Discriminator::new(model_config, config.resolution(), &mut init)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(TrainState {
            generator,
            discriminator,
            gen_opt: Adam::new(config.gen_adam()),
            disc_opt: Adam::new(config.disc_adam()),
            step: 0,
            rng,
            model_config: model_config.clone(),
            scheme: scheme.clone(),
        })
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.generator.resolution()
    }
}

/// One mini-batch: `(N,3,H,W)` images with source and target groups.
#[derive(Debug, Clone)]
pub struct Batch<T: Scalar> {
    pub images: Tensor<T>,
    pub source: Vec<AgeGroupLabel>,
    pub target: Vec<AgeGroupLabel>,
}

impl<T: Scalar> Batch<T> {
    fn validate(&self, resolution: (usize, usize)) -> Result<()> {
        let s = self.images.shape();
        let n = s.first().copied().unwrap_or(0);
        if s.len() != 4 || s[1] != 3 || (s[2], s[3]) != resolution {
            return Err(Error::Shape(format!(
                "batch images {s:?} do not match resolution {resolution:?}"
            )));
        }
        if self.source.len() != n || self.target.len() != n {
            return Err(Error::Shape(format!(
                "{n} images but {} source and {} target labels",
                self.source.len(),
                self.target.len()
            )));
        }
        if n < 2 {
            return Err(Error::Shape("batches need at least 2 images".into()));
        }
        Ok(())
    }
}

/// Target groups uniform over the five groups, independently per sample. With
/// `exclude_source`, uniform over the four groups that differ from the source.
pub fn sample_target_labels(
    source: &[AgeGroupLabel],
    rng: &mut impl Rng,
    exclude_source: bool,
) -> Vec<AgeGroupLabel> {
    source
        .iter()
        .map(|s| {
            let k = if exclude_source {
                let k = rng.random_range(0..NUM_GROUPS - 1);
                if k >= s.index() {
                    k + 1
                } else {
                    k
                }
            } else {
                rng.random_range(0..NUM_GROUPS)
            };
            AgeGroupLabel::new(k).expect("index below NUM_GROUPS")
        })
        .collect()
}

/// Copy of `model` whose parameters are detached leaves, so gradients stop there.
fn frozen<T: Scalar, M: Params<T> + Clone>(model: &M) -> M {
    let mut copy = model.clone();
    for p in copy.parameters_mut() {
        *p = p.detach();
    }
    copy
}

fn grads_checked<T: Scalar>(loss: &Tensor<T>, params: &[&Tensor<T>], who: &str) -> Result<Vec<Tensor<T>>> {
    let grads = grad(loss, params, false)?;
    if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
        return Err(Error::Numeric {
            location: format!("{who} gradient of parameter tensor {i}"),
        });
    }
    Ok(grads)
}

/// Scalar values from one critic update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CriticStats {
    /// `mean D(real) - mean D(fake) - gp`.
    pub adv: f64,
    /// Weighted gradient penalty.
    pub gp: f64,
    pub cls_real: f64,
    /// The minimized objective `-lambda_adv * adv + lambda_cls * cls_real`.
    pub objective: f64,
}

/// Scalar values from one generator update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GeneratorStats {
    /// `-mean D(fake)`.
    pub adv: f64,
    pub tv: f64,
    pub l2: f64,
    pub att: f64,
    pub cls_fake: f64,
    /// The minimized objective `lambda_adv * adv + lambda_att * att + lambda_cls * cls_fake`.
    pub objective: f64,
}

/// Discriminator objective on a batch; only discriminator parameters carry
/// gradients. Fakes are generated without a graph, and only the real-image
/// classification term enters.
pub fn critic_objective<T: Scalar>(
    state: &mut TrainState<T>,
    batch: &Batch<T>,
    weights: &LossWeights,
) -> Result<(Tensor<T>, CriticStats)> {
    let (h, w) = state.resolution();
    let cond = condition_batch::<T>(&batch.target, h, w);
    let fake = no_grad(|| -> Result<Tensor<T>> {
        let m = state.generator.forward(&batch.images, &cond)?;
        Ok(compose_tensors(&batch.images, &m.attention, &m.color))
    })?;
    let eps = sample_interpolation(&mut state.rng, batch.source.len());
    let d = &state.discriminator;
    let real_out = d.forward(&batch.images)?;
    let fake_critic = d.critic_from_features(&d.features(&fake)?)?;
    let gp = gradient_penalty(d, &batch.images, &fake, weights.lambda_gp, &eps)?;
    let adv = real_out.critic.mean().sub(&fake_critic.mean()).sub(&gp);
    let cls_real = softmax_cross_entropy(&real_out.logits, &onehot_batch(&batch.source))?;
    let objective = adv.scale(-weights.lambda_adv).add(&cls_real.scale(weights.lambda_cls));
    let stats = CriticStats {
        adv: adv.item().as_f64(),
        gp: gp.item().as_f64(),
        cls_real: cls_real.item().as_f64(),
        objective: objective.item().as_f64(),
    };
    Ok((objective, stats))
}

/// Generator objective on a batch; the discriminator is frozen.
pub fn generator_objective<T: Scalar>(
    state: &TrainState<T>,
    batch: &Batch<T>,
    weights: &LossWeights,
) -> Result<(Tensor<T>, GeneratorStats)> {
    let (h, w) = state.resolution();
    let cond = condition_batch::<T>(&batch.target, h, w);
    let masks = state.generator.forward(&batch.images, &cond)?;
    let fake = compose_tensors(&batch.images, &masks.attention, &masks.color);
    let critic = frozen(&state.discriminator);
    let out = critic.forward(&fake)?;
    let adv = generator_adversarial_loss(&out.critic);
    let att = attention_loss(&masks.attention, weights.lambda_tv)?;
    let cls_fake = softmax_cross_entropy(&out.logits, &onehot_batch(&batch.target))?;
    let objective = adv
        .scale(weights.lambda_adv)
        .add(&att.loss.scale(weights.lambda_att))
        .add(&cls_fake.scale(weights.lambda_cls));
    let stats = GeneratorStats {
        adv: adv.item().as_f64(),
        tv: att.tv.item().as_f64(),
        l2: att.l2.item().as_f64(),
        att: att.loss.item().as_f64(),
        cls_fake: cls_fake.item().as_f64(),
        objective: objective.item().as_f64(),
    };
    Ok((objective, stats))
}

/// One Adam step on the discriminator. Generator parameters are untouched.
pub fn critic_update<T: Scalar>(state: &mut TrainState<T>, batch: &Batch<T>, config: &TrainConfig) -> Result<CriticStats> {
    batch.validate(state.resolution())?;
    let (objective, stats) = critic_objective(state, batch, &config.weights)?;
    if !stats.objective.is_finite() {
        return Err(Error::NonFiniteLoss {
            term: "discriminator objective".into(),
            dump: format!("{stats:?}"),
        });
    }
    let grads = grads_checked(&objective, &state.discriminator.parameters(), "discriminator")?;
    state.disc_opt.step(&mut state.discriminator.parameters_mut(), &grads)?;
    Ok(stats)
}

/// One Adam step on the generator. Discriminator parameters are untouched.
pub fn generator_update<T: Scalar>(
    state: &mut TrainState<T>,
    batch: &Batch<T>,
    config: &TrainConfig,
) -> Result<GeneratorStats> {
    batch.validate(state.resolution())?;
    let (objective, stats) = generator_objective(state, batch, &config.weights)?;
    if !stats.objective.is_finite() {
        return Err(Error::NonFiniteLoss {
            term: "generator objective".into(),
            dump: format!("{stats:?}"),
        });
    }
    let grads = grads_checked(&objective, &state.generator.parameters(), "generator")?;
    state.gen_opt.step(&mut state.generator.parameters_mut(), &grads)?;
    Ok(stats)
}

/// `critic_steps_per_gen_step` discriminator updates on `batch`, then one
/// generator update. On any error the state is left exactly as it was.
pub fn train_step<T: Scalar>(state: &mut TrainState<T>, batch: &Batch<T>, config: &TrainConfig) -> Result<LossBreakdown> {
    let snapshot = state.clone();
    let result = train_step_inner(state, batch, config);
    if result.is_err() {
        *state = snapshot;
    }
    result
}

fn train_step_inner<T: Scalar>(state: &mut TrainState<T>, batch: &Batch<T>, config: &TrainConfig) -> Result<LossBreakdown> {
    let mut critic = CriticStats::default();
    for _ in 0..config.critic_steps_per_gen_step {
        critic = critic_update(state, batch, config)?;
    }
    let gen = generator_update(state, batch, config)?;
    let terms = LossTerms {
        adv: critic.adv,
        att: gen.att,
        cls: gen.cls_fake + critic.cls_real,
        gp: critic.gp,
        tv: gen.tv,
        l2: gen.l2,
        cls_fake: gen.cls_fake,
        cls_real: critic.cls_real,
    };
    let breakdown = total_loss(&terms, &config.weights)?;
    state.step += 1;
    Ok(breakdown)
}
