//! Update routing, determinism, checkpoint round-trips and resumption.

mod common;

use std::fs;
use std::path::Path;

use attnage_core::conditioning::AgeGroupScheme;
use attnage_core::data::{synth_dataset, BatchSampler};
use attnage_core::error::Error;
use attnage_core::losses::{LossBreakdown, LossWeights};
use attnage_core::models::{condition_batch, ModelConfig, ParamsExt};
use attnage_core::trainer::{
    critic_objective, critic_update, generator_objective, generator_update, load_checkpoint, read_checkpoint_meta,
    run_training, sample_target_labels, save_checkpoint, train_step, Batch, RunDirectory, TrainConfig, TrainState,
    TrainingData, CHECKPOINT_VERSION,
};
use attnage_tensor::{grad, no_grad, Tensor};
use common::{labels, params_snapshot, rng};
use rand::Rng;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        resolution: [8, 8],
        batch_size: 4,
        max_steps: Some(10),
        checkpoint_interval: 5,
        seed: 3,
        ..Default::default()
    }
}

fn tiny_state(cfg: &TrainConfig) -> TrainState<f32> {
    TrainState::new(&ModelConfig::tiny(), &AgeGroupScheme::default(), cfg).unwrap()
}

fn batch(seed: u64) -> Batch<f32> {
    let mut r = rng(seed);
    let data = (0..4 * 3 * 64).map(|_| r.random_range(-1.0f32..=1.0)).collect();
    Batch {
        images: Tensor::from_vec(data, &[4, 3, 8, 8]).unwrap(),
        source: labels(&[0, 1, 2, 3]),
        target: labels(&[4, 2, 0, 1]),
    }
}

fn tiny_data(n: usize) -> TrainingData {
    let records = synth_dataset(n, (8, 8), 1).unwrap();
    TrainingData::new(&records, &AgeGroupScheme::default(), (8, 8)).unwrap()
}

#[test]
fn critic_update_leaves_generator_bit_identical() {
    let cfg = tiny_config();
    let mut state = tiny_state(&cfg);
    let g_before = params_snapshot(&state.generator);
    let d_before = params_snapshot(&state.discriminator);
    critic_update(&mut state, &batch(1), &cfg).unwrap();
    assert_eq!(params_snapshot(&state.generator), g_before);
    assert_ne!(params_snapshot(&state.discriminator), d_before);
}

#[test]
fn generator_update_leaves_discriminator_bit_identical() {
    let cfg = tiny_config();
    let mut state = tiny_state(&cfg);
    let g_before = params_snapshot(&state.generator);
    let d_before = params_snapshot(&state.discriminator);
    generator_update(&mut state, &batch(2), &cfg).unwrap();
    assert_eq!(params_snapshot(&state.discriminator), d_before);
    assert_ne!(params_snapshot(&state.generator), g_before);
}

fn all_zero(grads: &[Tensor<f32>]) -> bool {
    grads.iter().all(|g| g.data().iter().all(|v| *v == 0.0))
}

#[test]
fn generator_objective_sends_no_gradient_to_discriminator() {
    let cfg = tiny_config();
    let state = tiny_state(&cfg);
    let only_cls = LossWeights {
        lambda_adv: 0.0,
        lambda_att: 0.0,
        ..Default::default()
    };
    for weights in [only_cls, LossWeights::default()] {
        let (objective, stats) = generator_objective(&state, &batch(3), &weights).unwrap();
        assert!(stats.cls_fake > 0.0);
        let grads = grad(&objective, &state.discriminator.parameters(), false).unwrap();
        assert!(all_zero(&grads));
        let grads = grad(&objective, &state.generator.parameters(), false).unwrap();
        assert!(!all_zero(&grads));
    }
}

#[test]
fn critic_objective_sends_no_gradient_to_generator() {
    let cfg = tiny_config();
    let mut state = tiny_state(&cfg);
    let (objective, _) = critic_objective(&mut state, &batch(4), &LossWeights::default()).unwrap();
    let grads = grad(&objective, &state.generator.parameters(), false).unwrap();
    assert!(all_zero(&grads));
}

#[test]
fn critic_update_ignores_fake_classification_term() {
    // With lambda_adv = 0 the only way target labels could reach the critic
    // is through the fake-image classification term.
    let cfg = TrainConfig {
        weights: LossWeights {
            lambda_adv: 0.0,
            ..Default::default()
        },
        ..tiny_config()
    };
    let base = tiny_state(&cfg);
    let mut outcomes = Vec::new();
    for target in [[4, 2, 0, 1], [0, 0, 3, 3]] {
        let mut state = base.clone();
        let mut b = batch(5);
        b.target = labels(&target);
        critic_update(&mut state, &b, &cfg).unwrap();
        outcomes.push(params_snapshot(&state.discriminator));
    }
    assert_eq!(outcomes[0], outcomes[1]);
}

#[test]
fn zero_weights_and_zero_critic_rate_is_a_fixed_point() {
    let cfg = TrainConfig {
        weights: LossWeights {
            lambda_adv: 0.0,
            lambda_att: 0.0,
            lambda_cls: 0.0,
            ..Default::default()
        },
        disc_learning_rate: Some(0.0),
        ..tiny_config()
    };
    let mut state = tiny_state(&cfg);
    let g = params_snapshot(&state.generator);
    let d = params_snapshot(&state.discriminator);
    train_step(&mut state, &batch(6), &cfg).unwrap();
    assert_eq!(params_snapshot(&state.generator), g);
    assert_eq!(params_snapshot(&state.discriminator), d);
    assert_eq!(state.step, 1);
}

#[test]
fn breakdown_total_is_the_weighted_sum() {
    let cfg = tiny_config();
    let mut state = tiny_state(&cfg);
    let b = train_step(&mut state, &batch(7), &cfg).unwrap();
    let w = cfg.weights;
    let expect = w.lambda_adv * b.adv + w.lambda_att * b.att + w.lambda_cls * b.cls;
    assert!((b.total - expect).abs() <= 1e-6 * expect.abs().max(1.0));
    assert!((b.att - (w.lambda_tv * b.tv + b.l2)).abs() <= 1e-6 * b.att.max(1.0));
    assert!((b.cls - (b.cls_fake + b.cls_real)).abs() <= 1e-12);
    assert!(b.gp >= 0.0 && b.tv >= 0.0 && b.l2 >= 0.0);
}

#[test]
fn failed_step_leaves_state_untouched() {
    let cfg = tiny_config();
    let mut state = tiny_state(&cfg);
    let mut b = batch(8);
    let mut data = b.images.to_vec();
    data[10] = f32::NAN;
    b.images = Tensor::from_vec(data, &[4, 3, 8, 8]).unwrap();
    let g = params_snapshot(&state.generator);
    let d = params_snapshot(&state.discriminator);
    let word = state.rng.get_word_pos();
    assert!(train_step(&mut state, &b, &cfg).is_err());
    assert_eq!(params_snapshot(&state.generator), g);
    assert_eq!(params_snapshot(&state.discriminator), d);
    assert_eq!((state.step, state.rng.get_word_pos()), (0, word));
}

fn breakdowns(cfg: &TrainConfig, data: &TrainingData, dir: &Path) -> Vec<LossBreakdown> {
    let mut state = tiny_state(cfg);
    let run = RunDirectory::create(dir, None).unwrap();
    let mut out = Vec::new();
    run_training(&mut state, data, cfg, &run, |_, b| {
        out.push(*b);
        Ok(true)
    })
    .unwrap();
    out
}

#[test]
fn seeded_runs_repeat_exactly() {
    let cfg = tiny_config();
    let data = tiny_data(20);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = breakdowns(&cfg, &data, a.path());
    let second = breakdowns(&cfg, &data, b.path());
    assert_eq!(first.len(), 10);
    assert_eq!(first, second);
    let csv_a = fs::read(a.path().join("metrics.csv")).unwrap();
    assert_eq!(csv_a, fs::read(b.path().join("metrics.csv")).unwrap());
    let text = String::from_utf8(csv_a).unwrap();
    assert_eq!(text.lines().next(), Some(LossBreakdown::CSV_HEADER));
    assert_eq!(text.lines().count(), 11);
    let other_seed = TrainConfig { seed: 4, ..cfg };
    let c = tempfile::tempdir().unwrap();
    assert_ne!(breakdowns(&other_seed, &data, c.path()), first);
}

fn probe_outputs(state: &TrainState<f32>) -> (Vec<u32>, Vec<u32>) {
    let b = batch(9);
    let cond = condition_batch::<f32>(&b.target, 8, 8);
    no_grad(|| {
        let m = state.generator.forward(&b.images, &cond).unwrap();
        let d = state.discriminator.forward(&b.images).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        let mut g = bits(&m.attention);
        g.extend(bits(&m.color));
        let mut dd = bits(&d.critic);
        dd.extend(bits(&d.logits));
        (g, dd)
    })
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = tiny_config();
    let mut state = tiny_state(&cfg);
    for k in 0..3 {
        train_step(&mut state, &batch(20 + k), &cfg).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&state, &path).unwrap();
    let loaded = load_checkpoint::<f32>(&path, Some((8, 8))).unwrap();
    assert_eq!(probe_outputs(&loaded), probe_outputs(&state));
    assert_eq!(loaded.step, 3);
    assert_eq!(loaded.rng, state.rng);
    assert_eq!(loaded.gen_opt.moments(), state.gen_opt.moments());
    assert_eq!(loaded.disc_opt.step_count(), state.disc_opt.step_count());
    let meta = read_checkpoint_meta(&path).unwrap();
    assert_eq!((meta.version, meta.resolution, meta.step), (CHECKPOINT_VERSION, [8, 8], 3));
}

#[test]
fn checkpoint_guards() {
    let cfg = tiny_config();
    let state = tiny_state(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&state, &path).unwrap();

    match load_checkpoint::<f32>(&path, Some((16, 16))) {
        Err(Error::Checkpoint { reason, .. }) => assert!(reason.contains("resolution"), "{reason}"),
        other => panic!("expected resolution error, got {other:?}"),
    }
    assert!(load_checkpoint::<f64>(&path, None).is_err());

    let bytes = fs::read(&path).unwrap();
    let mut versioned = bytes.clone();
    versioned[8..12].copy_from_slice(&7u32.to_le_bytes());
    let bad = dir.path().join("v.ckpt");
    fs::write(&bad, &versioned).unwrap();
    assert!(matches!(
        load_checkpoint::<f32>(&bad, None),
        Err(Error::CheckpointVersion { found: 7, expected: CHECKPOINT_VERSION })
    ));

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    fs::write(&bad, &flipped).unwrap();
    match load_checkpoint::<f32>(&bad, None) {
        Err(Error::Checkpoint { reason, .. }) => assert!(reason.contains("version 1"), "{reason}"),
        other => panic!("expected corruption error, got {other:?}"),
    }
    fs::write(&bad, &bytes[..bytes.len() / 3]).unwrap();
    assert!(load_checkpoint::<f32>(&bad, None).is_err());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let cfg = tiny_config();
    let data = tiny_data(20);
    let full_dir = tempfile::tempdir().unwrap();
    let full = breakdowns(&cfg, &data, full_dir.path());

    // Stop after 5 steps (a checkpoint is written at step 5), then resume.
    let part_dir = tempfile::tempdir().unwrap();
    let run = RunDirectory::create(part_dir.path(), None).unwrap();
    let mut state = tiny_state(&cfg);
    run_training(&mut state, &data, &cfg, &run, |s, _| Ok(s.step < 5)).unwrap();
    drop(state);
    let mut resumed = load_checkpoint::<f32>(&run.latest_checkpoint(), Some((8, 8))).unwrap();
    assert_eq!(resumed.step, 5);
    let mut rest = Vec::new();
    run_training(&mut resumed, &data, &cfg, &run, |_, b| {
        rest.push(*b);
        Ok(true)
    })
    .unwrap();
    assert_eq!(rest, full[5..]);
    assert_eq!(
        fs::read(part_dir.path().join("metrics.csv")).unwrap(),
        fs::read(full_dir.path().join("metrics.csv")).unwrap()
    );
    let uninterrupted = load_checkpoint::<f32>(&RunDirectory::create(full_dir.path(), None).unwrap().latest_checkpoint(), None).unwrap();
    assert_eq!(probe_outputs(&resumed), probe_outputs(&uninterrupted));
}

#[test]
fn generator_objective_trends_down_against_a_frozen_critic() {
    let cfg = TrainConfig {
        resolution: [16, 16],
        batch_size: 8,
        learning_rate: 1e-3,
        seed: 5,
        ..Default::default()
    };
    let model = ModelConfig {
        attention_bias_init: 3.0,
        ..ModelConfig::tiny()
    };
    let scheme = AgeGroupScheme::default();
    let records = synth_dataset(40, (16, 16), 2).unwrap();
    let data = TrainingData::new(&records, &scheme, (16, 16)).unwrap();
    let mut state = TrainState::<f32>::new(&model, &scheme, &cfg).unwrap();
    let mut sampler = BatchSampler::new(data.len(), cfg.batch_size, cfg.seed).unwrap();
    let d_before = params_snapshot(&state.discriminator);
    let mut objective = Vec::new();
    for step in 0..100 {
        let (images, source) = data.gather::<f32>(&sampler.batch(step)).unwrap();
        let target = sample_target_labels(&source, &mut state.rng, false);
        let b = Batch { images, source, target };
        objective.push(generator_update(&mut state, &b, &cfg).unwrap().objective);
    }
    assert_eq!(params_snapshot(&state.discriminator), d_before);
    let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (head, tail) = (avg(&objective[..20]), avg(&objective[80..]));
    assert!(tail < head, "moving average did not fall: {head} -> {tail}");
}

#[test]
fn exclude_source_targets_never_match() {
    let source = labels(&[0, 1, 2, 3, 4, 0, 1, 2, 3, 4]);
    let targets = sample_target_labels(&source, &mut rng(1), true);
    assert!(targets.iter().zip(&source).all(|(t, s)| t != s));
}
