//! Autograd gradients of every loss term against central differences on the
//! two-layer 8x8 model at float64.

mod common;

use attnage_core::losses::{
    adversarial_loss_with, attention_loss, classification_loss, generator_adversarial_loss, onehot_batch,
};
use attnage_core::models::{compose_tensors, condition_batch, Discriminator, Generator};
use attnage_tensor::{no_grad, Tensor};
use common::*;

const COORDS: usize = 24;
const TOL: f64 = 1e-4;

fn fake_batch(g: &Generator<f64>, real: &Tensor<f64>, targets: &[usize]) -> (Tensor<f64>, Tensor<f64>) {
    let cond = condition_batch::<f64>(&labels(targets), TINY.0, TINY.1);
    let m = g.forward(real, &cond).unwrap();
    (compose_tensors(real, &m.attention, &m.color), m.attention)
}

fn assert_close(name: &str, probes: &[Probe]) {
    assert!(probes.len() >= 20);
    let informative = probes.iter().filter(|p| p.numeric.abs() > 1e-6).count();
    assert!(informative >= 10, "{name}: only {informative} probes with non-trivial derivative");
    let worst = max_relative_error(probes);
    assert!(worst <= TOL, "{name}: worst relative error {worst:e}; {probes:?}");
}

#[test]
fn adversarial_loss_with_penalty_wrt_discriminator() {
    let (g, d) = tiny_models(1);
    let real = random_images(4, TINY, 2);
    let fake = no_grad(|| fake_batch(&g, &real, &[0, 1, 2, 3]).0);
    let eps = [0.1, 0.4, 0.7, 0.95];
    let probes = check_gradients(
        &d,
        |d: &Discriminator<f64>| adversarial_loss_with(d, &real, &fake, 10.0, &eps).unwrap().loss,
        COORDS,
        3,
    );
    assert_close("L_adv wrt D", &probes);
}

#[test]
fn gradient_penalty_alone_wrt_discriminator() {
    let (g, d) = tiny_models(4);
    let real = random_images(3, TINY, 5);
    let fake = no_grad(|| fake_batch(&g, &real, &[4, 0, 2]).0);
    let eps = [0.3, 0.5, 0.8];
    let probes = check_gradients(
        &d,
        |d: &Discriminator<f64>| adversarial_loss_with(d, &real, &fake, 10.0, &eps).unwrap().gp,
        COORDS,
        6,
    );
    assert_close("gp wrt D", &probes);
}

#[test]
fn generator_adversarial_term_wrt_generator() {
    let (g, d) = tiny_models(7);
    let real = random_images(3, TINY, 8);
    let probes = check_gradients(
        &g,
        |g: &Generator<f64>| generator_adversarial_loss(&d.forward(&fake_batch(g, &real, &[1, 3, 4]).0).unwrap().critic),
        COORDS,
        9,
    );
    assert_close("-mean D(fake) wrt G", &probes);
}

#[test]
fn attention_loss_wrt_generator() {
    let (g, _) = tiny_models(10);
    let real = random_images(3, TINY, 11);
    // A large TV weight so both sub-terms carry comparable gradient.
    for (lambda_tv, seed) in [(5e-5, 12), (1.0, 13)] {
        let probes = check_gradients(
            &g,
            |g: &Generator<f64>| attention_loss(&fake_batch(g, &real, &[0, 2, 4]).1, lambda_tv).unwrap().loss,
            COORDS,
            seed,
        );
        assert_close("L_att wrt G", &probes);
    }
    let probes = check_gradients(
        &g,
        |g: &Generator<f64>| attention_loss(&fake_batch(g, &real, &[0, 2, 4]).1, 0.0).unwrap().tv,
        COORDS,
        14,
    );
    assert_close("tv wrt G", &probes);
}

#[test]
fn classification_terms_wrt_both_players() {
    let (g, d) = tiny_models(15);
    let real = random_images(4, TINY, 16);
    let source = onehot_batch::<f64>(&labels(&[0, 1, 2, 3]));
    let target_idx = [4, 3, 2, 0];
    let target = onehot_batch::<f64>(&labels(&target_idx));
    let fake = no_grad(|| fake_batch(&g, &real, &target_idx).0);
    let probes = check_gradients(
        &d,
        |d: &Discriminator<f64>| classification_loss(d, &fake, &target, &real, &source).unwrap().real,
        COORDS,
        17,
    );
    assert_close("L_cls real wrt D", &probes);
    let probes = check_gradients(
        &g,
        |g: &Generator<f64>| {
            let fake = fake_batch(g, &real, &target_idx).0;
            classification_loss(&d, &fake, &target, &real, &source).unwrap().fake
        },
        COORDS,
        18,
    );
    assert_close("L_cls fake wrt G", &probes);
}
