//! Finite-difference gradient check shared by the test targets.

#![allow(dead_code)]

use behavior_reid::embednet::{
    backward_triplet, embed_tokens, init_params, triplet_loss, ModelConfig, ModelParams,
};
use behavior_reid::seqdata::TokenId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
pub const MAX_REL_ERR: f64 = 1e-3;
/// Magnitude below which a coordinate is compared absolutely.
const REL_FLOOR: f64 = 1e-6;

fn loss(p: &ModelParams, cfg: &ModelConfig, a: &[TokenId], pos: &[TokenId], n: &[TokenId], margin: f64) -> f64 {
    let ea = embed_tokens(p, cfg, a).unwrap();
    let ep = embed_tokens(p, cfg, pos).unwrap();
    let en = embed_tokens(p, cfg, n).unwrap();
    triplet_loss(&ea.0, &ep.0, &en.0, margin).loss
}

fn random_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ModelParams {
    let mut p = init_params(cfg).unwrap();
    // Non-zero biases exercise every term of the gate derivatives.
    for t in p.tensors_mut() {
        t.iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
    }
    p
}

fn random_seq(rng: &mut ChaCha8Rng, vocab: usize) -> Vec<TokenId> {
    let len = rng.gen_range(3..=6);
    (0..len).map(|_| rng.gen_range(0..vocab) as TokenId).collect()
}

/// Returns the worst relative error over every coordinate.
pub fn check(cfg: &ModelConfig, seed: u64, margin: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = random_params(cfg, &mut rng);
    let (a, p, n) = loop {
        let t = (
            random_seq(&mut rng, cfg.vocab_size),
            random_seq(&mut rng, cfg.vocab_size),
            random_seq(&mut rng, cfg.vocab_size),
        );
        // Stay well away from the hinge kink.
        if loss(&params, cfg, &t.0, &t.1, &t.2, margin) > 1e-2 {
            break t;
        }
    };
    let (l0, grads) = backward_triplet(&params, cfg, &a, &p, &n, margin).unwrap();
    assert!(l0 > 0.0);
    let analytic: Vec<f64> = grads.iter().collect();

    let mut worst = 0.0f64;
    for (i, &g) in analytic.iter().enumerate() {
        let orig = *params.flat_mut(i).unwrap();
        *params.flat_mut(i).unwrap() = orig + STEP;
        let up = loss(&params, cfg, &a, &p, &n, margin);
        *params.flat_mut(i).unwrap() = orig - STEP;
        let down = loss(&params, cfg, &a, &p, &n, margin);
        *params.flat_mut(i).unwrap() = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(REL_FLOOR);
        worst = worst.max(rel);
    }
    worst
}
