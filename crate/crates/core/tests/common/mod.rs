#![allow(dead_code)]

use grasp_core::data::TokenSequence;
use grasp_core::model::{forward, init_model, GradientSet, ModelConfig, ParamId, TransformerModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config() -> ModelConfig {
    ModelConfig { vocab_size: 16, d_model: 8, n_layers: 2, n_heads: 2, d_ff: 12, max_seq_len: 10, seed: 11 }
}

/// A model with weights large enough that every gradient is well away from
/// rounding noise.
pub fn perturbed_model(cfg: &ModelConfig, seed: u64) -> TransformerModel {
    let mut m = init_model(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in m.param_ids() {
        let scale = if id.is_norm() { 0.3 } else { 0.4 };
        for v in m.param_mut(&id) {
            *v = if id.is_norm() { 1.0 + rng.random_range(-scale..scale) } else { rng.random_range(-scale..scale) };
        }
    }
    m
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, len: usize, vocab: u32) -> Vec<TokenSequence> {
    (0..n)
        .map(|_| TokenSequence::new((0..len).map(|_| rng.random_range(0..vocab)).collect()))
        .collect()
}

pub struct FdResult {
    pub checked: usize,
    pub worst: f64,
    pub worst_at: String,
}

/// Central differences on `coords` sampled coordinates drawn from `ids`.
pub fn finite_difference_check(
    model: &TransformerModel,
    batch: &[TokenSequence],
    grads: &GradientSet,
    ids: &[ParamId],
    coords: usize,
    seed: u64,
) -> FdResult {
    const H: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = model.clone();
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for c in 0..coords {
        // Every tensor is visited before any is revisited.
        let id = if c < ids.len() { ids[c] } else { ids[rng.random_range(0..ids.len())] };
        let j = rng.random_range(0..m.param(&id).len());
        let orig = m.param(&id)[j];
        m.param_mut(&id)[j] = orig + H;
        let lp = forward(&m, batch).unwrap().loss;
        m.param_mut(&id)[j] = orig - H;
        let lm = forward(&m, batch).unwrap().loss;
        m.param_mut(&id)[j] = orig;
        let fd = (lp - lm) / (2.0 * H);
        let an = grads.get(&id).unwrap().as_slice()[j];
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-4);
        if rel > worst {
            worst = rel;
            worst_at = format!("{id}[{j}]: analytic {an:e}, fd {fd:e}");
        }
    }
    FdResult { checked: coords, worst, worst_at }
}
