//! Pretraining for the toy model the compression pipeline starts from.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::error::{GraspError, Result};
use crate::model::{loss_and_gradients, ParamId, TransformerModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            seq_len: 64,
            learning_rate: 3e-3,
            warmup_steps: 100,
            grad_clip: 1.0,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, max_seq_len: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(GraspError::validation("train batch_size must be at least 1"));
        }
        if self.seq_len < 2 || self.seq_len > max_seq_len {
            return Err(GraspError::validation(format!("train seq_len {} not in [2, {max_seq_len}]", self.seq_len)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(GraspError::validation("learning_rate must be positive"));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) || !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(GraspError::validation("grad_clip and weight_decay must be non-negative"));
        }
        Ok(())
    }

    /// Linear warmup then cosine decay to 10% of the peak rate.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let floor = 0.1 * self.learning_rate;
        floor + 0.5 * (self.learning_rate - floor) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub losses: Vec<f64>,
    /// Mean of the last (up to) 50 step losses.
    pub final_loss: f64,
    pub config: TrainConfig,
    pub corpus: String,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam over every parameter, batches drawn from `corpus` with a seeded
/// generator. `on_step(step, loss)` is called after each update.
pub fn train(
    model: &mut TransformerModel,
    corpus: &Corpus,
    config: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    model.validate()?;
    config.validate(model.config.max_seq_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let ids: Vec<ParamId> = model.param_ids();
    let mut m1: Vec<Vec<f64>> = ids.iter().map(|id| vec![0.0; model.param(id).len()]).collect();
    let mut m2 = m1.clone();
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = corpus.sample_windows(config.batch_size, config.seq_len, &mut rng)?;
        let (loss, mut grads) = loss_and_gradients(model, &batch)?;
        if config.grad_clip > 0.0 {
            let norm = grads.global_norm();
            if norm > config.grad_clip {
                grads.scale(config.grad_clip / norm);
            }
        }
        let lr = config.learning_rate_at(step);
        let t = (step + 1) as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (i, id) in ids.iter().enumerate() {
            let g = grads.get(id).expect("gradient for every parameter").as_slice();
            let decay = if id.is_norm() { 0.0 } else { config.weight_decay };
            let p = model.param_mut(id);
            for (((w, &gj), a), b) in p.iter_mut().zip(g).zip(m1[i].iter_mut()).zip(m2[i].iter_mut()) {
                *a = BETA1 * *a + (1.0 - BETA1) * gj;
                *b = BETA2 * *b + (1.0 - BETA2) * gj * gj;
                *w -= lr * ((*a / c1) / ((*b / c2).sqrt() + ADAM_EPS) + decay * *w);
            }
        }
        losses.push(loss);
        on_step(step, loss);
    }
    let tail = &losses[losses.len().saturating_sub(50)..];
    let final_loss = if tail.is_empty() { f64::NAN } else { tail.iter().sum::<f64>() / tail.len() as f64 };
    Ok(TrainReport { steps: config.steps, losses, final_loss, config: config.clone(), corpus: corpus.name.clone() })
}
