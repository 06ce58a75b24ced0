use serde::{Deserialize, Serialize};

use super::CompressedModel;
use crate::data::TokenSequence;
use crate::error::{GraspError, Result};
use crate::model::{loss_and_gradients, mean_loss};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompensationReport {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub heldout_loss_before: f64,
    pub heldout_loss_after: f64,
    pub train_losses: Vec<f64>,
}

/// Plain gradient descent on the retained low-rank factors only; every
/// other parameter is left untouched. Batches cycle through `train` in a
/// fixed order.
pub fn compensate(
    compressed: &CompressedModel,
    train: &[TokenSequence],
    heldout: &[TokenSequence],
    steps: usize,
    learning_rate: f64,
    batch_size: usize,
) -> Result<(CompressedModel, CompensationReport)> {
    if compressed.model.low_rank_layers().is_empty() {
        return Err(GraspError::validation("compensation needs at least one low-rank layer"));
    }
    if heldout.is_empty() || (steps > 0 && train.is_empty()) {
        return Err(GraspError::validation("compensation needs non-empty train and held-out samples"));
    }
    if batch_size == 0 || !(learning_rate.is_finite() && learning_rate > 0.0) {
        return Err(GraspError::validation("compensation needs batch_size >= 1 and a positive learning rate"));
    }
    let mut out = compressed.clone();
    let eval_bs = batch_size.max(8);
    let before = mean_loss(&out.model, heldout, eval_bs)?;
    let factor_ids: Vec<_> = out.model.param_ids().into_iter().filter(|id| id.is_factor()).collect();
    let mut train_losses = Vec::with_capacity(steps);
    let mut cursor = 0;
    for _ in 0..steps {
        let batch: Vec<TokenSequence> = (0..batch_size).map(|i| train[(cursor + i) % train.len()].clone()).collect();
        cursor = (cursor + batch_size) % train.len();
        let (loss, grads) = loss_and_gradients(&out.model, &batch)?;
        train_losses.push(loss);
        for id in &factor_ids {
            let g = grads.get(id).expect("factor gradient");
            for (p, d) in out.model.param_mut(id).iter_mut().zip(g.as_slice()) {
                *p -= learning_rate * d;
            }
        }
    }
    let after = if steps == 0 { before } else { mean_loss(&out.model, heldout, eval_bs)? };
    let report = CompensationReport {
        steps,
        learning_rate,
        batch_size,
        heldout_loss_before: before,
        heldout_loss_after: after,
        train_losses,
    };
    out.provenance.compensation = Some(report.clone());
    out.provenance.compressed_parameter_count = out.model.parameter_count();
    Ok((out, report))
}
