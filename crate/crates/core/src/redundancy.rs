//! Layer redundancy: cosine between the residual stream entering and leaving
//! each block, and top-L selection.

use serde::{Deserialize, Serialize};

use crate::attribution::projected_parameter_count;
use crate::data::CalibrationSet;
use crate::error::{GraspError, Result};
use crate::model::{forward, Aggregation, TransformerModel};
use crate::numerics::cosine_similarity;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer_index: usize,
    pub similarity: f64,
    /// Positions (mean-of-cosines) or sequences (cosine-of-means) aggregated.
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyReport {
    pub scores: Vec<LayerScore>,
    /// Most redundant first.
    pub selected: Vec<usize>,
    pub aggregation: Aggregation,
    pub contiguous: bool,
}

pub fn layer_similarity_scores(
    model: &TransformerModel,
    calib: &CalibrationSet,
    aggregation: Aggregation,
    batch_size: usize,
) -> Result<Vec<LayerScore>> {
    if calib.is_empty() {
        return Err(GraspError::validation("empty calibration set"));
    }
    let n_layers = model.layers.len();
    let d = model.config.d_model;
    let mut cos_sum = vec![0.0; n_layers];
    let mut positions = 0usize;
    let mut sum_in = vec![vec![0.0; d]; n_layers];
    let mut sum_out = vec![vec![0.0; d]; n_layers];
    for batch in calib.batches(batch_size) {
        let trace = forward(model, batch)?;
        let rows = trace.hidden_states[0].rows();
        for l in 0..n_layers {
            match aggregation {
                Aggregation::MeanTokenCosine => cos_sum[l] += trace.token_cosine_sum(l)?.0,
                Aggregation::CosineOfMeans => {
                    // Re-weight the batch means back into sums so unequal
                    // batch sizes aggregate exactly.
                    let t = &trace.layers[l];
                    for i in 0..d {
                        sum_in[l][i] += t.h_in[i] * rows as f64;
                        sum_out[l][i] += t.h_out[i] * rows as f64;
                    }
                }
            }
        }
        positions += rows;
    }
    (0..n_layers)
        .map(|l| {
            let (similarity, n_samples) = match aggregation {
                Aggregation::MeanTokenCosine => (cos_sum[l] / positions as f64, positions),
                Aggregation::CosineOfMeans => (cosine_similarity(&sum_in[l], &sum_out[l])?, calib.sample_count),
            };
            Ok(LayerScore { layer_index: l, similarity, n_samples })
        })
        .collect()
}

/// Top-`count` layers by similarity; ties go to the deeper layer.
pub fn select_redundant_layers(scores: &[LayerScore], count: usize) -> Result<RedundancyReport> {
    if count > scores.len() {
        return Err(GraspError::validation(format!(
            "cannot select {count} redundant layers out of {}",
            scores.len()
        )));
    }
    let mut order: Vec<&LayerScore> = scores.iter().collect();
    order.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then(b.layer_index.cmp(&a.layer_index))
    });
    Ok(RedundancyReport {
        scores: scores.to_vec(),
        selected: order.iter().take(count).map(|s| s.layer_index).collect(),
        aggregation: Aggregation::default(),
        contiguous: false,
    })
}

/// Best run of `count` consecutive layers by total similarity; ties go to
/// the deeper run. Selected layers are listed most redundant first.
pub fn select_contiguous_layers(scores: &[LayerScore], count: usize) -> Result<RedundancyReport> {
    if count > scores.len() {
        return Err(GraspError::validation(format!(
            "cannot select {count} redundant layers out of {}",
            scores.len()
        )));
    }
    let mut selected = Vec::new();
    if count > 0 {
        let mut best_start = 0;
        let mut best = f64::NEG_INFINITY;
        for start in 0..=scores.len() - count {
            let total: f64 = scores[start..start + count].iter().map(|s| s.similarity).sum();
            if total >= best {
                best = total;
                best_start = start;
            }
        }
        let mut run: Vec<&LayerScore> = scores[best_start..best_start + count].iter().collect();
        run.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then(b.layer_index.cmp(&a.layer_index)));
        selected = run.iter().map(|s| s.layer_index).collect();
    }
    Ok(RedundancyReport { scores: scores.to_vec(), selected, aggregation: Aggregation::default(), contiguous: true })
}

/// Picks the smallest layer count whose replacement at `retain_ratio`
/// reaches `target_ratio` and returns that selection with the projected
/// ratio.
pub fn select_for_target(
    model: &TransformerModel,
    scores: &[LayerScore],
    target_ratio: f64,
    retain_ratio: f64,
    contiguous: bool,
) -> Result<(RedundancyReport, f64)> {
    let dense = model.config.dense_parameter_count() as f64;
    let select = |count: usize| {
        if contiguous {
            select_contiguous_layers(scores, count)
        } else {
            select_redundant_layers(scores, count)
        }
    };
    let ratio_of = |report: &RedundancyReport| {
        1.0 - projected_parameter_count(&model.config, model, &report.selected, retain_ratio) as f64 / dense
    };
    let mut last = 0.0;
    for count in 0..=scores.len() {
        let report = select(count)?;
        let r = ratio_of(&report);
        if r >= target_ratio {
            return Ok((report, r));
        }
        last = r;
    }
    Err(GraspError::InfeasibleRatio { target: target_ratio, max_achievable: last })
}
