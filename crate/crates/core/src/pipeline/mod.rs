//! End-to-end compression: redundant-block selection, deepest-first
//! replacement with gradient-selected singular groups, optional factor
//! fine-tuning, and checkpoint I/O.

mod checkpoint;
mod compensate;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Dtype, Manifest, TensorRecord, FORMAT_VERSION};
pub use compensate::{compensate, CompensationReport};

use crate::attribution::{accumulate_importance, check_retain_ratio, compress_layer, ImportanceTable, ScoringMode};
use crate::data::CalibrationSet;
use crate::error::{GraspError, Result};
use crate::model::{Aggregation, TransformerModel};
use crate::redundancy::{layer_similarity_scores, select_for_target, RedundancyReport};

pub const DEFAULT_RETAIN_RATIO: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerTarget {
    /// Replace the fewest most-redundant layers that reach this ratio.
    TargetRatio(f64),
    /// Replace exactly these layers.
    Layers(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruningMode {
    /// Score every selected layer once, on the dense model.
    #[default]
    OneShot,
    /// Re-score after each replacement, deepest layer first.
    Iterative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSpec {
    pub source: String,
    pub samples: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        Self { source: String::new(), samples: 512, seq_len: 64, seed: 0, batch_size: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompensationKind {
    #[default]
    None,
    FactorFinetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompensationConfig {
    pub kind: CompensationKind,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for CompensationConfig {
    fn default() -> Self {
        Self { kind: CompensationKind::None, steps: 100, learning_rate: 1e-3, batch_size: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionConfig {
    pub target: LayerTarget,
    pub retain_ratio: f64,
    pub mode: PruningMode,
    pub scoring: ScoringMode,
    pub aggregation: Aggregation,
    pub contiguous: bool,
    pub calibration: CalibrationSpec,
    pub compensation: CompensationConfig,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            target: LayerTarget::TargetRatio(0.20),
            retain_ratio: DEFAULT_RETAIN_RATIO,
            mode: PruningMode::OneShot,
            scoring: ScoringMode::Gradient,
            aggregation: Aggregation::MeanTokenCosine,
            contiguous: false,
            calibration: CalibrationSpec::default(),
            compensation: CompensationConfig::default(),
        }
    }
}

impl CompressionConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        check_retain_ratio(self.retain_ratio)?;
        match &self.target {
            LayerTarget::TargetRatio(r) => {
                if !(*r > 0.0 && *r < 1.0) {
                    return Err(GraspError::validation(format!("target ratio {r} not in (0, 1)")));
                }
            }
            LayerTarget::Layers(ls) => {
                let mut sorted = ls.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != ls.len() {
                    return Err(GraspError::validation("duplicate layer in explicit list"));
                }
                if let Some(&bad) = ls.iter().find(|&&l| l >= n_layers) {
                    return Err(GraspError::validation(format!("layer {bad} out of range for {n_layers} layers")));
                }
            }
        }
        if self.calibration.batch_size == 0 {
            return Err(GraspError::validation("calibration batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// Which model state a replaced layer was scored on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSnapshot {
    pub layer: usize,
    /// Checksum of the model whose gradients ranked this layer's groups.
    pub scored_on: String,
    pub importance_digest: Option<String>,
    pub ranks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub redundancy: RedundancyReport,
    /// Processing order (deepest first).
    pub processed: Vec<LayerSnapshot>,
    pub importance_digest: Option<String>,
    pub config: CompressionConfig,
    pub calibration_source: String,
    pub dense_checksum: String,
    pub dense_parameter_count: usize,
    pub compressed_parameter_count: usize,
    pub achieved_ratio: f64,
    pub compensation: Option<CompensationReport>,
}

#[derive(Debug, Clone)]
pub struct CompressedModel {
    pub model: TransformerModel,
    pub provenance: Provenance,
}

impl CompressedModel {
    pub fn achieved_ratio(&self) -> f64 {
        self.model.compression_ratio()
    }
}

/// Runs both compression steps on a dense `model`.
pub fn run_grasp(model: &TransformerModel, config: &CompressionConfig, calib: &CalibrationSet) -> Result<CompressedModel> {
    model.validate()?;
    if !model.low_rank_layers().is_empty() {
        return Err(GraspError::validation("run_grasp expects a dense model"));
    }
    config.validate(model.layers.len())?;
    let bs = config.calibration.batch_size;

    let scores = layer_similarity_scores(model, calib, config.aggregation, bs)?;
    let mut redundancy = match &config.target {
        LayerTarget::TargetRatio(target) => {
            select_for_target(model, &scores, *target, config.retain_ratio, config.contiguous)?.0
        }
        LayerTarget::Layers(ls) => RedundancyReport {
            scores: scores.clone(),
            selected: ls.clone(),
            aggregation: config.aggregation,
            contiguous: config.contiguous,
        },
    };
    redundancy.aggregation = config.aggregation;

    let mut order = redundancy.selected.clone();
    order.sort_unstable_by(|a, b| b.cmp(a));

    let dense_checksum = model.checksum_hex();
    let mut current = model.clone();
    let mut processed = Vec::with_capacity(order.len());
    let mut overall: Option<ImportanceTable> = None;

    let one_shot_table = match (config.scoring, config.mode) {
        (ScoringMode::Gradient, PruningMode::OneShot) if !order.is_empty() => {
            Some(accumulate_importance(model, &order, calib, bs)?)
        }
        _ => None,
    };

    for &layer in &order {
        let (table, scored_on) = match (config.scoring, config.mode) {
            (ScoringMode::Magnitude, _) => (None, current.checksum_hex()),
            (ScoringMode::Gradient, PruningMode::OneShot) => (one_shot_table.clone(), dense_checksum.clone()),
            (ScoringMode::Gradient, PruningMode::Iterative) => {
                let t = accumulate_importance(&current, &[layer], calib, bs)?;
                (Some(t), current.checksum_hex())
            }
        };
        compress_layer(&mut current, layer, table.as_ref(), config.scoring, config.retain_ratio)?;
        let ranks = match &current.layers[layer] {
            crate::model::Layer::LowRank(w) => w.factors.iter().map(|f| f.rank()).collect(),
            crate::model::Layer::Dense(_) => unreachable!("layer was just replaced"),
        };
        if let Some(t) = &table {
            match (&mut overall, config.mode) {
                (None, _) => overall = Some(t.clone()),
                (Some(o), PruningMode::Iterative) => o.merge(t)?,
                (Some(_), PruningMode::OneShot) => {}
            }
        }
        processed.push(LayerSnapshot {
            layer,
            scored_on,
            importance_digest: table.as_ref().map(ImportanceTable::digest),
            ranks,
        });
    }

    let provenance = Provenance {
        redundancy,
        processed,
        importance_digest: overall.as_ref().map(ImportanceTable::digest),
        config: config.clone(),
        calibration_source: calib.source_name.clone(),
        dense_checksum,
        dense_parameter_count: model.config.dense_parameter_count(),
        compressed_parameter_count: current.parameter_count(),
        achieved_ratio: current.compression_ratio(),
        compensation: None,
    };
    Ok(CompressedModel { model: current, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TokenSequence;
    use crate::model::{init_model, mean_loss, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (TransformerModel, CalibrationSet) {
        let cfg = ModelConfig { vocab_size: 32, d_model: 16, n_layers: 4, n_heads: 2, d_ff: 24, max_seq_len: 12, seed: 3 };
        let mut m = init_model(&cfg).unwrap();
        // Larger weights than the init scale so layers actually differ.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for id in m.param_ids() {
            if !id.is_norm() {
                m.param_mut(&id).iter_mut().for_each(|v| *v = rng.random_range(-0.4..0.4));
            }
        }
        let samples = (0..6)
            .map(|_| TokenSequence::new((0..10).map(|_| rng.random_range(0..32)).collect()))
            .collect();
        (m, CalibrationSet::new(samples, "random", 0).unwrap())
    }

    #[test]
    fn full_retention_is_exact() {
        let (m, calib) = setup();
        for mode in [PruningMode::OneShot, PruningMode::Iterative] {
            let cfg = CompressionConfig {
                target: LayerTarget::Layers(vec![1, 3]),
                retain_ratio: 1.0,
                mode,
                calibration: CalibrationSpec { batch_size: 4, ..Default::default() },
                ..Default::default()
            };
            let c = run_grasp(&m, &cfg, &calib).unwrap();
            let a = mean_loss(&m, &calib.samples, 8).unwrap();
            let b = mean_loss(&c.model, &calib.samples, 8).unwrap();
            assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
            assert_eq!(c.provenance.processed.iter().map(|p| p.layer).collect::<Vec<_>>(), vec![3, 1]);
        }
    }

    #[test]
    fn iterative_scores_on_progressively_compressed_models() {
        let (m, calib) = setup();
        let base = CompressionConfig {
            target: LayerTarget::Layers(vec![0, 2, 3]),
            retain_ratio: 0.25,
            calibration: CalibrationSpec { batch_size: 3, ..Default::default() },
            ..Default::default()
        };
        let one = run_grasp(&m, &base, &calib).unwrap();
        let snaps: Vec<&str> = one.provenance.processed.iter().map(|p| p.scored_on.as_str()).collect();
        assert!(snaps.iter().all(|s| *s == one.provenance.dense_checksum));

        let it = run_grasp(&m, &CompressionConfig { mode: PruningMode::Iterative, ..base }, &calib).unwrap();
        let snaps: Vec<&str> = it.provenance.processed.iter().map(|p| p.scored_on.as_str()).collect();
        assert_eq!(snaps[0], it.provenance.dense_checksum);
        assert_ne!(snaps[1], snaps[0]);
        assert_ne!(snaps[2], snaps[1]);
    }

    #[test]
    fn infeasible_target_reports_maximum() {
        let (m, calib) = setup();
        let cfg = CompressionConfig {
            target: LayerTarget::TargetRatio(0.99),
            calibration: CalibrationSpec { batch_size: 6, ..Default::default() },
            ..Default::default()
        };
        match run_grasp(&m, &cfg, &calib) {
            Err(GraspError::InfeasibleRatio { max_achievable, .. }) => assert!(max_achievable > 0.0 && max_achievable < 0.99),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn target_ratio_is_met_with_fewest_layers() {
        let (m, calib) = setup();
        let cfg = CompressionConfig {
            target: LayerTarget::TargetRatio(0.2),
            retain_ratio: 0.1,
            calibration: CalibrationSpec { batch_size: 6, ..Default::default() },
            ..Default::default()
        };
        let c = run_grasp(&m, &cfg, &calib).unwrap();
        assert!(c.achieved_ratio() >= 0.2);
        let l = c.provenance.redundancy.selected.len();
        assert!(l >= 1);
        // One fewer layer would miss the target.
        let fewer = CompressionConfig {
            target: LayerTarget::Layers(c.provenance.redundancy.selected[..l - 1].to_vec()),
            ..cfg.clone()
        };
        if l > 1 {
            assert!(run_grasp(&m, &fewer, &calib).unwrap().achieved_ratio() < 0.2);
        }
        assert_eq!(c.provenance.achieved_ratio, c.model.compression_ratio());
    }

    #[test]
    fn rejects_bad_configs() {
        let (m, calib) = setup();
        for target in [LayerTarget::Layers(vec![1, 1]), LayerTarget::Layers(vec![7]), LayerTarget::TargetRatio(1.0)] {
            let cfg = CompressionConfig { target, ..Default::default() };
            assert!(matches!(run_grasp(&m, &cfg, &calib), Err(GraspError::Validation(_))));
        }
        let cfg = CompressionConfig { retain_ratio: 0.0, ..Default::default() };
        assert!(run_grasp(&m, &cfg, &calib).is_err());
    }
}
