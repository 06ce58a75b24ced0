//! The TOML run file. Every section is optional; unknown keys are errors.

use std::path::{Path, PathBuf};

use grasp_core::attribution::ScoringMode;
use grasp_core::model::{Aggregation, ModelConfig};
use grasp_core::pipeline::{CalibrationSpec, CompensationConfig, CompressionConfig, LayerTarget, PruningMode, DEFAULT_RETAIN_RATIO};
use grasp_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SEED_ENV: &str = "GRASP_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    /// Overrides every section's seed when set.
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub data: DataSection,
    pub train: TrainConfig,
    pub compress: CompressSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub corpus: Option<PathBuf>,
    /// Tail fraction of every document held out from training and
    /// calibration.
    pub heldout_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { corpus: None, heldout_fraction: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompressSection {
    pub target_ratio: Option<f64>,
    pub layers: Option<Vec<usize>>,
    pub retain_ratio: f64,
    pub mode: PruningMode,
    pub scoring: ScoringMode,
    pub aggregation: Aggregation,
    pub contiguous: bool,
    pub calibration: CalibrationSpec,
    pub compensation: CompensationConfig,
    /// Held-out windows used to report compensation loss.
    pub heldout_samples: usize,
}

impl Default for CompressSection {
    fn default() -> Self {
        Self {
            target_ratio: None,
            layers: None,
            retain_ratio: DEFAULT_RETAIN_RATIO,
            mode: PruningMode::OneShot,
            scoring: ScoringMode::Gradient,
            aggregation: Aggregation::MeanTokenCosine,
            contiguous: false,
            calibration: CalibrationSpec::default(),
            compensation: CompensationConfig::default(),
            heldout_samples: 64,
        }
    }
}

impl CompressSection {
    pub fn to_config(&self) -> Result<CompressionConfig, CliError> {
        let target = match (&self.target_ratio, &self.layers) {
            (Some(_), Some(_)) => return Err(CliError::Config("set either compress.target_ratio or compress.layers, not both".into())),
            (Some(r), None) => LayerTarget::TargetRatio(*r),
            (None, Some(ls)) => LayerTarget::Layers(ls.clone()),
            (None, None) => LayerTarget::TargetRatio(0.20),
        };
        Ok(CompressionConfig {
            target,
            retain_ratio: self.retain_ratio,
            mode: self.mode,
            scoring: self.scoring,
            aggregation: self.aggregation,
            contiguous: self.contiguous,
            calibration: self.calibration.clone(),
            compensation: self.compensation.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub batch_size: usize,
    pub batch_sizes: Vec<usize>,
    pub seq_lens: Vec<usize>,
    pub warmup: usize,
    pub iters: usize,
    pub bucket_size: Option<usize>,
    /// Calibration windows for the sensitivity sweep.
    pub sensitivity_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            batch_size: 16,
            batch_sizes: vec![1, 8, 32],
            seq_lens: vec![32, 64],
            warmup: 2,
            iters: 20,
            bucket_size: None,
            sensitivity_samples: 64,
        }
    }
}

impl RunConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Flag, then `GRASP_SEED`, then the file's top-level `seed`.
    pub fn apply_seed(&mut self, flag: Option<u64>) -> Result<(), CliError> {
        let env = match std::env::var(SEED_ENV) {
            Ok(v) => Some(v.trim().parse::<u64>().map_err(|_| CliError::Config(format!("{SEED_ENV}={v} is not an unsigned integer")))?),
            Err(_) => None,
        };
        if let Some(seed) = flag.or(env).or(self.seed) {
            self.seed = Some(seed);
            self.model.seed = seed;
            self.train.seed = seed;
            self.compress.calibration.seed = seed;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_rejects_unknown_keys() {
        let cfg: RunConfigFile = toml::from_str(
            r#"
            seed = 7
            [model]
            d_model = 32
            n_layers = 2
            [compress]
            target_ratio = 0.3
            scoring = "magnitude"
            mode = "iterative"
            [compress.calibration]
            samples = 16
            "#,
        )
        .unwrap();
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.compress.calibration.samples, 16);
        assert_eq!(cfg.compress.to_config().unwrap().target, LayerTarget::TargetRatio(0.3));
        assert!(toml::from_str::<RunConfigFile>("[model]\nwidth = 3").is_err());
        assert!(toml::from_str::<RunConfigFile>("bogus = 1").is_err());
        let both: RunConfigFile = toml::from_str("[compress]\ntarget_ratio = 0.2\nlayers = [1]").unwrap();
        assert!(both.compress.to_config().is_err());
    }
}
