//! A small LLaMA-style decoder: RMS-norm, gated MLP, multi-head causal
//! attention, pre-norm residual blocks, fixed sinusoidal positions and an
//! unembedding tied to the token embedding.
//!
//! All activations are row vectors: a projection is `x · W` with `W` stored
//! as `in_features x out_features`.

mod forward;
mod params;

use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attribution::{LowRankFactor, LowRankLayer};
use crate::error::{GraspError, Result};
use crate::numerics::Matrix;

pub use forward::{
    backward, forward, infer_logits, lm_loss, loss_and_gradients, mean_loss, per_token_nll,
    Aggregation, ForwardTrace, LayerTrace, RMS_EPS,
};
pub use params::{GradientSet, ParamId};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_layers: 8,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(GraspError::validation(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(GraspError::validation(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn slot_shape(&self, slot: Slot) -> (usize, usize) {
        let (d, f) = (self.d_model, self.d_ff);
        match slot {
            Slot::Wq | Slot::Wk | Slot::Wv | Slot::Wo => (d, d),
            Slot::WUp | Slot::WGate => (d, f),
            Slot::WDown => (f, d),
        }
    }

    /// Parameters of one dense block: seven matrices plus two norm scales.
    pub fn dense_layer_params(&self) -> usize {
        Slot::ALL.iter().map(|&s| {
            let (m, n) = self.slot_shape(s);
            m * n
        }).sum::<usize>()
            + 2 * self.d_model
    }

    /// `vocab·d + n_layers·(4d² + 3·d·d_ff + 2d) + d`.
    pub fn dense_parameter_count(&self) -> usize {
        self.vocab_size * self.d_model + self.n_layers * self.dense_layer_params() + self.d_model
    }
}

/// The seven weight matrices of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Slot {
    #[serde(rename = "wq")]
    Wq,
    #[serde(rename = "wk")]
    Wk,
    #[serde(rename = "wv")]
    Wv,
    #[serde(rename = "wo")]
    Wo,
    #[serde(rename = "w_up")]
    WUp,
    #[serde(rename = "w_gate")]
    WGate,
    #[serde(rename = "w_down")]
    WDown,
}

impl Slot {
    pub const ALL: [Slot; 7] = [
        Slot::Wq,
        Slot::Wk,
        Slot::Wv,
        Slot::Wo,
        Slot::WUp,
        Slot::WGate,
        Slot::WDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Slot::Wq => "wq",
            Slot::Wk => "wk",
            Slot::Wv => "wv",
            Slot::Wo => "wo",
            Slot::WUp => "w_up",
            Slot::WGate => "w_gate",
            Slot::WDown => "w_down",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Slot {
    type Err = GraspError;

    fn from_str(s: &str) -> Result<Self> {
        Slot::ALL
            .into_iter()
            .find(|slot| slot.name() == s)
            .ok_or_else(|| GraspError::validation(format!("unknown matrix name `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub matrices: [Matrix; 7],
    pub attn_norm: Vec<f64>,
    pub mlp_norm: Vec<f64>,
}

impl Index<Slot> for LayerWeights {
    type Output = Matrix;

    fn index(&self, slot: Slot) -> &Matrix {
        &self.matrices[slot.index()]
    }
}

impl IndexMut<Slot> for LayerWeights {
    fn index_mut(&mut self, slot: Slot) -> &mut Matrix {
        &mut self.matrices[slot.index()]
    }
}

impl Index<Slot> for LowRankLayer {
    type Output = LowRankFactor;

    fn index(&self, slot: Slot) -> &LowRankFactor {
        &self.factors[slot.index()]
    }
}

impl IndexMut<Slot> for LowRankLayer {
    fn index_mut(&mut self, slot: Slot) -> &mut LowRankFactor {
        &mut self.factors[slot.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Layer {
    Dense(LayerWeights),
    LowRank(LowRankLayer),
}

impl Layer {
    pub fn is_dense(&self) -> bool {
        matches!(self, Layer::Dense(_))
    }

    pub fn attn_norm(&self) -> &[f64] {
        match self {
            Layer::Dense(w) => &w.attn_norm,
            Layer::LowRank(w) => &w.attn_norm,
        }
    }

    pub fn mlp_norm(&self) -> &[f64] {
        match self {
            Layer::Dense(w) => &w.mlp_norm,
            Layer::LowRank(w) => &w.mlp_norm,
        }
    }

    pub fn parameter_count(&self) -> usize {
        let norms = self.attn_norm().len() + self.mlp_norm().len();
        match self {
            Layer::Dense(w) => w.matrices.iter().map(Matrix::len).sum::<usize>() + norms,
            Layer::LowRank(w) => w.factors.iter().map(LowRankFactor::parameter_count).sum::<usize>() + norms,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub embedding: Matrix,
    pub layers: Vec<Layer>,
    pub final_norm: Vec<f64>,
}

pub fn init_model(config: &ModelConfig) -> Result<TransformerModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut gaussian = |rows: usize, cols: usize| Matrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng));

    let embedding = gaussian(config.vocab_size, config.d_model);
    let layers = (0..config.n_layers)
        .map(|_| {
            let matrices = Slot::ALL.map(|s| {
                let (m, n) = config.slot_shape(s);
                gaussian(m, n)
            });
            Layer::Dense(LayerWeights {
                matrices,
                attn_norm: vec![1.0; config.d_model],
                mlp_norm: vec![1.0; config.d_model],
            })
        })
        .collect();
    Ok(TransformerModel {
        config: config.clone(),
        embedding,
        layers,
        final_norm: vec![1.0; config.d_model],
    })
}

impl TransformerModel {
    /// Checks layer count, slot shapes and factor consistency against the config.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let bad = |what: String| Err(GraspError::validation(what));
        if self.embedding.shape() != (c.vocab_size, c.d_model) {
            return bad(format!("embedding shape {:?}", self.embedding.shape()));
        }
        if self.final_norm.len() != c.d_model {
            return bad("final norm length".into());
        }
        if self.layers.len() != c.n_layers {
            return bad(format!("{} layers for n_layers = {}", self.layers.len(), c.n_layers));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.attn_norm().len() != c.d_model || layer.mlp_norm().len() != c.d_model {
                return bad(format!("layer {i}: norm scale length"));
            }
            for slot in Slot::ALL {
                let want = c.slot_shape(slot);
                let got = match layer {
                    Layer::Dense(w) => w[slot].shape(),
                    Layer::LowRank(w) => {
                        w[slot].validate()?;
                        w[slot].original_shape
                    }
                };
                if got != want {
                    return bad(format!("layer {i} {slot}: shape {got:?}, expected {want:?}"));
                }
            }
        }
        Ok(())
    }

    /// Exact count; a low-rank slot counts `k(m + n + 1)`.
    pub fn parameter_count(&self) -> usize {
        self.embedding.len()
            + self.layers.iter().map(Layer::parameter_count).sum::<usize>()
            + self.final_norm.len()
    }

    /// `1 - count(self) / count(dense)`.
    pub fn compression_ratio(&self) -> f64 {
        1.0 - self.parameter_count() as f64 / self.config.dense_parameter_count() as f64
    }

    pub fn low_rank_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| !l.is_dense())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn dense_weights(&self, layer: usize) -> Option<&LayerWeights> {
        match self.layers.get(layer)? {
            Layer::Dense(w) => Some(w),
            Layer::LowRank(_) => None,
        }
    }

    /// 64-bit digest of every parameter, layer kind and factor layout.
    pub fn checksum(&self) -> u64 {
        let mut h = xxhash_rust::xxh64::Xxh64::new(0);
        for id in self.param_ids() {
            h.update(id.tensor_name().as_bytes());
            for v in self.param(&id) {
                h.update(&v.to_le_bytes());
            }
        }
        for layer in &self.layers {
            if let Layer::LowRank(w) = layer {
                for f in &w.factors {
                    for &i in &f.retained_indices {
                        h.update(&(i as u64).to_le_bytes());
                    }
                }
            }
        }
        h.digest()
    }

    pub fn checksum_hex(&self) -> String {
        format!("{:016x}", self.checksum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_model() {
        let c = ModelConfig { d_model: 16, n_layers: 2, d_ff: 32, ..Default::default() };
        let a = init_model(&c).unwrap();
        let b = init_model(&c).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a, b);
        let other = init_model(&ModelConfig { seed: 1, ..c }).unwrap();
        assert_ne!(a.checksum(), other.checksum());
    }

    #[test]
    fn default_count_matches_closed_form() {
        let c = ModelConfig::default();
        let m = init_model(&c).unwrap();
        let (v, d, l, f) = (256, 64, 8, 256);
        assert_eq!(m.parameter_count(), v * d + l * (4 * d * d + 3 * d * f + 2 * d) + d);
        assert_eq!(m.parameter_count(), c.dense_parameter_count());
        assert_eq!(m.compression_ratio(), 0.0);
    }

    #[test]
    fn rejects_bad_config() {
        let c = ModelConfig { d_model: 10, n_heads: 4, ..Default::default() };
        assert!(init_model(&c).is_err());
        let c = ModelConfig { n_layers: 0, ..Default::default() };
        assert!(init_model(&c).is_err());
    }

    #[test]
    fn slot_names_round_trip() {
        for s in Slot::ALL {
            assert_eq!(s.name().parse::<Slot>().unwrap(), s);
        }
        assert!("wz".parse::<Slot>().is_err());
    }
}
