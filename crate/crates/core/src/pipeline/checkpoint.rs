//! Checkpoint directory layout:
//!
//! * `manifest.json`: format version, model config, one record per tensor
//!   (name, shape, dtype, byte offset, length, 64-bit checksum) and an
//!   optional provenance block.
//! * `tensors.bin`: the tensors' row-major little-endian payloads, back to
//!   back in manifest order.
//!
//! Low-rank slots are stored as `<layer>.<slot>.a` / `<layer>.<slot>.b`; the
//! `.a` record carries the retained singular indices.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh64::xxh64;

use super::Provenance;
use crate::attribution::{LowRankFactor, LowRankLayer};
use crate::error::{CheckpointError, GraspError, Result};
use crate::model::{Layer, LayerWeights, ModelConfig, ParamId, Slot, TransformerModel};
use crate::numerics::Matrix;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F64,
    /// Smaller files; values are rounded, so round trips are not bit-exact.
    F32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: Dtype,
    pub offset: u64,
    pub length: u64,
    /// xxh64 of the payload bytes, lowercase hex.
    pub checksum: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retained_indices: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_shape: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub parameter_count: usize,
    pub tensors: Vec<TensorRecord>,
    #[serde(default)]
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: TransformerModel,
    pub provenance: Option<Provenance>,
    pub manifest: Manifest,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GraspError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }.into()
}

fn encode(values: &[f64], dtype: Dtype) -> Vec<u8> {
    match dtype {
        Dtype::F64 => values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        Dtype::F32 => values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
    }
}

fn decode(bytes: &[u8], dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect(),
    }
}

pub fn save_checkpoint(model: &TransformerModel, provenance: Option<&Provenance>, dir: impl AsRef<Path>, dtype: Dtype) -> Result<Manifest> {
    let dir = dir.as_ref();
    model.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for id in model.param_ids() {
        let (r, c) = model.param_shape(&id);
        let bytes = encode(model.param(&id), dtype);
        let (retained_indices, original_shape) = match (id, &model.layers.get(id.layer().unwrap_or(usize::MAX))) {
            (ParamId::FactorA(_, slot), Some(Layer::LowRank(w))) => {
                let f = &w[slot];
                (Some(f.retained_indices.clone()), Some([f.original_shape.0, f.original_shape.1]))
            }
            _ => (None, None),
        };
        tensors.push(TensorRecord {
            name: id.tensor_name(),
            shape: [r, c],
            dtype,
            offset: payload.len() as u64,
            length: bytes.len() as u64,
            checksum: format!("{:016x}", xxh64(&bytes, 0)),
            retained_indices,
            original_shape,
        });
        payload.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        parameter_count: model.parameter_count(),
        tensors,
        provenance: provenance.cloned(),
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let tpath = dir.join(TENSORS_FILE);
    fs::write(&tpath, &payload).map_err(io_err(&tpath))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, json).map_err(io_err(&mpath))?;
    Ok(manifest)
}

type Loaded<'a> = HashMap<String, (Matrix, &'a TensorRecord)>;

fn take<'a>(tensors: &mut Loaded<'a>, name: String) -> std::result::Result<(Matrix, &'a TensorRecord), CheckpointError> {
    tensors.remove(&name).ok_or(CheckpointError::MissingTensor(name))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read(&mpath).map_err(io_err(&mpath))?;
    // Version first, so an incompatible manifest reports the version rather
    // than whatever field changed.
    let raw: serde_json::Value = serde_json::from_slice(&text).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let found = raw.get("format_version").and_then(|v| v.as_u64()).ok_or_else(|| CheckpointError::Manifest("missing format_version".into()))?;
    if found != u64::from(FORMAT_VERSION) {
        return Err(CheckpointError::Version { found: found as u32, expected: FORMAT_VERSION }.into());
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let tpath: PathBuf = dir.join(TENSORS_FILE);
    let payload = fs::read(&tpath).map_err(io_err(&tpath))?;

    let mut tensors: Loaded = HashMap::new();
    for rec in &manifest.tensors {
        let end = rec.offset.checked_add(rec.length).ok_or_else(|| CheckpointError::Manifest(format!("overflowing extent for {}", rec.name)))?;
        if end > payload.len() as u64 {
            return Err(CheckpointError::Truncated { tensor: rec.name.clone(), offset: rec.offset, end, available: payload.len() as u64 }.into());
        }
        let bytes = &payload[rec.offset as usize..end as usize];
        let expected = u64::from_str_radix(&rec.checksum, 16).map_err(|_| CheckpointError::Manifest(format!("bad checksum field for {}", rec.name)))?;
        let actual = xxh64(bytes, 0);
        if actual != expected {
            return Err(CheckpointError::Checksum { tensor: rec.name.clone(), expected, actual }.into());
        }
        let [r, c] = rec.shape;
        if rec.length as usize != r * c * rec.dtype.width() {
            return Err(CheckpointError::Manifest(format!("{}: length {} does not match shape {r}x{c}", rec.name, rec.length)).into());
        }
        let m = Matrix::from_vec(r, c, decode(bytes, rec.dtype))?;
        tensors.insert(rec.name.clone(), (m, rec));
    }

    let cfg = manifest.config.clone();
    cfg.validate()?;
    let embedding = take(&mut tensors, ParamId::Embedding.tensor_name())?.0;
    let final_norm = take(&mut tensors, ParamId::FinalNorm.tensor_name())?.0.into_vec();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let attn_norm = take(&mut tensors, ParamId::AttnNorm(l).tensor_name())?.0.into_vec();
        let mlp_norm = take(&mut tensors, ParamId::MlpNorm(l).tensor_name())?.0.into_vec();
        let dense = tensors.contains_key(&ParamId::Dense(l, Slot::Wq).tensor_name());
        let layer = if dense {
            let mut mats = Vec::with_capacity(7);
            for slot in Slot::ALL {
                mats.push(take(&mut tensors, ParamId::Dense(l, slot).tensor_name())?.0);
            }
            Layer::Dense(LayerWeights { matrices: mats.try_into().expect("seven"), attn_norm, mlp_norm })
        } else {
            let mut factors = Vec::with_capacity(7);
            for slot in Slot::ALL {
                let (a, rec) = take(&mut tensors, ParamId::FactorA(l, slot).tensor_name())?;
                let retained_indices = rec.retained_indices.clone().ok_or_else(|| CheckpointError::Manifest(format!("{} lacks retained_indices", rec.name)))?;
                let [m, n] = rec.original_shape.ok_or_else(|| CheckpointError::Manifest(format!("{} lacks original_shape", rec.name)))?;
                let b = take(&mut tensors, ParamId::FactorB(l, slot).tensor_name())?.0;
                factors.push(LowRankFactor { a, b, retained_indices, original_shape: (m, n) });
            }
            Layer::LowRank(LowRankLayer { factors: factors.try_into().expect("seven"), attn_norm, mlp_norm })
        };
        layers.push(layer);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(CheckpointError::Manifest(format!("unexpected tensor `{extra}`")).into());
    }
    let model = TransformerModel { config: cfg, embedding, layers, final_norm };
    model.validate()?;
    if model.parameter_count() != manifest.parameter_count {
        return Err(CheckpointError::Manifest("parameter_count does not match tensors".into()).into());
    }
    Ok(Checkpoint { model, provenance: manifest.provenance.clone(), manifest })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::{compress_layer, ScoringMode};
    use crate::model::init_model;

    fn small() -> TransformerModel {
        init_model(&ModelConfig { vocab_size: 20, d_model: 8, n_layers: 3, n_heads: 2, d_ff: 12, max_seq_len: 8, seed: 1 }).unwrap()
    }

    #[test]
    fn round_trip_dense_and_low_rank() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = small();
        compress_layer(&mut m, 1, None, ScoringMode::Magnitude, 0.25).unwrap();
        save_checkpoint(&m, None, dir.path(), Dtype::F64).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.model, m);
        assert!(back.provenance.is_none());
    }

    #[test]
    fn f32_export_loads_approximately() {
        let dir = tempfile::tempdir().unwrap();
        let m = small();
        save_checkpoint(&m, None, dir.path(), Dtype::F32).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        let d = back.model.embedding.sub(&m.embedding).unwrap().frobenius_norm();
        assert!(d < 1e-6);
        assert_eq!(fs::metadata(dir.path().join(TENSORS_FILE)).unwrap().len() as usize, m.parameter_count() * 4);
    }

    #[test]
    fn distinct_failures() {
        let dir = tempfile::tempdir().unwrap();
        let m = small();
        save_checkpoint(&m, None, dir.path(), Dtype::F64).unwrap();
        let tpath = dir.path().join(TENSORS_FILE);
        let mpath = dir.path().join(MANIFEST_FILE);
        let good = fs::read(&tpath).unwrap();

        fs::write(&tpath, &good[..good.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(GraspError::Checkpoint(CheckpointError::Truncated { .. }))));

        fs::write(&tpath, &good).unwrap();
        let text = fs::read_to_string(&mpath).unwrap();
        fs::write(&mpath, text.replacen("\"format_version\": 1", "\"format_version\": 9", 1)).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(GraspError::Checkpoint(CheckpointError::Version { found: 9, expected: 1 }))
        ));

        fs::write(&mpath, text).unwrap();
        assert!(load_checkpoint(dir.path()).is_ok());
        assert!(matches!(load_checkpoint(dir.path().join("nope")), Err(GraspError::Checkpoint(CheckpointError::Io { .. }))));
    }
}
