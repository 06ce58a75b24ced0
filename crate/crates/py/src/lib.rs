//! Python module `grasp`. Matrices cross the boundary as lists of rows.

use grasp_core::attribution::{self, ScoringMode};
use grasp_core::data::{self, CalibrationSet, Corpus, TokenSequence};
use grasp_core::evaluation;
use grasp_core::model::{self, init_model, Aggregation, ModelConfig, TransformerModel};
use grasp_core::numerics::{self, Matrix};
use grasp_core::pipeline::{self, CalibrationSpec, CompressionConfig, Dtype, LayerTarget, Provenance, PruningMode};
use grasp_core::redundancy;
use grasp_core::train::{self, TrainConfig};
use grasp_core::{ErrorClass, GraspError};
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: GraspError) -> PyErr {
    let msg = e.to_string();
    match e.class() {
        ErrorClass::Config | ErrorClass::Infeasible => PyValueError::new_err(msg),
        ErrorClass::Data => PyIOError::new_err(msg),
        ErrorClass::Numeric => PyArithmeticError::new_err(msg),
    }
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(py_err)
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn to_batch(batch: Vec<Vec<u32>>) -> Vec<TokenSequence> {
    batch.into_iter().map(TokenSequence::new).collect()
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

type Rows = Vec<Vec<f64>>;

/// Returns `(u, sigma, v)` with `w = u · diag(sigma) · vᵀ`.
#[pyfunction]
fn svd(w: Rows) -> PyResult<(Rows, Vec<f64>, Rows)> {
    let f = numerics::svd(&to_matrix(w)?).map_err(py_err)?;
    Ok((to_rows(&f.u), f.sigma.clone(), to_rows(&f.v)))
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    numerics::cosine_similarity(&a, &b).map_err(py_err)
}

/// `u_kᵀ g v_k` for the SVD of `w`.
#[pyfunction]
fn singular_value_gradient(w: Vec<Vec<f64>>, g: Vec<Vec<f64>>, k: usize) -> PyResult<f64> {
    let f = numerics::svd(&to_matrix(w)?).map_err(py_err)?;
    attribution::singular_value_gradient(&to_matrix(g)?, &f, k).map_err(py_err)
}

/// First-order importance of every singular group of `w` under gradient `g`.
#[pyfunction]
fn group_importances(w: Vec<Vec<f64>>, g: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let f = numerics::svd(&to_matrix(w)?).map_err(py_err)?;
    attribution::group_importances(&to_matrix(g)?, &f).map_err(py_err)
}

#[pyfunction]
fn select_top_groups(scores: Vec<f64>, retain_ratio: f64) -> PyResult<Vec<usize>> {
    attribution::select_top_groups(&scores, retain_ratio).map_err(py_err)
}

#[pyfunction]
fn tokenize(text: &[u8]) -> Vec<u32> {
    data::tokenize(text).ids().to_vec()
}

#[pyfunction]
fn detokenize(ids: Vec<u32>) -> PyResult<Vec<u8>> {
    data::detokenize(&TokenSequence::new(ids)).map_err(py_err)
}

#[pyclass(name = "Model", module = "grasp")]
struct PyModel {
    inner: TransformerModel,
    provenance: Option<Provenance>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (vocab_size=256, d_model=64, n_layers=8, n_heads=4, d_ff=256, max_seq_len=64, seed=0))]
    fn new(vocab_size: usize, d_model: usize, n_layers: usize, n_heads: usize, d_ff: usize, max_seq_len: usize, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig { vocab_size, d_model, n_layers, n_heads, d_ff, max_seq_len, seed };
        Ok(Self { inner: init_model(&cfg).map_err(py_err)?, provenance: None })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let c = pipeline::load_checkpoint(path).map_err(py_err)?;
        Ok(Self { inner: c.model, provenance: c.provenance })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        pipeline::save_checkpoint(&self.inner, self.provenance.as_ref(), path, Dtype::F64).map_err(py_err)?;
        Ok(())
    }

    /// Mean next-token NLL of a batch of token-id lists.
    fn loss(&self, batch: Vec<Vec<u32>>) -> PyResult<f64> {
        model::forward(&self.inner, &to_batch(batch)).map(|t| t.loss).map_err(py_err)
    }

    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn compression_ratio(&self) -> f64 {
        self.inner.compression_ratio()
    }

    fn checksum(&self) -> String {
        self.inner.checksum_hex()
    }

    fn low_rank_layers(&self) -> Vec<usize> {
        self.inner.low_rank_layers()
    }

    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.config).map_err(json_err)
    }

    #[getter]
    fn provenance_json(&self) -> PyResult<Option<String>> {
        self.provenance.as_ref().map(|p| serde_json::to_string(p).map_err(json_err)).transpose()
    }

    /// Per-block input/output cosine similarity over `batch`.
    #[pyo3(signature = (batch, aggregation="mean_token_cosine"))]
    fn layer_similarity(&self, batch: Vec<Vec<u32>>, aggregation: &str) -> PyResult<Vec<f64>> {
        let agg = match aggregation {
            "mean_token_cosine" => Aggregation::MeanTokenCosine,
            "cosine_of_means" => Aggregation::CosineOfMeans,
            other => return Err(PyValueError::new_err(format!("unknown aggregation `{other}`"))),
        };
        let calib = CalibrationSet::new(to_batch(batch), "python", 0).map_err(py_err)?;
        let scores = redundancy::layer_similarity_scores(&self.inner, &calib, agg, calib.sample_count).map_err(py_err)?;
        Ok(scores.into_iter().map(|s| s.similarity).collect())
    }

    /// Trains in place on `text`; returns the final (smoothed) loss.
    #[pyo3(signature = (text, steps=200, batch_size=4, seq_len=None, learning_rate=3e-3, seed=0))]
    fn train(&mut self, text: &[u8], steps: usize, batch_size: usize, seq_len: Option<usize>, learning_rate: f64, seed: u64) -> PyResult<f64> {
        let corpus = Corpus::from_bytes("python", text);
        let tc = TrainConfig {
            steps,
            batch_size,
            seq_len: seq_len.unwrap_or(self.inner.config.max_seq_len),
            learning_rate,
            warmup_steps: (steps / 10).max(1),
            seed,
            ..Default::default()
        };
        train::train(&mut self.inner, &corpus, &tc, |_, _| {}).map(|r| r.final_loss).map_err(py_err)
    }

    /// Runs the compression pipeline with `calibration` as the calibration
    /// set and returns the compressed model.
    #[pyo3(signature = (calibration, target_ratio=None, layers=None, retain_ratio=0.1, mode="one_shot", scoring="gradient", batch_size=8))]
    #[allow(clippy::too_many_arguments)]
    fn compress(
        &self,
        calibration: Vec<Vec<u32>>,
        target_ratio: Option<f64>,
        layers: Option<Vec<usize>>,
        retain_ratio: f64,
        mode: &str,
        scoring: &str,
        batch_size: usize,
    ) -> PyResult<Self> {
        let target = match (target_ratio, layers) {
            (Some(_), Some(_)) => return Err(PyValueError::new_err("pass target_ratio or layers, not both")),
            (None, Some(ls)) => LayerTarget::Layers(ls),
            (r, None) => LayerTarget::TargetRatio(r.unwrap_or(0.2)),
        };
        let mode = match mode {
            "one_shot" => PruningMode::OneShot,
            "iterative" => PruningMode::Iterative,
            other => return Err(PyValueError::new_err(format!("unknown mode `{other}`"))),
        };
        let scoring = match scoring {
            "gradient" => ScoringMode::Gradient,
            "magnitude" => ScoringMode::Magnitude,
            other => return Err(PyValueError::new_err(format!("unknown scoring `{other}`"))),
        };
        let cfg = CompressionConfig {
            target,
            retain_ratio,
            mode,
            scoring,
            calibration: CalibrationSpec { batch_size, ..Default::default() },
            ..Default::default()
        };
        let calib = CalibrationSet::new(to_batch(calibration), "python", 0).map_err(py_err)?;
        let c = pipeline::run_grasp(&self.inner, &cfg, &calib).map_err(py_err)?;
        Ok(Self { inner: c.model, provenance: Some(c.provenance) })
    }

    /// Perplexity of `text` (one document per `<|endoftext|>`-separated part).
    #[pyo3(signature = (text, batch_size=16))]
    fn perplexity(&self, text: &[u8], batch_size: usize) -> PyResult<f64> {
        let corpus = Corpus::from_bytes("python", text);
        evaluation::perplexity(&self.inner, &corpus.documents, batch_size).map(|r| r.perplexity).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Model(d_model={}, n_layers={}, low_rank={:?}, parameters={})",
            c.d_model,
            c.n_layers,
            self.inner.low_rank_layers(),
            self.inner.parameter_count()
        )
    }
}

#[pymodule]
fn grasp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(svd, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(singular_value_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(group_importances, m)?)?;
    m.add_function(wrap_pyfunction!(select_top_groups, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(detokenize, m)?)?;
    m.add_class::<PyModel>()?;
    m.add("DOCUMENT_BOUNDARY", data::DOCUMENT_BOUNDARY)?;
    Ok(())
}
