//! First-order importance of singular groups and construction of the
//! low-rank factors that replace a redundant block's matrices.
//!
//! Treating `W = Σ_k u_k σ_k v_kᵀ` as a function of free `u_k`, `σ_k`, `v_k`
//! with `G = ∂L/∂W`:
//!
//! * `∂L/∂σ_k = u_kᵀ G v_k`
//! * `∂L/∂u_k = G v_k σ_k`
//! * `∂L/∂v_k = Gᵀ u_k σ_k`
//!
//! and the score of group `k` sums `|θ · ∂L/∂θ|` over its `1 + m + n`
//! scalars.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::CalibrationSet;
use crate::error::{GraspError, Result};
use crate::model::{backward, Layer, ModelConfig, Slot, TransformerModel};
use crate::numerics::{dot, mm, mm_tn, svd, Matrix, SvdFactors};

/// `a · b` stands in for a matrix; `a = U_S diag(σ_S)` and `b = V_Sᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankFactor {
    pub a: Matrix,
    pub b: Matrix,
    /// Indices into the source SVD, ascending.
    pub retained_indices: Vec<usize>,
    pub original_shape: (usize, usize),
}

impl LowRankFactor {
    pub fn rank(&self) -> usize {
        self.retained_indices.len()
    }

    /// `k(m + n + 1)`: the retained singular vectors plus their values.
    pub fn parameter_count(&self) -> usize {
        let (m, n) = self.original_shape;
        self.rank() * (m + n + 1)
    }

    /// Number of reals actually stored in `a` and `b`.
    pub fn stored_len(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        mm(&self.a, &self.b)
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = self.original_shape;
        let k = self.rank();
        if self.a.shape() != (m, k) || self.b.shape() != (k, n) {
            return Err(GraspError::validation(format!(
                "factor shapes {:?} x {:?} do not match rank {k} of {m}x{n}",
                self.a.shape(),
                self.b.shape()
            )));
        }
        let l = m.min(n);
        let mut seen = self.retained_indices.clone();
        seen.dedup();
        if seen.len() != k || self.retained_indices.iter().any(|&i| i >= l) || !self.retained_indices.windows(2).all(|w| w[0] < w[1]) {
            return Err(GraspError::validation("retained indices must be distinct, ascending and < min(m, n)"));
        }
        Ok(())
    }

    /// Packs the listed groups of `f`.
    pub fn from_groups(f: &SvdFactors, indices: &[usize]) -> Self {
        let mut idx = indices.to_vec();
        idx.sort_unstable();
        let (m, n) = (f.m(), f.n());
        let k = idx.len();
        let a = Matrix::from_fn(m, k, |i, c| f.u.get(i, idx[c]) * f.sigma[idx[c]]);
        let b = Matrix::from_fn(k, n, |r, j| f.v.get(j, idx[r]));
        Self { a, b, retained_indices: idx, original_shape: (m, n) }
    }
}

/// A compressed block: every matrix replaced by a factor, norms unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankLayer {
    pub factors: [LowRankFactor; 7],
    pub attn_norm: Vec<f64>,
    pub mlp_norm: Vec<f64>,
}

fn check_gradient_shape(g: &Matrix, f: &SvdFactors) -> Result<()> {
    if g.shape() != (f.m(), f.n()) {
        return Err(GraspError::Shape {
            op: "gradient vs SVD factors",
            lhs: g.shape(),
            rhs: (f.m(), f.n()),
        });
    }
    Ok(())
}

fn check_index(f: &SvdFactors, k: usize) -> Result<()> {
    if k >= f.rank_limit() {
        return Err(GraspError::validation(format!("group {k} out of range for l = {}", f.rank_limit())));
    }
    Ok(())
}

/// `∂L/∂σ_k = u_kᵀ G v_k`.
pub fn singular_value_gradient(g: &Matrix, f: &SvdFactors, k: usize) -> Result<f64> {
    check_gradient_shape(g, f)?;
    check_index(f, k)?;
    let u = f.u.col(k);
    let v = f.v.col(k);
    let mut acc = 0.0;
    for (i, ui) in u.iter().enumerate() {
        acc += ui * dot(g.row(i), &v);
    }
    Ok(acc)
}

/// First-order importance of group `k` of `w` under gradient `g`.
pub fn group_importance(w: &Matrix, g: &Matrix, f: &SvdFactors, k: usize) -> Result<f64> {
    if w.shape() != g.shape() {
        return Err(GraspError::Shape { op: "group_importance", lhs: w.shape(), rhs: g.shape() });
    }
    check_gradient_shape(g, f)?;
    check_index(f, k)?;
    let sigma = f.sigma[k];
    let u = f.u.col(k);
    let v = f.v.col(k);
    let gv: Vec<f64> = (0..g.rows()).map(|i| dot(g.row(i), &v)).collect();
    let mut gtu = vec![0.0; g.cols()];
    for (i, ui) in u.iter().enumerate() {
        for (o, gij) in gtu.iter_mut().zip(g.row(i)) {
            *o += gij * ui;
        }
    }
    let proj = dot(&u, &gv);
    let sigma_term = (sigma * proj).abs();
    let u_term: f64 = u.iter().zip(&gv).map(|(ui, gvi)| (ui * gvi * sigma).abs()).sum();
    let v_term: f64 = v.iter().zip(&gtu).map(|(vj, gj)| (vj * gj * sigma).abs()).sum();
    Ok(sigma_term + u_term + v_term)
}

/// Importance of every group at once; equal to calling [`group_importance`]
/// for each `k`.
pub fn group_importances(g: &Matrix, f: &SvdFactors) -> Result<Vec<f64>> {
    check_gradient_shape(g, f)?;
    let gv = mm(g, &f.v); // m x l
    let gtu = mm_tn(g, &f.u); // n x l
    let l = f.rank_limit();
    let mut scores = vec![0.0; l];
    for (k, score) in scores.iter_mut().enumerate() {
        let sigma = f.sigma[k];
        let mut proj = 0.0;
        let mut u_term = 0.0;
        for i in 0..f.m() {
            let p = f.u.get(i, k) * gv.get(i, k);
            proj += p;
            u_term += p.abs();
        }
        let mut v_term = 0.0;
        for j in 0..f.n() {
            v_term += (f.v.get(j, k) * gtu.get(j, k)).abs();
        }
        *score = sigma.abs() * (proj.abs() + u_term + v_term);
    }
    Ok(scores)
}

/// Indices of the `ceil(r·l)` highest scores, best first; ties prefer the
/// smaller index.
pub fn select_top_groups(scores: &[f64], retain_ratio: f64) -> Result<Vec<usize>> {
    check_retain_ratio(retain_ratio)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(GraspError::NonFinite("importance scores".into()));
    }
    let keep = retained_rank(scores.len(), retain_ratio);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order.truncate(keep);
    Ok(order)
}

pub fn check_retain_ratio(r: f64) -> Result<()> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(GraspError::validation(format!("retain ratio {r} not in (0, 1]")));
    }
    Ok(())
}

/// `ceil(r·l)`, computed so that e.g. `0.1 · 70` keeps 7 rather than 8.
pub fn retained_rank(l: usize, r: f64) -> usize {
    let x = r * l as f64;
    let k = (x - 1e-9 * x.max(1.0)).ceil();
    (k.max(0.0) as usize).min(l)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    /// First-order gradient attribution.
    #[default]
    Gradient,
    /// Singular value magnitude (plain truncated SVD).
    Magnitude,
}

/// Source of the per-group ranking used by [`compress_matrix`].
#[derive(Debug, Clone, Copy)]
pub enum GroupScores<'a> {
    Importance(&'a [f64]),
    Magnitude,
}

/// SVD, rank the groups, keep the top `ceil(r·l)` and pack them. A matrix
/// with no nonzero singular value keeps nothing.
pub fn compress_matrix(w: &Matrix, scores: GroupScores<'_>, retain_ratio: f64) -> Result<LowRankFactor> {
    let f = svd(w)?;
    compress_with_factors(&f, scores, retain_ratio)
}

pub fn compress_with_factors(f: &SvdFactors, scores: GroupScores<'_>, retain_ratio: f64) -> Result<LowRankFactor> {
    check_retain_ratio(retain_ratio)?;
    if f.sigma.iter().all(|&s| s == 0.0) {
        return Ok(LowRankFactor::from_groups(f, &[]));
    }
    let keep = match scores {
        GroupScores::Importance(s) => {
            if s.len() != f.rank_limit() {
                return Err(GraspError::validation(format!(
                    "{} scores for {} singular groups",
                    s.len(),
                    f.rank_limit()
                )));
            }
            select_top_groups(s, retain_ratio)?
        }
        GroupScores::Magnitude => select_top_groups(&f.sigma, retain_ratio)?,
    };
    Ok(LowRankFactor::from_groups(f, &keep))
}

/// Gradient-mode compression from a single gradient matrix.
pub fn compress_matrix_with_gradient(w: &Matrix, g: &Matrix, retain_ratio: f64) -> Result<LowRankFactor> {
    let f = svd(w)?;
    let scores = group_importances(g, &f)?;
    compress_with_factors(&f, GroupScores::Importance(&scores), retain_ratio)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceEntry {
    pub sigma: Vec<f64>,
    pub scores: Vec<f64>,
}

/// Accumulated group importance for every matrix of the scored blocks.
/// Exported as CSV via [`ImportanceTable::write_csv`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImportanceTable {
    pub entries: BTreeMap<(usize, Slot), ImportanceEntry>,
    pub batches_accumulated: usize,
}

impl ImportanceTable {
    pub fn scores(&self, layer: usize, slot: Slot) -> Option<&[f64]> {
        self.entries.get(&(layer, slot)).map(|e| e.scores.as_slice())
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut ls: Vec<usize> = self.entries.keys().map(|(l, _)| *l).collect();
        ls.dedup();
        ls
    }

    /// Adds `other`'s scores entry-wise (tables must cover the same matrices).
    pub fn merge(&mut self, other: &ImportanceTable) -> Result<()> {
        for (key, e) in &other.entries {
            match self.entries.get_mut(key) {
                Some(mine) => {
                    if mine.scores.len() != e.scores.len() {
                        return Err(GraspError::validation("importance tables disagree on group counts"));
                    }
                    mine.scores.iter_mut().zip(&e.scores).for_each(|(a, b)| *a += b);
                }
                None => {
                    self.entries.insert(*key, e.clone());
                }
            }
        }
        self.batches_accumulated += other.batches_accumulated;
        Ok(())
    }

    pub fn digest(&self) -> String {
        let mut h = xxhash_rust::xxh64::Xxh64::new(0);
        for ((l, s), e) in &self.entries {
            h.update(&(*l as u64).to_le_bytes());
            h.update(s.name().as_bytes());
            for v in &e.scores {
                h.update(&v.to_le_bytes());
            }
        }
        h.update(&(self.batches_accumulated as u64).to_le_bytes());
        format!("{:016x}", h.digest())
    }

    /// CSV with header `layer,matrix,k,sigma_k,score`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "layer,matrix,k,sigma_k,score")?;
        for ((l, s), e) in &self.entries {
            for (k, (sig, sc)) in e.sigma.iter().zip(&e.scores).enumerate() {
                writeln!(out, "{l},{s},{k},{sig:e},{sc:e}")?;
            }
        }
        Ok(())
    }
}

/// Runs forward+backward on each calibration batch and sums the per-batch
/// group importance of every matrix in `layers`.
pub fn accumulate_importance(model: &TransformerModel, layers: &[usize], calib: &CalibrationSet, batch_size: usize) -> Result<ImportanceTable> {
    if calib.is_empty() {
        return Err(GraspError::validation("empty calibration set"));
    }
    let mut factors = BTreeMap::new();
    for &l in layers {
        let w = match model.layers.get(l) {
            Some(Layer::Dense(w)) => w,
            Some(Layer::LowRank(_)) => return Err(GraspError::validation(format!("layer {l} is already compressed"))),
            None => return Err(GraspError::validation(format!("layer {l} out of range"))),
        };
        for slot in Slot::ALL {
            factors.insert((l, slot), svd(&w[slot])?);
        }
    }
    let mut table = ImportanceTable {
        entries: factors
            .iter()
            .map(|(key, f)| (*key, ImportanceEntry { sigma: f.sigma.clone(), scores: vec![0.0; f.rank_limit()] }))
            .collect(),
        batches_accumulated: 0,
    };
    for batch in calib.batches(batch_size) {
        let grads = backward(model, batch)?;
        for ((l, slot), f) in &factors {
            let g = grads.get(&crate::model::ParamId::Dense(*l, *slot)).expect("dense gradient");
            let s = group_importances(g, f)?;
            let entry = table.entries.get_mut(&(*l, *slot)).expect("entry");
            entry.scores.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
        }
        table.batches_accumulated += 1;
    }
    Ok(table)
}

/// Replaces block `layer` of `model` with factors selected by `mode`.
pub fn compress_layer(model: &mut TransformerModel, layer: usize, table: Option<&ImportanceTable>, mode: ScoringMode, retain_ratio: f64) -> Result<()> {
    let w = model
        .dense_weights(layer)
        .ok_or_else(|| GraspError::validation(format!("layer {layer} is not a dense block")))?
        .clone();
    let mut factors = Vec::with_capacity(7);
    for slot in Slot::ALL {
        let f = match mode {
            ScoringMode::Magnitude => compress_matrix(&w[slot], GroupScores::Magnitude, retain_ratio)?,
            ScoringMode::Gradient => {
                let scores = table
                    .and_then(|t| t.scores(layer, slot))
                    .ok_or_else(|| GraspError::validation(format!("no importance scores for layer {layer} {slot}")))?;
                compress_matrix(&w[slot], GroupScores::Importance(scores), retain_ratio)?
            }
        };
        factors.push(f);
    }
    let factors: [LowRankFactor; 7] = factors.try_into().expect("seven slots");
    model.layers[layer] = Layer::LowRank(LowRankLayer { factors, attn_norm: w.attn_norm, mlp_norm: w.mlp_norm });
    Ok(())
}

/// Parameter count of `model` if `layers` were all replaced at ratio `r`.
pub fn projected_parameter_count(config: &ModelConfig, current: &TransformerModel, layers: &[usize], retain_ratio: f64) -> usize {
    let mut total = current.parameter_count();
    for &l in layers {
        if let Some(layer) = current.layers.get(l) {
            if layer.is_dense() {
                total -= layer.parameter_count();
                total += low_rank_layer_params(config, retain_ratio);
            }
        }
    }
    total
}

/// Parameters of a block replaced at ratio `r`, assuming every group of
/// every matrix is nonzero.
pub fn low_rank_layer_params(config: &ModelConfig, retain_ratio: f64) -> usize {
    Slot::ALL
        .iter()
        .map(|&s| {
            let (m, n) = config.slot_shape(s);
            retained_rank(m.min(n), retain_ratio) * (m + n + 1)
        })
        .sum::<usize>()
        + 2 * config.d_model
}
