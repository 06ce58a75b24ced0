//! Exact forward pass and hand-written reverse-mode backward pass.
//!
//! A batch is a list of independent sequences. Their positions are stacked
//! into one `N x d_model` activation matrix so projections run as single
//! GEMMs; attention stays inside each sequence's span.

use serde::{Deserialize, Serialize};

use super::{GradientSet, Layer, ModelConfig, ParamId, Slot, TransformerModel};
use crate::data::TokenSequence;
use crate::error::{GraspError, Result};
use crate::numerics::{cosine_similarity, gemm, mm, mm_nt, Matrix};

pub const RMS_EPS: f64 = 1e-5;

/// How per-position hidden states are reduced before layer scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean over positions of the per-position cosine.
    #[default]
    MeanTokenCosine,
    /// Cosine between the position-averaged input and output states.
    CosineOfMeans,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Residual stream entering the block, averaged over all positions.
    pub h_in: Vec<f64>,
    /// Residual stream leaving the block, averaged over all positions.
    pub h_out: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    /// Residual stream at every block boundary, `n_layers + 1` matrices of
    /// shape `positions x d_model`; entry `i` feeds block `i`.
    pub hidden_states: Vec<Matrix>,
    /// One row per position of every sequence, in batch order.
    pub logits: Matrix,
    /// Mean next-token negative log-likelihood.
    pub loss: f64,
    pub target_count: usize,
}

impl ForwardTrace {
    /// Input/output cosine of block `layer` under the given aggregation.
    pub fn layer_similarity(&self, layer: usize, aggregation: Aggregation) -> Result<f64> {
        match aggregation {
            Aggregation::CosineOfMeans => {
                let t = &self.layers[layer];
                cosine_similarity(&t.h_in, &t.h_out)
            }
            Aggregation::MeanTokenCosine => {
                let (sum, n) = self.token_cosine_sum(layer)?;
                Ok(sum / n as f64)
            }
        }
    }

    /// Sum of per-position cosines for one block, and the position count.
    pub fn token_cosine_sum(&self, layer: usize) -> Result<(f64, usize)> {
        let h_in = &self.hidden_states[layer];
        let h_out = &self.hidden_states[layer + 1];
        let mut sum = 0.0;
        for r in 0..h_in.rows() {
            sum += cosine_similarity(h_in.row(r), h_out.row(r))?;
        }
        Ok((sum, h_in.rows()))
    }
}

struct Layout {
    /// `(first row, length)` per sequence.
    spans: Vec<(usize, usize)>,
    tokens: Vec<u32>,
    /// `(row, next token)` for every position that has a successor.
    targets: Vec<(usize, u32)>,
}

impl Layout {
    fn new(config: &ModelConfig, batch: &[TokenSequence], need_targets: bool) -> Result<Self> {
        if batch.is_empty() {
            return Err(GraspError::validation("empty batch"));
        }
        let min_len = if need_targets { 2 } else { 1 };
        let mut spans = Vec::with_capacity(batch.len());
        let mut tokens = Vec::new();
        let mut targets = Vec::new();
        for (s, seq) in batch.iter().enumerate() {
            let ids = seq.ids();
            if ids.len() < min_len {
                return Err(GraspError::validation(format!(
                    "sequence {s} has {} tokens; at least {min_len} required",
                    ids.len()
                )));
            }
            if ids.len() > config.max_seq_len {
                return Err(GraspError::validation(format!(
                    "sequence {s} has {} tokens; max_seq_len is {}",
                    ids.len(),
                    config.max_seq_len
                )));
            }
            if let Some(&bad) = ids.iter().find(|&&t| t as usize >= config.vocab_size) {
                return Err(GraspError::validation(format!(
                    "token id {bad} out of range for vocab_size {}",
                    config.vocab_size
                )));
            }
            let off = tokens.len();
            spans.push((off, ids.len()));
            tokens.extend_from_slice(ids);
            for t in 0..ids.len() - 1 {
                targets.push((off + t, ids[t + 1]));
            }
        }
        Ok(Self { spans, tokens, targets })
    }

    fn rows(&self) -> usize {
        self.tokens.len()
    }
}

struct BlockCache {
    x_in: Matrix,
    n1: Matrix,
    rstd1: Vec<f64>,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Causal attention weights, `len x len` row-major, index `seq * heads + head`.
    probs: Vec<Vec<f64>>,
    o: Matrix,
    x1: Matrix,
    n2: Matrix,
    rstd2: Vec<f64>,
    gate: Matrix,
    up: Matrix,
    act: Matrix,
}

struct Pass {
    layout: Layout,
    blocks: Vec<BlockCache>,
    x_final: Matrix,
    nf: Matrix,
    rstdf: Vec<f64>,
    logits: Matrix,
}

/// Amplitude of the fixed position code, matched to the embedding init
/// scale so position does not drown token identity early in training.
pub const POSITION_SCALE: f64 = 0.02;

fn sinusoidal(t: usize, i: usize, d: usize) -> f64 {
    let pair = (i / 2) as f64;
    let angle = t as f64 / 10000f64.powf(2.0 * pair / d as f64);
    if i.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}

fn embed(model: &TransformerModel, layout: &Layout) -> Matrix {
    let d = model.config.d_model;
    let longest = layout.spans.iter().map(|&(_, len)| len).max().unwrap_or(0);
    let positions = Matrix::from_fn(longest, d, |t, i| POSITION_SCALE * sinusoidal(t, i, d));
    let mut x = Matrix::zeros(layout.rows(), d);
    for &(off, len) in &layout.spans {
        for t in 0..len {
            let row = off + t;
            let e = model.embedding.row(layout.tokens[row] as usize);
            for ((dst, src), p) in x.row_mut(row).iter_mut().zip(e).zip(positions.row(t)) {
                *dst = src + p;
            }
        }
    }
    x
}

fn rmsnorm(x: &Matrix, scale: &[f64]) -> (Matrix, Vec<f64>) {
    let d = x.cols();
    let mut y = Matrix::zeros(x.rows(), d);
    let mut rstd = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        for ((o, xi), g) in y.row_mut(r).iter_mut().zip(row).zip(scale) {
            *o = xi * inv * g;
        }
        rstd.push(inv);
    }
    (y, rstd)
}

/// Accumulates into `dx` and `dscale`.
fn rmsnorm_backward(x: &Matrix, scale: &[f64], rstd: &[f64], dy: &Matrix, dx: &mut Matrix, dscale: &mut [f64]) {
    let d = x.cols();
    let mut dxhat = vec![0.0; d];
    for (r, &inv) in rstd.iter().enumerate().take(x.rows()) {
        let xr = x.row(r);
        let dyr = dy.row(r);
        let mut m = 0.0;
        for i in 0..d {
            let xhat = xr[i] * inv;
            dscale[i] += dyr[i] * xhat;
            dxhat[i] = dyr[i] * scale[i];
            m += dxhat[i] * xhat;
        }
        m /= d as f64;
        for (i, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o += (dxhat[i] - xr[i] * inv * m) * inv;
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn project(layer: &Layer, slot: Slot, x: &Matrix) -> Matrix {
    match layer {
        Layer::Dense(w) => mm(x, &w[slot]),
        Layer::LowRank(w) => {
            let f = &w[slot];
            mm(&mm(x, &f.a), &f.b)
        }
    }
}

/// Backward of `y = project(x)`: accumulates weight gradients into `grads`
/// and `dy · Wᵀ` into `dx`.
fn project_backward(layer: &Layer, l: usize, slot: Slot, x: &Matrix, dy: &Matrix, grads: &mut GradientSet, dx: &mut Matrix) {
    match layer {
        Layer::Dense(w) => {
            gemm(1.0, x, true, dy, false, 1.0, grads.get_mut(&ParamId::Dense(l, slot)));
            gemm(1.0, dy, false, &w[slot], true, 1.0, dx);
        }
        Layer::LowRank(w) => {
            let f = &w[slot];
            let xa = mm(x, &f.a);
            gemm(1.0, &xa, true, dy, false, 1.0, grads.get_mut(&ParamId::FactorB(l, slot)));
            let dxa = mm_nt(dy, &f.b);
            gemm(1.0, x, true, &dxa, false, 1.0, grads.get_mut(&ParamId::FactorA(l, slot)));
            gemm(1.0, &dxa, false, &f.a, true, 1.0, dx);
        }
    }
}

fn attention(config: &ModelConfig, q: &Matrix, k: &Matrix, v: &Matrix, spans: &[(usize, usize)]) -> (Matrix, Vec<Vec<f64>>) {
    let heads = config.n_heads;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut o = Matrix::zeros(q.rows(), q.cols());
    let mut probs = Vec::with_capacity(spans.len() * heads);
    for &(off, len) in spans {
        for h in 0..heads {
            let c0 = h * dh;
            let mut p = vec![0.0; len * len];
            for i in 0..len {
                let qi = &q.row(off + i)[c0..c0 + dh];
                let row = &mut p[i * len..i * len + i + 1];
                let mut mx = f64::NEG_INFINITY;
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &k.row(off + j)[c0..c0 + dh];
                    *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    mx = mx.max(*s);
                }
                let mut z = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - mx).exp();
                    z += *s;
                }
                for s in row.iter_mut() {
                    *s /= z;
                }
                let out = &mut o.row_mut(off + i)[c0..c0 + dh];
                for (j, &pij) in p[i * len..i * len + i + 1].iter().enumerate() {
                    let vj = &v.row(off + j)[c0..c0 + dh];
                    for (oc, vc) in out.iter_mut().zip(vj) {
                        *oc += pij * vc;
                    }
                }
            }
            probs.push(p);
        }
    }
    (o, probs)
}

fn attention_backward(config: &ModelConfig, cache: &BlockCache, d_o: &Matrix, spans: &[(usize, usize)]) -> (Matrix, Matrix, Matrix) {
    let heads = config.n_heads;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let (q, k, v) = (&cache.q, &cache.k, &cache.v);
    let mut dq = Matrix::zeros(q.rows(), q.cols());
    let mut dk = Matrix::zeros(q.rows(), q.cols());
    let mut dv = Matrix::zeros(q.rows(), q.cols());
    let mut ds = Vec::new();
    for (s, &(off, len)) in spans.iter().enumerate() {
        for h in 0..heads {
            let c0 = h * dh;
            let p = &cache.probs[s * heads + h];
            ds.clear();
            ds.resize(len * len, 0.0);
            for i in 0..len {
                let doi = &d_o.row(off + i)[c0..c0 + dh];
                let mut dot_pdp = 0.0;
                for j in 0..=i {
                    let pij = p[i * len + j];
                    let vj = &v.row(off + j)[c0..c0 + dh];
                    let dp: f64 = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    ds[i * len + j] = dp;
                    dot_pdp += pij * dp;
                    let dvj = &mut dv.row_mut(off + j)[c0..c0 + dh];
                    for (dst, g) in dvj.iter_mut().zip(doi) {
                        *dst += pij * g;
                    }
                }
                for j in 0..=i {
                    ds[i * len + j] = p[i * len + j] * (ds[i * len + j] - dot_pdp) * scale;
                }
            }
            for i in 0..len {
                for j in 0..=i {
                    let g = ds[i * len + j];
                    if g == 0.0 {
                        continue;
                    }
                    let kj = &k.row(off + j)[c0..c0 + dh];
                    let dqi = &mut dq.row_mut(off + i)[c0..c0 + dh];
                    for (dst, kv) in dqi.iter_mut().zip(kj) {
                        *dst += g * kv;
                    }
                    let qi = &q.row(off + i)[c0..c0 + dh];
                    let dkj = &mut dk.row_mut(off + j)[c0..c0 + dh];
                    for (dst, qv) in dkj.iter_mut().zip(qi) {
                        *dst += g * qv;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

fn block_forward(config: &ModelConfig, layer: &Layer, x: Matrix, spans: &[(usize, usize)]) -> (Matrix, BlockCache) {
    let (n1, rstd1) = rmsnorm(&x, layer.attn_norm());
    let q = project(layer, Slot::Wq, &n1);
    let k = project(layer, Slot::Wk, &n1);
    let v = project(layer, Slot::Wv, &n1);
    let (o, probs) = attention(config, &q, &k, &v, spans);
    let mut x1 = project(layer, Slot::Wo, &o);
    x1.axpy(1.0, &x);
    let (n2, rstd2) = rmsnorm(&x1, layer.mlp_norm());
    let gate = project(layer, Slot::WGate, &n2);
    let up = project(layer, Slot::WUp, &n2);
    let mut act = Matrix::zeros(gate.rows(), gate.cols());
    for ((a, &g), &u) in act.as_mut_slice().iter_mut().zip(gate.as_slice()).zip(up.as_slice()) {
        *a = g * sigmoid(g) * u;
    }
    let mut out = project(layer, Slot::WDown, &act);
    out.axpy(1.0, &x1);
    let cache = BlockCache { x_in: x, n1, rstd1, q, k, v, probs, o, x1, n2, rstd2, gate, up, act };
    (out, cache)
}

fn block_backward(config: &ModelConfig, layer: &Layer, l: usize, c: &BlockCache, dx_out: &Matrix, spans: &[(usize, usize)], grads: &mut GradientSet) -> Matrix {
    let rows = dx_out.rows();
    let mut d_act = Matrix::zeros(rows, config.d_ff);
    project_backward(layer, l, Slot::WDown, &c.act, dx_out, grads, &mut d_act);
    let mut d_gate = Matrix::zeros(rows, config.d_ff);
    let mut d_up = Matrix::zeros(rows, config.d_ff);
    for i in 0..d_act.len() {
        let g = c.gate.as_slice()[i];
        let u = c.up.as_slice()[i];
        let da = d_act.as_slice()[i];
        let sg = sigmoid(g);
        d_up.as_mut_slice()[i] = da * g * sg;
        d_gate.as_mut_slice()[i] = da * u * sg * (1.0 + g * (1.0 - sg));
    }
    let mut dn2 = Matrix::zeros(rows, config.d_model);
    project_backward(layer, l, Slot::WGate, &c.n2, &d_gate, grads, &mut dn2);
    project_backward(layer, l, Slot::WUp, &c.n2, &d_up, grads, &mut dn2);
    let mut dx1 = dx_out.clone();
    rmsnorm_backward(&c.x1, layer.mlp_norm(), &c.rstd2, &dn2, &mut dx1, grads.get_mut(&ParamId::MlpNorm(l)).as_mut_slice());

    let mut d_o = Matrix::zeros(rows, config.d_model);
    project_backward(layer, l, Slot::Wo, &c.o, &dx1, grads, &mut d_o);
    let (dq, dk, dv) = attention_backward(config, c, &d_o, spans);
    let mut dn1 = Matrix::zeros(rows, config.d_model);
    project_backward(layer, l, Slot::Wq, &c.n1, &dq, grads, &mut dn1);
    project_backward(layer, l, Slot::Wk, &c.n1, &dk, grads, &mut dn1);
    project_backward(layer, l, Slot::Wv, &c.n1, &dv, grads, &mut dn1);
    let mut dx = dx1;
    rmsnorm_backward(&c.x_in, layer.attn_norm(), &c.rstd1, &dn1, &mut dx, grads.get_mut(&ParamId::AttnNorm(l)).as_mut_slice());
    dx
}

/// Without `keep_caches` each block's activations are dropped as soon as
/// the next block has its input, so `Pass::blocks` is empty.
fn run(model: &TransformerModel, batch: &[TokenSequence], need_targets: bool, keep_caches: bool) -> Result<Pass> {
    let layout = Layout::new(&model.config, batch, need_targets)?;
    let mut x = embed(model, &layout);
    let mut blocks = Vec::with_capacity(if keep_caches { model.layers.len() } else { 0 });
    for layer in &model.layers {
        let (next, cache) = block_forward(&model.config, layer, x, &layout.spans);
        if keep_caches {
            blocks.push(cache);
        }
        x = next;
    }
    let (nf, rstdf) = rmsnorm(&x, &model.final_norm);
    let logits = mm_nt(&nf, &model.embedding);
    Ok(Pass { layout, blocks, x_final: x, nf, rstdf, logits })
}

/// Row-wise `log Σ exp`.
fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

fn nll_rows(logits: &Matrix, targets: &[(usize, u32)]) -> Vec<f64> {
    targets
        .iter()
        .map(|&(r, y)| {
            let row = logits.row(r);
            log_sum_exp(row) - row[y as usize]
        })
        .collect()
}

/// Mean over rows of `-log softmax(logits[i])[targets[i]]`.
pub fn lm_loss(logits: &Matrix, targets: &[u32]) -> Result<f64> {
    if logits.rows() != targets.len() || targets.is_empty() {
        return Err(GraspError::Shape {
            op: "lm_loss",
            lhs: logits.shape(),
            rhs: (targets.len(), 1),
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= logits.cols()) {
        return Err(GraspError::validation(format!("target {bad} out of range")));
    }
    let pairs: Vec<(usize, u32)> = targets.iter().copied().enumerate().collect();
    Ok(nll_rows(logits, &pairs).iter().sum::<f64>() / targets.len() as f64)
}

pub fn forward(model: &TransformerModel, batch: &[TokenSequence]) -> Result<ForwardTrace> {
    let pass = run(model, batch, true, true)?;
    let nll = nll_rows(&pass.logits, &pass.layout.targets);
    let loss = nll.iter().sum::<f64>() / nll.len() as f64;
    let mut hidden_states: Vec<Matrix> = pass.blocks.iter().map(|b| b.x_in.clone()).collect();
    hidden_states.push(pass.x_final);
    let layers = hidden_states
        .windows(2)
        .map(|w| LayerTrace { h_in: column_mean(&w[0]), h_out: column_mean(&w[1]) })
        .collect();
    Ok(ForwardTrace {
        layers,
        hidden_states,
        logits: pass.logits,
        loss,
        target_count: pass.layout.targets.len(),
    })
}

fn column_mean(x: &Matrix) -> Vec<f64> {
    let mut m = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (a, b) in m.iter_mut().zip(x.row(r)) {
            *a += b;
        }
    }
    let n = x.rows() as f64;
    m.iter_mut().for_each(|v| *v /= n);
    m
}

/// Loss and exact gradients of the mean next-token NLL.
pub fn loss_and_gradients(model: &TransformerModel, batch: &[TokenSequence]) -> Result<(f64, GradientSet)> {
    let pass = run(model, batch, true, true)?;
    let cfg = &model.config;
    let targets = &pass.layout.targets;
    let count = targets.len() as f64;
    let mut loss = 0.0;
    let mut dlogits = Matrix::zeros(pass.logits.rows(), pass.logits.cols());
    for &(r, y) in targets {
        let row = pass.logits.row(r);
        let lse = log_sum_exp(row);
        loss += lse - row[y as usize];
        for (d, &z) in dlogits.row_mut(r).iter_mut().zip(row) {
            *d = (z - lse).exp() / count;
        }
        dlogits.row_mut(r)[y as usize] -= 1.0 / count;
    }
    loss /= count;

    let mut grads = GradientSet::zeros_like(model);
    gemm(1.0, &dlogits, true, &pass.nf, false, 1.0, grads.get_mut(&ParamId::Embedding));
    let dnf = mm(&dlogits, &model.embedding);
    let mut dx = Matrix::zeros(pass.x_final.rows(), cfg.d_model);
    rmsnorm_backward(&pass.x_final, &model.final_norm, &pass.rstdf, &dnf, &mut dx, grads.get_mut(&ParamId::FinalNorm).as_mut_slice());
    for (l, (layer, cache)) in model.layers.iter().zip(&pass.blocks).enumerate().rev() {
        dx = block_backward(cfg, layer, l, cache, &dx, &pass.layout.spans, &mut grads);
    }
    let de = grads.get_mut(&ParamId::Embedding);
    for (row, &tok) in pass.layout.tokens.iter().enumerate() {
        for (d, g) in de.row_mut(tok as usize).iter_mut().zip(dx.row(row)) {
            *d += g;
        }
    }
    if !grads.is_finite() {
        return Err(GraspError::NonFinite("gradients".into()));
    }
    Ok((loss, grads))
}

pub fn backward(model: &TransformerModel, batch: &[TokenSequence]) -> Result<GradientSet> {
    loss_and_gradients(model, batch).map(|(_, g)| g)
}

/// Logits for every position without keeping a trace. Sequences of length
/// one are accepted since no targets are needed.
pub fn infer_logits(model: &TransformerModel, batch: &[TokenSequence]) -> Result<Matrix> {
    run(model, batch, false, false).map(|p| p.logits)
}

/// Next-token NLL at every target position, in batch order.
pub fn per_token_nll(model: &TransformerModel, batch: &[TokenSequence]) -> Result<Vec<f64>> {
    let pass = run(model, batch, true, false)?;
    Ok(nll_rows(&pass.logits, &pass.layout.targets))
}

/// Token-weighted mean NLL over `samples`, evaluated `batch_size` at a time.
pub fn mean_loss(model: &TransformerModel, samples: &[TokenSequence], batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(GraspError::validation("no samples to evaluate"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let nll = per_token_nll(model, chunk)?;
        total += nll.iter().sum::<f64>();
        count += nll.len();
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, Slot};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> TransformerModel {
        let cfg = ModelConfig { vocab_size: 16, d_model: 8, n_layers: 2, n_heads: 2, d_ff: 12, max_seq_len: 10, seed: 5 };
        init_model(&cfg).unwrap()
    }

    fn seqs(rng: &mut ChaCha8Rng, n: usize, len: usize, vocab: u32) -> Vec<TokenSequence> {
        (0..n)
            .map(|_| TokenSequence::new((0..len).map(|_| rng.random_range(0..vocab)).collect()))
            .collect()
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut m = init_model(&ModelConfig { n_layers: 2, ..Default::default() }).unwrap();
        for layer in &mut m.layers {
            if let Layer::Dense(w) = layer {
                for s in Slot::ALL {
                    w[s] = Matrix::zeros(w[s].rows(), w[s].cols());
                }
            }
        }
        m.final_norm.iter_mut().for_each(|g| *g = 0.0);
        let batch = vec![TokenSequence::new(vec![1, 2, 3, 200, 7])];
        let t = forward(&m, &batch).unwrap();
        assert!((t.loss - 256f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn lm_loss_examples() {
        let flat = Matrix::zeros(1, 256);
        assert!((lm_loss(&flat, &[3]).unwrap() - 5.545177444479562).abs() < 1e-12);
        let mut spike = Matrix::zeros(1, 256);
        spike.set(0, 9, 1000.0);
        assert!(lm_loss(&spike, &[9]).unwrap() < 1e-12);

        // Scalar recomputation of a 3-token case.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = Matrix::from_fn(3, 5, |_, _| rng.random_range(-3.0..3.0));
        let targets = [4u32, 0, 2];
        let mut want = 0.0;
        for (r, &y) in targets.iter().enumerate() {
            let z: f64 = (0..5).map(|j| logits.get(r, j).exp()).sum();
            want -= (logits.get(r, y as usize).exp() / z).ln();
        }
        want /= 3.0;
        assert!((lm_loss(&logits, &targets).unwrap() - want).abs() < 1e-12);
        assert!(lm_loss(&logits, &[1]).is_err());
    }

    #[test]
    fn short_and_out_of_range_sequences_rejected() {
        let m = tiny();
        assert!(forward(&m, &[TokenSequence::new(vec![3])]).is_err());
        assert!(forward(&m, &[TokenSequence::new(vec![3, 16])]).is_err());
        assert!(forward(&m, &[TokenSequence::new(vec![1; 11])]).is_err());
        assert!(forward(&m, &[]).is_err());
        // Two tokens: exactly one target.
        let t = forward(&m, &[TokenSequence::new(vec![3, 4])]).unwrap();
        assert_eq!(t.target_count, 1);
        let logits = infer_logits(&m, &[TokenSequence::new(vec![3])]).unwrap();
        assert_eq!(logits.shape(), (1, 16));
    }

    #[test]
    fn trace_chains_and_causality() {
        let m = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut batch = seqs(&mut rng, 1, 8, 16);
        let t = forward(&m, &batch).unwrap();
        assert_eq!(t.layers.len(), 2);
        assert_eq!(t.layers[0].h_out, t.layers[1].h_in);
        assert_eq!(t.hidden_states.len(), 3);

        let mut ids = batch[0].ids().to_vec();
        ids[5] = (ids[5] + 1) % 16;
        batch[0] = TokenSequence::new(ids);
        let t2 = forward(&m, &batch).unwrap();
        for r in 0..5 {
            assert_eq!(t.logits.row(r), t2.logits.row(r));
        }
        assert_ne!(t.logits.row(5), t2.logits.row(5));
    }

    #[test]
    fn duplicated_item_keeps_mean_gradient() {
        let m = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let one = seqs(&mut rng, 1, 7, 16);
        let two = vec![one[0].clone(), one[0].clone()];
        let g1 = backward(&m, &one).unwrap();
        let g2 = backward(&m, &two).unwrap();
        for (id, a) in g1.iter() {
            let b = g2.get(id).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((x - y).abs() <= 1e-12, "{id}");
            }
        }
    }

    #[test]
    fn gradient_keys_cover_matrices() {
        let m = tiny();
        let g = backward(&m, &[TokenSequence::new(vec![1, 2, 3])]).unwrap();
        let keys: Vec<ParamId> = g.matrices().map(|(k, _)| *k).collect();
        let mut want = m.matrix_ids();
        want.sort();
        assert_eq!(keys, want);
        for (id, grad) in g.iter() {
            assert_eq!(grad.shape(), m.param_shape(id));
        }
    }

    #[test]
    fn deterministic_loss_and_gradients() {
        let m = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = seqs(&mut rng, 3, 9, 16);
        let (l1, g1) = loss_and_gradients(&m, &batch).unwrap();
        let (l2, g2) = loss_and_gradients(&m, &batch).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, g2);
        assert_eq!(forward(&m, &batch).unwrap().loss.to_bits(), l1.to_bits());
    }
}
