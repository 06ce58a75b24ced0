//! Perplexity, forward throughput and singular-group sensitivity reports.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TokenSequence;
use crate::error::{GraspError, Result};
use crate::model::{infer_logits, mean_loss, per_token_nll, Layer, ModelConfig, Slot, TransformerModel};
use crate::numerics::{mm, svd, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub perplexity: f64,
    pub mean_nll: f64,
    pub token_count: usize,
    pub model_checksum: String,
    pub config_digest: String,
}

pub fn config_digest(config: &ModelConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    format!("{:016x}", xxhash_rust::xxh64::xxh64(&json, 0))
}

/// Splits each document into windows of at most `max_len` tokens that
/// overlap by one, so every token after a document's first is predicted
/// exactly once. Documents shorter than two tokens contribute nothing.
pub fn evaluation_windows(documents: &[TokenSequence], max_len: usize) -> Vec<TokenSequence> {
    let step = max_len.max(2) - 1;
    let mut out = Vec::new();
    for doc in documents {
        let mut start = 0;
        while start + 1 < doc.len() {
            let end = (start + step + 1).min(doc.len());
            out.push(doc.slice(start, end));
            start += step;
        }
    }
    out
}

/// `exp` of the token-mean next-token NLL over `documents` under teacher
/// forcing.
pub fn perplexity(model: &TransformerModel, documents: &[TokenSequence], batch_size: usize) -> Result<EvalReport> {
    let windows = evaluation_windows(documents, model.config.max_seq_len);
    if windows.is_empty() {
        return Err(GraspError::validation("evaluation text has fewer than 2 tokens"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in windows.chunks(batch_size.max(1)) {
        let nll = per_token_nll(model, chunk)?;
        total += nll.iter().sum::<f64>();
        count += nll.len();
    }
    let mean_nll = total / count as f64;
    let perplexity = mean_nll.exp();
    if !perplexity.is_finite() {
        return Err(GraspError::NonFinite(format!("perplexity from mean NLL {mean_nll}")));
    }
    Ok(EvalReport {
        perplexity,
        mean_nll,
        token_count: count,
        model_checksum: model.checksum_hex(),
        config_digest: config_digest(&model.config),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThroughputConfig {
    pub batch_sizes: Vec<usize>,
    pub seq_lens: Vec<usize>,
    pub warmup: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for ThroughputConfig {
    fn default() -> Self {
        Self { batch_sizes: vec![1, 8, 32], seq_lens: vec![32, 64], warmup: 2, iters: 20, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputCell {
    pub batch_size: usize,
    pub seq_len: usize,
    pub median_seconds: f64,
    pub tokens_per_second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    /// Row-major over `batch_sizes x seq_lens`.
    pub cells: Vec<ThroughputCell>,
    pub batch_sizes: Vec<usize>,
    pub seq_lens: Vec<usize>,
    pub warmup: usize,
    pub iters: usize,
    pub hardware: String,
    pub model_checksum: String,
}

impl ThroughputReport {
    pub fn cell(&self, batch_size: usize, seq_len: usize) -> Option<&ThroughputCell> {
        self.cells.iter().find(|c| c.batch_size == batch_size && c.seq_len == seq_len)
    }
}

fn hardware_note() -> String {
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{}-{}, {threads} hardware threads, timed single-threaded", std::env::consts::ARCH, std::env::consts::OS)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median tokens per second of inference forward passes for every
/// `(batch_size, seq_len)` cell, on seeded random token ids.
pub fn throughput_benchmark(model: &TransformerModel, config: &ThroughputConfig) -> Result<ThroughputReport> {
    if config.iters == 0 || config.warmup == 0 {
        return Err(GraspError::validation("throughput needs iters >= 1 and warmup >= 1"));
    }
    if config.batch_sizes.is_empty() || config.seq_lens.is_empty() || config.batch_sizes.contains(&0) {
        return Err(GraspError::validation("throughput grid axes must be non-empty and positive"));
    }
    if let Some(&bad) = config.seq_lens.iter().find(|&&s| s == 0 || s > model.config.max_seq_len) {
        return Err(GraspError::validation(format!("seq_len {bad} not in [1, {}]", model.config.max_seq_len)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vocab = model.config.vocab_size as u32;
    let mut cells = Vec::new();
    for &b in &config.batch_sizes {
        for &s in &config.seq_lens {
            let batch: Vec<TokenSequence> = (0..b)
                .map(|_| TokenSequence::new((0..s).map(|_| rng.random_range(0..vocab)).collect()))
                .collect();
            for _ in 0..config.warmup {
                std::hint::black_box(infer_logits(model, &batch)?);
            }
            let mut times = Vec::with_capacity(config.iters);
            for _ in 0..config.iters {
                let t = Instant::now();
                std::hint::black_box(infer_logits(model, &batch)?);
                times.push(t.elapsed().as_secs_f64());
            }
            let median_seconds = median(times).max(1e-9);
            cells.push(ThroughputCell {
                batch_size: b,
                seq_len: s,
                median_seconds,
                tokens_per_second: (b * s) as f64 / median_seconds,
            });
        }
    }
    Ok(ThroughputReport {
        cells,
        batch_sizes: config.batch_sizes.clone(),
        seq_lens: config.seq_lens.clone(),
        warmup: config.warmup,
        iters: config.iters,
        hardware: hardware_note(),
        model_checksum: model.checksum_hex(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketDelta {
    pub bucket_start: usize,
    /// Exclusive.
    pub bucket_end: usize,
    pub sigma_sum: f64,
    pub loss_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub layer: usize,
    pub matrix: Slot,
    pub bucket_size: usize,
    /// Always `per_bucket`: one bucket zeroed at a time, the rest intact.
    pub protocol: String,
    pub baseline_loss: f64,
    pub buckets: Vec<BucketDelta>,
    /// Rank correlation of bucket singular-value mass against loss delta;
    /// `None` when either side is constant.
    pub spearman: Option<f64>,
    pub model_checksum: String,
}

pub const SENSITIVITY_CSV_HEADER: &str = "layer,matrix,bucket_start,bucket_end,loss_delta";

pub fn write_sensitivity_csv<'a>(reports: impl IntoIterator<Item = &'a SensitivityReport>, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{SENSITIVITY_CSV_HEADER}")?;
    for r in reports {
        for b in &r.buckets {
            writeln!(out, "{},{},{},{},{:e}", r.layer, r.matrix, b.bucket_start, b.bucket_end, b.loss_delta)?;
        }
    }
    Ok(())
}

pub fn default_bucket_size(l: usize) -> usize {
    (l / 16).max(1)
}

/// Average ranks, 1-based; ties share the mean of their positions.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

fn dense_matrix(model: &TransformerModel, layer: usize, slot: Slot) -> Result<&Matrix> {
    match model.layers.get(layer) {
        Some(Layer::Dense(w)) => Ok(&w[slot]),
        Some(Layer::LowRank(_)) => Err(GraspError::validation(format!("layer {layer} is not dense"))),
        None => Err(GraspError::validation(format!("layer {layer} out of range"))),
    }
}

/// Calibration loss with groups `start..end` of `layer.slot` removed. The
/// input model is never modified; an empty range returns the baseline.
pub fn zeroed_bucket_loss(
    model: &TransformerModel,
    layer: usize,
    slot: Slot,
    start: usize,
    end: usize,
    samples: &[TokenSequence],
    batch_size: usize,
) -> Result<f64> {
    let w = dense_matrix(model, layer, slot)?;
    let f = svd(w)?;
    if start > end || end > f.rank_limit() {
        return Err(GraspError::validation(format!("bucket {start}..{end} out of range for l = {}", f.rank_limit())));
    }
    let mut m = model.clone();
    if start < end {
        if let Layer::Dense(lw) = &mut m.layers[layer] {
            lw[slot] = w.sub(&bucket_component(&f, start, end))?;
        }
    }
    mean_loss(&m, samples, batch_size)
}

/// `Σ_{k in start..end} u_k σ_k v_kᵀ`.
fn bucket_component(f: &crate::numerics::SvdFactors, start: usize, end: usize) -> Matrix {
    let us = Matrix::from_fn(f.m(), end - start, |i, c| f.u.get(i, start + c) * f.sigma[start + c]);
    let vt = Matrix::from_fn(end - start, f.n(), |r, j| f.v.get(j, start + r));
    mm(&us, &vt)
}

/// Zeroes each contiguous bucket of singular groups of one dense matrix in
/// turn and records the calibration-loss change. Buckets run in parallel on
/// cloned models.
pub fn sensitivity_sweep(
    model: &TransformerModel,
    layer: usize,
    slot: Slot,
    bucket_size: Option<usize>,
    samples: &[TokenSequence],
    batch_size: usize,
) -> Result<SensitivityReport> {
    let w = dense_matrix(model, layer, slot)?;
    let f = svd(w)?;
    let l = f.rank_limit();
    let bucket = bucket_size.unwrap_or_else(|| default_bucket_size(l));
    if bucket == 0 || bucket > l {
        return Err(GraspError::validation(format!("bucket size {bucket} not in [1, {l}]")));
    }
    let baseline_loss = mean_loss(model, samples, batch_size)?;
    let ranges: Vec<(usize, usize)> = (0..l).step_by(bucket).map(|s| (s, (s + bucket).min(l))).collect();
    let buckets = ranges
        .par_iter()
        .map(|&(s, e)| {
            let mut m = model.clone();
            if let Layer::Dense(lw) = &mut m.layers[layer] {
                lw[slot] = w.sub(&bucket_component(&f, s, e))?;
            }
            let loss = mean_loss(&m, samples, batch_size)?;
            Ok(BucketDelta {
                bucket_start: s,
                bucket_end: e,
                sigma_sum: f.sigma[s..e].iter().sum(),
                loss_delta: loss - baseline_loss,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let sig: Vec<f64> = buckets.iter().map(|b| b.sigma_sum).collect();
    let del: Vec<f64> = buckets.iter().map(|b| b.loss_delta).collect();
    Ok(SensitivityReport {
        layer,
        matrix: slot,
        bucket_size: bucket,
        protocol: "per_bucket".into(),
        baseline_loss,
        buckets,
        spearman: spearman(&sig, &del),
        model_checksum: model.checksum_hex(),
    })
}

/// Sweeps all seven matrices of `layer`.
pub fn sensitivity_sweep_layer(
    model: &TransformerModel,
    layer: usize,
    bucket_size: Option<usize>,
    samples: &[TokenSequence],
    batch_size: usize,
) -> Result<Vec<SensitivityReport>> {
    Slot::ALL
        .into_iter()
        .map(|slot| sensitivity_sweep(model, layer, slot, bucket_size, samples, batch_size))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn tiny() -> TransformerModel {
        init_model(&ModelConfig { vocab_size: 16, d_model: 8, n_layers: 2, n_heads: 2, d_ff: 12, max_seq_len: 6, seed: 2 }).unwrap()
    }

    #[test]
    fn windows_predict_each_token_once() {
        let doc = TokenSequence::new((0..14).collect());
        let w = evaluation_windows(&[doc, TokenSequence::new(vec![3])], 6);
        let targets: usize = w.iter().map(|s| s.len() - 1).sum();
        assert_eq!(targets, 13);
        assert!(w.iter().all(|s| s.len() >= 2 && s.len() <= 6));
        assert_eq!(w[1].ids()[0], 5);
    }

    #[test]
    fn spearman_cases() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]), None);
        // Ties: ranks [1.5, 1.5, 3] vs [1, 2, 3].
        let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r - 0.8660254037844386).abs() < 1e-12);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 0.0]), vec![3.5, 2.0, 3.5, 1.0]);
    }

    #[test]
    fn full_bucket_equals_zeroed_matrix_and_sweep_is_pure() {
        let m = tiny();
        let samples = vec![TokenSequence::new(vec![1, 4, 2, 9, 3]), TokenSequence::new(vec![7, 7, 0, 15])];
        let before = m.checksum();
        let r = sensitivity_sweep(&m, 1, Slot::Wq, Some(8), &samples, 4).unwrap();
        assert_eq!(r.buckets.len(), 1);
        let mut z = m.clone();
        if let Layer::Dense(w) = &mut z.layers[1] {
            w[Slot::Wq] = Matrix::zeros(8, 8);
        }
        let expect = mean_loss(&z, &samples, 4).unwrap() - r.baseline_loss;
        assert!((r.buckets[0].loss_delta - expect).abs() < 1e-12);
        assert_eq!(m.checksum(), before);
        assert_eq!(zeroed_bucket_loss(&m, 1, Slot::Wq, 3, 3, &samples, 4).unwrap(), r.baseline_loss);
        assert!(sensitivity_sweep(&m, 1, Slot::Wq, Some(9), &samples, 4).is_err());
        let r = sensitivity_sweep(&m, 0, Slot::WDown, None, &samples, 4).unwrap();
        assert_eq!(r.buckets.len(), 8);
        let mut csv = Vec::new();
        write_sensitivity_csv([&r], &mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with(SENSITIVITY_CSV_HEADER));
    }

    #[test]
    fn throughput_grid_shape() {
        let m = tiny();
        let cfg = ThroughputConfig { batch_sizes: vec![1, 2], seq_lens: vec![3, 4, 6], warmup: 1, iters: 3, seed: 0 };
        let r = throughput_benchmark(&m, &cfg).unwrap();
        assert_eq!(r.cells.len(), 6);
        assert!(r.cells.iter().all(|c| c.tokens_per_second > 0.0));
        assert!(throughput_benchmark(&m, &ThroughputConfig { seq_lens: vec![7], ..cfg.clone() }).is_err());
        assert!(throughput_benchmark(&m, &ThroughputConfig { iters: 0, ..cfg }).is_err());
    }
}
