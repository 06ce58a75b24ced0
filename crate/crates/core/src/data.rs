//! Byte-level tokenization, corpus handling and calibration sampling.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GraspError, Result};

pub const BYTE_VOCAB: usize = 256;
/// Separates documents inside a corpus file; windows never straddle it.
pub const DOCUMENT_BOUNDARY: &str = "<|endoftext|>";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        Self { ids }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn slice(&self, start: usize, end: usize) -> TokenSequence {
        TokenSequence::new(self.ids[start..end].to_vec())
    }
}

pub fn tokenize(text: &[u8]) -> TokenSequence {
    TokenSequence::new(text.iter().map(|&b| u32::from(b)).collect())
}

/// Inverse of [`tokenize`]; ids above 255 are a validation error.
pub fn detokenize(tokens: &TokenSequence) -> Result<Vec<u8>> {
    tokens
        .ids
        .iter()
        .map(|&t| u8::try_from(t).map_err(|_| GraspError::validation(format!("token {t} is not a byte"))))
        .collect()
}

/// A tokenized text split into documents.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub documents: Vec<TokenSequence>,
}

impl Corpus {
    pub fn from_bytes(name: impl Into<String>, bytes: &[u8]) -> Self {
        let marker = DOCUMENT_BOUNDARY.as_bytes();
        let mut documents = Vec::new();
        let mut start = 0;
        let mut i = 0;
        while i + marker.len() <= bytes.len() {
            if &bytes[i..i + marker.len()] == marker {
                documents.push(tokenize(&bytes[start..i]));
                i += marker.len();
                start = i;
            } else {
                i += 1;
            }
        }
        documents.push(tokenize(&bytes[start..]));
        documents.retain(|d| !d.is_empty());
        Self { name: name.into(), documents }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| GraspError::Data(format!("cannot read corpus {}: {e}", path.display())))?;
        Ok(Self::from_bytes(path.display().to_string(), &bytes))
    }

    pub fn token_count(&self) -> usize {
        self.documents.iter().map(TokenSequence::len).sum()
    }

    /// Splits every document at `1 - heldout_fraction` of its length,
    /// returning `(train, heldout)`.
    pub fn split(&self, heldout_fraction: f64) -> Result<(Corpus, Corpus)> {
        if !(0.0..1.0).contains(&heldout_fraction) {
            return Err(GraspError::validation(format!("heldout fraction {heldout_fraction} not in [0, 1)")));
        }
        let mut train = Vec::new();
        let mut held = Vec::new();
        for d in &self.documents {
            let cut = ((d.len() as f64) * (1.0 - heldout_fraction)).round() as usize;
            if cut > 0 {
                train.push(d.slice(0, cut));
            }
            if cut < d.len() {
                held.push(d.slice(cut, d.len()));
            }
        }
        Ok((
            Corpus { name: format!("{}[train]", self.name), documents: train },
            Corpus { name: format!("{}[heldout]", self.name), documents: held },
        ))
    }

    /// `(document, start)` of every window of `seq_len` tokens.
    fn window_count(&self, seq_len: usize) -> usize {
        self.documents.iter().map(|d| (d.len() + 1).saturating_sub(seq_len)).sum()
    }

    fn window(&self, mut index: usize, seq_len: usize) -> TokenSequence {
        for d in &self.documents {
            let n = (d.len() + 1).saturating_sub(seq_len);
            if index < n {
                return d.slice(index, index + seq_len);
            }
            index -= n;
        }
        unreachable!("window index in range")
    }

    /// `n` windows drawn uniformly (with replacement) from all in-document
    /// windows of `seq_len` tokens.
    pub fn sample_windows(&self, n: usize, seq_len: usize, rng: &mut impl Rng) -> Result<Vec<TokenSequence>> {
        if seq_len < 2 {
            return Err(GraspError::validation("windows need at least 2 tokens"));
        }
        let total = self.window_count(seq_len);
        if total == 0 {
            return Err(GraspError::Data(format!(
                "corpus `{}` has no window of {seq_len} tokens",
                self.name
            )));
        }
        Ok((0..n).map(|_| self.window(rng.random_range(0..total), seq_len)).collect())
    }

    /// All tokens of every document, concatenated. Used by evaluation, which
    /// windows each document separately via [`Corpus::documents`].
    pub fn concatenated(&self) -> TokenSequence {
        TokenSequence::new(self.documents.iter().flat_map(|d| d.ids().iter().copied()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub samples: Vec<TokenSequence>,
    pub source_name: String,
    pub sample_count: usize,
    pub seed: u64,
}

impl CalibrationSet {
    pub fn new(samples: Vec<TokenSequence>, source_name: impl Into<String>, seed: u64) -> Result<Self> {
        if let Some(s) = samples.iter().position(|s| s.len() < 2) {
            return Err(GraspError::validation(format!("calibration sample {s} shorter than 2 tokens")));
        }
        Ok(Self { sample_count: samples.len(), samples, source_name: source_name.into(), seed })
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn batches(&self, batch_size: usize) -> std::slice::Chunks<'_, TokenSequence> {
        self.samples.chunks(batch_size.max(1))
    }
}

pub fn sample_calibration(corpus: &Corpus, n: usize, seq_len: usize, seed: u64) -> Result<CalibrationSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = corpus.sample_windows(n, seq_len, &mut rng)?;
    CalibrationSet::new(samples, corpus.name.clone(), seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ascii_and_empty() {
        assert_eq!(tokenize(b"AB").ids(), &[65, 66]);
        assert!(tokenize(b"").is_empty());
        assert!(detokenize(&TokenSequence::new(vec![256])).is_err());
    }

    proptest! {
        #[test]
        fn byte_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            prop_assert_eq!(detokenize(&tokenize(&bytes)).unwrap(), bytes);
        }
    }

    fn toy() -> Corpus {
        let text = "abcdefghij<|endoftext|>0123456789ABCDEF";
        Corpus::from_bytes("toy", text.as_bytes())
    }

    #[test]
    fn boundaries_split_documents() {
        let c = toy();
        assert_eq!(c.documents.len(), 2);
        assert_eq!(c.token_count(), 26);
        // Windows live entirely inside one document.
        let cal = sample_calibration(&c, 200, 8, 9).unwrap();
        for s in &cal.samples {
            let bytes = detokenize(s).unwrap();
            let letters = bytes.iter().all(|b| b.is_ascii_lowercase());
            let other = bytes.iter().all(|b| b.is_ascii_digit() || b.is_ascii_uppercase());
            assert!(letters || other, "{:?}", String::from_utf8_lossy(&bytes));
        }
    }

    #[test]
    fn calibration_is_seeded() {
        let c = toy();
        let a = sample_calibration(&c, 64, 5, 1).unwrap();
        let b = sample_calibration(&c, 64, 5, 1).unwrap();
        let d = sample_calibration(&c, 64, 5, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.samples, d.samples);
        assert_eq!(a.sample_count, 64);
    }

    #[test]
    fn too_short_corpus() {
        let c = toy();
        assert!(matches!(sample_calibration(&c, 4, 17, 0), Err(GraspError::Data(_))));
    }

    #[test]
    fn split_keeps_all_tokens() {
        let c = toy();
        let (tr, he) = c.split(0.2).unwrap();
        assert_eq!(tr.token_count() + he.token_count(), c.token_count());
        assert_eq!(he.token_count(), 2 + 3);
    }
}
