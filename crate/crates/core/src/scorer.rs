//! Symmetric text similarity used by the semantic alignment constraint.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::providers::EmbeddingProvider;
use crate::text::tokenize;
use crate::{Error, Result};

/// Default embedding dimension.
pub const DEFAULT_EMBEDDING_DIM: usize = 200;

/// Similarity in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct SimilarityScore(f64);

impl SimilarityScore {
    pub fn new(value: f64) -> Self {
        Self(value.clamp(0.0, 1.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

pub trait SimilarityScorer: Send + Sync {
    fn score(&self, a: &str, b: &str) -> Result<SimilarityScore>;
}

impl<T: SimilarityScorer + ?Sized> SimilarityScorer for &T {
    fn score(&self, a: &str, b: &str) -> Result<SimilarityScore> {
        (**self).score(a, b)
    }
}

impl<T: SimilarityScorer + ?Sized> SimilarityScorer for std::sync::Arc<T> {
    fn score(&self, a: &str, b: &str) -> Result<SimilarityScore> {
        (**self).score(a, b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScorerKind {
    EmbeddingCosine { dimension: usize },
    TokenOverlap,
}

impl Default for ScorerKind {
    fn default() -> Self {
        ScorerKind::EmbeddingCosine { dimension: DEFAULT_EMBEDDING_DIM }
    }
}

/// F1 of the token multiset overlap between two strings.
pub fn token_overlap_f1(a: &str, b: &str) -> f64 {
    let ta = tokenize(a).tokens;
    let tb = tokenize(b).tokens;
    if ta.is_empty() && tb.is_empty() {
        return 1.0;
    }
    if ta.is_empty() || tb.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &ta {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &tb {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    2.0 * common as f64 / (ta.len() + tb.len()) as f64
}

/// Deterministic offline scorer.
#[derive(Clone, Copy, Debug, Default)]
pub struct TokenOverlapScorer;

impl SimilarityScorer for TokenOverlapScorer {
    fn score(&self, a: &str, b: &str) -> Result<SimilarityScore> {
        Ok(SimilarityScore::new(token_overlap_f1(a, b)))
    }
}

/// Embeds `text` and checks the returned length.
pub fn embed<E: EmbeddingProvider + ?Sized>(provider: &E, text: &str, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::InvalidConfig("embedding dimension must be positive".into()));
    }
    let v = provider.embed_raw(text, dim)?;
    if v.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: v.len() });
    }
    Ok(v)
}

/// Raw cosine similarity in `[-1, 1]`. Zero vectors score 0.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Cosine of provider embeddings, mapped from `[-1, 1]` onto `[0, 1]`.
/// Embeddings are cached per text.
pub struct EmbeddingCosineScorer<E> {
    embedder: E,
    dim: usize,
    cache: Mutex<HashMap<String, Vec<f64>>>,
}

impl<E: EmbeddingProvider> EmbeddingCosineScorer<E> {
    pub fn new(embedder: E, dim: usize) -> Self {
        Self { embedder, dim, cache: Mutex::new(HashMap::new()) }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedding(&self, text: &str) -> Result<Vec<f64>> {
        if let Some(v) = self.cache.lock().unwrap().get(text) {
            return Ok(v.clone());
        }
        let v = embed(&self.embedder, text, self.dim)?;
        self.cache.lock().unwrap().insert(text.to_string(), v.clone());
        Ok(v)
    }

    /// Unscaled cosine in `[-1, 1]`.
    pub fn raw_cosine(&self, a: &str, b: &str) -> Result<f64> {
        cosine(&self.embedding(a)?, &self.embedding(b)?)
    }
}

impl<E: EmbeddingProvider> SimilarityScorer for EmbeddingCosineScorer<E> {
    fn score(&self, a: &str, b: &str) -> Result<SimilarityScore> {
        Ok(SimilarityScore::new((self.raw_cosine(a, b)? + 1.0) / 2.0))
    }
}
