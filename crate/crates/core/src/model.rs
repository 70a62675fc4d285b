//! Learnable parameters and the forward pass.
//!
//! A word occurrence's topic distribution depends on the word alone:
//! `P(Z = k | w) = softmax(W · e_w + b)_k`. A document's topic distribution is
//! the mean of its word distributions, counted with multiplicity.

use std::ops::Deref;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::scalar::{dot, softmax_into, Scalar};

/// A length-K probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicDist<T>(Vec<T>);

impl<T: Scalar> TopicDist<T> {
    /// Wraps `probs` after checking non-negativity and unit mass (tolerance
    /// scales with the type's epsilon so `f32` distributions are accepted).
    pub fn new(probs: Vec<T>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidConfig("topic distribution must be non-empty".into()));
        }
        let total: T = probs.iter().copied().sum();
        let tol = T::of(1e-9).max(T::epsilon() * T::of_usize(16 * probs.len()));
        if probs.iter().any(|&p| !(p >= T::zero())) || (total - T::one()).abs() > tol {
            return Err(Error::InvalidConfig(format!(
                "not a probability vector (sum {total})"
            )));
        }
        Ok(Self(probs))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![T::one() / T::of_usize(k); k])
    }

    /// Index of the largest probability; ties go to the smallest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.0.iter().enumerate().skip(1) {
            if p > self.0[best] {
                best = k;
            }
        }
        best
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

impl<T> Deref for TopicDist<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.0
    }
}

/// Embedding table (V×d), topic projection (K×d) and topic bias (K), all
/// stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    vocab_size: usize,
    dim: usize,
    topics: usize,
    pub embeddings: Vec<T>,
    pub topic_weights: Vec<T>,
    pub topic_bias: Vec<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(vocab_size: usize, dim: usize, topics: usize) -> Result<Self> {
        for (name, v) in [("vocab_size", vocab_size), ("dim", dim), ("topics", topics)] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        Ok(Self {
            vocab_size,
            dim,
            topics,
            embeddings: vec![T::zero(); vocab_size * dim],
            topic_weights: vec![T::zero(); topics * dim],
            topic_bias: vec![T::zero(); topics],
        })
    }

    /// Assembles parameters from flat row-major buffers.
    pub fn from_parts(
        vocab_size: usize,
        dim: usize,
        topics: usize,
        embeddings: Vec<T>,
        topic_weights: Vec<T>,
        topic_bias: Vec<T>,
    ) -> Result<Self> {
        let mut params = Self::zeros(vocab_size, dim, topics)?;
        for (what, got, want) in [
            ("embedding buffer", embeddings.len(), vocab_size * dim),
            ("topic weight buffer", topic_weights.len(), topics * dim),
            ("topic bias", topic_bias.len(), topics),
        ] {
            if got != want {
                return Err(Error::DimensionMismatch {
                    what,
                    found: got,
                    expected: want,
                });
            }
        }
        params.embeddings = embeddings;
        params.topic_weights = topic_weights;
        params.topic_bias = topic_bias;
        Ok(params)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn topics(&self) -> usize {
        self.topics
    }

    pub fn embedding(&self, word: usize) -> &[T] {
        &self.embeddings[word * self.dim..(word + 1) * self.dim]
    }

    pub fn topic_row(&self, topic: usize) -> &[T] {
        &self.topic_weights[topic * self.dim..(topic + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.embeddings
            .iter()
            .chain(&self.topic_weights)
            .chain(&self.topic_bias)
            .all(|x| x.is_finite())
    }

    fn check_word(&self, word: usize) -> Result<()> {
        if word >= self.vocab_size {
            return Err(Error::OutOfRange {
                what: "word",
                index: word,
                limit: self.vocab_size,
            });
        }
        Ok(())
    }

    /// Writes `softmax(W e_w + b)` into `out` (length K). `word` must be valid.
    pub(crate) fn word_probs_into(&self, word: usize, logits: &mut [T], out: &mut [T]) {
        let e = self.embedding(word);
        for (k, z) in logits.iter_mut().enumerate() {
            *z = dot(self.topic_row(k), e) + self.topic_bias[k];
        }
        softmax_into(logits, out);
    }

    pub fn word_topic_dist(&self, word: usize) -> Result<TopicDist<T>> {
        self.check_word(word)?;
        let mut logits = vec![T::zero(); self.topics];
        let mut out = vec![T::zero(); self.topics];
        self.word_probs_into(word, &mut logits, &mut out);
        Ok(TopicDist(out))
    }

    pub fn doc_topic_dist(&self, doc: &Document) -> Result<TopicDist<T>> {
        if doc.is_empty() {
            return Err(Error::EmptyDocument);
        }
        let counts = doc.word_counts();
        for &(w, _) in &counts {
            self.check_word(w)?;
        }
        let mut logits = vec![T::zero(); self.topics];
        let mut p = vec![T::zero(); self.topics];
        let mut mean = vec![T::zero(); self.topics];
        for &(w, c) in &counts {
            self.word_probs_into(w, &mut logits, &mut p);
            let c = T::of_usize(c);
            for (m, &pk) in mean.iter_mut().zip(&p) {
                *m += c * pk;
            }
        }
        let len = T::of_usize(doc.len());
        for m in &mut mean {
            *m /= len;
        }
        Ok(TopicDist(mean))
    }
}

/// Random initialization: `E` and `W` i.i.d. uniform in `[-scale, scale]`,
/// bias zero. Draws happen in `f64` so both precisions see the same stream.
pub fn init_params<T: Scalar, R: Rng + ?Sized>(
    vocab_size: usize,
    dim: usize,
    topics: usize,
    rng: &mut R,
    scale: f64,
) -> Result<ModelParams<T>> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidConfig(format!("init scale must be positive, got {scale}")));
    }
    let mut params = ModelParams::zeros(vocab_size, dim, topics)?;
    let dist = Uniform::new_inclusive(-scale, scale);
    for x in params.embeddings.iter_mut().chain(params.topic_weights.iter_mut()) {
        *x = T::of(dist.sample(rng));
    }
    Ok(params)
}
