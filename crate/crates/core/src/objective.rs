//! The training objective and its hand-derived gradient.
//!
//! For a minibatch of real documents the loss is
//!
//! ```text
//!   sum_i sum_j [ a·H(p_ij) + c·KL(p_ij || q_i) ]  -  β·N·H(mean_i q_i)
//!   + λ·sum_fake sum_j [ -min(H(p_j), ln K) - min(KL(p_j || q_fake), clip) ]
//! ```
//!
//! where `p_ij` is the topic distribution of the j-th word of document i,
//! `q_i` the document's mean word distribution and `N` the number of real
//! word occurrences. Every `log` is evaluated as `log(x + eps)`.
//!
//! Because `p_ij` depends on the word alone, the forward pass evaluates the
//! softmax once per distinct word in the batch and works with per-document
//! word counts from there on.

use std::borrow::Borrow;

use rayon::prelude::*;

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::model::{ModelParams, TopicDist};
use crate::scalar::Scalar;

/// Term weights and numerical constants of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub entropy: f64,
    pub kl: f64,
    pub balance: f64,
    pub negative: f64,
    /// Added inside every logarithm.
    pub eps: f64,
    /// Cap on the per-word KL a fake document can contribute.
    pub kl_clip: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            entropy: 1.0,
            kl: 1.0,
            balance: 1.0,
            negative: 1.0,
            eps: 1e-8,
            kl_clip: 10.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            entropy: 0.0,
            kl: 0.0,
            balance: 0.0,
            negative: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("lambda_ent", self.entropy),
            ("lambda_kl", self.kl),
            ("lambda_bal", self.balance),
            ("lambda_neg", self.negative),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        if !(self.eps > 0.0 && self.eps <= 1e-4) {
            return Err(Error::InvalidConfig(format!("eps must lie in (0, 1e-4], got {}", self.eps)));
        }
        if !(self.kl_clip > 0.0 && self.kl_clip.is_finite()) {
            return Err(Error::InvalidConfig(format!("kl_clip must be positive, got {}", self.kl_clip)));
        }
        Ok(())
    }
}

fn entropy_slice<T: Scalar>(p: &[T], eps: T) -> T {
    -p.iter().fold(T::zero(), |acc, &x| acc + x * (x + eps).ln())
}

fn kl_slice<T: Scalar>(p: &[T], q: &[T], eps: T) -> T {
    p.iter()
        .zip(q)
        .fold(T::zero(), |acc, (&a, &b)| acc + a * ((a + eps) / (b + eps)).ln())
}

/// `-Σ p_k log(p_k + eps)`.
pub fn entropy<T: Scalar>(dist: &TopicDist<T>, eps: T) -> T {
    entropy_slice(dist, eps)
}

/// `Σ p_k log((p_k + eps) / (q_k + eps))`.
pub fn kl_divergence<T: Scalar>(p: &TopicDist<T>, q: &TopicDist<T>, eps: T) -> Result<T> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    Ok(kl_slice(p, q, eps))
}

/// Entropy of the mean of `doc_dists`.
pub fn balance_entropy<T: Scalar>(doc_dists: &[TopicDist<T>], eps: T) -> Result<T> {
    let first = doc_dists.first().ok_or(Error::EmptyCorpus)?;
    let mut mean = vec![T::zero(); first.len()];
    for d in doc_dists {
        if d.len() != mean.len() {
            return Err(Error::LengthMismatch {
                left: d.len(),
                right: mean.len(),
            });
        }
        for (m, &x) in mean.iter_mut().zip(d.iter()) {
            *m += x;
        }
    }
    let n = T::of_usize(doc_dists.len());
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(entropy_slice(&mean, eps))
}

/// Gradient of the batch loss, shaped like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub embeddings: Vec<T>,
    pub topic_weights: Vec<T>,
    pub topic_bias: Vec<T>,
    /// Embedding rows that appear in the batch (sorted); all other rows of
    /// `embeddings` are exactly zero.
    pub touched_rows: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn is_finite(&self) -> bool {
        self.embeddings
            .iter()
            .chain(&self.topic_weights)
            .chain(&self.topic_bias)
            .all(|x| x.is_finite())
    }
}

/// Individual terms of one batch evaluation, unweighted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms<T> {
    pub total: T,
    /// Σ over real word occurrences of H(p).
    pub entropy_sum: T,
    /// Σ over real word occurrences of KL(p || q_doc).
    pub kl_sum: T,
    /// H of the batch-mean document distribution.
    pub balance_entropy: T,
    /// Σ over fake word occurrences of the (capped) entropy.
    pub fake_entropy_sum: T,
    /// Σ over fake word occurrences of the (clipped) KL.
    pub fake_kl_sum: T,
    pub real_words: usize,
    pub fake_words: usize,
}

struct DocState<T> {
    /// (slot into the batch word table, multiplicity)
    words: Vec<(usize, usize)>,
    len: usize,
    mean: Vec<T>,
    fake: bool,
}

struct Forward<T> {
    topics: usize,
    /// Distinct words of the batch, sorted.
    words: Vec<usize>,
    /// `words.len() × K` softmax outputs.
    probs: Vec<T>,
    docs: Vec<DocState<T>>,
    /// Batch-mean real document distribution.
    p_bar: Vec<T>,
    terms: LossTerms<T>,
}

impl<T: Scalar> Forward<T> {
    fn probs(&self, slot: usize) -> &[T] {
        &self.probs[slot * self.topics..(slot + 1) * self.topics]
    }
}

struct Coeffs<T> {
    entropy: T,
    kl: T,
    balance: T,
    negative: T,
    eps: T,
    kl_clip: T,
    max_entropy: T,
}

impl<T: Scalar> Coeffs<T> {
    fn new(w: &LossWeights, topics: usize) -> Self {
        Self {
            entropy: T::of(w.entropy),
            kl: T::of(w.kl),
            balance: T::of(w.balance),
            negative: T::of(w.negative),
            eps: T::of(w.eps),
            kl_clip: T::of(w.kl_clip),
            max_entropy: T::of_usize(topics).ln(),
        }
    }
}

fn forward<T: Scalar, R: Borrow<Document>, F: Borrow<Document>>(
    params: &ModelParams<T>,
    real_docs: &[R],
    fake_docs: &[F],
    weights: &LossWeights,
) -> Result<Forward<T>> {
    weights.validate()?;
    if real_docs.is_empty() {
        return Err(Error::InvalidConfig("batch needs at least one real document".into()));
    }
    let k = params.topics();
    let c = Coeffs::<T>::new(weights, k);

    let mut words: Vec<usize> = real_docs
        .iter()
        .map(Borrow::borrow)
        .chain(fake_docs.iter().map(Borrow::borrow))
        .flat_map(|d| d.word_ids.iter().copied())
        .collect();
    words.sort_unstable();
    words.dedup();
    if let Some(&w) = words.last() {
        if w >= params.vocab_size() {
            return Err(Error::OutOfRange {
                what: "word",
                index: w,
                limit: params.vocab_size(),
            });
        }
    }

    let mut probs = vec![T::zero(); words.len() * k];
    probs
        .par_chunks_mut(k)
        .zip(words.par_iter())
        .for_each_init(
            || vec![T::zero(); k],
            |logits, (out, &w)| params.word_probs_into(w, logits, out),
        );

    let mut fwd = Forward {
        topics: k,
        words,
        probs,
        docs: Vec::with_capacity(real_docs.len() + fake_docs.len()),
        p_bar: vec![T::zero(); k],
        terms: LossTerms {
            total: T::zero(),
            entropy_sum: T::zero(),
            kl_sum: T::zero(),
            balance_entropy: T::zero(),
            fake_entropy_sum: T::zero(),
            fake_kl_sum: T::zero(),
            real_words: 0,
            fake_words: 0,
        },
    };

    for (doc, fake) in real_docs
        .iter()
        .map(|d| (d.borrow(), false))
        .chain(fake_docs.iter().map(|d| (d.borrow(), true)))
    {
        if doc.is_empty() {
            return Err(Error::EmptyDocument);
        }
        let counted: Vec<(usize, usize)> = doc
            .word_counts()
            .into_iter()
            .map(|(w, n)| (fwd.words.binary_search(&w).expect("word collected above"), n))
            .collect();
        let mut mean = vec![T::zero(); k];
        for &(slot, n) in &counted {
            let n = T::of_usize(n);
            for (m, &p) in mean.iter_mut().zip(fwd.probs(slot)) {
                *m += n * p;
            }
        }
        let len = T::of_usize(doc.len());
        mean.iter_mut().for_each(|m| *m /= len);

        for &(slot, n) in &counted {
            let p = fwd.probs(slot);
            let h = entropy_slice(p, c.eps);
            let kl = kl_slice(p, &mean, c.eps);
            let n = T::of_usize(n);
            if fake {
                fwd.terms.fake_entropy_sum += n * h.min(c.max_entropy);
                fwd.terms.fake_kl_sum += n * kl.min(c.kl_clip);
            } else {
                fwd.terms.entropy_sum += n * h;
                fwd.terms.kl_sum += n * kl;
            }
        }
        if fake {
            fwd.terms.fake_words += doc.len();
        } else {
            fwd.terms.real_words += doc.len();
            for (b, &m) in fwd.p_bar.iter_mut().zip(&mean) {
                *b += m;
            }
        }
        fwd.docs.push(DocState {
            words: counted,
            len: doc.len(),
            mean,
            fake,
        });
    }

    let n_real = T::of_usize(real_docs.len());
    fwd.p_bar.iter_mut().for_each(|b| *b /= n_real);
    let t = &mut fwd.terms;
    t.balance_entropy = entropy_slice(&fwd.p_bar, c.eps);
    t.total = c.entropy * t.entropy_sum + c.kl * t.kl_sum
        - c.balance * T::of_usize(t.real_words) * t.balance_entropy
        - c.negative * (t.fake_entropy_sum + t.fake_kl_sum);
    Ok(fwd)
}

/// Loss of one minibatch. `fake_docs` may be empty.
pub fn batch_loss<T: Scalar, R: Borrow<Document>, F: Borrow<Document>>(
    params: &ModelParams<T>,
    real_docs: &[R],
    fake_docs: &[F],
    weights: &LossWeights,
) -> Result<T> {
    Ok(forward(params, real_docs, fake_docs, weights)?.terms.total)
}

/// Loss together with its unweighted component terms.
pub fn batch_loss_terms<T: Scalar, R: Borrow<Document>, F: Borrow<Document>>(
    params: &ModelParams<T>,
    real_docs: &[R],
    fake_docs: &[F],
    weights: &LossWeights,
) -> Result<LossTerms<T>> {
    Ok(forward(params, real_docs, fake_docs, weights)?.terms)
}

/// Loss (identical to [`batch_loss`]) and its exact gradient.
pub fn batch_loss_and_gradients<T: Scalar, R: Borrow<Document>, F: Borrow<Document>>(
    params: &ModelParams<T>,
    real_docs: &[R],
    fake_docs: &[F],
    weights: &LossWeights,
) -> Result<(LossTerms<T>, Gradients<T>)> {
    let fwd = forward(params, real_docs, fake_docs, weights)?;
    let k = fwd.topics;
    let c = Coeffs::<T>::new(weights, k);
    let eps = c.eps;

    // dL/dp for every distinct word of the batch.
    let mut grad_p = vec![T::zero(); fwd.words.len() * k];
    // dL/dq_k for real documents receives the balance term through P̄.
    let n_real = T::of_usize(real_docs.len());
    let balance_scale = c.balance * T::of_usize(fwd.terms.real_words) / n_real;
    let balance_grad: Vec<T> = fwd
        .p_bar
        .iter()
        .map(|&b| balance_scale * ((b + eps).ln() + b / (b + eps)))
        .collect();

    let mut grad_q = vec![T::zero(); k];
    for doc in &fwd.docs {
        if doc.fake {
            grad_q.iter_mut().for_each(|g| *g = T::zero());
        } else {
            grad_q.copy_from_slice(&balance_grad);
        }
        let q = &doc.mean;
        for &(slot, n) in &doc.words {
            let p = fwd.probs(slot);
            let (a, b) = if doc.fake {
                let h = entropy_slice(p, eps);
                let kl = kl_slice(p, q, eps);
                let a = if h < c.max_entropy { -c.negative } else { T::zero() };
                let b = if kl < c.kl_clip { -c.negative } else { T::zero() };
                (a, b)
            } else {
                (c.entropy, c.kl)
            };
            let n = T::of_usize(n);
            let gp = &mut grad_p[slot * k..(slot + 1) * k];
            for kk in 0..k {
                let pk = p[kk];
                let log_p = (pk + eps).ln();
                let frac = pk / (pk + eps);
                let d_entropy = -log_p - frac;
                let d_kl_direct = log_p + frac - (q[kk] + eps).ln();
                gp[kk] += n * (a * d_entropy + b * d_kl_direct);
                grad_q[kk] -= n * b * pk / (q[kk] + eps);
            }
        }
        let inv_len = T::one() / T::of_usize(doc.len);
        for &(slot, n) in &doc.words {
            let scale = T::of_usize(n) * inv_len;
            let gp = &mut grad_p[slot * k..(slot + 1) * k];
            for (g, &gq) in gp.iter_mut().zip(&grad_q) {
                *g += scale * gq;
            }
        }
    }

    // Softmax backward: dz = p ⊙ (g - <g, p>).
    let mut grad_z = grad_p;
    grad_z
        .par_chunks_mut(k)
        .enumerate()
        .for_each(|(slot, g)| {
            let p = fwd.probs(slot);
            let inner = g.iter().zip(p).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
            for (gz, &pk) in g.iter_mut().zip(p) {
                *gz = pk * (*gz - inner);
            }
        });

    let d = params.dim();
    let mut grads = Gradients {
        embeddings: vec![T::zero(); params.vocab_size() * d],
        topic_weights: vec![T::zero(); k * d],
        topic_bias: vec![T::zero(); k],
        touched_rows: fwd.words.clone(),
    };

    // Embedding rows are disjoint per word, so they can be filled in parallel.
    let mut rows: Vec<(usize, &mut [T])> = grads
        .embeddings
        .chunks_mut(d)
        .enumerate()
        .filter(|(w, _)| fwd.words.binary_search(w).is_ok())
        .collect();
    rows.par_iter_mut().enumerate().for_each(|(slot, (_, row))| {
        let dz = &grad_z[slot * k..(slot + 1) * k];
        for (kk, &g) in dz.iter().enumerate() {
            for (r, &wv) in row.iter_mut().zip(params.topic_row(kk)) {
                *r += g * wv;
            }
        }
    });

    for (slot, &w) in fwd.words.iter().enumerate() {
        let dz = &grad_z[slot * k..(slot + 1) * k];
        let e = params.embedding(w);
        for (kk, &g) in dz.iter().enumerate() {
            grads.topic_bias[kk] += g;
            for (gw, &ev) in grads.topic_weights[kk * d..(kk + 1) * d].iter_mut().zip(e) {
                *gw += g * ev;
            }
        }
    }

    Ok((fwd.terms, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-8;
    const NONE: &[Document] = &[];

    fn dist(p: &[f64]) -> TopicDist<f64> {
        TopicDist::new(p.to_vec()).unwrap()
    }

    fn docs(ids: &[&[usize]]) -> Vec<Document> {
        ids.iter().map(|w| Document::new(w.to_vec())).collect()
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&TopicDist::<f64>::uniform(4), EPS) - 4f64.ln()).abs() < 1e-7);
        assert!(entropy(&dist(&[0.0, 1.0, 0.0]), EPS).abs() <= 3.0 * EPS);
        assert!((entropy(&dist(&[0.5, 0.25, 0.25]), EPS) - 1.5 * 2f64.ln()).abs() < 1e-7);
    }

    #[test]
    fn kl_examples() {
        let p = dist(&[0.2, 0.3, 0.5]);
        assert_eq!(kl_divergence(&p, &p, EPS).unwrap(), 0.0);
        let v = kl_divergence(&dist(&[1.0, 0.0]), &dist(&[0.5, 0.5]), EPS).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-7);
        assert!(kl_divergence(&p, &dist(&[0.5, 0.5]), EPS).is_err());
    }

    #[test]
    fn balance_examples() {
        let p = dist(&[0.1, 0.9]);
        let same = balance_entropy(&[p.clone(), p.clone(), p.clone()], EPS).unwrap();
        assert!((same - entropy(&p, EPS)).abs() < 1e-15);
        let split = balance_entropy(&[dist(&[1.0, 0.0]), dist(&[0.0, 1.0])], EPS).unwrap();
        assert!((split - 2f64.ln()).abs() < 1e-7);
        let collapsed = balance_entropy(&vec![dist(&[1.0, 0.0, 0.0]); 6], EPS).unwrap();
        assert!(collapsed.abs() < 1e-7);
        assert!(balance_entropy::<f64>(&[], EPS).is_err());
    }

    #[test]
    fn single_word_document_has_zero_kl() {
        let params: ModelParams<f64> =
            init_params(5, 3, 4, &mut ChaCha8Rng::seed_from_u64(1), 0.5).unwrap();
        let w = LossWeights {
            entropy: 0.0,
            balance: 0.0,
            ..LossWeights::default()
        };
        let loss = batch_loss(&params, &docs(&[&[2], &[4, 4]]), NONE, &w).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn uniform_model_loss_is_zero() {
        let mut params: ModelParams<f64> =
            init_params(20, 4, 6, &mut ChaCha8Rng::seed_from_u64(2), 0.5).unwrap();
        params.topic_weights.iter_mut().for_each(|x| *x = 0.0);
        let batch = docs(&[&[0, 1, 2], &[3, 3, 19, 7, 7], &[5, 6]]);
        let loss = batch_loss(&params, &batch, NONE, &LossWeights::default()).unwrap();
        assert!(loss.abs() <= 1e-6 * 10.0, "loss {loss}");
    }

    #[test]
    fn zero_weights_zero_loss_and_gradient() {
        let params: ModelParams<f64> =
            init_params(10, 3, 4, &mut ChaCha8Rng::seed_from_u64(3), 0.5).unwrap();
        let real = docs(&[&[0, 1, 2], &[3, 4]]);
        let fake = docs(&[&[7, 8, 9]]);
        let (terms, g) =
            batch_loss_and_gradients(&params, &real, &fake, &LossWeights::zero()).unwrap();
        assert_eq!(terms.total, 0.0);
        assert!(g.embeddings.iter().chain(&g.topic_weights).chain(&g.topic_bias).all(|&x| x == 0.0));
    }

    #[test]
    fn negative_weight_is_linear() {
        let params: ModelParams<f64> =
            init_params(10, 3, 4, &mut ChaCha8Rng::seed_from_u64(4), 1.0).unwrap();
        let real = docs(&[&[0, 1, 2], &[3, 4]]);
        let fake = docs(&[&[7, 8, 9], &[1, 5]]);
        let w1 = LossWeights::default();
        let w2 = LossWeights { negative: 2.0, ..w1 };
        let base = batch_loss(&params, &real, NONE, &w1).unwrap();
        let d1 = batch_loss(&params, &real, &fake, &w1).unwrap() - base;
        let d2 = batch_loss(&params, &real, &fake, &w2).unwrap() - base;
        assert!((d2 - 2.0 * d1).abs() < 1e-12, "{d1} {d2}");
    }

    #[test]
    fn untouched_embedding_rows_are_zero() {
        let params: ModelParams<f64> =
            init_params(12, 3, 4, &mut ChaCha8Rng::seed_from_u64(5), 0.5).unwrap();
        let real = docs(&[&[0, 1, 2], &[3, 1]]);
        let fake = docs(&[&[9, 9]]);
        let (_, g) = batch_loss_and_gradients(&params, &real, &fake, &LossWeights::default()).unwrap();
        assert_eq!(g.touched_rows, vec![0, 1, 2, 3, 9]);
        for w in [4, 5, 6, 7, 8, 10, 11] {
            assert!(g.embeddings[w * 3..(w + 1) * 3].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn loss_and_gradient_scalar_matches_loss_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params: ModelParams<f64> = init_params(30, 5, 4, &mut rng, 1.0).unwrap();
        let real: Vec<Document> = (0..5)
            .map(|_| Document::new((0..rng.gen_range(2..9)).map(|_| rng.gen_range(0..30)).collect()))
            .collect();
        let fake = docs(&[&[1, 2, 3, 4]]);
        let w = LossWeights::default();
        let loss = batch_loss(&params, &real, &fake, &w).unwrap();
        let (terms, _) = batch_loss_and_gradients(&params, &real, &fake, &w).unwrap();
        assert_eq!(loss.to_bits(), terms.total.to_bits());
    }

    #[test]
    fn document_and_word_permutations_leave_loss_unchanged() {
        let params: ModelParams<f64> =
            init_params(10, 3, 4, &mut ChaCha8Rng::seed_from_u64(8), 1.0).unwrap();
        let a = docs(&[&[0, 1, 2, 1], &[3, 4], &[5, 6, 7]]);
        let b = docs(&[&[7, 5, 6], &[1, 2, 1, 0], &[4, 3]]);
        let w = LossWeights::default();
        let la = batch_loss(&params, &a, NONE, &w).unwrap();
        let lb = batch_loss(&params, &b, NONE, &w).unwrap();
        assert!((la - lb).abs() < 1e-12);
    }

    #[test]
    fn rejects_empty_batch_and_bad_weights() {
        let params = ModelParams::<f64>::zeros(3, 2, 2).unwrap();
        assert!(batch_loss(&params, NONE, NONE, &LossWeights::default()).is_err());
        let bad = LossWeights { kl: -1.0, ..LossWeights::default() };
        assert!(batch_loss(&params, &docs(&[&[0, 1]]), NONE, &bad).is_err());
        let bad = LossWeights { eps: 1e-3, ..LossWeights::default() };
        assert!(bad.validate().is_err());
        assert!(batch_loss(&params, &docs(&[&[0, 5]]), NONE, &LossWeights::default()).is_err());
    }
}
