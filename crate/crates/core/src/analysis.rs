//! Cluster extraction, word-given-topic posteriors, clustering metrics and a
//! tf-idf K-means reference baseline.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::Deref;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{Corpus, Vocabulary};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::scalar::Scalar;

/// One cluster id per document, aligned with corpus order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment(pub Vec<usize>);

impl Deref for ClusterAssignment {
    type Target = [usize];

    fn deref(&self) -> &[usize] {
        &self.0
    }
}

impl ClusterAssignment {
    /// One integer per line.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        for label in &self.0 {
            writeln!(out, "{label}")?;
        }
        Ok(())
    }
}

/// Assigns every document to the topic with the largest document-level
/// probability; ties resolve to the smaller topic id.
pub fn assign_clusters<T: Scalar>(params: &ModelParams<T>, corpus: &Corpus) -> Result<ClusterAssignment> {
    let labels = corpus
        .docs
        .par_iter()
        .map(|doc| params.doc_topic_dist(doc).map(|d| d.argmax()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ClusterAssignment(labels))
}

/// Corpus-level weight of each word: `(1/n) Σ_i count_i(w) / m_i`.
fn word_weights<T: Scalar>(corpus: &Corpus, vocab_size: usize) -> Result<Vec<T>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut weights = vec![T::zero(); vocab_size];
    for doc in &corpus.docs {
        let len = T::of_usize(doc.len());
        for (w, c) in doc.word_counts() {
            let slot = weights.get_mut(w).ok_or(Error::OutOfRange {
                what: "word",
                index: w,
                limit: vocab_size,
            })?;
            *slot += T::of_usize(c) / len;
        }
    }
    let n = T::of_usize(corpus.len());
    weights.iter_mut().for_each(|x| *x /= n);
    Ok(weights)
}

/// The unnormalized joint `P̄(t, w)` as a K×V row-major table.
pub fn word_topic_joint<T: Scalar>(params: &ModelParams<T>, corpus: &Corpus) -> Result<Vec<T>> {
    let v = params.vocab_size();
    let k = params.topics();
    let weights = word_weights::<T>(corpus, v)?;
    let mut joint = vec![T::zero(); k * v];
    for (w, &weight) in weights.iter().enumerate() {
        if weight == T::zero() {
            continue;
        }
        let dist = params.word_topic_dist(w)?;
        for t in 0..k {
            joint[t * v + w] = dist[t] * weight;
        }
    }
    Ok(joint)
}

/// K×V table whose row `t` is `P̄(· | t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WordTopicPosterior<T> {
    topics: usize,
    vocab_size: usize,
    table: Vec<T>,
}

impl<T: Scalar> WordTopicPosterior<T> {
    pub fn topics(&self) -> usize {
        self.topics
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn row(&self, topic: usize) -> &[T] {
        &self.table[topic * self.vocab_size..(topic + 1) * self.vocab_size]
    }

    pub fn get(&self, topic: usize, word: usize) -> T {
        self.table[topic * self.vocab_size + word]
    }
}

/// Row-normalizes [`word_topic_joint`] over the vocabulary.
pub fn word_topic_posterior<T: Scalar>(
    params: &ModelParams<T>,
    corpus: &Corpus,
) -> Result<WordTopicPosterior<T>> {
    let v = params.vocab_size();
    let mut table = word_topic_joint(params, corpus)?;
    for (t, row) in table.chunks_mut(v).enumerate() {
        let mass: T = row.iter().copied().sum();
        if !(mass > T::zero()) {
            return Err(Error::ZeroMassTopic { topic: t });
        }
        row.iter_mut().for_each(|x| *x /= mass);
    }
    Ok(WordTopicPosterior {
        topics: params.topics(),
        vocab_size: v,
        table,
    })
}

/// The `n` most probable words of `topic` as `(word id, probability)`,
/// descending, ties broken by smaller word id.
pub fn top_words<T: Scalar>(
    posterior: &WordTopicPosterior<T>,
    topic: usize,
    n: usize,
) -> Result<Vec<(usize, T)>> {
    if topic >= posterior.topics {
        return Err(Error::OutOfRange {
            what: "topic",
            index: topic,
            limit: posterior.topics,
        });
    }
    if n > posterior.vocab_size {
        return Err(Error::OutOfRange {
            what: "top-word count",
            index: n,
            limit: posterior.vocab_size,
        });
    }
    let row = posterior.row(topic);
    let mut ids: Vec<usize> = (0..row.len()).collect();
    ids.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    Ok(ids.into_iter().take(n).map(|w| (w, row[w])).collect())
}

/// Writes `topic<TAB>rank<TAB>word<TAB>prob` lines (rank is 1-based) for
/// each requested topic.
pub fn write_top_words<T: Scalar, W: Write>(
    posterior: &WordTopicPosterior<T>,
    vocab: &Vocabulary,
    topics: impl IntoIterator<Item = usize>,
    n: usize,
    mut out: W,
) -> Result<()> {
    let n = n.min(posterior.vocab_size);
    for topic in topics {
        for (rank, (w, p)) in top_words(posterior, topic, n)?.into_iter().enumerate() {
            let word = vocab.word(w).unwrap_or("?");
            writeln!(out, "{topic}\t{}\t{word}\t{}", rank + 1, p.as_f64())?;
        }
    }
    Ok(())
}

fn check_lengths(pred: &[usize], gold: &[usize]) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: gold.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::InvalidConfig("cannot score an empty clustering".into()));
    }
    Ok(())
}

struct Contingency {
    n: usize,
    cells: BTreeMap<(usize, usize), usize>,
    pred: BTreeMap<usize, usize>,
    gold: BTreeMap<usize, usize>,
}

impl Contingency {
    fn new(pred: &[usize], gold: &[usize]) -> Self {
        let mut c = Self {
            n: pred.len(),
            cells: BTreeMap::new(),
            pred: BTreeMap::new(),
            gold: BTreeMap::new(),
        };
        for (&p, &g) in pred.iter().zip(gold) {
            *c.cells.entry((p, g)).or_default() += 1;
            *c.pred.entry(p).or_default() += 1;
            *c.gold.entry(g).or_default() += 1;
        }
        c
    }

    fn entropy(&self, marginal: &BTreeMap<usize, usize>) -> f64 {
        let n = self.n as f64;
        marginal
            .values()
            .map(|&a| (a as f64 / n) * (n / a as f64).ln())
            .sum()
    }

    /// Every cluster matches exactly one class and vice versa.
    fn is_bijective(&self) -> bool {
        self.cells.len() == self.pred.len() && self.cells.len() == self.gold.len()
    }
}

/// `(1/N) Σ_clusters max_class |cluster ∩ class|`.
pub fn purity(pred: &[usize], gold: &[usize]) -> Result<f64> {
    check_lengths(pred, gold)?;
    let table = Contingency::new(pred, gold);
    let mut best: BTreeMap<usize, usize> = BTreeMap::new();
    for (&(p, _), &count) in &table.cells {
        let slot = best.entry(p).or_default();
        *slot = (*slot).max(count);
    }
    Ok(best.values().sum::<usize>() as f64 / table.n as f64)
}

/// Mutual information normalized by the arithmetic mean of the two marginal
/// entropies.
pub fn nmi(pred: &[usize], gold: &[usize]) -> Result<f64> {
    check_lengths(pred, gold)?;
    let table = Contingency::new(pred, gold);
    if table.is_bijective() {
        return Ok(1.0);
    }
    let h_pred = table.entropy(&table.pred);
    let h_gold = table.entropy(&table.gold);
    if h_pred == 0.0 || h_gold == 0.0 {
        return Ok(0.0);
    }
    let n = table.n as f64;
    let mutual: f64 = table
        .cells
        .iter()
        .map(|(&(p, g), &count)| {
            let joint = count as f64;
            let outer = table.pred[&p] as f64 * table.gold[&g] as f64;
            (joint / n) * ((n * joint) / outer).ln()
        })
        .sum();
    Ok((mutual / ((h_pred + h_gold) / 2.0)).clamp(0.0, 1.0))
}

/// `purity=<x> nmi=<y>` with four decimals.
pub fn metrics_line(purity: f64, nmi: f64) -> String {
    format!("purity={purity:.4} nmi={nmi:.4}")
}

/// Length-normalized tf-idf rows: raw counts times `ln(N / df)`.
pub fn tfidf_vectors(corpus: &Corpus) -> Vec<Vec<(usize, f64)>> {
    let n = corpus.len() as f64;
    let mut df = vec![0usize; corpus.vocab.len()];
    let counted: Vec<Vec<(usize, usize)>> = corpus.docs.iter().map(|d| d.word_counts()).collect();
    for doc in &counted {
        for &(w, _) in doc {
            df[w] += 1;
        }
    }
    counted
        .into_iter()
        .map(|doc| {
            let mut row: Vec<(usize, f64)> = doc
                .into_iter()
                .map(|(w, c)| (w, c as f64 * (n / df[w] as f64).ln()))
                .filter(|&(_, x)| x != 0.0)
                .collect();
            let norm = row.iter().map(|&(_, x)| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|(_, x)| *x /= norm);
            }
            row
        })
        .collect()
}

const KMEANS_MAX_ITERS: usize = 100;
const KMEANS_REL_TOL: f64 = 1e-6;

fn sq_norm(row: &[(usize, f64)]) -> f64 {
    row.iter().map(|&(_, x)| x * x).sum()
}

fn sq_dist(row: &[(usize, f64)], row_norm: f64, centroid: &[f64], centroid_norm: f64) -> f64 {
    let dot: f64 = row.iter().map(|&(w, x)| x * centroid[w]).sum();
    (row_norm - 2.0 * dot + centroid_norm).max(0.0)
}

fn nearest(row: &[(usize, f64)], row_norm: f64, centroids: &[Vec<f64>], norms: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, (centroid, &cn)) in centroids.iter().zip(norms).enumerate() {
        let d = sq_dist(row, row_norm, centroid, cn);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm on sparse rows of dimension `dim` with k-means++
/// seeding. Stops after 100 iterations or when the inertia changes by less
/// than a relative 1e-6.
pub fn kmeans_sparse(rows: &[Vec<(usize, f64)>], dim: usize, k: usize, seed: u64) -> Result<ClusterAssignment> {
    if k == 0 || k > rows.len() {
        return Err(Error::TooManyClusters { k, n: rows.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let row_norms: Vec<f64> = rows.iter().map(|r| sq_norm(r)).collect();
    let dense = |row: &[(usize, f64)]| {
        let mut c = vec![0.0; dim];
        row.iter().for_each(|&(w, x)| c[w] = x);
        c
    };

    // k-means++ seeding.
    let mut centroids = vec![dense(&rows[rng.gen_range(0..rows.len())])];
    let mut closest: Vec<f64> = vec![f64::INFINITY; rows.len()];
    while centroids.len() < k {
        let last = centroids.last().unwrap();
        let last_norm = last.iter().map(|x| x * x).sum::<f64>();
        for (i, row) in rows.iter().enumerate() {
            closest[i] = closest[i].min(sq_dist(row, row_norms[i], last, last_norm));
        }
        let pick = match WeightedIndex::new(&closest) {
            Ok(dist) => dist.sample(&mut rng),
            Err(_) => rng.gen_range(0..rows.len()),
        };
        centroids.push(dense(&rows[pick]));
    }

    let mut labels = vec![0usize; rows.len()];
    let mut prev_inertia = f64::INFINITY;
    for _ in 0..KMEANS_MAX_ITERS {
        let norms: Vec<f64> = centroids.iter().map(|c| c.iter().map(|x| x * x).sum()).collect();
        let assigned: Vec<(usize, f64)> = rows
            .par_iter()
            .zip(&row_norms)
            .map(|(row, &rn)| nearest(row, rn, &centroids, &norms))
            .collect();
        let inertia: f64 = assigned.iter().map(|&(_, d)| d).sum();
        let changed = assigned.iter().zip(&labels).any(|(&(c, _), &l)| c != l);
        for (l, &(c, _)) in labels.iter_mut().zip(&assigned) {
            *l = c;
        }

        let mut sums = vec![vec![0.0; dim]; k];
        let mut sizes = vec![0usize; k];
        for (row, &c) in rows.iter().zip(&labels) {
            sizes[c] += 1;
            row.iter().for_each(|&(w, x)| sums[c][w] += x);
        }
        // An empty cluster takes over the point farthest from its centroid.
        let mut dists: Vec<f64> = assigned.iter().map(|&(_, d)| d).collect();
        for c in 0..k {
            if sizes[c] == 0 {
                let far = (0..rows.len())
                    .fold(0, |best, i| if dists[i] > dists[best] { i } else { best });
                let old = labels[far];
                sizes[old] -= 1;
                rows[far].iter().for_each(|&(w, x)| sums[old][w] -= x);
                labels[far] = c;
                sizes[c] = 1;
                sums[c] = dense(&rows[far]);
                dists[far] = 0.0;
            }
        }
        for (c, sum) in sums.into_iter().enumerate() {
            let inv = 1.0 / sizes[c] as f64;
            centroids[c] = sum.into_iter().map(|x| x * inv).collect();
        }

        let converged = !changed
            || (prev_inertia.is_finite()
                && (prev_inertia - inertia).abs() <= KMEANS_REL_TOL * prev_inertia.abs());
        prev_inertia = inertia;
        if converged {
            break;
        }
    }
    Ok(ClusterAssignment(labels))
}

/// K-means on length-normalized tf-idf document vectors.
pub fn kmeans_baseline(corpus: &Corpus, k: usize, seed: u64) -> Result<ClusterAssignment> {
    if k > corpus.len() {
        return Err(Error::TooManyClusters { k, n: corpus.len() });
    }
    kmeans_sparse(&tfidf_vectors(corpus), corpus.vocab.len(), k, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{load_corpus_plain, Document};
    use proptest::prelude::*;
    use rand::Rng;

    fn corpus(text: &str) -> Corpus {
        load_corpus_plain(text.as_bytes(), None).unwrap().corpus
    }

    /// Params whose word `w` puts almost all mass on topic `topic_of[w]`.
    fn peaked(topic_of: &[usize], k: usize) -> ModelParams<f64> {
        let v = topic_of.len();
        let mut p = ModelParams::zeros(v, k, k).unwrap();
        for (w, &t) in topic_of.iter().enumerate() {
            p.embeddings[w * k + t] = 1.0;
        }
        for t in 0..k {
            p.topic_weights[t * k + t] = 30.0;
        }
        p
    }

    #[test]
    fn argmax_assignment_and_ties() {
        let c = corpus("a a b\nc c\nd\n");
        let p = peaked(&[3, 3, 1, 2], 5);
        assert_eq!(assign_clusters(&p, &c).unwrap().0, vec![3, 1, 2]);

        // Exact tie between topics 1 and 4.
        let mut tie = ModelParams::<f64>::zeros(1, 1, 5).unwrap();
        tie.topic_bias = vec![0.0, 2.0, 0.0, 0.0, 2.0];
        let c = corpus("w w");
        assert_eq!(assign_clusters(&tie, &c).unwrap().0, vec![1]);
    }

    #[test]
    fn permuting_documents_permutes_labels() {
        let c = corpus("a b\nc d\na c\nb d d\n");
        let p = peaked(&[0, 1, 2, 1], 3);
        let labels = assign_clusters(&p, &c).unwrap().0;
        let mut rev = c.clone();
        rev.docs.reverse();
        let mut rev_labels = assign_clusters(&p, &rev).unwrap().0;
        rev_labels.reverse();
        assert_eq!(labels, rev_labels);
    }

    #[test]
    fn single_word_vocab_posterior() {
        let c = corpus("x x\nx\n");
        let p = ModelParams::<f64>::zeros(1, 2, 3).unwrap();
        let post = word_topic_posterior(&p, &c).unwrap();
        for t in 0..3 {
            assert_eq!(post.get(t, 0), 1.0);
        }
    }

    #[test]
    fn joint_marginalizes_to_word_weights() {
        let c = corpus("a b b\nc a\nd d d d\n");
        let mut p = peaked(&[0, 1, 1, 2], 3);
        p.topic_weights.iter_mut().for_each(|x| *x *= 0.05);
        let joint = word_topic_joint(&p, &c).unwrap();
        let expect = [
            (1.0 / 3.0 + 1.0 / 2.0) / 3.0,
            (2.0 / 3.0) / 3.0,
            (1.0 / 2.0) / 3.0,
            1.0 / 3.0,
        ];
        for (w, e) in expect.iter().enumerate() {
            let s: f64 = (0..3).map(|t| joint[t * 4 + w]).sum();
            assert!((s - e).abs() < 1e-12, "word {w}: {s} vs {e}");
        }
    }

    #[test]
    fn top_words_contract() {
        let c = corpus("a b c d e\na a b\n");
        let p = peaked(&[0, 0, 1, 1, 0], 2);
        let post = word_topic_posterior(&p, &c).unwrap();
        let all = top_words(&post, 0, 5).unwrap();
        let mut ids: Vec<usize> = all.iter().map(|&(w, _)| w).collect();
        assert!(all.windows(2).all(|w| w[0].1 >= w[1].1));
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
        assert_eq!(all[0].0, 0);
        assert_eq!(&top_words(&post, 0, 2).unwrap()[..], &all[..2]);
        assert!(top_words(&post, 2, 1).is_err());
        assert!(top_words(&post, 0, 6).is_err());
    }

    #[test]
    fn top_words_ties_by_id() {
        let c = corpus("a b c\n");
        let p = ModelParams::<f64>::zeros(3, 1, 2).unwrap();
        let post = word_topic_posterior(&p, &c).unwrap();
        let ids: Vec<usize> = top_words(&post, 1, 3).unwrap().iter().map(|x| x.0).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn report_format() {
        let c = corpus("a b\n");
        let p = peaked(&[0, 1], 2);
        let post = word_topic_posterior(&p, &c).unwrap();
        let mut out = Vec::new();
        write_top_words(&post, &c.vocab, [1], 1, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let fields: Vec<&str> = text.trim_end().split('\t').collect();
        assert_eq!(&fields[..3], &["1", "1", "b"]);
        assert!(fields[3].parse::<f64>().unwrap() > 0.99);
    }

    #[test]
    fn purity_examples() {
        assert_eq!(purity(&[0, 1, 2], &[2, 0, 1]).unwrap(), 1.0);
        // clusters {a,a,b} and {b,b,b}
        assert_eq!(purity(&[0, 0, 0, 1, 1, 1], &[0, 0, 1, 1, 1, 1]).unwrap(), 5.0 / 6.0);
        let gold: Vec<usize> = (0..100).map(|i| i % 20).collect();
        assert_eq!(purity(&[0; 100], &gold).unwrap(), 0.05);
        assert!(purity(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn nmi_examples() {
        assert_eq!(nmi(&[1, 1, 0, 0, 2], &[0, 0, 1, 1, 2]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.0);
        assert_eq!(nmi(&[0, 0, 0, 0], &[0, 1, 0, 1]).unwrap(), 0.0);
        assert_eq!(nmi(&[3, 3], &[1, 1]).unwrap(), 1.0);
        assert!(nmi(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn metrics_line_format() {
        assert_eq!(metrics_line(1.0, 1.0), "purity=1.0000 nmi=1.0000");
        assert_eq!(metrics_line(0.56789, 0.1), "purity=0.5679 nmi=0.1000");
    }

    #[test]
    fn kmeans_separates_disjoint_vocabularies() {
        let mut text = String::new();
        for i in 0..20 {
            if i % 2 == 0 {
                text.push_str("0\tapple pear apple plum\n");
            } else {
                text.push_str("1\tbolt nut screw nut\n");
            }
        }
        let c = corpus(&text);
        let gold = c.gold_labels().unwrap();
        let a = kmeans_baseline(&c, 2, 5).unwrap();
        assert_eq!(purity(&a, &gold).unwrap(), 1.0);
        assert_eq!(a, kmeans_baseline(&c, 2, 5).unwrap());
        assert!(matches!(kmeans_baseline(&c, 21, 0), Err(Error::TooManyClusters { .. })));
    }

    #[test]
    fn kmeans_handles_identical_points() {
        let rows = vec![vec![(0, 1.0)]; 5];
        let a = kmeans_sparse(&rows, 1, 3, 1).unwrap();
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|&c| c < 3));
    }

    #[test]
    fn tfidf_rows_are_unit_length() {
        let c = corpus("a b c\na a d\nb e\n");
        for row in tfidf_vectors(&c) {
            assert!((sq_norm(&row) - 1.0).abs() < 1e-12);
        }
        // A word in every document has zero idf and disappears.
        let c = corpus("a b\na c\n");
        assert!(tfidf_vectors(&c).iter().all(|r| r.iter().all(|&(w, _)| w != 0)));
    }

    proptest! {
        #[test]
        fn metrics_invariant_under_relabeling(
            pairs in proptest::collection::vec((0usize..5, 0usize..4), 1..60),
            shift in 1usize..7,
        ) {
            let pred: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let gold: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let relabeled: Vec<usize> = pred.iter().map(|&p| (p + shift) % 5 + 10).collect();
            prop_assert_eq!(purity(&pred, &gold).unwrap(), purity(&relabeled, &gold).unwrap());
            let a = nmi(&pred, &gold).unwrap();
            let b = nmi(&relabeled, &gold).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));

            let single = vec![0; gold.len()];
            let top = Contingency::new(&gold, &gold).gold.values().copied().max().unwrap();
            prop_assert_eq!(purity(&single, &gold).unwrap(), top as f64 / gold.len() as f64);
        }

        #[test]
        fn posterior_rows_are_distributions(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let docs: Vec<Document> = (0..4)
                .map(|_| Document::new((0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..6)).collect()))
                .collect();
            let vocab = Vocabulary::from_words(["a", "b", "c", "d", "e", "f"]).unwrap();
            let c = Corpus { docs, vocab, label_names: Vec::new() };
            let p: ModelParams<f64> = crate::model::init_params(6, 3, 3, &mut rng, 2.0).unwrap();
            let post = word_topic_posterior(&p, &c).unwrap();
            for t in 0..3 {
                let row = post.row(t);
                prop_assert!(row.iter().all(|&x| x >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
