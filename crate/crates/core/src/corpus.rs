//! Corpus ingestion, vocabulary construction, length filtering and the
//! fake-document sampler used for negative sampling.
//!
//! Two on-disk encodings are understood:
//!
//! * plain text, one document per line, with an optional `label<TAB>` prefix;
//! * the sparse bag-of-words exchange format (`D`, `V`, `NNZ` header lines
//!   followed by `docId termId count` triples, all 1-based).

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform, WeightedIndex};
use rand::Rng;

use crate::error::{Error, Result};

/// Bidirectional token/id map with corpus frequencies. Ids are dense in `[0, V)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    id_of: HashMap<String, usize>,
    counts: Vec<u64>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a vocabulary from an ordered word list with zero counts.
    /// Duplicate words are rejected.
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self::new();
        for w in words {
            let w = w.into();
            if vocab.id_of.contains_key(&w) {
                return Err(Error::InvalidConfig(format!("duplicate vocabulary word {w:?}")));
            }
            vocab.push(w);
        }
        Ok(vocab)
    }

    fn push(&mut self, word: String) -> usize {
        let id = self.words.len();
        self.id_of.insert(word.clone(), id);
        self.words.push(word);
        self.counts.push(0);
        id
    }

    /// Returns the id for `token`, inserting it if new, and bumps its count.
    pub fn observe(&mut self, token: &str) -> usize {
        let id = match self.id_of.get(token) {
            Some(&id) => id,
            None => self.push(token.to_owned()),
        };
        self.counts[id] += 1;
        id
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.id_of.get(token).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts.get(id).copied().unwrap_or(0)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Replaces the display names of all words, keeping ids and counts.
    pub fn rename<I, S>(&self, words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut renamed = Self::from_words(words)?;
        if renamed.len() != self.len() {
            return Err(Error::LengthMismatch {
                left: renamed.len(),
                right: self.len(),
            });
        }
        renamed.counts.clone_from(&self.counts);
        Ok(renamed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub word_ids: Vec<usize>,
    pub gold_label: Option<usize>,
    /// Zero-based position in the source stream (line or docId), used to
    /// align external label files after empty documents have been skipped.
    pub source_index: usize,
}

impl Document {
    pub fn new(word_ids: Vec<usize>) -> Self {
        Self {
            word_ids,
            gold_label: None,
            source_index: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.word_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.word_ids.is_empty()
    }

    /// Distinct word ids with multiplicities, ordered by id.
    pub fn word_counts(&self) -> Vec<(usize, usize)> {
        let mut ids = self.word_ids.clone();
        ids.sort_unstable();
        let mut out: Vec<(usize, usize)> = Vec::new();
        for id in ids {
            match out.last_mut() {
                Some((last, c)) if *last == id => *c += 1,
                _ => out.push((id, 1)),
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub docs: Vec<Document>,
    pub vocab: Vocabulary,
    /// Class names from inline labels, indexed by `gold_label`. Empty when
    /// labels came from a numeric labels file or are absent.
    pub label_names: Vec<String>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn num_words(&self) -> usize {
        self.docs.iter().map(Document::len).sum()
    }

    /// Gold labels of every document, or `None` if any document lacks one.
    pub fn gold_labels(&self) -> Option<Vec<usize>> {
        self.docs.iter().map(|d| d.gold_label).collect()
    }

    /// Attaches labels from an external file, aligned by source position.
    /// Replaces any inline labels.
    pub fn attach_labels(&mut self, labels: &[usize]) -> Result<()> {
        self.label_names.clear();
        for doc in &mut self.docs {
            let label = labels.get(doc.source_index).ok_or(Error::OutOfRange {
                what: "label line",
                index: doc.source_index,
                limit: labels.len(),
            })?;
            doc.gold_label = Some(*label);
        }
        Ok(())
    }
}

/// Result of a load: the corpus plus the number of tokens dropped because they
/// were missing from a fixed vocabulary.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub corpus: Corpus,
    pub dropped_tokens: usize,
}

/// Reads the plain one-document-per-line format.
///
/// An inline label is any non-empty, whitespace-free class name before the
/// first tab; class ids are assigned in order of first appearance.
/// With `vocab = None` the vocabulary is built from the stream in order of
/// first occurrence. With a fixed vocabulary, unknown tokens are dropped and
/// counted. Lines that end up with no tokens produce no document.
pub fn load_corpus_plain<R: BufRead>(reader: R, vocab: Option<&Vocabulary>) -> Result<Loaded> {
    let mut built = vocab.cloned().unwrap_or_default();
    let fixed = vocab.is_some();
    let mut docs = Vec::new();
    let mut dropped = 0;
    let mut label_names: Vec<String> = Vec::new();
    let mut label_ids: HashMap<String, usize> = HashMap::new();

    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let (label, body) = match line.split_once('\t') {
            Some((label, body)) => {
                let name = label.trim();
                if name.is_empty() || name.contains(char::is_whitespace) {
                    return Err(Error::Parse {
                        line: idx + 1,
                        message: format!("malformed label field {label:?}"),
                    });
                }
                let id = *label_ids.entry(name.to_owned()).or_insert_with(|| {
                    label_names.push(name.to_owned());
                    label_names.len() - 1
                });
                (Some(id), body)
            }
            None => (None, line.as_str()),
        };
        let mut word_ids = Vec::new();
        for token in body.split_whitespace() {
            if fixed {
                match built.id(token) {
                    Some(id) => word_ids.push(id),
                    None => dropped += 1,
                }
            } else {
                word_ids.push(built.observe(token));
            }
        }
        if !word_ids.is_empty() {
            docs.push(Document {
                word_ids,
                gold_label: label,
                source_index: idx,
            });
        }
    }
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(Loaded {
        corpus: Corpus {
            docs,
            vocab: built,
            label_names,
        },
        dropped_tokens: dropped,
    })
}

/// Reads the sparse bag-of-words format. Each `(doc, term, count)` record
/// expands into `count` repetitions of the term. Words are named by their
/// 1-based term id until renamed with a vocabulary file.
pub fn load_corpus_bow<R: BufRead>(reader: R) -> Result<Corpus> {
    let mut lines = reader
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()));

    let mut header = [0usize; 3];
    for (slot, name) in header.iter_mut().zip(["D", "V", "NNZ"]) {
        let (idx, line) = lines.next().ok_or(Error::EmptyCorpus)?;
        let line = line?;
        *slot = line.trim().parse().map_err(|_| Error::Parse {
            line: idx + 1,
            message: format!("bad {name} header {line:?}"),
        })?;
    }
    let [n_docs, n_terms, nnz] = header;
    if nnz == 0 {
        return Err(Error::EmptyCorpus);
    }

    let mut vocab = Vocabulary::from_words((1..=n_terms).map(|t| t.to_string()))?;
    let mut per_doc: Vec<Vec<usize>> = vec![Vec::new(); n_docs];
    for record in 1..=nnz {
        let bad = |message: String| Error::BowRecord { record, message };
        let (_, line) = lines
            .next()
            .ok_or_else(|| bad(format!("missing (header declares {nnz} records)")))?;
        let line = line?;
        let fields: Vec<i64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(format!("unparseable {line:?}")))?;
        let &[doc, term, count] = fields.as_slice() else {
            return Err(bad(format!("expected 3 fields, got {}", fields.len())));
        };
        if doc < 1 || doc as usize > n_docs {
            return Err(bad(format!("docId {doc} outside 1..={n_docs}")));
        }
        if term < 1 || term as usize > n_terms {
            return Err(bad(format!("termId {term} outside 1..={n_terms}")));
        }
        if count < 0 {
            return Err(bad(format!("negative count {count}")));
        }
        let id = term as usize - 1;
        vocab.counts[id] += count as u64;
        per_doc[doc as usize - 1].extend(std::iter::repeat_n(id, count as usize));
    }

    let docs: Vec<Document> = per_doc
        .into_iter()
        .enumerate()
        .filter(|(_, ids)| !ids.is_empty())
        .map(|(source_index, word_ids)| Document {
            word_ids,
            gold_label: None,
            source_index,
        })
        .collect();
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(Corpus {
        docs,
        vocab,
        label_names: Vec::new(),
    })
}

/// Writes `corpus` in the sparse bag-of-words format, one record per distinct
/// (document, term) pair, documents numbered in corpus order.
pub fn export_bow<W: Write>(corpus: &Corpus, mut out: W) -> Result<()> {
    let counted: Vec<_> = corpus.docs.iter().map(Document::word_counts).collect();
    let nnz: usize = counted.iter().map(Vec::len).sum();
    writeln!(out, "{}\n{}\n{}", corpus.len(), corpus.vocab.len(), nnz)?;
    for (d, pairs) in counted.iter().enumerate() {
        for &(term, count) in pairs {
            writeln!(out, "{} {} {}", d + 1, term + 1, count)?;
        }
    }
    Ok(())
}

/// One integer class id per line; blank lines are ignored.
pub fn read_labels<R: BufRead>(reader: R) -> Result<Vec<usize>> {
    let mut labels = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        labels.push(line.parse().map_err(|_| Error::Parse {
            line: idx + 1,
            message: format!("malformed label {line:?}"),
        })?);
    }
    Ok(labels)
}

/// Keeps exactly the documents with at least `min_doc_len` words, in order.
/// Returns the filtered corpus and the number of documents removed.
pub fn filter_short_documents(corpus: &Corpus, min_doc_len: usize) -> Result<(Corpus, usize)> {
    if min_doc_len == 0 {
        return Err(Error::InvalidConfig("min_doc_len must be at least 1".into()));
    }
    let docs: Vec<Document> = corpus
        .docs
        .iter()
        .filter(|d| d.len() >= min_doc_len)
        .cloned()
        .collect();
    if docs.is_empty() {
        return Err(Error::EmptyAfterFiltering);
    }
    let removed = corpus.len() - docs.len();
    Ok((
        Corpus {
            docs,
            vocab: corpus.vocab.clone(),
            label_names: corpus.label_names.clone(),
        },
        removed,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FakeMode {
    #[default]
    Uniform,
    Unigram,
}

impl FromStr for FakeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "unigram" => Ok(Self::Unigram),
            other => Err(Error::InvalidConfig(format!("unknown fake mode {other:?}"))),
        }
    }
}

impl fmt::Display for FakeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::Unigram => "unigram",
        })
    }
}

/// Reusable word sampler for fake documents.
#[derive(Debug, Clone)]
pub enum FakeDocSampler {
    Uniform(Uniform<usize>),
    Unigram(WeightedIndex<u64>),
}

impl FakeDocSampler {
    pub fn new(vocab: &Vocabulary, mode: FakeMode) -> Result<Self> {
        if vocab.is_empty() {
            return Err(Error::InvalidConfig("cannot sample from an empty vocabulary".into()));
        }
        Ok(match mode {
            FakeMode::Uniform => Self::Uniform(Uniform::new(0, vocab.len())),
            FakeMode::Unigram => Self::Unigram(
                WeightedIndex::new(vocab.counts())
                    .map_err(|e| Error::InvalidConfig(format!("unigram weights: {e}")))?,
            ),
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, length: usize, rng: &mut R) -> Document {
        let word_ids = match self {
            Self::Uniform(dist) => dist.sample_iter(&mut *rng).take(length).collect(),
            Self::Unigram(dist) => dist.sample_iter(&mut *rng).take(length).collect(),
        };
        Document::new(word_ids)
    }
}

/// Draws a fake document of exactly `length` i.i.d. word ids.
pub fn sample_fake_document<R: Rng + ?Sized>(
    vocab: &Vocabulary,
    length: usize,
    rng: &mut R,
    mode: FakeMode,
) -> Result<Document> {
    if length == 0 {
        return Err(Error::InvalidConfig("fake document length must be positive".into()));
    }
    Ok(FakeDocSampler::new(vocab, mode)?.sample(length, rng))
}
