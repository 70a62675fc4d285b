#![allow(dead_code)]

use dntm_core::{Corpus, Document, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `docs` documents of `len` words from `topics` topics with disjoint
/// `words_per_topic`-word vocabularies. Each document picks one topic
/// uniformly and draws all of its words uniformly from that topic.
pub fn synthetic_corpus(docs: usize, len: usize, topics: usize, words_per_topic: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = (0..topics).flat_map(|t| (0..words_per_topic).map(move |w| format!("t{t}w{w}")));
    let mut vocab = Vocabulary::from_words(names).unwrap();
    let mut out = Vec::with_capacity(docs);
    for i in 0..docs {
        let topic = rng.gen_range(0..topics);
        let word_ids: Vec<usize> = (0..len)
            .map(|_| topic * words_per_topic + rng.gen_range(0..words_per_topic))
            .collect();
        for &w in &word_ids {
            vocab.observe(vocab.word(w).unwrap().to_owned().as_str());
        }
        out.push(Document {
            word_ids,
            gold_label: Some(topic),
            source_index: i,
        });
    }
    Corpus {
        docs: out,
        vocab,
        label_names: Vec::new(),
    }
}
