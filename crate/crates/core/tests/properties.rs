use dntm_core::corpus::export_bow;
use dntm_core::objective::{batch_loss, batch_loss_and_gradients, LossWeights};
use dntm_core::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arb_corpus() -> impl Strategy<Value = Corpus> {
    (1usize..12).prop_flat_map(|v| {
        proptest::collection::vec(proptest::collection::vec(0..v, 1..15), 1..10).prop_map(move |docs| {
            let vocab = Vocabulary::from_words((0..v).map(|i| format!("w{i}"))).unwrap();
            let docs = docs
                .into_iter()
                .enumerate()
                .map(|(i, ids)| Document {
                    word_ids: ids,
                    gold_label: None,
                    source_index: i,
                })
                .collect();
            Corpus {
                docs,
                vocab,
                label_names: Vec::new(),
            }
        })
    })
}

fn sorted(ids: &[usize]) -> Vec<usize> {
    let mut v = ids.to_vec();
    v.sort_unstable();
    v
}

proptest! {
    #[test]
    fn bow_export_reload_preserves_multisets(corpus in arb_corpus()) {
        let mut bytes = Vec::new();
        export_bow(&corpus, &mut bytes).unwrap();
        let back = load_corpus_bow(bytes.as_slice()).unwrap();
        prop_assert_eq!(back.len(), corpus.len());
        prop_assert_eq!(back.vocab.len(), corpus.vocab.len());
        for (a, b) in corpus.docs.iter().zip(&back.docs) {
            prop_assert_eq!(sorted(&a.word_ids), sorted(&b.word_ids));
        }
    }

    #[test]
    fn filtering_is_idempotent(corpus in arb_corpus(), min in 1usize..6) {
        if let Ok((once, _)) = filter_short_documents(&corpus, min) {
            let (twice, removed) = filter_short_documents(&once, min).unwrap();
            prop_assert_eq!(removed, 0);
            prop_assert_eq!(&twice, &once);
            prop_assert!(once.docs.iter().all(|d| d.len() >= min));
        }
    }

    #[test]
    fn plain_tokenization_is_deterministic(lines in proptest::collection::vec("[a-d ]{0,12}", 1..8)) {
        let text = lines.join("\n");
        let a = load_corpus_plain(text.as_bytes(), None);
        let b = load_corpus_plain(text.as_bytes(), None);
        match (a, b) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a.corpus, b.corpus),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "loads disagree"),
        }
    }

    #[test]
    fn fake_documents_have_requested_length(len in 1usize..200, seed in 0u64..1000) {
        let vocab = Vocabulary::from_words(["a", "b", "c"]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let doc = sample_fake_document(&vocab, len, &mut rng, FakeMode::Uniform).unwrap();
        prop_assert_eq!(doc.len(), len);
        prop_assert!(doc.word_ids.iter().all(|&w| w < 3));
    }

    #[test]
    fn loss_invariant_under_batch_permutation(corpus in arb_corpus(), seed in 0u64..100) {
        let v = corpus.vocab.len();
        let params: Params = init_params(v, 3, 4, &mut ChaCha8Rng::seed_from_u64(seed), 1.0).unwrap();
        let w = LossWeights::default();
        let fake = vec![Document::new(vec![0; 3])];
        let forward = batch_loss(&params, &corpus.docs, &fake, &w).unwrap();
        let mut docs: Vec<Document> = corpus.docs.iter().rev().cloned().collect();
        for d in &mut docs {
            d.word_ids.reverse();
        }
        let reversed = batch_loss(&params, &docs, &fake, &w).unwrap();
        prop_assert!((forward - reversed).abs() <= 1e-9 * (1.0 + forward.abs()));

        let (terms, grads) = batch_loss_and_gradients(&params, &corpus.docs, &fake, &w).unwrap();
        prop_assert_eq!(terms.total.to_bits(), forward.to_bits());
        prop_assert!(grads.is_finite());
    }

    #[test]
    fn entropy_and_kl_bounds(raw in proptest::collection::vec(0.0f64..1.0, 2..8), mix in 0.0f64..1.0) {
        let total: f64 = raw.iter().sum();
        prop_assume!(total > 1e-6);
        let p = Dist::new(raw.iter().map(|x| x / total).collect()).unwrap();
        let k = p.len() as f64;
        let eps = 1e-8;
        let h = objective::entropy(&p, eps);
        prop_assert!(h >= -k * eps && h <= k.ln() + k * eps);
        prop_assert_eq!(objective::kl_divergence(&p, &p, eps).unwrap(), 0.0);
        let uniform = Dist::uniform(p.len());
        let q = Dist::new(p.iter().zip(uniform.iter()).map(|(a, b)| mix * a + (1.0 - mix) * b).collect()).unwrap();
        prop_assert!(objective::kl_divergence(&p, &q, eps).unwrap() >= -k * eps);
    }
}
