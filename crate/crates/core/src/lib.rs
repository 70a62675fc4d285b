//! Discriminative neural topic model.
//!
//! Each word is embedded, projected onto K topic logits and pushed through a
//! softmax. Training minimizes per-word topic entropy and each word's KL
//! divergence from its document's mean topic distribution, while maximizing
//! the entropy of the batch-mean topic distribution so topics stay balanced.
//! Randomly sampled fake documents act as negatives: on them the entropy and
//! KL terms are maximized instead. All gradients are written by hand.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the common choice of `f64`.

pub mod analysis;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod model;
pub mod objective;
mod scalar;
pub mod trainer;

pub use analysis::{
    assign_clusters, kmeans_baseline, metrics_line, nmi, purity, top_words, word_topic_posterior,
    ClusterAssignment, WordTopicPosterior,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, ExpectedDims};
pub use corpus::{
    filter_short_documents, load_corpus_bow, load_corpus_plain, sample_fake_document, Corpus,
    Document, FakeMode, Vocabulary,
};
pub use error::{Error, Result};
pub use model::{init_params, ModelParams, TopicDist};
pub use objective::{batch_loss, batch_loss_and_gradients, Gradients, LossTerms, LossWeights};
pub use scalar::Scalar;
pub use trainer::{train, EpochRecord, TrainConfig, TrainLog};

pub type Params = ModelParams<f64>;
pub type Params32 = ModelParams<f32>;
pub type Dist = TopicDist<f64>;
pub type Grads = Gradients<f64>;
pub type Posterior = WordTopicPosterior<f64>;
