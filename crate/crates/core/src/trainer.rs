//! Minibatch training with adaptive moment estimation.

use std::fmt::Write as _;
use std::io::BufRead;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Document, FakeDocSampler, FakeMode};
use crate::error::{Error, Result};
use crate::model::{init_params, ModelParams};
use crate::objective::{batch_loss_and_gradients, Gradients, LossWeights};
use crate::scalar::Scalar;

/// Every knob of a training run. Parsed from and written to a flat
/// `key=value` text file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_docs: usize,
    /// Fake documents per real document in a batch.
    pub fake_ratio: f64,
    pub fake_mode: FakeMode,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub embed_dim: usize,
    pub topics: usize,
    pub init_scale: f64,
    /// Epochs between intermediate checkpoints; 0 saves only the final model.
    pub checkpoint_every: usize,
    pub min_doc_len: usize,
    pub log_path: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_docs: 64,
            fake_ratio: 1.0,
            fake_mode: FakeMode::Uniform,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            weights: LossWeights::default(),
            embed_dim: 50,
            topics: 20,
            init_scale: 0.05,
            checkpoint_every: 10,
            min_doc_len: 2,
            log_path: None,
        }
    }
}

fn parse_value<V: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<V> {
    value.parse().map_err(|_| Error::Parse {
        line,
        message: format!("bad value {value:?} for {key}"),
    })
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_docs == 0 {
            return bad("batch_docs must be positive".into());
        }
        if !(self.fake_ratio >= 0.0 && self.fake_ratio.is_finite()) {
            return bad(format!("fake_ratio must be >= 0, got {}", self.fake_ratio));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if self.embed_dim == 0 || self.topics == 0 {
            return bad("embed_dim and topics must be positive".into());
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return bad(format!("init_scale must be positive, got {}", self.init_scale));
        }
        if self.min_doc_len == 0 {
            return bad("min_doc_len must be positive".into());
        }
        self.weights.validate()
    }

    /// Applies a single `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let v = value;
        match key {
            "epochs" => self.epochs = parse_value(key, v, line)?,
            "batch_docs" => self.batch_docs = parse_value(key, v, line)?,
            "fake_ratio" => self.fake_ratio = parse_value(key, v, line)?,
            "fake_mode" => self.fake_mode = parse_value(key, v, line)?,
            "learning_rate" => self.learning_rate = parse_value(key, v, line)?,
            "adam_beta1" => self.adam_beta1 = parse_value(key, v, line)?,
            "adam_beta2" => self.adam_beta2 = parse_value(key, v, line)?,
            "adam_eps" => self.adam_eps = parse_value(key, v, line)?,
            "seed" => self.seed = parse_value(key, v, line)?,
            "lambda_ent" => self.weights.entropy = parse_value(key, v, line)?,
            "lambda_kl" => self.weights.kl = parse_value(key, v, line)?,
            "lambda_bal" => self.weights.balance = parse_value(key, v, line)?,
            "lambda_neg" => self.weights.negative = parse_value(key, v, line)?,
            "eps" => self.weights.eps = parse_value(key, v, line)?,
            "kl_clip" => self.weights.kl_clip = parse_value(key, v, line)?,
            "embed_dim" => self.embed_dim = parse_value(key, v, line)?,
            "topics" => self.topics = parse_value(key, v, line)?,
            "init_scale" => self.init_scale = parse_value(key, v, line)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, v, line)?,
            "min_doc_len" => self.min_doc_len = parse_value(key, v, line)?,
            "log_path" => self.log_path = (!v.is_empty()).then(|| v.to_owned()),
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown key {other:?}"),
                })
            }
        }
        Ok(())
    }

    /// Reads `key=value` lines on top of the defaults. `#` starts a comment.
    pub fn parse<R: BufRead>(reader: R) -> Result<Self> {
        let mut cfg = Self::default();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
                line: idx + 1,
                message: format!("expected key=value, got {content:?}"),
            })?;
            cfg.set(key.trim(), value.trim(), idx + 1)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serializes every field; `parse(to_key_values())` reproduces `self`.
    pub fn to_key_values(&self) -> String {
        let w = &self.weights;
        let mut s = String::new();
        let mut put = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("epochs", &self.epochs);
        put("batch_docs", &self.batch_docs);
        put("fake_ratio", &self.fake_ratio);
        put("fake_mode", &self.fake_mode);
        put("learning_rate", &self.learning_rate);
        put("adam_beta1", &self.adam_beta1);
        put("adam_beta2", &self.adam_beta2);
        put("adam_eps", &self.adam_eps);
        put("seed", &self.seed);
        put("lambda_ent", &w.entropy);
        put("lambda_kl", &w.kl);
        put("lambda_bal", &w.balance);
        put("lambda_neg", &w.negative);
        put("eps", &w.eps);
        put("kl_clip", &w.kl_clip);
        put("embed_dim", &self.embed_dim);
        put("topics", &self.topics);
        put("init_scale", &self.init_scale);
        put("checkpoint_every", &self.checkpoint_every);
        put("min_doc_len", &self.min_doc_len);
        put("log_path", &self.log_path.as_deref().unwrap_or(""));
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub mean_batch_loss: f64,
    /// Mean entropy per real word occurrence.
    pub mean_entropy: f64,
    /// Mean KL per real word occurrence.
    pub mean_kl: f64,
    /// Balance entropy averaged over batches.
    pub balance_entropy: f64,
    pub seconds: f64,
}

impl EpochRecord {
    /// `epoch<TAB>loss<TAB>entropy<TAB>kl<TAB>balance<TAB>seconds`
    pub fn to_log_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{:.3}",
            self.epoch,
            self.mean_batch_loss,
            self.mean_entropy,
            self.mean_kl,
            self.balance_entropy,
            self.seconds
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

/// First and second moment buffers. Embedding rows are updated lazily: a
/// row's moments decay only in steps where the row receives a gradient.
struct Adam<T> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    step: i32,
    m_embed: Vec<T>,
    v_embed: Vec<T>,
    m_weight: Vec<T>,
    v_weight: Vec<T>,
    m_bias: Vec<T>,
    v_bias: Vec<T>,
}

impl<T: Scalar> Adam<T> {
    fn new(cfg: &TrainConfig, params: &ModelParams<T>) -> Self {
        let zeros = |n| vec![T::zero(); n];
        Self {
            lr: T::of(cfg.learning_rate),
            beta1: T::of(cfg.adam_beta1),
            beta2: T::of(cfg.adam_beta2),
            eps: T::of(cfg.adam_eps),
            step: 0,
            m_embed: zeros(params.embeddings.len()),
            v_embed: zeros(params.embeddings.len()),
            m_weight: zeros(params.topic_weights.len()),
            v_weight: zeros(params.topic_weights.len()),
            m_bias: zeros(params.topic_bias.len()),
            v_bias: zeros(params.topic_bias.len()),
        }
    }

    fn update_slice(&self, p: &mut [T], g: &[T], m: &mut [T], v: &mut [T], c1: T, c2: T) {
        let one = T::one();
        for i in 0..p.len() {
            m[i] = self.beta1 * m[i] + (one - self.beta1) * g[i];
            v[i] = self.beta2 * v[i] + (one - self.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    fn step(&mut self, params: &mut ModelParams<T>, grads: &Gradients<T>) {
        self.step = self.step.saturating_add(1);
        let c1 = T::one() - self.beta1.powi(self.step);
        let c2 = T::one() - self.beta2.powi(self.step);

        let mut m = std::mem::take(&mut self.m_weight);
        let mut v = std::mem::take(&mut self.v_weight);
        self.update_slice(&mut params.topic_weights, &grads.topic_weights, &mut m, &mut v, c1, c2);
        self.m_weight = m;
        self.v_weight = v;

        let mut m = std::mem::take(&mut self.m_bias);
        let mut v = std::mem::take(&mut self.v_bias);
        self.update_slice(&mut params.topic_bias, &grads.topic_bias, &mut m, &mut v, c1, c2);
        self.m_bias = m;
        self.v_bias = v;

        let d = params.dim();
        let mut m = std::mem::take(&mut self.m_embed);
        let mut v = std::mem::take(&mut self.v_embed);
        for &row in &grads.touched_rows {
            let r = row * d..(row + 1) * d;
            self.update_slice(
                &mut params.embeddings[r.clone()],
                &grads.embeddings[r.clone()],
                &mut m[r.clone()],
                &mut v[r],
                c1,
                c2,
            );
        }
        self.m_embed = m;
        self.v_embed = v;
    }
}

fn non_finite(what: &'static str, epoch: usize, batch: usize) -> Error {
    Error::NonFinite { what, epoch, batch }
}

/// Trains from scratch. `on_epoch` sees every completed epoch's record and
/// the current parameters (for logging and checkpointing) and may abort the
/// run by returning an error.
pub fn train<T, F>(corpus: &Corpus, config: &TrainConfig, mut on_epoch: F) -> Result<(ModelParams<T>, TrainLog)>
where
    T: Scalar,
    F: FnMut(&EpochRecord, &ModelParams<T>) -> Result<()>,
{
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params: ModelParams<T> = init_params(
        corpus.vocab.len(),
        config.embed_dim,
        config.topics,
        &mut rng,
        config.init_scale,
    )?;
    let sampler = FakeDocSampler::new(&corpus.vocab, config.fake_mode)?;
    let mut adam = Adam::new(config, &params);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..corpus.len()).collect();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut ent_sum, mut kl_sum, mut bal_sum) = (0.0, 0.0, 0.0, 0.0);
        let mut words = 0usize;
        let mut batches = 0usize;

        for (b, chunk) in order.chunks(config.batch_docs).enumerate() {
            let real: Vec<&Document> = chunk.iter().map(|&i| &corpus.docs[i]).collect();
            let n_fake = (config.fake_ratio * real.len() as f64).ceil() as usize;
            let fake: Vec<Document> = (0..n_fake)
                .map(|_| {
                    let len = real[rng.gen_range(0..real.len())].len();
                    sampler.sample(len, &mut rng)
                })
                .collect();

            let (terms, grads) = batch_loss_and_gradients(&params, &real, &fake, &config.weights)?;
            if !terms.total.is_finite() {
                return Err(non_finite("loss", epoch, b));
            }
            if !grads.is_finite() {
                return Err(non_finite("gradient", epoch, b));
            }
            adam.step(&mut params, &grads);

            loss_sum += terms.total.as_f64();
            ent_sum += terms.entropy_sum.as_f64();
            kl_sum += terms.kl_sum.as_f64();
            bal_sum += terms.balance_entropy.as_f64();
            words += terms.real_words;
            batches += 1;
        }
        if !params.is_finite() {
            return Err(non_finite("parameter", epoch, batches.saturating_sub(1)));
        }

        let record = EpochRecord {
            epoch,
            mean_batch_loss: loss_sum / batches as f64,
            mean_entropy: ent_sum / words as f64,
            mean_kl: kl_sum / words as f64,
            balance_entropy: bal_sum / batches as f64,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record, &params)?;
        log.records.push(record);
    }
    Ok((params, log))
}
