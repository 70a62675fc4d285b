//! Binary checkpoint format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic     8 bytes  "DNTMCKPT"
//! version   u32      currently 1
//! V, d, K   3 × u64
//! words     V × (u32 byte length, UTF-8 bytes)
//! E         V·d × f64, row-major
//! W         K·d × f64, row-major
//! b         K × f64
//! ```
//!
//! The file must end exactly after `b`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"DNTMCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Expected dimensions; `None` fields are not checked.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExpectedDims {
    pub vocab_size: Option<usize>,
    pub dim: Option<usize>,
    pub topics: Option<usize>,
}

impl ExpectedDims {
    pub fn check<T: Scalar>(&self, params: &ModelParams<T>) -> Result<()> {
        for (what, want, found) in [
            ("vocabulary size", self.vocab_size, params.vocab_size()),
            ("embedding dimension", self.dim, params.dim()),
            ("topic count", self.topics, params.topics()),
        ] {
            if let Some(expected) = want {
                if expected != found {
                    return Err(Error::DimensionMismatch {
                        what,
                        found,
                        expected,
                    });
                }
            }
        }
        Ok(())
    }
}

pub fn write_checkpoint<T: Scalar, W: Write>(
    params: &ModelParams<T>,
    vocab: &Vocabulary,
    mut out: W,
) -> Result<()> {
    if vocab.len() != params.vocab_size() {
        return Err(Error::DimensionMismatch {
            what: "vocabulary size",
            found: vocab.len(),
            expected: params.vocab_size(),
        });
    }
    let mut buf = Vec::with_capacity(
        64 + 8 * (params.embeddings.len() + params.topic_weights.len() + params.topics()),
    );
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for n in [params.vocab_size(), params.dim(), params.topics()] {
        buf.extend_from_slice(&(n as u64).to_le_bytes());
    }
    for word in vocab.words() {
        let len = u32::try_from(word.len())
            .map_err(|_| Error::InvalidConfig(format!("word too long: {} bytes", word.len())))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(word.as_bytes());
    }
    for x in params
        .embeddings
        .iter()
        .chain(&params.topic_weights)
        .chain(&params.topic_bias)
    {
        buf.extend_from_slice(&x.as_f64().to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn save_checkpoint<T: Scalar>(
    params: &ModelParams<T>,
    vocab: &Vocabulary,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(params, vocab, &mut bytes)?;
    fs::write(path, bytes)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::TruncatedCheckpoint)?;
        let slice = self.bytes.get(self.pos..end).ok_or(Error::TruncatedCheckpoint)?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::CorruptCheckpoint(format!("dimension {v} too large")))
    }

    fn floats<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let bytes = self.take(n.checked_mul(8).ok_or(Error::TruncatedCheckpoint)?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }
}

/// Parses a checkpoint held in memory.
pub fn read_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(ModelParams<T>, Vocabulary)> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(MAGIC.len()).map_err(|_| Error::BadMagic)?;
    if magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (v, d, k) = (cur.usize()?, cur.usize()?, cur.usize()?);
    if v == 0 || d == 0 || k == 0 {
        return Err(Error::CorruptCheckpoint(format!("zero dimension in ({v}, {d}, {k})")));
    }

    let mut words = Vec::with_capacity(v.min(1 << 20));
    for _ in 0..v {
        let len = cur.u32()? as usize;
        let raw = cur.take(len)?;
        let word = std::str::from_utf8(raw)
            .map_err(|e| Error::CorruptCheckpoint(format!("vocabulary word not UTF-8: {e}")))?;
        words.push(word.to_owned());
    }
    let vocab = Vocabulary::from_words(words)
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;

    let size = |a: usize, b: usize| {
        a.checked_mul(b)
            .ok_or_else(|| Error::CorruptCheckpoint("dimensions overflow".into()))
    };
    let embeddings = cur.floats(size(v, d)?)?;
    let topic_weights = cur.floats(size(k, d)?)?;
    let topic_bias = cur.floats(k)?;
    if cur.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    let params = ModelParams::from_parts(v, d, k, embeddings, topic_weights, topic_bias)?;
    Ok((params, vocab))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(ModelParams<T>, Vocabulary)> {
    read_checkpoint(&fs::read(path)?)
}

/// Loads a checkpoint and rejects it unless its dimensions match `expected`.
pub fn load_checkpoint_expecting<T: Scalar>(
    path: impl AsRef<Path>,
    expected: ExpectedDims,
) -> Result<(ModelParams<T>, Vocabulary)> {
    let (params, vocab) = load_checkpoint(path)?;
    expected.check(&params)?;
    Ok((params, vocab))
}
