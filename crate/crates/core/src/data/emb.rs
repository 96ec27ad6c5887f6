//! The EMB1 embedding interchange format.
//!
//! Little-endian layout:
//!
//! ```text
//! "EMB1" | u32 version = 1 | u32 dim | u32 layers | u64 n_sentences
//! per sentence: u64 sentence_id | u32 n_tokens | layers·n_tokens·dim f32
//! ```
//!
//! Values are layer-major, then token-major. Layer 0 holds the
//! context-independent type vectors.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EMB1";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8;

/// Per-token vectors of one sentence, one `n × dim` matrix per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    pub sentence_id: u64,
    pub layers: Vec<Array2<f32>>,
}

impl EmbeddingSequence {
    pub fn n_tokens(&self) -> usize {
        self.layers.first().map_or(0, |l| l.nrows())
    }

    pub fn dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.ncols())
    }
}

/// Header summary of an EMB1 file.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub struct EmbHeader {
    pub version: u32,
    pub dim: u32,
    pub layers: u32,
    pub n_sentences: u64,
}

pub fn write_embeddings(path: impl AsRef<Path>, records: &[EmbeddingSequence]) -> Result<()> {
    let bytes = encode_embeddings(records)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn encode_embeddings(records: &[EmbeddingSequence]) -> Result<Vec<u8>> {
    let (dim, layers) = match records.first() {
        Some(r) => (r.dim(), r.layers.len()),
        None => (0, 0),
    };
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(layers as u32).to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        if r.layers.len() != layers || r.layers.iter().any(|l| l.ncols() != dim || l.nrows() != r.n_tokens()) {
            return Err(Error::Format(format!(
                "sentence {} does not match the file's {layers} layers of dim {dim}",
                r.sentence_id
            )));
        }
        out.extend_from_slice(&r.sentence_id.to_le_bytes());
        out.extend_from_slice(&(r.n_tokens() as u32).to_le_bytes());
        for layer in &r.layers {
            for v in layer.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

fn parse_header(c: &mut Cursor) -> Result<EmbHeader> {
    let magic = c.take(4).ok_or_else(|| Error::Format("file shorter than header".into()))?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"EMB1\"")));
    }
    let short = || Error::Format("file shorter than header".into());
    let version = c.u32().ok_or_else(short)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dim = c.u32().ok_or_else(short)?;
    let layers = c.u32().ok_or_else(short)?;
    let n_sentences = c.u64().ok_or_else(short)?;
    if n_sentences > 0 && (dim == 0 || layers == 0) {
        return Err(Error::Format("dim and layer count must be positive".into()));
    }
    Ok(EmbHeader {
        version,
        dim,
        layers,
        n_sentences,
    })
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<(EmbHeader, BTreeMap<u64, EmbeddingSequence>)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let header = parse_header(&mut c)?;
    let (dim, layers) = (header.dim as usize, header.layers as usize);
    let mut records = BTreeMap::new();
    for index in 0..header.n_sentences {
        let sentence_id = c.u64().ok_or(Error::Truncated { sentence_id: index })?;
        let n = c.u32().ok_or(Error::Truncated { sentence_id })? as usize;
        let count = layers
            .checked_mul(n)
            .and_then(|v| v.checked_mul(dim))
            .ok_or(Error::Truncated { sentence_id })?;
        let raw = c
            .take(count.checked_mul(4).ok_or(Error::Truncated { sentence_id })?)
            .ok_or(Error::Truncated { sentence_id })?;
        let mut values = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()));
        let mut mats = Vec::with_capacity(layers);
        for _ in 0..layers {
            let data: Vec<f32> = values.by_ref().take(n * dim).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("non-finite value in sentence {sentence_id}")));
            }
            mats.push(Array2::from_shape_vec((n, dim), data).expect("shape arithmetic"));
        }
        if records
            .insert(sentence_id, EmbeddingSequence { sentence_id, layers: mats })
            .is_some()
        {
            return Err(Error::Format(format!("duplicate sentence id {sentence_id}")));
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after {} records",
            bytes.len() - c.pos,
            header.n_sentences
        )));
    }
    Ok((header, records))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<BTreeMap<u64, EmbeddingSequence>> {
    let bytes = fs::read(path)?;
    Ok(decode_embeddings(&bytes)?.1)
}

/// Validates a whole file and returns its header.
pub fn describe_embeddings(path: impl AsRef<Path>) -> Result<(EmbHeader, usize)> {
    let bytes = fs::read(path)?;
    let (h, records) = decode_embeddings(&bytes)?;
    let tokens = records.values().map(|r| r.n_tokens()).sum();
    Ok((h, tokens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(id: u64, layers: usize, n: usize, dim: usize, seed: f32) -> EmbeddingSequence {
        EmbeddingSequence {
            sentence_id: id,
            layers: (0..layers)
                .map(|l| Array2::from_shape_fn((n, dim), |(i, j)| seed + (l * 100 + i * 10 + j) as f32))
                .collect(),
        }
    }

    #[test]
    fn header_arithmetic() {
        let bytes = encode_embeddings(&[record(0, 2, 3, 4, 0.5)]).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 8 + 4 + 2 * 3 * 4 * 4);
        let (h, recs) = decode_embeddings(&bytes).unwrap();
        assert_eq!(h.n_sentences, 1);
        assert_eq!(recs.len(), 1);
        let r = &recs[&0];
        assert_eq!(r.layers.len(), 2);
        assert_eq!(r.layers[0].dim(), (3, 4));
        assert_eq!(r.layers[1][[2, 3]], 0.5 + 123.0);
    }

    #[test]
    fn truncation_names_the_sentence() {
        let bytes = encode_embeddings(&[record(0, 1, 2, 2, 0.0), record(7, 1, 2, 2, 0.0)]).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        match decode_embeddings(cut) {
            Err(Error::Truncated { sentence_id }) => assert_eq!(sentence_id, 7),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_version_and_trailing_bytes() {
        let mut bytes = encode_embeddings(&[record(0, 1, 1, 1, 0.0)]).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_embeddings(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_embeddings(&bad), Err(Error::Format(_))));
        bytes.push(0);
        assert!(matches!(decode_embeddings(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut r = record(0, 1, 1, 2, 0.0);
        r.layers[0][[0, 1]] = f32::NAN;
        let bytes = encode_embeddings(&[r]).unwrap();
        assert!(matches!(decode_embeddings(&bytes), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in proptest::collection::vec(proptest::num::f32::NORMAL | proptest::num::f32::ZERO, 2 * 3 * 5),
            id in any::<u64>(),
        ) {
            let rec = EmbeddingSequence {
                sentence_id: id,
                layers: vec![
                    Array2::from_shape_vec((3, 5), values[..15].to_vec()).unwrap(),
                    Array2::from_shape_vec((3, 5), values[15..].to_vec()).unwrap(),
                ],
            };
            let bytes = encode_embeddings(std::slice::from_ref(&rec)).unwrap();
            let (_, back) = decode_embeddings(&bytes).unwrap();
            let got = &back[&id];
            for (a, b) in got.layers.iter().zip(&rec.layers) {
                for (x, y) in a.iter().zip(b.iter()) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }
}
