//! Binary checkpoints: magic, format version, a JSON header with the config,
//! dimensions and vocabularies, then every tensor as little-endian f64.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::encoders::BaselineSpec;
use crate::error::{Error, Result};
use crate::model::{ModelParams, Tagger};
use crate::objective::VIBConfig;
use crate::params::ParamSet;

pub const MAGIC: &[u8; 8] = b"VIBTAGCK";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: VIBConfig,
    input_dim: usize,
    type_dim: usize,
    labels: Vocab,
    pos: Vocab,
    /// Variance fractions of a PCA baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pca_explained: Option<Vec<f64>>,
    shapes: Vec<(usize, usize)>,
}

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(params: &ModelParams, mut out: W) -> Result<()> {
    let tensors = params.tensors();
    let pca_explained = match &params.tagger {
        Tagger::Baseline(BaselineSpec::Pca { explained, .. }) => Some(explained.clone()),
        _ => None,
    };
    let header = Header {
        config: params.config.clone(),
        input_dim: params.input_dim,
        type_dim: params.type_dim,
        labels: params.labels.clone(),
        pos: params.pos.clone(),
        pca_explained,
        shapes: tensors.iter().map(|t| t.dim()).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for t in tensors {
        for v in t.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<ModelParams> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|_| err("file too short"))?;
    if &magic != MAGIC {
        return Err(err("not a checkpoint (bad magic)"));
    }
    let mut b4 = [0u8; 4];
    input.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(err(format!("unsupported checkpoint version {version}")));
    }
    let mut b8 = [0u8; 8];
    input.read_exact(&mut b8)?;
    let len = u64::from_le_bytes(b8);
    if len > 1 << 30 {
        return Err(err("header length out of range"));
    }
    let mut json = vec![0u8; len as usize];
    input.read_exact(&mut json).map_err(|_| err("truncated header"))?;
    let mut header: Header = serde_json::from_slice(&json).map_err(|e| err(format!("bad header: {e}")))?;
    header.labels.reindex();
    header.pos.reindex();
    let mut params = ModelParams::zeros(
        &header.config,
        header.input_dim,
        header.type_dim,
        header.labels,
        header.pos,
    )?;
    if let (Tagger::Baseline(BaselineSpec::Pca { explained, .. }), Some(e)) = (&mut params.tagger, header.pca_explained) {
        *explained = e;
    }
    let expected: Vec<(usize, usize)> = params.tensors().iter().map(|t| t.dim()).collect();
    if expected != header.shapes {
        return Err(err("tensor shapes do not match the configuration"));
    }
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            input.read_exact(&mut b8).map_err(|_| err("truncated tensor data"))?;
            *v = f64::from_le_bytes(b8);
        }
    }
    if input.read(&mut [0u8; 1])? != 0 {
        return Err(err("trailing bytes after tensor data"));
    }
    Ok(params)
}

pub fn save(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(params, std::io::BufWriter::new(file))
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelParams> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::TagMode;
    use crate::model::ModelKind;
    use crate::objective::DecoderDims;
    use crate::synthetic::{generate, SyntheticConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn round_trip(kind: ModelKind, mode: TagMode, recurrent: usize) {
        let c = generate(&SyntheticConfig {
            n_train: 10,
            n_dev: 1,
            n_test: 1,
            signal_dim: 4,
            noise_dim: 2,
            ..Default::default()
        })
        .unwrap();
        let cfg = VIBConfig {
            kind,
            mode,
            encoder_hidden: Some(3),
            decoder: DecoderDims {
                recurrent_hidden: recurrent,
                arc_dim: 3,
                label_dim: 2,
            },
            ..Default::default()
        };
        let p = ModelParams::new(&cfg, &c.train, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        let q = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(p, q);
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        buf.truncate(buf.len() - 3);
        assert!(matches!(read_checkpoint(buf.as_slice()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn every_kind_round_trips_bit_exactly() {
        round_trip(ModelKind::Vib, TagMode::Continuous { dim: 3 }, 2);
        round_trip(ModelKind::Vib, TagMode::Discrete { k: 4 }, 0);
        round_trip(ModelKind::Mlp, TagMode::Continuous { dim: 3 }, 2);
        round_trip(ModelKind::Pca, TagMode::Continuous { dim: 3 }, 0);
        round_trip(ModelKind::Identity, TagMode::Continuous { dim: 3 }, 0);
        round_trip(ModelKind::GoldPos, TagMode::Continuous { dim: 3 }, 2);
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(matches!(read_checkpoint(&b"NOTACKPT\x01\0\0\0"[..]), Err(Error::Checkpoint(_))));
        let mut bad = MAGIC.to_vec();
        bad.extend(9u32.to_le_bytes());
        assert!(read_checkpoint(bad.as_slice()).is_err());
    }
}
