//! Treebanks, embedding files and their alignment into a training dataset.

pub mod conllu;
pub mod emb;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

pub use conllu::{parse_conllu, read_conllu, validate_heads, write_conllu, Sentence, Treebank};
pub use emb::{
    decode_embeddings, describe_embeddings, encode_embeddings, read_embeddings, write_embeddings,
    EmbHeader, EmbeddingSequence,
};

use crate::error::{Error, Result};
use crate::tape::Mat;

pub const DEFAULT_MAX_LEN: usize = 30;

/// A sentence with its token vectors (`x`) and type vectors (`x̂`, layer 0).
#[derive(Clone, Debug)]
pub struct Example {
    pub sentence: Sentence,
    pub tokens: Mat,
    pub types: Mat,
}

impl Example {
    pub fn len(&self) -> usize {
        self.sentence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentence.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub token_layer: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AlignReport {
    pub kept: usize,
    pub too_long: usize,
    pub missing_embeddings: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.examples.first().map_or(0, |e| e.tokens.ncols())
    }

    pub fn type_dim(&self) -> usize {
        self.examples.first().map_or(0, |e| e.types.ncols())
    }

    pub fn n_tokens(&self) -> usize {
        self.examples.iter().map(Example::len).sum()
    }

    pub fn sentences(&self) -> impl Iterator<Item = &Sentence> {
        self.examples.iter().map(|e| &e.sentence)
    }

    /// Dependency labels in order of first occurrence.
    pub fn label_vocab(&self) -> Vocab {
        Vocab::from_iter(self.sentences().flat_map(|s| s.labels.iter().cloned()))
    }

    pub fn pos_vocab(&self) -> Vocab {
        Vocab::from_iter(self.sentences().flat_map(|s| s.pos.iter().cloned()))
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            examples: self.examples[range].to_vec(),
            token_layer: self.token_layer,
        }
    }
}

fn layer_to_f64(layer: &ndarray::Array2<f32>) -> Mat {
    layer.mapv(f64::from)
}

/// Pairs sentences with their embedding records, keeping those with a record
/// of matching length and at most `max_len` tokens.
pub fn align(
    sentences: Vec<Sentence>,
    embeddings: &BTreeMap<u64, EmbeddingSequence>,
    token_layer: usize,
    max_len: usize,
) -> Result<(Dataset, AlignReport)> {
    if let Some(r) = embeddings.values().find(|r| token_layer >= r.layers.len()) {
        return Err(Error::Config(format!(
            "token layer {token_layer} not present: sentence {} has {} layers",
            r.sentence_id,
            r.layers.len()
        )));
    }
    let mut report = AlignReport::default();
    let mut examples = Vec::new();
    for sentence in sentences {
        let Some(record) = embeddings.get(&sentence.id) else {
            log::warn!("sentence {} has no embedding record; dropped", sentence.id);
            report.missing_embeddings += 1;
            continue;
        };
        if record.n_tokens() != sentence.len() {
            return Err(Error::Alignment {
                sentence_id: sentence.id,
                treebank: sentence.len(),
                embeddings: record.n_tokens(),
            });
        }
        if sentence.len() > max_len {
            report.too_long += 1;
            continue;
        }
        examples.push(Example {
            tokens: layer_to_f64(&record.layers[token_layer]),
            types: layer_to_f64(&record.layers[0]),
            sentence,
        });
    }
    report.kept = examples.len();
    Ok((Dataset { examples, token_layer }, report))
}

/// String interner with stable, first-occurrence ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    items: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_items(items: Vec<String>) -> Self {
        let mut v = Vocab::default();
        for it in items {
            v.insert(it);
        }
        v
    }

    pub fn insert(&mut self, item: String) -> usize {
        if let Some(&i) = self.index.get(&item) {
            return i;
        }
        self.items.push(item.clone());
        self.index.insert(item, self.items.len() - 1);
        self.items.len() - 1
    }

    pub fn get(&self, item: &str) -> Option<usize> {
        if self.index.len() != self.items.len() {
            return self.items.iter().position(|x| x == item);
        }
        self.index.get(item).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.items[id]
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    /// Restores the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.items.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
    }
}

impl FromIterator<String> for Vocab {
    fn from_iter<I: IntoIterator<Item = String>>(iter: I) -> Self {
        let mut v = Vocab::default();
        for it in iter {
            v.insert(it);
        }
        v
    }
}
