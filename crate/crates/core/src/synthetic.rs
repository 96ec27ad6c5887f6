//! Synthetic treebank with known latent word classes.
//!
//! Sentences come from a small clause grammar whose heads are fully
//! determined by the class sequence:
//!
//! ```text
//! S      → Clause (PUNCT Clause)? PUNCT
//! Clause → NP VERB NP? PP* ADV?
//! NP     → (DET | PRON)? ADJ* NOUN
//! PP     → ADP NP
//! ```
//!
//! The first verb is the root; a second clause's verb attaches to it as
//! `conj`, and the comma before it attaches to that verb. Determiners,
//! possessive pronouns and adjectives attach to the next noun; a preposition
//! attaches to the noun it introduces, which attaches to its clause verb as
//! `obl`. Other nouns are `nsubj` before the verb and `obj` after it. Adverbs
//! attach to their clause verb and the final punctuation to the root.
//!
//! Token vectors are a class prototype plus a per-word offset plus Gaussian
//! noise, followed by pure-noise dimensions. Type vectors (layer 0) are the
//! noiseless word vectors.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EmbeddingSequence, Example, Sentence};
use crate::error::{Error, Result};
use crate::tape::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WordClass {
    Verb,
    Noun,
    Det,
    Adj,
    Adp,
    Adv,
    Pron,
    Punct,
}

impl WordClass {
    pub const ALL: [WordClass; 8] = [
        WordClass::Verb,
        WordClass::Noun,
        WordClass::Det,
        WordClass::Adj,
        WordClass::Adp,
        WordClass::Adv,
        WordClass::Pron,
        WordClass::Punct,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            WordClass::Verb => "VERB",
            WordClass::Noun => "NOUN",
            WordClass::Det => "DET",
            WordClass::Adj => "ADJ",
            WordClass::Adp => "ADP",
            WordClass::Adv => "ADV",
            WordClass::Pron => "PRON",
            WordClass::Punct => "PUNCT",
        }
    }

    fn index(self) -> usize {
        WordClass::ALL.iter().position(|&c| c == self).unwrap()
    }
}

/// Which grammar to sample from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grammar {
    /// All eight classes.
    Full,
    /// Nouns, verbs and determiners only: up to four coordinated
    /// `DET? NOUN VERB (DET? NOUN)?` clauses.
    Small,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub grammar: Grammar,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub words_per_class: usize,
    /// Dimensions carrying class and word identity.
    pub signal_dim: usize,
    /// Trailing dimensions of pure noise.
    pub noise_dim: usize,
    pub prototype_scale: f64,
    pub word_scale: f64,
    pub token_noise: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            grammar: Grammar::Full,
            n_train: 2000,
            n_dev: 200,
            n_test: 500,
            words_per_class: 6,
            signal_dim: 16,
            noise_dim: 24,
            prototype_scale: 1.0,
            word_scale: 0.3,
            token_noise: 0.3,
            max_len: 30,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

struct Lexicon {
    /// Per class, per word: the noiseless signal vector.
    words: Vec<Vec<Vec<f64>>>,
    /// Per class, per word: the fixed noise-dimension part of the type vector.
    type_noise: Vec<Vec<Vec<f64>>>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

impl Lexicon {
    fn new(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut words = Vec::new();
        let mut type_noise = Vec::new();
        for _ in WordClass::ALL {
            let proto: Vec<f64> = (0..cfg.signal_dim).map(|_| cfg.prototype_scale * normal(rng)).collect();
            let mut class_words = Vec::new();
            let mut class_noise = Vec::new();
            for _ in 0..cfg.words_per_class {
                class_words.push(proto.iter().map(|p| p + cfg.word_scale * normal(rng)).collect());
                class_noise.push((0..cfg.noise_dim).map(|_| normal(rng)).collect());
            }
            words.push(class_words);
            type_noise.push(class_noise);
        }
        Lexicon { words, type_noise }
    }
}

#[derive(Default)]
struct Builder {
    classes: Vec<WordClass>,
    heads: Vec<usize>,
    labels: Vec<&'static str>,
}

impl Builder {
    /// Appends a token and returns its 1-based position.
    fn push(&mut self, class: WordClass, head: usize, label: &'static str) -> usize {
        self.classes.push(class);
        self.heads.push(head);
        self.labels.push(label);
        self.classes.len()
    }

    fn set(&mut self, pos: usize, head: usize, label: &'static str) {
        self.heads[pos - 1] = head;
        self.labels[pos - 1] = label;
    }

    /// `(DET|PRON)? ADJ* NOUN`; modifiers point at the noun. Returns the noun.
    fn noun_phrase(&mut self, rng: &mut ChaCha8Rng, full: bool) -> usize {
        let mut modifiers = Vec::new();
        let r: f64 = rng.gen();
        if r < 0.5 {
            modifiers.push((self.push(WordClass::Det, 0, "det"), "det"));
        } else if full && r < 0.7 {
            modifiers.push((self.push(WordClass::Pron, 0, "nmod:poss"), "nmod:poss"));
        }
        if full {
            for _ in 0..2 {
                if rng.gen_bool(0.3) {
                    modifiers.push((self.push(WordClass::Adj, 0, "amod"), "amod"));
                } else {
                    break;
                }
            }
        }
        let noun = self.push(WordClass::Noun, 0, "_");
        for (m, label) in modifiers {
            self.set(m, noun, label);
        }
        noun
    }

    /// Returns the clause verb. `governor` is the root verb for a second clause.
    fn clause(&mut self, rng: &mut ChaCha8Rng, full: bool, governor: Option<usize>) -> usize {
        let subject = self.noun_phrase(rng, full);
        let verb = match governor {
            None => self.push(WordClass::Verb, 0, "root"),
            Some(g) => self.push(WordClass::Verb, g, "conj"),
        };
        self.set(subject, verb, "nsubj");
        if rng.gen_bool(0.7) {
            let obj = self.noun_phrase(rng, full);
            self.set(obj, verb, "obj");
        }
        if full {
            for _ in 0..2 {
                if !rng.gen_bool(0.4) {
                    break;
                }
                let adp = self.push(WordClass::Adp, 0, "case");
                let noun = self.noun_phrase(rng, full);
                self.set(adp, noun, "case");
                self.set(noun, verb, "obl");
            }
            if rng.gen_bool(0.3) {
                self.push(WordClass::Adv, verb, "advmod");
            }
        }
        verb
    }

    fn sentence(rng: &mut ChaCha8Rng, grammar: Grammar) -> Builder {
        let full = grammar == Grammar::Full;
        let mut b = Builder::default();
        let root = b.clause(rng, full, None);
        if full {
            if rng.gen_bool(0.3) {
                let comma = b.push(WordClass::Punct, 0, "punct");
                let conj = b.clause(rng, full, Some(root));
                b.set(comma, conj, "punct");
            }
            b.push(WordClass::Punct, root, "punct");
        } else {
            for _ in 0..3 {
                if !rng.gen_bool(0.5) {
                    break;
                }
                b.clause(rng, full, Some(root));
            }
        }
        b
    }
}

/// Classes used by a grammar, in first-use order of [`WordClass::ALL`].
pub fn grammar_classes(grammar: Grammar) -> Vec<WordClass> {
    match grammar {
        Grammar::Full => WordClass::ALL.to_vec(),
        Grammar::Small => vec![WordClass::Verb, WordClass::Noun, WordClass::Det],
    }
}

fn make_example(
    cfg: &SyntheticConfig,
    lex: &Lexicon,
    rng: &mut ChaCha8Rng,
    id: u64,
) -> Example {
    let b = loop {
        let b = Builder::sentence(rng, cfg.grammar);
        if b.classes.len() <= cfg.max_len {
            break b;
        }
    };
    let n = b.classes.len();
    let dim = cfg.signal_dim + cfg.noise_dim;
    let mut tokens = Mat::zeros((n, dim));
    let mut types = Mat::zeros((n, dim));
    let mut words = Vec::with_capacity(n);
    for (i, &class) in b.classes.iter().enumerate() {
        let w = rng.gen_range(0..cfg.words_per_class);
        let c = class.index();
        words.push(format!("{}{}", class.tag().to_lowercase(), w));
        for j in 0..cfg.signal_dim {
            let v = lex.words[c][w][j];
            types[[i, j]] = v;
            tokens[[i, j]] = v + cfg.token_noise * normal(rng);
        }
        for j in 0..cfg.noise_dim {
            types[[i, cfg.signal_dim + j]] = lex.type_noise[c][w][j];
            tokens[[i, cfg.signal_dim + j]] = normal(rng);
        }
    }
    let sentence = Sentence::new(
        id,
        words,
        b.heads,
        b.labels.iter().map(|s| s.to_string()).collect(),
        b.classes.iter().map(|c| c.tag().to_string()).collect(),
    );
    Example {
        sentence,
        tokens,
        types,
    }
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    if cfg.words_per_class == 0 || cfg.signal_dim == 0 {
        return Err(Error::Config("synthetic lexicon needs words and signal dimensions".into()));
    }
    if cfg.max_len < 6 {
        return Err(Error::Config("synthetic sentences need max_len of at least 6".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lex = Lexicon::new(cfg, &mut rng);
    let mut next_id = 0u64;
    let mut split = |count: usize, rng: &mut ChaCha8Rng| {
        let examples = (0..count)
            .map(|_| {
                next_id += 1;
                make_example(cfg, &lex, rng, next_id - 1)
            })
            .collect();
        Dataset {
            examples,
            token_layer: 1,
        }
    };
    let train = split(cfg.n_train, &mut rng);
    let dev = split(cfg.n_dev, &mut rng);
    let test = split(cfg.n_test, &mut rng);
    Ok(SyntheticCorpus { train, dev, test })
}

/// EMB1 records (layer 0 = type vectors, layer 1 = token vectors).
pub fn embedding_records(dataset: &Dataset) -> Vec<EmbeddingSequence> {
    dataset
        .examples
        .iter()
        .map(|e| EmbeddingSequence {
            sentence_id: e.sentence.id,
            layers: vec![e.types.mapv(|v| v as f32), e.tokens.mapv(|v| v as f32)],
        })
        .collect()
}

/// Shuffles a copy of the examples; used to vary minibatch composition.
pub fn shuffled(dataset: &Dataset, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = dataset.examples.clone();
    examples.shuffle(&mut rng);
    Dataset {
        examples,
        token_layer: dataset.token_layer,
    }
}
