//! The full parameter set: a tagger (stochastic encoders or a deterministic
//! baseline) feeding the decoder.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Example, Vocab};
use crate::dists::{gumbel_from_uniform, gumbel_max_rows, gumbel_softmax_rows, gaussian_sample_rows, TagPosterior};
use crate::encoders::{pca_fit, BaselineSpec, BoundEncoder, EncodedRows, EncoderParams, MarginalParams, TagMode};
use crate::error::{Error, Result};
use crate::objective::VIBConfig;
use crate::params::{Init, ParamSet};
use crate::parser::{decode_mst, BoundDecoder, DecoderConfig, DecoderParams, ParseTree};
use crate::tape::{Mat, Tape, Var};

/// What feeds the decoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Stochastic tags trained with the information bottleneck.
    #[default]
    Vib,
    /// The continuous encoder with its variance pinned to zero and no KL terms.
    Mlp,
    /// Raw token vectors.
    Identity,
    /// Principal components of the token vectors (dimension from the tag mode).
    Pca,
    /// One-hot gold POS tags.
    GoldPos,
}

/// Parameter groups updated together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    /// The token encoder `θ`.
    Encoder,
    /// Decoder `φ`, marginal `ψ` and type encoder `ξ`.
    Variational,
    /// Fitted once and never trained.
    Fixed,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Tagger {
    Vib {
        token: EncoderParams,
        marginal: MarginalParams,
        types: EncoderParams,
    },
    Baseline(BaselineSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: VIBConfig,
    pub input_dim: usize,
    pub type_dim: usize,
    pub labels: Vocab,
    pub pos: Vocab,
    pub tagger: Tagger,
    pub decoder: DecoderParams,
}

/// Sampling noise for one sentence, held fixed while differentiating.
#[derive(Clone, Debug)]
pub enum Noise {
    /// Standard normal draws, `samples·n × d`.
    Gaussian(Mat),
    /// Standard Gumbel draws, `samples·n × k`.
    Gumbel(Mat),
    None,
}

/// The tensors of one sentence's bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    /// `Σ_s −log q(y | t_s) / samples`.
    pub reconstruction: Var,
    /// Unweighted `Σ_i KL(p_θ(t_i|x_i) || r_ψ)`.
    pub kl_marginal: Option<Var>,
    /// Unweighted `Σ_i KL(p_θ(t_i|x_i) || s_ξ(t_i|x̂_i))`.
    pub kl_type: Option<Var>,
}

enum BoundTagger {
    Vib {
        token: BoundEncoder,
        marginal: Var,
        types: BoundEncoder,
    },
    Mlp(BoundEncoder),
    Fixed,
}

pub struct BoundModel {
    tagger: BoundTagger,
    decoder: BoundDecoder,
}

impl ModelParams {
    /// Fresh parameters for `cfg`, drawn from `N(0, init_scale²)`. Label and
    /// POS vocabularies and any PCA projection come from `train`.
    pub fn new(cfg: &VIBConfig, train: &Dataset, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let labels = train.label_vocab();
        let pos = train.pos_vocab();
        let input_dim = train.input_dim();
        let type_dim = train.type_dim();
        let mut init = Init::new(rng, cfg.init_scale);
        let hidden = cfg.encoder_hidden.unwrap_or_else(|| cfg.mode.default_hidden());
        let tagger = match cfg.kind {
            ModelKind::Vib => Tagger::Vib {
                token: EncoderParams::new(cfg.mode, input_dim, hidden, &mut init),
                marginal: MarginalParams::new(cfg.mode, &mut init),
                types: EncoderParams::new(cfg.mode, type_dim, hidden, &mut init),
            },
            ModelKind::Mlp => {
                let TagMode::Continuous { .. } = cfg.mode else {
                    return Err(Error::Config("the MLP baseline needs a continuous tag mode".into()));
                };
                Tagger::Baseline(BaselineSpec::Mlp(EncoderParams::new(cfg.mode, input_dim, hidden, &mut init)))
            }
            ModelKind::Identity => Tagger::Baseline(BaselineSpec::Identity),
            ModelKind::Pca => Tagger::Baseline(pca_fit(train, cfg.mode.tag_dim())?),
            ModelKind::GoldPos => Tagger::Baseline(BaselineSpec::GoldPos(pos.clone())),
        };
        let decoder_cfg = Self::decoder_config(cfg, &tagger, input_dim, pos.len(), labels.len());
        let decoder = DecoderParams::new(decoder_cfg, &mut init);
        Ok(ModelParams {
            config: cfg.clone(),
            input_dim,
            type_dim,
            labels,
            pos,
            tagger,
            decoder,
        })
    }

    /// All-zero parameters with the layout `new` would produce; used when
    /// loading checkpoints. PCA layers get zero matrices of the right shape.
    pub fn zeros(cfg: &VIBConfig, input_dim: usize, type_dim: usize, labels: Vocab, pos: Vocab) -> Result<Self> {
        cfg.validate()?;
        let hidden = cfg.encoder_hidden.unwrap_or_else(|| cfg.mode.default_hidden());
        let tagger = match cfg.kind {
            ModelKind::Vib => Tagger::Vib {
                token: EncoderParams::zeros(cfg.mode, input_dim, hidden),
                marginal: MarginalParams::zeros(cfg.mode),
                types: EncoderParams::zeros(cfg.mode, type_dim, hidden),
            },
            ModelKind::Mlp => Tagger::Baseline(BaselineSpec::Mlp(EncoderParams::zeros(cfg.mode, input_dim, hidden))),
            ModelKind::Identity => Tagger::Baseline(BaselineSpec::Identity),
            ModelKind::Pca => {
                let d = cfg.mode.tag_dim();
                Tagger::Baseline(BaselineSpec::Pca {
                    mean: Mat::zeros((1, input_dim)),
                    projection: Mat::zeros((d, input_dim)),
                    explained: vec![0.0; d],
                })
            }
            ModelKind::GoldPos => Tagger::Baseline(BaselineSpec::GoldPos(pos.clone())),
        };
        let decoder_cfg = Self::decoder_config(cfg, &tagger, input_dim, pos.len(), labels.len());
        Ok(ModelParams {
            config: cfg.clone(),
            input_dim,
            type_dim,
            labels,
            pos,
            tagger,
            decoder: DecoderParams::zeros(decoder_cfg),
        })
    }

    fn decoder_config(cfg: &VIBConfig, tagger: &Tagger, input_dim: usize, n_pos: usize, n_labels: usize) -> DecoderConfig {
        let tag_dim = match tagger {
            Tagger::Vib { .. } => cfg.mode.tag_dim(),
            Tagger::Baseline(b) => match b {
                BaselineSpec::GoldPos(_) => n_pos,
                other => other.output_dim(input_dim),
            },
        };
        DecoderConfig {
            input_dim: tag_dim,
            recurrent_hidden: cfg.decoder.recurrent_hidden,
            arc_dim: cfg.decoder.arc_dim,
            label_dim: cfg.decoder.label_dim,
            n_labels,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    /// Whether the tagger has its own trainable encoder.
    pub fn has_encoder(&self) -> bool {
        matches!(self.tagger, Tagger::Vib { .. } | Tagger::Baseline(BaselineSpec::Mlp(_)))
    }

    /// Block of every tensor, in `tensors()` order.
    pub fn blocks(&self) -> Vec<Block> {
        let mut out = Vec::new();
        match &self.tagger {
            Tagger::Vib { token, marginal, types } => {
                out.extend(std::iter::repeat(Block::Encoder).take(token.tensors().len()));
                out.extend(std::iter::repeat(Block::Variational).take(marginal.tensors().len()));
                out.extend(std::iter::repeat(Block::Variational).take(types.tensors().len()));
            }
            Tagger::Baseline(BaselineSpec::Mlp(enc)) => {
                out.extend(std::iter::repeat(Block::Encoder).take(enc.tensors().len()))
            }
            Tagger::Baseline(BaselineSpec::Pca { .. }) => out.extend([Block::Fixed, Block::Fixed]),
            Tagger::Baseline(_) => {}
        }
        out.extend(std::iter::repeat(Block::Variational).take(self.decoder.tensors().len()));
        out
    }

    /// Registers every tensor on `tape` and returns the bound model and the
    /// leaf handles (in `tensors()` order).
    pub fn bind(&self, tape: &mut Tape) -> (BoundModel, Vec<Var>) {
        let vars = self.bind_all(tape);
        (self.bind_vars(&vars), vars)
    }

    /// Builds the bound model from leaves already on a tape.
    pub fn bind_vars(&self, vars: &[Var]) -> BoundModel {
        let mut it = vars.iter().copied();
        let tagger = match &self.tagger {
            Tagger::Vib { token, types, .. } => {
                let token = token.bound(&mut it);
                let marginal = it.next().expect("marginal tensor");
                let types = types.bound(&mut it);
                BoundTagger::Vib { token, marginal, types }
            }
            Tagger::Baseline(BaselineSpec::Mlp(enc)) => BoundTagger::Mlp(enc.bound(&mut it)),
            Tagger::Baseline(BaselineSpec::Pca { .. }) => {
                it.next();
                it.next();
                BoundTagger::Fixed
            }
            Tagger::Baseline(_) => BoundTagger::Fixed,
        };
        let decoder = BoundDecoder::from_vars(&mut it, self.decoder.config.clone());
        BoundModel { tagger, decoder }
    }

    /// The gold tree with label ids from this model's vocabulary. Labels never
    /// seen in training map to `usize::MAX`.
    pub fn gold_tree(&self, example: &Example) -> ParseTree {
        ParseTree {
            heads: example.sentence.heads.clone(),
            labels: example
                .sentence
                .labels
                .iter()
                .map(|l| self.labels.get(l).unwrap_or(usize::MAX))
                .collect(),
        }
    }

    /// Draws the noise the bound needs for one sentence.
    pub fn draw_noise(&self, n: usize, samples: usize, rng: &mut ChaCha8Rng) -> Noise {
        match (&self.tagger, self.config.mode) {
            (Tagger::Vib { .. }, TagMode::Continuous { dim }) => {
                Noise::Gaussian(Mat::from_shape_fn((samples * n, dim), |_| rng.sample(StandardNormal)))
            }
            (Tagger::Vib { .. }, TagMode::Discrete { k }) => {
                Noise::Gumbel(Mat::from_shape_fn((samples * n, k), |_| gumbel_from_uniform(rng.gen())))
            }
            _ => Noise::None,
        }
    }

    /// Number of tag draws per sentence; deterministic taggers need one.
    pub fn effective_samples(&self, samples: usize) -> usize {
        match self.tagger {
            Tagger::Vib { .. } => samples.max(1),
            Tagger::Baseline(_) => 1,
        }
    }

    /// Per-token posteriors of the token encoder, marginal and type encoder
    /// (stochastic taggers only).
    pub fn posteriors(&self, example: &Example) -> Result<Option<SentencePosteriors>> {
        match &self.tagger {
            Tagger::Vib { token, marginal, types } => Ok(Some(SentencePosteriors {
                token: token.encode_rows(&example.tokens)?,
                marginal: marginal.marginal(),
                types: types.encode_rows(&example.types)?,
            })),
            _ => Ok(None),
        }
    }

    /// Evaluation-time tags: one reparameterized draw for continuous tags,
    /// an exact one-hot draw (`τ = 0`) for discrete ones, and the
    /// deterministic vectors for baselines.
    pub fn eval_tags(&self, example: &Example, rng: &mut ChaCha8Rng) -> Result<Mat> {
        match &self.tagger {
            Tagger::Vib { token, .. } => {
                let raw = token.raw(&example.tokens)?;
                let n = raw.nrows();
                Ok(match self.config.mode {
                    TagMode::Continuous { dim } => {
                        let mut t = Mat::zeros((n, dim));
                        for i in 0..n {
                            for j in 0..dim {
                                let s = raw[[i, dim + j]];
                                let z: f64 = rng.sample(StandardNormal);
                                t[[i, j]] = raw[[i, j]] + (s * s + crate::dists::VAR_FLOOR).sqrt() * z;
                            }
                        }
                        t
                    }
                    TagMode::Discrete { k } => {
                        let g = Mat::from_shape_fn((n, k), |_| gumbel_from_uniform(rng.gen()));
                        gumbel_max_rows(&raw, &g)
                    }
                })
            }
            Tagger::Baseline(b) => b.project(example),
        }
    }

    /// Predicted tree for one sentence.
    pub fn parse(&self, example: &Example, rng: &mut ChaCha8Rng) -> Result<ParseTree> {
        let tags = self.eval_tags(example, rng)?;
        let scores = self.decoder.score(&tags)?;
        Ok(decode_mst(&scores))
    }
}

/// Posteriors of every token of one sentence.
#[derive(Clone, Debug)]
pub struct SentencePosteriors {
    pub token: Vec<TagPosterior>,
    pub marginal: TagPosterior,
    pub types: Vec<TagPosterior>,
}

impl ParamSet for ModelParams {
    fn tensors(&self) -> Vec<&Mat> {
        let mut v = Vec::new();
        match &self.tagger {
            Tagger::Vib { token, marginal, types } => {
                v.extend(token.tensors());
                v.extend(marginal.tensors());
                v.extend(types.tensors());
            }
            Tagger::Baseline(BaselineSpec::Mlp(enc)) => v.extend(enc.tensors()),
            Tagger::Baseline(BaselineSpec::Pca { mean, projection, .. }) => v.extend([mean, projection]),
            Tagger::Baseline(_) => {}
        }
        v.extend(self.decoder.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut v = Vec::new();
        match &mut self.tagger {
            Tagger::Vib { token, marginal, types } => {
                v.extend(token.tensors_mut());
                v.extend(marginal.tensors_mut());
                v.extend(types.tensors_mut());
            }
            Tagger::Baseline(BaselineSpec::Mlp(enc)) => v.extend(enc.tensors_mut()),
            Tagger::Baseline(BaselineSpec::Pca { mean, projection, .. }) => v.extend([mean, projection]),
            Tagger::Baseline(_) => {}
        }
        v.extend(self.decoder.tensors_mut());
        v
    }
}

impl BoundModel {
    /// Builds the per-sentence bound
    /// `reconstruction + β·KL(p_θ || r_ψ) + γ·KL(p_θ || s_ξ)` on `tape`.
    ///
    /// `tau` is the Gumbel-softmax temperature for discrete tags; at `tau = 0`
    /// exact one-hot draws are used and no gradient reaches the encoder
    /// through the samples.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        tape: &mut Tape,
        params: &ModelParams,
        example: &Example,
        tree: &ParseTree,
        samples: usize,
        tau: f64,
        noise: &Noise,
    ) -> Result<LossVars> {
        let n = example.len();
        let cfg = &params.config;
        let (tags, samples, kl_marginal, kl_type) = match &self.tagger {
            BoundTagger::Vib { token, marginal, types } => {
                let x = tape.leaf(example.tokens.clone());
                let xt = tape.leaf(example.types.clone());
                let post = token.forward(tape, x);
                let Tagger::Vib { marginal: marg_params, .. } = &params.tagger else {
                    unreachable!("bound tagger matches params")
                };
                let prior = marg_params.rows(tape, *marginal, n);
                let type_post = types.forward(tape, xt);
                let kl_m = post.kl(tape, &prior);
                let kl_t = post.kl(tape, &type_post);
                let tags = match (post, noise) {
                    (EncodedRows::Gaussian { mean, var }, Noise::Gaussian(z)) => {
                        let means = tape.concat_rows(&vec![mean; samples]);
                        let vars = tape.concat_rows(&vec![var; samples]);
                        gaussian_sample_rows(tape, means, vars, z.clone())
                    }
                    (EncodedRows::Categorical { logits }, Noise::Gumbel(g)) => {
                        if tau > 0.0 {
                            let all = tape.concat_rows(&vec![logits; samples]);
                            gumbel_softmax_rows(tape, all, g.clone(), tau)
                        } else {
                            let stacked = ndarray::concatenate(
                                ndarray::Axis(0),
                                &vec![tape.value(logits).view(); samples],
                            )
                            .expect("same widths");
                            tape.leaf(gumbel_max_rows(&stacked, g))
                        }
                    }
                    _ => return Err(Error::Config("sampling noise does not match the tag mode".into())),
                };
                (tags, samples, Some(kl_m), Some(kl_t))
            }
            BoundTagger::Mlp(enc) => {
                let x = tape.leaf(example.tokens.clone());
                let raw = enc.raw(tape, x);
                let mean = tape.slice_cols(raw, 0, cfg.mode.tag_dim());
                (mean, 1, None, None)
            }
            BoundTagger::Fixed => {
                let Tagger::Baseline(spec) = &params.tagger else {
                    unreachable!("bound tagger matches params")
                };
                (tape.leaf(spec.project(example)?), 1, None, None)
            }
        };
        let nll = self.decoder.neg_log_likelihood(tape, tags, samples, tree)?;
        let reconstruction = tape.scale(nll, 1.0 / samples as f64);
        let mut total = reconstruction;
        if let Some(k) = kl_marginal {
            let w = tape.scale(k, cfg.beta);
            total = tape.add(total, w);
        }
        if let Some(k) = kl_type {
            let w = tape.scale(k, cfg.gamma());
            total = tape.add(total, w);
        }
        Ok(LossVars {
            total,
            reconstruction,
            kl_marginal,
            kl_type,
        })
    }
}
