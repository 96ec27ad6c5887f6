//! Information estimates, tradeoff curves, transfer probes and tag dumps.

use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sentence, Vocab};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::objective::{dataset_loss, evaluate, stream_seed, train, Adam, AdamConfig, VIBConfig};
use crate::params::{BoundDense, Dense, Init, ParamSet};
use crate::parser::AttachmentScores;
use crate::tape::{Mat, Tape};

/// Axis label for predictiveness columns in emitted curves.
pub const PREDICTIVENESS_LABEL: &str = "−CE (nats/token), = I(Y;T) lower bound up to +H(Y)";

/// Per-token information estimates. The KL bounds are absent for
/// deterministic taggers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MIBounds {
    /// Upper bound on `I(X;T)`: average `KL(p_θ(t_i|x_i) || r_ψ)`.
    pub ixt_upper: Option<f64>,
    /// Average `KL(p_θ(t_i|x_i) || s_ξ(t_i|x̂_i))`.
    pub context_upper: Option<f64>,
    /// `−E[−log q_φ(y|t)]` per token.
    pub predictiveness: f64,
}

pub fn estimate_bounds(dataset: &Dataset, params: &ModelParams, samples: usize, seed: u64) -> Result<MIBounds> {
    let loss = dataset_loss(params, dataset, samples, seed)?;
    let n = loss.tokens.max(1) as f64;
    let stochastic = matches!(params.tagger, crate::model::Tagger::Vib { .. });
    Ok(MIBounds {
        ixt_upper: stochastic.then(|| loss.kl_marginal / n),
        context_upper: stochastic.then(|| loss.kl_type / n),
        predictiveness: -loss.reconstruction / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub beta: f64,
    pub train: MIBounds,
    pub test: MIBounds,
    pub train_scores: AttachmentScores,
    pub test_scores: AttachmentScores,
}

/// One curve entry; a failed point keeps its error message.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveEntry {
    pub beta: f64,
    pub point: Option<TradeoffPoint>,
    pub error: Option<String>,
}

/// Trains one model per β (γ tied to β, shared seed) and evaluates it.
pub fn tradeoff_curve(
    train_set: &Dataset,
    dev: Option<&Dataset>,
    test: &Dataset,
    base: &VIBConfig,
    betas: &[f64],
) -> Result<Vec<CurveEntry>> {
    if betas.is_empty() {
        return Err(Error::Config("the β list is empty".into()));
    }
    let mut out = Vec::with_capacity(betas.len());
    for &beta in betas {
        let cfg = VIBConfig {
            beta,
            gamma: None,
            ..base.clone()
        };
        let result = (|| -> Result<TradeoffPoint> {
            let trained = train(train_set, dev, &cfg)?;
            let p = &trained.params;
            Ok(TradeoffPoint {
                beta,
                train: estimate_bounds(train_set, p, cfg.samples, cfg.seed)?,
                test: estimate_bounds(test, p, cfg.samples, cfg.seed)?,
                train_scores: evaluate(p, train_set, cfg.seed)?.counts.scores(),
                test_scores: evaluate(p, test, cfg.seed)?.counts.scores(),
            })
        })();
        match result {
            Ok(point) => out.push(CurveEntry {
                beta,
                point: Some(point),
                error: None,
            }),
            Err(e) => {
                log::error!("β = {beta}: {e}");
                out.push(CurveEntry {
                    beta,
                    point: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

pub fn curve_tsv(entries: &[CurveEntry]) -> String {
    let mut s = format!("# predictiveness: {PREDICTIVENESS_LABEL}\n");
    s.push_str(
        "beta\ttrain_ixt_upper\ttrain_context_upper\ttrain_predictiveness\ttest_ixt_upper\ttest_context_upper\ttest_predictiveness\ttrain_uas\ttrain_las\ttest_uas\ttest_las\n",
    );
    for e in entries {
        match &e.point {
            Some(p) => s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                p.beta,
                opt(p.train.ixt_upper),
                opt(p.train.context_upper),
                p.train.predictiveness,
                opt(p.test.ixt_upper),
                opt(p.test.context_upper),
                p.test.predictiveness,
                p.train_scores.uas,
                p.train_scores.las,
                p.test_scores.uas,
                p.test_scores.las
            )),
            None => s.push_str(&format!("{}{}\n", e.beta, "\tNA".repeat(10))),
        }
    }
    s
}

pub fn curve_json(entries: &[CurveEntry]) -> serde_json::Value {
    serde_json::json!({
        "predictiveness_axis": PREDICTIVENESS_LABEL,
        "points": entries,
    })
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Config("Spearman needs two equal-length series of at least 2".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Per-token column a probe predicts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelColumn {
    Upos,
    Xpos,
    Lemma,
    Deprel,
    Form,
    /// A morphological feature from the FEATS column; absent values read `_`.
    Feature(String),
}

impl FromStr for LabelColumn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "upos" | "pos" => LabelColumn::Upos,
            "xpos" => LabelColumn::Xpos,
            "lemma" => LabelColumn::Lemma,
            "deprel" => LabelColumn::Deprel,
            "form" => LabelColumn::Form,
            other => match other.strip_prefix("feat:") {
                Some(name) if !name.is_empty() => LabelColumn::Feature(s[5..].to_string()),
                _ => return Err(Error::Config(format!("unknown label column '{s}'"))),
            },
        })
    }
}

impl LabelColumn {
    pub fn values(&self, s: &Sentence) -> Vec<String> {
        match self {
            LabelColumn::Upos => s.pos.clone(),
            LabelColumn::Xpos => s.xpos.clone(),
            LabelColumn::Lemma => s.lemmas.clone(),
            LabelColumn::Deprel => s.labels.clone(),
            LabelColumn::Form => s.tokens.clone(),
            LabelColumn::Feature(name) => s.feature(name),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub optimizer: AdamConfig,
    /// Tag draws per test token when estimating `H(A|T)`.
    pub test_samples: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 32,
            epochs: 10,
            minibatch: 64,
            optimizer: AdamConfig {
                learning_rate: 1e-2,
                ..AdamConfig::default()
            },
            test_samples: 3,
            init_scale: 0.3,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Variational bound on `H(A|T)`, nats per test token.
    pub h_label_upper: f64,
    /// Unigram bound on `H(A)`, nats per test token.
    pub h_label_prior: f64,
    /// `1 − h_label_upper / h_label_prior`, an estimate of `I(A;T)/H(A)`.
    pub retention_ratio: f64,
    pub accuracy: f64,
    pub test_tokens: usize,
}

/// `q(a | t)`: one hidden tanh layer, softmax over the training labels plus
/// an unknown slot.
#[derive(Clone, Debug, PartialEq)]
struct ProbeNet {
    hidden: Dense,
    output: Dense,
}

impl ParamSet for ProbeNet {
    fn tensors(&self) -> Vec<&Mat> {
        let mut v: Vec<&Mat> = self.hidden.tensors().into();
        v.extend(self.output.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut v: Vec<&mut Mat> = self.hidden.tensors_mut().into();
        v.extend(self.output.tensors_mut());
        v
    }
}

impl ProbeNet {
    fn log_probs(&self, x: &Mat) -> Mat {
        let h = self.hidden.apply(x).mapv(f64::tanh);
        let mut z = self.output.apply(&h);
        for mut row in z.rows_mut() {
            let lse = crate::dists::log_sum_exp(&row.to_vec());
            row.mapv_inplace(|v| v - lse);
        }
        z
    }
}

/// Samples evaluation-time tags for every token of a dataset (one draw each).
fn sample_tags(params: &ModelParams, dataset: &Dataset, seed: u64) -> Result<Mat> {
    let mut rows = Vec::new();
    for ex in &dataset.examples {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, ex.sentence.id, 0x7a65));
        rows.push(params.eval_tags(ex, &mut rng)?);
    }
    let views: Vec<_> = rows.iter().map(|m| m.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Config(e.to_string()))
}

/// Fits a classifier from frozen tags to `column` on `train_set` and
/// compares its test cross-entropy with the add-one unigram prior.
pub fn probe(
    train_set: &Dataset,
    test: &Dataset,
    params: &ModelParams,
    column: &LabelColumn,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if train_set.is_empty() || test.is_empty() {
        return Err(Error::Config("probe needs non-empty train and test sets".into()));
    }
    let train_labels: Vec<String> = train_set.sentences().flat_map(|s| column.values(s)).collect();
    let vocab = Vocab::from_iter(train_labels.iter().cloned());
    let unk = vocab.len();
    let n_out = vocab.len() + 1;
    let test_labels: Vec<usize> = test
        .sentences()
        .flat_map(|s| column.values(s))
        .map(|l| vocab.get(&l).unwrap_or(unk))
        .collect();
    let train_ids: Vec<usize> = train_labels.iter().map(|l| vocab.get(l).expect("interned")).collect();

    // Add-one unigram prior over the training labels and the unknown slot.
    let mut counts = vec![1.0; n_out];
    for &a in &train_ids {
        counts[a] += 1.0;
    }
    let denom: f64 = counts.iter().sum();
    let h_prior = test_labels.iter().map(|&a| -(counts[a] / denom).ln()).sum::<f64>() / test_labels.len() as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tag_dim = params.decoder.config.input_dim;
    let mut init = Init::new(&mut rng, cfg.init_scale);
    let mut net = ProbeNet {
        hidden: Dense::new(&mut init, tag_dim, cfg.hidden),
        output: Dense::new(&mut init, cfg.hidden, n_out),
    };
    let mut adam = Adam::new(cfg.optimizer, &net);
    let active = vec![true; net.tensors().len()];
    for epoch in 0..cfg.epochs {
        let tags = sample_tags(params, train_set, stream_seed(cfg.seed, epoch as u64, 1))?;
        let mut order: Vec<usize> = (0..train_ids.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, epoch as u64, 2)));
        for chunk in order.chunks(cfg.minibatch.max(1)) {
            let x = tags.select(ndarray::Axis(0), chunk);
            let mut tape = Tape::new();
            let vars = net.bind_all(&mut tape);
            let (h, o) = (
                BoundDense { w: vars[0], b: vars[1] },
                BoundDense { w: vars[2], b: vars[3] },
            );
            let xv = tape.leaf(x);
            let hid = h.forward(&mut tape, xv);
            let hid = tape.tanh(hid);
            let logits = o.forward(&mut tape, hid);
            let lp = tape.log_softmax(logits);
            let cells: Vec<(usize, usize)> = chunk.iter().enumerate().map(|(r, &i)| (r, train_ids[i])).collect();
            let ll = tape.gather_sum(lp, &cells);
            let loss = tape.scale(ll, -1.0 / chunk.len() as f64);
            let mut grads = tape.backward(loss);
            let g: Vec<Mat> = vars.iter().map(|&v| grads.take_or_zeros(v, tape.shape(v))).collect();
            adam.step(&mut net, &g, &active);
        }
    }

    let mut nll = 0.0;
    let mut correct = 0usize;
    let samples = cfg.test_samples.max(1);
    for s in 0..samples {
        let tags = sample_tags(params, test, stream_seed(cfg.seed, s as u64, 3))?;
        let lp = net.log_probs(&tags);
        for (r, &a) in test_labels.iter().enumerate() {
            let row = lp.row(r);
            nll -= row[a];
            let pred = crate::dists::argmax(&row.to_vec());
            if pred == a {
                correct += 1;
            }
        }
    }
    let total = (samples * test_labels.len()) as f64;
    let h_upper = nll / total;
    let retention_ratio = if vocab.len() < 2 { 0.0 } else { 1.0 - h_upper / h_prior };
    Ok(ProbeResult {
        h_label_upper: h_upper,
        h_label_prior: h_prior,
        retention_ratio,
        accuracy: correct as f64 / total,
        test_tokens: test_labels.len(),
    })
}

/// Writes one TSV row per token: sentence id, index (1-based), form, gold
/// POS, then the posterior mean (continuous), the tag probabilities
/// (discrete), or the deterministic vector of a baseline.
pub fn dump_tags<W: Write>(dataset: &Dataset, params: &ModelParams, mut out: W) -> Result<()> {
    let dim = params.decoder.config.input_dim;
    let mut header = String::from("sentence_id\ttoken_index\ttoken\tpos");
    for j in 0..dim {
        header.push_str(&format!("\tt{j}"));
    }
    writeln!(out, "{header}")?;
    for ex in &dataset.examples {
        let vectors: Vec<Vec<f64>> = match params.posteriors(ex)? {
            Some(p) => p.token.iter().map(|t| t.summary()).collect(),
            None => {
                // Baselines are deterministic; the RNG is never consulted.
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let m = params.eval_tags(ex, &mut rng)?;
                m.rows().into_iter().map(|r| r.to_vec()).collect()
            }
        };
        for (i, v) in vectors.iter().enumerate() {
            let s = &ex.sentence;
            let values: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            writeln!(out, "{}\t{}\t{}\t{}\t{}", s.id, i + 1, s.tokens[i], s.pos[i], values.join("\t"))?;
        }
    }
    Ok(())
}

/// A row read back from [`dump_tags`] output.
#[derive(Clone, Debug, PartialEq)]
pub struct TagRow {
    pub sentence_id: u64,
    pub token_index: usize,
    pub token: String,
    pub pos: String,
    pub values: Vec<f64>,
}

pub fn read_tags<R: BufRead>(input: R) -> Result<Vec<TagRow>> {
    let mut rows = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if i == 0 || line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: "<tags>".into(),
            line: i + 1,
            message,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 4 {
            return Err(parse_err("expected at least 4 columns".into()));
        }
        let values = cols[4..]
            .iter()
            .map(|v| v.parse::<f64>().map_err(|e| parse_err(e.to_string())))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(TagRow {
            sentence_id: cols[0].parse().map_err(|e: std::num::ParseIntError| parse_err(e.to_string()))?,
            token_index: cols[1].parse().map_err(|e: std::num::ParseIntError| parse_err(e.to_string()))?,
            token: cols[2].to_string(),
            pos: cols[3].to_string(),
            values,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Example;
    use crate::dists::{categorical_kl, Categorical};
    use crate::encoders::TagMode;
    use crate::model::Tagger;
    use crate::objective::DecoderDims;
    use crate::synthetic::{generate, SyntheticConfig};

    fn corpus() -> crate::synthetic::SyntheticCorpus {
        generate(&SyntheticConfig {
            n_train: 40,
            n_dev: 5,
            n_test: 10,
            signal_dim: 4,
            noise_dim: 2,
            max_len: 10,
            ..Default::default()
        })
        .unwrap()
    }

    fn config(mode: TagMode) -> VIBConfig {
        VIBConfig {
            mode,
            encoder_hidden: Some(4),
            decoder: DecoderDims {
                recurrent_hidden: 3,
                arc_dim: 3,
                label_dim: 2,
            },
            epochs: 2,
            samples: 2,
            init_scale: 0.5,
            ..Default::default()
        }
    }

    fn model(mode: TagMode, data: &Dataset) -> ModelParams {
        ModelParams::new(&config(mode), data, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn encoder_equal_to_marginal_gives_zero_ixt() {
        let c = corpus();
        for mode in [TagMode::Continuous { dim: 2 }, TagMode::Discrete { k: 3 }] {
            let mut p = model(mode, &c.train);
            if let Tagger::Vib { token, marginal, types } = &mut p.tagger {
                token.output.w.fill(0.0);
                marginal.values.assign(&token.output.b);
                types.output.w.fill(0.0);
                types.output.b.assign(&token.output.b);
            }
            let b = estimate_bounds(&c.test, &p, 2, 0).unwrap();
            assert!(b.ixt_upper.unwrap().abs() < 1e-12);
            assert!(b.context_upper.unwrap().abs() < 1e-12);
            assert!(b.predictiveness < 0.0);
        }
    }

    #[test]
    fn hand_computed_kl_average() {
        // Two one-token sentences; the encoder output is its bias plus the
        // input times a fixed weight, so posteriors are known in closed form.
        let c = corpus();
        let mode = TagMode::Discrete { k: 2 };
        let mut p = model(mode, &c.train);
        let dim = c.train.input_dim();
        let Tagger::Vib { token, marginal, types } = &mut p.tagger else { panic!() };
        token.hidden.w.fill(0.0);
        token.hidden.b.fill(0.0);
        token.hidden.w[[0, 0]] = 1.0;
        token.output.w.fill(0.0);
        token.output.w[[0, 0]] = 2.0;
        token.output.b.fill(0.0);
        marginal.values.assign(&ndarray::arr2(&[[0.5, -0.5]]));
        types.hidden.w.fill(0.0);
        types.output.w.fill(0.0);
        types.output.b.fill(0.0);

        let mk = |id: u64, x0: f64| {
            let mut tokens = Mat::zeros((1, dim));
            tokens[[0, 0]] = x0;
            let mut ex = c.train.examples[0].clone();
            ex.sentence = Sentence::new(id, vec!["w".into()], vec![0], vec!["root".into()], vec!["VERB".into()]);
            ex.types = Mat::zeros((1, dim));
            ex.tokens = tokens;
            ex
        };
        let data = Dataset {
            examples: vec![mk(0, 0.3), mk(1, -1.2)],
            token_layer: 1,
        };
        let b = estimate_bounds(&data, &p, 1, 0).unwrap();
        let r = Categorical::new(vec![0.5, -0.5]).unwrap();
        let u = Categorical::new(vec![0.0, 0.0]).unwrap();
        let post = |x: f64| Categorical::new(vec![2.0 * f64::tanh(x), 0.0]).unwrap();
        let ixt = (categorical_kl(&post(0.3), &r).unwrap() + categorical_kl(&post(-1.2), &r).unwrap()) / 2.0;
        let ctx = (categorical_kl(&post(0.3), &u).unwrap() + categorical_kl(&post(-1.2), &u).unwrap()) / 2.0;
        assert!((b.ixt_upper.unwrap() - ixt).abs() < 1e-12);
        assert!((b.context_upper.unwrap() - ctx).abs() < 1e-12);
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 100.0]).unwrap() - 1.0).abs() < 1e-12);
        // Ties share the average rank.
        let r = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((r - 0.9486832980505138).abs() < 1e-12);
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn label_columns_parse() {
        assert_eq!("UPOS".parse::<LabelColumn>().unwrap(), LabelColumn::Upos);
        assert_eq!(
            "feat:Number".parse::<LabelColumn>().unwrap(),
            LabelColumn::Feature("Number".into())
        );
        assert!("feat:".parse::<LabelColumn>().is_err());
        assert!("bogus".parse::<LabelColumn>().is_err());
    }

    fn relabel(data: &Dataset, f: impl Fn(&str) -> String) -> Dataset {
        let mut d = data.clone();
        for e in &mut d.examples {
            e.sentence.pos = e.sentence.pos.iter().map(|p| f(p)).collect();
        }
        d
    }

    #[test]
    fn constant_labels_have_zero_ratio() {
        let c = corpus();
        let p = model(TagMode::Discrete { k: 3 }, &c.train);
        let tr = relabel(&c.train, |_| "X".into());
        let te = relabel(&c.test, |_| "X".into());
        let cfg = ProbeConfig {
            epochs: 2,
            ..Default::default()
        };
        let r = probe(&tr, &te, &p, &LabelColumn::Upos, &cfg).unwrap();
        assert_eq!(r.retention_ratio, 0.0);
        assert!(r.h_label_prior < 0.01);
    }

    #[test]
    fn ratio_is_invariant_to_relabeling() {
        let c = corpus();
        let p = model(TagMode::Continuous { dim: 2 }, &c.train);
        let cfg = ProbeConfig {
            epochs: 2,
            ..Default::default()
        };
        let a = probe(&c.train, &c.test, &p, &LabelColumn::Upos, &cfg).unwrap();
        let f = |s: &str| format!("renamed-{}", s.to_lowercase());
        let b = probe(&relabel(&c.train, f), &relabel(&c.test, f), &p, &LabelColumn::Upos, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.retention_ratio <= 1.0 && a.h_label_upper >= 0.0);
    }

    #[test]
    fn dump_round_trip() {
        let c = corpus();
        for mode in [TagMode::Continuous { dim: 5 }, TagMode::Discrete { k: 8 }] {
            let p = model(mode, &c.train);
            let one = c.test.subset(0..1);
            let mut buf = Vec::new();
            dump_tags(&one, &p, &mut buf).unwrap();
            let rows = read_tags(std::io::Cursor::new(&buf)).unwrap();
            let ex: &Example = &one.examples[0];
            assert_eq!(rows.len(), ex.len());
            let post = p.posteriors(ex).unwrap().unwrap();
            for (row, t) in rows.iter().zip(&post.token) {
                assert_eq!(row.values, t.summary());
                if let TagMode::Discrete { .. } = mode {
                    assert!((row.values.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
            assert_eq!(rows[0].values.len(), mode.tag_dim());
        }
    }

    #[test]
    fn curve_files_carry_the_axis_label() {
        let entries = vec![CurveEntry {
            beta: 10.0,
            point: None,
            error: Some("diverged".into()),
        }];
        let tsv = curve_tsv(&entries);
        assert!(tsv.contains(PREDICTIVENESS_LABEL));
        assert_eq!(tsv.lines().count(), 3);
        assert_eq!(curve_json(&entries)["predictiveness_axis"], PREDICTIVENESS_LABEL);
    }
}
