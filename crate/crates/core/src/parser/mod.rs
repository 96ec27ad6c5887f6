//! The variational decoder `q_φ(y | t)`: a biaffine arc and label scorer over
//! tag sequences with an exact tree normalizer.
//!
//! A learned root vector is prepended to the tag sequence, an optional
//! bidirectional LSTM extracts features, and separate head/dependent
//! projections feed a biaffine arc scorer and a per-label biaffine label
//! scorer. The probability of a labeled tree is
//!
//! ```text
//! q(y | t) = exp(Σ_m S[h_m][m]) / Z(S) · Π_m softmax(L[h_m, m])[l_m]
//! ```
//!
//! with `Z` summed over single-rooted arborescences by the matrix-tree
//! theorem (this is exact; no approximation of the normalizer is made).

pub mod matrix_tree;
pub mod metrics;
pub mod mst;

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{BoundDense, Dense, Init, ParamSet};
use crate::tape::{Mat, Tape, Var};

pub use metrics::{attachment_scores, paired_permutation_test, AttachmentCounts, AttachmentScores};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Width of each input tag vector.
    pub input_dim: usize,
    /// Hidden size of each LSTM direction; 0 disables the recurrent layer.
    pub recurrent_hidden: usize,
    pub arc_dim: usize,
    pub label_dim: usize,
    pub n_labels: usize,
}

impl DecoderConfig {
    pub fn feature_dim(&self) -> usize {
        if self.recurrent_hidden > 0 {
            2 * self.recurrent_hidden
        } else {
            self.input_dim
        }
    }
}

/// Weights of one LSTM direction; gates ordered input, forget, cell, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w_ih: Mat,
    pub w_hh: Mat,
    pub bias: Mat,
}

impl LstmParams {
    fn new(init: &mut Init, input: usize, hidden: usize) -> Self {
        LstmParams {
            w_ih: init.mat(input, 4 * hidden),
            w_hh: init.mat(hidden, 4 * hidden),
            bias: init.mat(1, 4 * hidden),
        }
    }

    fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            w_ih: Mat::zeros((input, 4 * hidden)),
            w_hh: Mat::zeros((hidden, 4 * hidden)),
            bias: Mat::zeros((1, 4 * hidden)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub config: DecoderConfig,
    pub root: Mat,
    pub recurrent: Option<(LstmParams, LstmParams)>,
    pub arc_head: Dense,
    pub arc_dep: Dense,
    /// `(arc_dim + 1) × arc_dim`; the extra row is the head-only bias.
    pub arc_weight: Mat,
    pub label_head: Dense,
    pub label_dep: Dense,
    /// `n_labels` stacked `(label_dim + 1) × (label_dim + 1)` matrices.
    pub label_weight: Mat,
}

/// A labeled dependency tree: 1-based heads (0 = root) and label ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseTree {
    pub heads: Vec<usize>,
    pub labels: Vec<usize>,
}

impl ParseTree {
    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn validate(&self, n_labels: usize) -> Result<()> {
        if self.labels.len() != self.heads.len() {
            return Err(Error::InvalidTree("heads and labels differ in length".into()));
        }
        crate::data::validate_heads(&self.heads).map_err(Error::InvalidTree)?;
        if let Some(l) = self.labels.iter().find(|&&l| l >= n_labels) {
            return Err(Error::InvalidTree(format!("label id {l} out of range")));
        }
        Ok(())
    }
}

/// Scores of one sentence: `arcs[h][m]` for head `h` (0 = root) of word
/// `m+1`, and `labels[[h, m, l]]` for label `l` on that arc.
#[derive(Clone, Debug)]
pub struct ArcScores {
    pub arcs: Mat,
    pub labels: Array3<f64>,
}

impl ArcScores {
    pub fn n(&self) -> usize {
        self.arcs.ncols()
    }
}

impl DecoderParams {
    pub fn new(config: DecoderConfig, init: &mut Init) -> Self {
        let f = config.feature_dim();
        let recurrent = (config.recurrent_hidden > 0).then(|| {
            (
                LstmParams::new(init, config.input_dim, config.recurrent_hidden),
                LstmParams::new(init, config.input_dim, config.recurrent_hidden),
            )
        });
        DecoderParams {
            root: init.mat(1, config.input_dim),
            recurrent,
            arc_head: Dense::new(init, f, config.arc_dim),
            arc_dep: Dense::new(init, f, config.arc_dim),
            arc_weight: init.mat(config.arc_dim + 1, config.arc_dim),
            label_head: Dense::new(init, f, config.label_dim),
            label_dep: Dense::new(init, f, config.label_dim),
            label_weight: init.mat(config.n_labels * (config.label_dim + 1), config.label_dim + 1),
            config,
        }
    }

    pub fn zeros(config: DecoderConfig) -> Self {
        let f = config.feature_dim();
        let recurrent = (config.recurrent_hidden > 0).then(|| {
            (
                LstmParams::zeros(config.input_dim, config.recurrent_hidden),
                LstmParams::zeros(config.input_dim, config.recurrent_hidden),
            )
        });
        DecoderParams {
            root: Mat::zeros((1, config.input_dim)),
            recurrent,
            arc_head: Dense::zeros(f, config.arc_dim),
            arc_dep: Dense::zeros(f, config.arc_dim),
            arc_weight: Mat::zeros((config.arc_dim + 1, config.arc_dim)),
            label_head: Dense::zeros(f, config.label_dim),
            label_dep: Dense::zeros(f, config.label_dim),
            label_weight: Mat::zeros((config.n_labels * (config.label_dim + 1), config.label_dim + 1)),
            config,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundDecoder {
        let vars = self.bind_all(tape);
        BoundDecoder::from_vars(&mut vars.into_iter(), self.config.clone())
    }

    /// Arc and label scores for a tag sequence (`n × input_dim`).
    pub fn score(&self, tags: &Mat) -> Result<ArcScores> {
        let n = tags.nrows();
        if n == 0 {
            return Err(Error::InvalidTree("empty tag sequence".into()));
        }
        if tags.ncols() != self.config.input_dim {
            return Err(Error::Dimension {
                expected: self.config.input_dim,
                got: tags.ncols(),
            });
        }
        let mut tape = Tape::new();
        let dec = self.bind(&mut tape);
        let t = tape.leaf(tags.clone());
        let feats = dec.features(&mut tape, t, 1);
        let arcs = dec.arc_scores(&mut tape, feats, 1, n)[0];
        let lh = dec.label_head.forward(&mut tape, feats);
        let lh = tape.tanh(lh);
        let ld = dec.label_dep.forward(&mut tape, feats);
        let ld = tape.tanh(ld);
        let heads = with_ones(tape.value(lh));
        let deps = with_ones(&tape.value(ld).slice(s![1.., ..]).to_owned());
        let p = heads.ncols();
        let n_labels = self.config.n_labels;
        let mut labels = Array3::zeros((n + 1, n, n_labels));
        for l in 0..n_labels {
            let wl = self.label_weight.slice(s![l * p..(l + 1) * p, ..]);
            let sc = heads.dot(&wl).dot(&deps.t());
            labels.slice_mut(s![.., .., l]).assign(&sc);
        }
        Ok(ArcScores {
            arcs: tape.value(arcs).clone(),
            labels,
        })
    }
}

fn with_ones(m: &Mat) -> Mat {
    let mut out = Mat::ones((m.nrows(), m.ncols() + 1));
    out.slice_mut(s![.., ..m.ncols()]).assign(m);
    out
}

impl ParamSet for DecoderParams {
    fn tensors(&self) -> Vec<&Mat> {
        let mut v = vec![&self.root];
        if let Some((f, b)) = &self.recurrent {
            v.extend([&f.w_ih, &f.w_hh, &f.bias, &b.w_ih, &b.w_hh, &b.bias]);
        }
        v.extend(self.arc_head.tensors());
        v.extend(self.arc_dep.tensors());
        v.push(&self.arc_weight);
        v.extend(self.label_head.tensors());
        v.extend(self.label_dep.tensors());
        v.push(&self.label_weight);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut v = vec![&mut self.root];
        if let Some((f, b)) = &mut self.recurrent {
            v.extend([&mut f.w_ih, &mut f.w_hh, &mut f.bias, &mut b.w_ih, &mut b.w_hh, &mut b.bias]);
        }
        v.extend(self.arc_head.tensors_mut());
        v.extend(self.arc_dep.tensors_mut());
        v.push(&mut self.arc_weight);
        v.extend(self.label_head.tensors_mut());
        v.extend(self.label_dep.tensors_mut());
        v.push(&mut self.label_weight);
        v
    }
}

#[derive(Clone, Copy, Debug)]
struct BoundLstm {
    w_ih: Var,
    w_hh: Var,
    bias: Var,
}

/// Decoder parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundDecoder {
    config: DecoderConfig,
    root: Var,
    recurrent: Option<(BoundLstm, BoundLstm)>,
    arc_head: BoundDense,
    arc_dep: BoundDense,
    arc_weight: Var,
    label_head: BoundDense,
    label_dep: BoundDense,
    label_weight: Var,
}

impl BoundDecoder {
    pub fn from_vars(vars: &mut impl Iterator<Item = Var>, config: DecoderConfig) -> Self {
        let mut next = || vars.next().expect("decoder tensor");
        let root = next();
        let recurrent = (config.recurrent_hidden > 0).then(|| {
            let f = BoundLstm {
                w_ih: next(),
                w_hh: next(),
                bias: next(),
            };
            let b = BoundLstm {
                w_ih: next(),
                w_hh: next(),
                bias: next(),
            };
            (f, b)
        });
        let arc_head = BoundDense { w: next(), b: next() };
        let arc_dep = BoundDense { w: next(), b: next() };
        let arc_weight = next();
        let label_head = BoundDense { w: next(), b: next() };
        let label_dep = BoundDense { w: next(), b: next() };
        let label_weight = next();
        BoundDecoder {
            config,
            root,
            recurrent,
            arc_head,
            arc_dep,
            arc_weight,
            label_head,
            label_dep,
            label_weight,
        }
    }

    /// Features for `samples` tag sequences stacked sample-major in `tags`
    /// (`samples·n × input_dim`). Each sample block gains a leading root row,
    /// giving `samples·(n+1)` rows.
    pub fn features(&self, tape: &mut Tape, tags: Var, samples: usize) -> Var {
        let n = tape.shape(tags).0 / samples;
        let mut parts = Vec::with_capacity(2 * samples);
        for s in 0..samples {
            parts.push(self.root);
            parts.push(if samples == 1 {
                tags
            } else {
                tape.slice_rows(tags, s * n, (s + 1) * n)
            });
        }
        let x = tape.concat_rows(&parts);
        match &self.recurrent {
            None => x,
            Some((f, b)) => {
                let fwd = tape.lstm(x, f.w_ih, f.w_hh, f.bias, samples, false);
                let bwd = tape.lstm(x, b.w_ih, b.w_hh, b.bias, samples, true);
                tape.concat_cols(&[fwd, bwd])
            }
        }
    }

    /// One `(n+1) × n` arc score matrix per sample.
    pub fn arc_scores(&self, tape: &mut Tape, feats: Var, samples: usize, n: usize) -> Vec<Var> {
        let h = self.arc_head.forward(tape, feats);
        let h = tape.tanh(h);
        let d = self.arc_dep.forward(tape, feats);
        let d = tape.tanh(d);
        (0..samples)
            .map(|s| {
                let base = s * (n + 1);
                let hs = tape.slice_rows(h, base, base + n + 1);
                let ds = tape.slice_rows(d, base + 1, base + n + 1);
                let hs1 = tape.append_ones(hs);
                let hu = tape.matmul(hs1, self.arc_weight);
                tape.matmul_bt(hu, ds)
            })
            .collect()
    }

    /// Label logits for each word under the given heads, `samples·n × ℓ`.
    pub fn label_logits(&self, tape: &mut Tape, feats: Var, samples: usize, heads: &[usize]) -> Var {
        let n = heads.len();
        let lh = self.label_head.forward(tape, feats);
        let lh = tape.tanh(lh);
        let ld = self.label_dep.forward(tape, feats);
        let ld = tape.tanh(ld);
        let mut head_rows = Vec::with_capacity(samples * n);
        let mut dep_rows = Vec::with_capacity(samples * n);
        for s in 0..samples {
            let base = s * (n + 1);
            for (m, &h) in heads.iter().enumerate() {
                head_rows.push(base + h);
                dep_rows.push(base + m + 1);
            }
        }
        let p = tape.select_rows(lh, &head_rows);
        let q = tape.select_rows(ld, &dep_rows);
        let p1 = tape.append_ones(p);
        let q1 = tape.append_ones(q);
        tape.row_bilinear(p1, q1, self.label_weight)
    }

    /// `−Σ_s log q(y | t_s)` over the samples stacked in `tags`.
    pub fn neg_log_likelihood(
        &self,
        tape: &mut Tape,
        tags: Var,
        samples: usize,
        tree: &ParseTree,
    ) -> Result<Var> {
        let n = tree.len();
        debug_assert_eq!(tape.shape(tags).0, samples * n);
        let feats = self.features(tape, tags, samples);
        let arcs = self.arc_scores(tape, feats, samples, n);
        let gold_cells: Vec<(usize, usize)> = tree.heads.iter().enumerate().map(|(m, &h)| (h, m)).collect();
        let mut terms = Vec::with_capacity(2 * samples + 1);
        for &a in &arcs {
            let (log_z, marg) = matrix_tree::log_partition_with_marginals(tape.value(a))?;
            let z = tape.linearized(a, log_z, marg);
            let gold = tape.gather_sum(a, &gold_cells);
            terms.push(tape.sub(z, gold));
        }
        let logits = self.label_logits(tape, feats, samples, &tree.heads);
        let log_probs = tape.log_softmax(logits);
        let label_cells: Vec<(usize, usize)> = (0..samples)
            .flat_map(|s| tree.labels.iter().enumerate().map(move |(m, &l)| (s * n + m, l)))
            .collect();
        let label_ll = tape.gather_sum(log_probs, &label_cells);
        let arc_nll = terms
            .into_iter()
            .reduce(|a, b| tape.add(a, b))
            .expect("at least one sample");
        Ok(tape.sub(arc_nll, label_ll))
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }
}

/// `log q(y | t)` for a labeled tree under precomputed scores.
pub fn tree_log_prob(scores: &ArcScores, tree: &ParseTree) -> Result<f64> {
    let n = scores.n();
    if tree.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: tree.len(),
        });
    }
    tree.validate(scores.labels.dim().2)?;
    let log_z = matrix_tree::log_partition(&scores.arcs)?;
    let mut total = -log_z;
    for m in 0..n {
        let h = tree.heads[m];
        total += scores.arcs[[h, m]];
        let row: Vec<f64> = scores.labels.slice(s![h, m, ..]).to_vec();
        total += row[tree.labels[m]] - crate::dists::log_sum_exp(&row);
    }
    Ok(total)
}

pub fn tree_log_partition(scores: &ArcScores) -> Result<f64> {
    matrix_tree::log_partition(&scores.arcs)
}

/// Highest-scoring single-rooted tree, labels chosen per arc by argmax.
pub fn decode_mst(scores: &ArcScores) -> ParseTree {
    let heads = mst::decode_heads(&scores.arcs);
    let labels = heads
        .iter()
        .enumerate()
        .map(|(m, &h)| crate::dists::argmax(&scores.labels.slice(s![h, m, ..]).to_vec()))
        .collect();
    ParseTree { heads, labels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::matrix_tree::brute;
    use crate::tape::testing::max_rel_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config(recurrent: usize) -> DecoderConfig {
        DecoderConfig {
            input_dim: 3,
            recurrent_hidden: recurrent,
            arc_dim: 4,
            label_dim: 2,
            n_labels: 3,
        }
    }

    fn random_decoder(seed: u64, recurrent: usize, scale: f64) -> DecoderParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DecoderParams::new(config(recurrent), &mut Init::new(&mut rng, scale))
    }

    #[test]
    fn zero_parameters_give_zero_scores() {
        let dec = DecoderParams::zeros(config(2));
        let tags = Mat::from_elem((4, 3), 0.7);
        let sc = dec.score(&tags).unwrap();
        assert!(sc.arcs.iter().all(|&v| v == 0.0));
        assert!(sc.labels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_word_sentence() {
        let dec = random_decoder(1, 0, 0.5);
        let sc = dec.score(&Mat::from_elem((1, 3), 0.2)).unwrap();
        assert_eq!(sc.arcs.dim(), (2, 1));
        let tree = decode_mst(&sc);
        assert_eq!(tree.heads, vec![0]);
        let lp = tree_log_prob(&sc, &ParseTree { heads: vec![0], labels: vec![1] }).unwrap();
        let row = sc.labels.slice(s![0, 0, ..]).to_vec();
        let expect = row[1] - crate::dists::log_sum_exp(&row);
        assert!((lp - expect).abs() < 1e-12);
    }

    #[test]
    fn empty_input_is_an_error() {
        let dec = random_decoder(1, 0, 0.5);
        assert!(dec.score(&Mat::zeros((0, 3))).is_err());
    }

    #[test]
    fn uniform_two_word_arc_part_is_minus_log_two() {
        let sc = ArcScores {
            arcs: Mat::zeros((3, 2)),
            labels: Array3::zeros((3, 2, 1)),
        };
        let lp = tree_log_prob(&sc, &ParseTree { heads: vec![0, 1], labels: vec![0, 0] }).unwrap();
        assert!((lp + 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn tree_probabilities_are_normalized() {
        for n in 1..=4 {
            let dec = random_decoder(n as u64, 2, 0.8);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + n as u64);
            let tags = Mat::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0));
            let sc = dec.score(&tags).unwrap();
            let mut total = 0.0;
            for heads in brute::all_trees(n) {
                // Marginalize labels by enumerating every labeling.
                let mut labels = vec![0usize; n];
                loop {
                    let t = ParseTree { heads: heads.clone(), labels: labels.clone() };
                    total += tree_log_prob(&sc, &t).unwrap().exp();
                    let mut i = 0;
                    while i < n {
                        labels[i] += 1;
                        if labels[i] == 3 {
                            labels[i] = 0;
                            i += 1;
                        } else {
                            break;
                        }
                    }
                    if i == n {
                        break;
                    }
                }
            }
            assert!((total - 1.0).abs() < 1e-8, "n={n} total={total}");
        }
    }

    #[test]
    fn tape_nll_matches_value_level_log_prob() {
        let dec = random_decoder(7, 2, 0.6);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tags = Mat::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let tree = ParseTree { heads: vec![2, 0, 2, 3], labels: vec![0, 2, 1, 1] };
        let sc = dec.score(&tags).unwrap();
        let expect = -tree_log_prob(&sc, &tree).unwrap();

        let mut tape = Tape::new();
        let bound = dec.bind(&mut tape);
        let stacked = ndarray::concatenate![ndarray::Axis(0), tags, tags];
        let t = tape.leaf(stacked);
        let nll = bound.neg_log_likelihood(&mut tape, t, 2, &tree).unwrap();
        assert!((tape.scalar(nll) - 2.0 * expect).abs() < 1e-10);
    }

    #[test]
    fn score_gradients_match_finite_differences() {
        for recurrent in [0, 2] {
            let dec = random_decoder(9, recurrent, 0.7);
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let tags = Mat::from_shape_fn((6, 3), |_| rng.gen_range(-1.0..1.0));
            let tree = ParseTree { heads: vec![0, 1, 2], labels: vec![2, 0, 1] };
            let mut params: Vec<Mat> = dec.tensors().into_iter().cloned().collect();
            params.push(tags);
            let cfg = dec.config.clone();
            let err = max_rel_error(&params, |t, v| {
                let mut it = v[..v.len() - 1].iter().copied();
                let b = BoundDecoder::from_vars(&mut it, cfg.clone());
                b.neg_log_likelihood(t, v[v.len() - 1], 2, &tree).unwrap()
            });
            assert!(err < 1e-4, "recurrent={recurrent} rel err {err}");
        }
    }

    #[test]
    fn arc_entry_gradient_wrt_tags() {
        let dec = random_decoder(11, 2, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let tags = Mat::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0));
        let cfg = dec.config.clone();
        let mut params: Vec<Mat> = dec.tensors().into_iter().cloned().collect();
        params.push(tags);
        let err = max_rel_error(&params, |t, v| {
            let mut it = v[..v.len() - 1].iter().copied();
            let b = BoundDecoder::from_vars(&mut it, cfg.clone());
            let feats = b.features(t, v[v.len() - 1], 1);
            let arcs = b.arc_scores(t, feats, 1, 3)[0];
            t.gather_sum(arcs, &[(2, 0)])
        });
        assert!(err < 1e-4, "rel err {err}");
    }
}
