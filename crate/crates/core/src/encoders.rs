//! Stochastic token and type encoders, the variational marginal, and the
//! deterministic baselines (identity, PCA, MLP, gold POS).

use ndarray::{s, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Example, Vocab};
use crate::dists::{Categorical, DiagonalGaussian, TagPosterior};
use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;
use crate::params::{BoundDense, Dense, Init, ParamSet};
use crate::tape::{Mat, Tape, Var};

/// Hidden width used for discrete encoders unless configured otherwise.
pub const DISCRETE_HIDDEN: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TagMode {
    Continuous { dim: usize },
    Discrete { k: usize },
}

impl TagMode {
    /// Width of a tag vector as seen by the decoder.
    pub fn tag_dim(&self) -> usize {
        match *self {
            TagMode::Continuous { dim } => dim,
            TagMode::Discrete { k } => k,
        }
    }

    /// Width of the raw encoder output.
    pub fn output_dim(&self) -> usize {
        match *self {
            TagMode::Continuous { dim } => 2 * dim,
            TagMode::Discrete { k } => k,
        }
    }

    pub fn default_hidden(&self) -> usize {
        match *self {
            TagMode::Continuous { dim } => 2 * dim,
            TagMode::Discrete { .. } => DISCRETE_HIDDEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TagMode::Continuous { dim } if dim == 0 => Err(Error::Config("tag dimension must be positive".into())),
            TagMode::Discrete { k } if k < 2 => Err(Error::Config(format!("need at least 2 discrete tags, got {k}"))),
            _ => Ok(()),
        }
    }

    /// Splits raw outputs (one row per token) into posteriors.
    pub fn posteriors(&self, raw: &Mat) -> Result<Vec<TagPosterior>> {
        raw.rows()
            .into_iter()
            .map(|row| {
                let row = row.to_vec();
                match *self {
                    TagMode::Continuous { dim } => {
                        DiagonalGaussian::from_raw(row[..dim].to_vec(), &row[dim..]).map(TagPosterior::Gaussian)
                    }
                    TagMode::Discrete { .. } => Categorical::new(row).map(TagPosterior::Categorical),
                }
            })
            .collect()
    }
}

/// Shifts the raw scale outputs of a fresh Gaussian layer by 1, so initial
/// variances sit near 1 instead of near the floor. Squared raw values close
/// to 0 otherwise start the KL terms in the thousands, and Adam's second
/// moments take thousands of steps to forget those gradients.
fn unit_scale_offset(mode: TagMode, bias: &mut Mat) {
    if let TagMode::Continuous { dim } = mode {
        bias.slice_mut(ndarray::s![.., dim..2 * dim]).mapv_inplace(|v| v + 1.0);
    }
}

/// Posterior parameters for a block of tokens on a tape, one row per token.
#[derive(Clone, Copy, Debug)]
pub enum EncodedRows {
    Gaussian { mean: Var, var: Var },
    Categorical { logits: Var },
}

impl EncodedRows {
    pub fn from_raw(tape: &mut Tape, mode: TagMode, raw: Var) -> Self {
        match mode {
            TagMode::Continuous { dim } => {
                let mean = tape.slice_cols(raw, 0, dim);
                let scale = tape.slice_cols(raw, dim, 2 * dim);
                let var = crate::dists::variance_from_raw(tape, scale);
                EncodedRows::Gaussian { mean, var }
            }
            TagMode::Discrete { .. } => EncodedRows::Categorical { logits: raw },
        }
    }

    /// Summed `KL(self || other)` over rows.
    pub fn kl(&self, tape: &mut Tape, other: &EncodedRows) -> Var {
        match (self, other) {
            (EncodedRows::Gaussian { mean: mp, var: vp }, EncodedRows::Gaussian { mean: mq, var: vq }) => {
                crate::dists::gaussian_kl_rows(tape, *mp, *vp, *mq, *vq)
            }
            (EncodedRows::Categorical { logits: lp }, EncodedRows::Categorical { logits: lq }) => {
                crate::dists::categorical_kl_rows(tape, *lp, *lq)
            }
            _ => panic!("KL between posteriors of different modes"),
        }
    }
}

/// One-hidden-layer tanh network producing posterior parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub mode: TagMode,
    pub hidden: Dense,
    pub output: Dense,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundEncoder {
    mode: TagMode,
    hidden: BoundDense,
    output: BoundDense,
}

impl EncoderParams {
    pub fn new(mode: TagMode, input_dim: usize, hidden: usize, init: &mut Init) -> Self {
        let hidden = Dense::new(init, input_dim, hidden);
        let mut output = Dense::new(init, hidden.output_dim(), mode.output_dim());
        unit_scale_offset(mode, &mut output.b);
        EncoderParams { mode, hidden, output }
    }

    pub fn zeros(mode: TagMode, input_dim: usize, hidden: usize) -> Self {
        EncoderParams {
            mode,
            hidden: Dense::zeros(input_dim, hidden),
            output: Dense::zeros(hidden, mode.output_dim()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.input_dim()
    }

    /// Raw outputs for a block of inputs (one row each).
    pub fn raw(&self, x: &Mat) -> Result<Mat> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let h = self.hidden.apply(x).mapv(f64::tanh);
        Ok(self.output.apply(&h))
    }

    pub fn encode_rows(&self, x: &Mat) -> Result<Vec<TagPosterior>> {
        self.mode.posteriors(&self.raw(x)?)
    }

    /// `p_θ(t | x)` for one contextual token vector.
    pub fn encode_token(&self, x: &[f64]) -> Result<TagPosterior> {
        let row = Mat::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape");
        Ok(self.encode_rows(&row)?.remove(0))
    }

    /// `s_ξ(t | x̂)` for one type vector; same architecture as the token encoder.
    pub fn encode_type(&self, x: &[f64]) -> Result<TagPosterior> {
        self.encode_token(x)
    }

    /// The first `tag_dim` raw outputs: posterior means in continuous mode.
    pub fn means(&self, x: &Mat) -> Result<Mat> {
        let raw = self.raw(x)?;
        Ok(raw.slice(s![.., ..self.mode.tag_dim()]).to_owned())
    }

    pub fn bound(&self, vars: &mut impl Iterator<Item = Var>) -> BoundEncoder {
        BoundEncoder {
            mode: self.mode,
            hidden: Dense::bound(vars),
            output: Dense::bound(vars),
        }
    }
}

impl ParamSet for EncoderParams {
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

impl BoundEncoder {
    pub fn raw(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.hidden.forward(tape, x);
        let h = tape.tanh(h);
        self.output.forward(tape, h)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> EncodedRows {
        let raw = self.raw(tape, x);
        EncodedRows::from_raw(tape, self.mode, raw)
    }
}

/// `r_ψ(t)`: the output-layer values are the parameters themselves.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalParams {
    pub mode: TagMode,
    pub values: Mat,
}

impl MarginalParams {
    pub fn new(mode: TagMode, init: &mut Init) -> Self {
        let mut values = init.mat(1, mode.output_dim());
        unit_scale_offset(mode, &mut values);
        MarginalParams { mode, values }
    }

    pub fn zeros(mode: TagMode) -> Self {
        MarginalParams {
            mode,
            values: Mat::zeros((1, mode.output_dim())),
        }
    }

    pub fn marginal(&self) -> TagPosterior {
        self.mode
            .posteriors(&self.values)
            .expect("marginal parameters are finite")
            .remove(0)
    }

    /// The marginal repeated over `n` rows of a tape.
    pub fn rows(&self, tape: &mut Tape, values: Var, n: usize) -> EncodedRows {
        let raw = tape.broadcast_rows(values, n);
        EncodedRows::from_raw(tape, self.mode, raw)
    }
}

impl ParamSet for MarginalParams {
    fn tensors(&self) -> Vec<&Mat> {
        vec![&self.values]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        vec![&mut self.values]
    }
}

/// Deterministic inputs to the decoder.
#[derive(Clone, Debug, PartialEq)]
pub enum BaselineSpec {
    Identity,
    Pca {
        mean: Mat,
        /// `d × input_dim`, orthonormal rows.
        projection: Mat,
        explained: Vec<f64>,
    },
    /// Continuous encoder whose variance is pinned to zero.
    Mlp(EncoderParams),
    GoldPos(Vocab),
}

impl BaselineSpec {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineSpec::Identity => "identity",
            BaselineSpec::Pca { .. } => "pca",
            BaselineSpec::Mlp(_) => "mlp",
            BaselineSpec::GoldPos(_) => "gold_pos",
        }
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        match self {
            BaselineSpec::Identity => input_dim,
            BaselineSpec::Pca { projection, .. } => projection.nrows(),
            BaselineSpec::Mlp(enc) => enc.mode.tag_dim(),
            BaselineSpec::GoldPos(v) => v.len(),
        }
    }

    /// Tag vectors for one sentence, one row per token.
    pub fn project(&self, example: &Example) -> Result<Mat> {
        match self {
            BaselineSpec::Identity => Ok(example.tokens.clone()),
            BaselineSpec::Pca { mean, projection, .. } => {
                if example.tokens.ncols() != projection.ncols() {
                    return Err(Error::Dimension {
                        expected: projection.ncols(),
                        got: example.tokens.ncols(),
                    });
                }
                Ok((&example.tokens - mean).dot(&projection.t()))
            }
            BaselineSpec::Mlp(enc) => enc.means(&example.tokens),
            BaselineSpec::GoldPos(vocab) => one_hot_pos(vocab, &example.sentence.pos),
        }
    }

    /// Maps PCA coordinates back to the input space.
    pub fn unproject(&self, coords: &Mat) -> Option<Mat> {
        match self {
            BaselineSpec::Pca { mean, projection, .. } => Some(coords.dot(projection) + mean),
            BaselineSpec::Identity => Some(coords.clone()),
            _ => None,
        }
    }
}

pub fn one_hot_pos(vocab: &Vocab, tags: &[String]) -> Result<Mat> {
    let mut out = Mat::zeros((tags.len(), vocab.len()));
    for (i, tag) in tags.iter().enumerate() {
        let id = vocab.get(tag).ok_or_else(|| Error::Vocabulary {
            kind: "pos".into(),
            value: tag.clone(),
        })?;
        out[[i, id]] = 1.0;
    }
    Ok(out)
}

/// Top-`d` principal directions of the mean-centered rows of `x`.
pub fn pca_fit_rows(x: &Mat, d: usize) -> Result<BaselineSpec> {
    let (rows, dim) = x.dim();
    if d == 0 || d > dim {
        return Err(Error::Config(format!("PCA dimension {d} must be in 1..={dim}")));
    }
    if rows < d {
        return Err(Error::Config(format!("PCA needs at least {d} tokens, got {rows}")));
    }
    let mean = x.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
    let centered = x - &mean;
    let cov = centered.t().dot(&centered) / rows as f64;
    let (values, vectors) = symmetric_eigen(&cov);
    let projection = vectors.slice(s![.., ..d]).t().to_owned();
    Ok(BaselineSpec::Pca {
        mean,
        projection,
        explained: values[..d].iter().map(|v| v.max(0.0)).collect(),
    })
}

/// PCA over every token vector of a dataset.
pub fn pca_fit(dataset: &Dataset, d: usize) -> Result<BaselineSpec> {
    let views: Vec<_> = dataset.examples.iter().map(|e| e.tokens.view()).collect();
    if views.is_empty() {
        return Err(Error::Config("PCA needs a non-empty dataset".into()));
    }
    let all = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Config(e.to_string()))?;
    pca_fit_rows(&all, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sentence;
    use crate::dists::{posterior_kl, VAR_FLOOR};
    use crate::tape::testing::max_rel_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_weights_give_floor_gaussian_and_uniform_categorical() {
        let x = [0.3, -2.0, 5.0];
        let cont = EncoderParams::zeros(TagMode::Continuous { dim: 4 }, 3, 8);
        match cont.encode_token(&x).unwrap() {
            TagPosterior::Gaussian(g) => {
                assert!(g.mean().iter().all(|&m| m == 0.0));
                assert!(g.var().iter().all(|&v| v == VAR_FLOOR));
            }
            _ => panic!("expected a Gaussian"),
        }
        let disc = EncoderParams::zeros(TagMode::Discrete { k: 5 }, 3, 8);
        match disc.encode_type(&x).unwrap() {
            TagPosterior::Categorical(c) => assert!(c.probs().iter().all(|p| (p - 0.2).abs() < 1e-15)),
            _ => panic!("expected a categorical"),
        }
        assert!(cont.encode_token(&[1.0]).is_err());
    }

    #[test]
    fn zero_marginals() {
        match MarginalParams::zeros(TagMode::Discrete { k: 4 }).marginal() {
            TagPosterior::Categorical(c) => assert!(c.probs().iter().all(|p| (p - 0.25).abs() < 1e-15)),
            _ => panic!(),
        }
        match MarginalParams::zeros(TagMode::Continuous { dim: 3 }).marginal() {
            TagPosterior::Gaussian(g) => {
                assert!(g.mean().iter().all(|&m| m == 0.0) && g.var().iter().all(|&v| v == VAR_FLOOR))
            }
            _ => panic!(),
        }
    }

    #[test]
    fn every_weight_affects_the_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for mode in [TagMode::Continuous { dim: 2 }, TagMode::Discrete { k: 3 }] {
            let enc = EncoderParams::new(mode, 3, 4, &mut Init::new(&mut rng, 1.0));
            let x = [0.5, -0.4, 0.9];
            let base = enc.encode_token(&x).unwrap();
            let n_tensors = enc.tensors().len();
            for t in 0..n_tensors {
                let mut bumped = enc.clone();
                bumped.tensors_mut()[t][[0, 0]] += 1e-3;
                assert_ne!(bumped.encode_token(&x).unwrap(), base, "tensor {t}");
            }
        }
    }

    #[test]
    fn kl_to_random_marginal_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for mode in [TagMode::Continuous { dim: 3 }, TagMode::Discrete { k: 6 }] {
            let mut init = Init::new(&mut rng, 1.0);
            let enc = EncoderParams::new(mode, 5, 6, &mut init);
            let marg = MarginalParams::new(mode, &mut init);
            let x: Vec<f64> = (0..5).map(|i| i as f64 * 0.3 - 0.6).collect();
            let kl = posterior_kl(&enc.encode_token(&x).unwrap(), &marg.marginal()).unwrap();
            assert!(kl.is_finite() && kl >= 0.0);
        }
    }

    #[test]
    fn encoding_is_per_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = EncoderParams::new(TagMode::Continuous { dim: 2 }, 3, 4, &mut Init::new(&mut rng, 1.0));
        let x = rand_mat(&mut rng, 4, 3);
        let perm = [2, 0, 3, 1];
        let xp = x.select(Axis(0), &perm);
        let a = enc.encode_rows(&x).unwrap();
        let b = enc.encode_rows(&xp).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(b[i], a[p]);
        }
    }

    #[test]
    fn tape_encoder_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for mode in [TagMode::Continuous { dim: 2 }, TagMode::Discrete { k: 3 }] {
            let mut init = Init::new(&mut rng, 0.8);
            let enc = EncoderParams::new(mode, 3, 4, &mut init);
            let marg = MarginalParams::new(mode, &mut init);
            let mut params: Vec<Mat> = enc.tensors().into_iter().cloned().collect();
            params.push(marg.values.clone());
            params.push(rand_mat(&mut rng, 2, 3));
            let err = max_rel_error(&params, |t, v| {
                let b = enc.bound(&mut v[..4].iter().copied());
                let rows = b.forward(t, v[5]);
                let m = marg.rows(t, v[4], 2);
                rows.kl(t, &m)
            });
            assert!(err < 1e-5, "{mode:?} rel err {err}");
        }
    }

    #[test]
    fn mlp_baseline_equals_encoder_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let enc = EncoderParams::new(TagMode::Continuous { dim: 3 }, 4, 6, &mut Init::new(&mut rng, 1.0));
        let tokens = rand_mat(&mut rng, 5, 4);
        let ex = example(tokens.clone(), vec!["NOUN".into(); 5]);
        let proj = BaselineSpec::Mlp(enc.clone()).project(&ex).unwrap();
        let post = enc.encode_rows(&tokens).unwrap();
        for (i, p) in post.iter().enumerate() {
            assert_eq!(proj.row(i).to_vec(), p.summary());
        }
    }

    fn example(tokens: Mat, pos: Vec<String>) -> Example {
        let n = tokens.nrows();
        let mut heads = vec![1; n];
        heads[0] = 0;
        let sentence = Sentence::new(
            0,
            (0..n).map(|i| format!("w{i}")).collect(),
            heads,
            vec!["dep".into(); n],
            pos,
        );
        Example {
            types: tokens.clone(),
            tokens,
            sentence,
        }
    }

    #[test]
    fn identity_and_gold_pos() {
        let tokens = ndarray::arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        let ex = example(tokens.clone(), vec!["DET".into(), "NOUN".into()]);
        assert_eq!(BaselineSpec::Identity.project(&ex).unwrap(), tokens);

        let upos = [
            "ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM", "PART", "PRON", "PROPN", "PUNCT",
            "SCONJ", "SYM", "VERB", "X",
        ];
        let vocab = Vocab::from_items(upos.iter().map(|s| s.to_string()).collect());
        let oh = BaselineSpec::GoldPos(vocab).project(&ex).unwrap();
        assert_eq!(oh.dim(), (2, 17));
        assert_eq!(oh[[1, 7]], 1.0);
        assert_eq!(oh.row(1).sum(), 1.0);

        let bad = example(tokens, vec!["DET".into(), "BOGUS".into()]);
        let small = Vocab::from_items(vec!["DET".into()]);
        assert!(matches!(BaselineSpec::GoldPos(small).project(&bad), Err(Error::Vocabulary { .. })));
    }

    #[test]
    fn pca_rank_one_data() {
        let x = Mat::from_shape_fn((20, 3), |(i, j)| (i as f64 - 7.0) * [1.0, -2.0, 0.5][j] + 3.0);
        let spec = pca_fit_rows(&x, 1).unwrap();
        let rec = spec.unproject(&spec.project(&example(x.clone(), vec!["X".into(); 20])).unwrap()).unwrap();
        assert!((rec - &x).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn pca_full_dimension_is_orthonormal_and_invertible() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_mat(&mut rng, 30, 5);
        let spec = pca_fit_rows(&x, 5).unwrap();
        let BaselineSpec::Pca { projection, explained, .. } = &spec else { panic!() };
        let gram = projection.dot(&projection.t());
        for i in 0..5 {
            for j in 0..5 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - expect).abs() < 1e-8);
            }
        }
        assert!(explained.windows(2).all(|w| w[0] >= w[1]));
        let centered = &x - &x.mean_axis(Axis(0)).unwrap();
        let total: f64 = centered.mapv(|v| v * v).sum() / 30.0;
        assert!((explained.iter().sum::<f64>() - total).abs() < 1e-8);
        let ex = example(x.clone(), vec!["X".into(); 30]);
        let rec = spec.unproject(&spec.project(&ex).unwrap()).unwrap();
        assert!((rec - &x).iter().all(|v| v.abs() < 1e-6));
    }

    /// Power iteration with deflation, independent of the Jacobi solver.
    fn top_eigenvalues(mut a: Mat, d: usize) -> Vec<f64> {
        let n = a.nrows();
        let mut out = Vec::new();
        for _ in 0..d {
            let mut v = Mat::from_shape_fn((n, 1), |(i, _)| 1.0 + i as f64 * 0.1);
            let mut lambda = 0.0;
            for _ in 0..5000 {
                let w = a.dot(&v);
                let norm = w.mapv(|x| x * x).sum().sqrt();
                v = w / norm;
                lambda = v.t().dot(&a).dot(&v)[[0, 0]];
            }
            out.push(lambda);
            a = a - lambda * v.dot(&v.t());
        }
        out
    }

    #[test]
    fn pca_variance_matches_independent_eigensolver() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scales = [3.0, 2.0, 1.5, 1.0, 0.7, 0.5, 0.3, 0.1];
        let x = Mat::from_shape_fn((50, 8), |(_, j)| rng.gen_range(-1.0..1.0) * scales[j]);
        let spec = pca_fit_rows(&x, 3).unwrap();
        let proj = spec.project(&example(x.clone(), vec!["X".into(); 50])).unwrap();
        let proj_var: f64 = proj.mapv(|v| v * v).sum() / 50.0;

        let centered = &x - &x.mean_axis(Axis(0)).unwrap();
        let cov = centered.t().dot(&centered) / 50.0;
        let expect: f64 = top_eigenvalues(cov, 3).iter().sum();
        assert!((proj_var - expect).abs() < 1e-6, "{proj_var} vs {expect}");
    }

    #[test]
    fn pca_rejects_bad_dimension() {
        let x = Mat::zeros((10, 3));
        assert!(pca_fit_rows(&x, 4).is_err());
        assert!(pca_fit_rows(&x, 0).is_err());
    }
}
