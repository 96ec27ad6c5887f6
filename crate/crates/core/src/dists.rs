//! Diagonal Gaussians and categoricals: closed-form KLs, entropies and the
//! reparameterized samplers used to draw tags.
//!
//! Everything is in nats. The value-level functions operate on single
//! distributions; the `*_rows` functions build the same quantities on a
//! [`Tape`] for a whole sentence at once (one distribution per row).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Mat, Tape, Var};

/// Lower bound added to every variance.
pub const VAR_FLOOR: f64 = 1e-6;

/// Bounds applied to uniform draws before the Gumbel transform.
const UNIFORM_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::Dimension {
                expected: mean.len(),
                got: var.len(),
            });
        }
        if mean.iter().chain(&var).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite Gaussian parameter".into()));
        }
        if var.iter().any(|&v| v <= 0.0) {
            return Err(Error::Numeric("Gaussian variance must be positive".into()));
        }
        Ok(Self { mean, var })
    }

    /// Variance parameterized as the square of `raw_scale` plus [`VAR_FLOOR`].
    pub fn from_raw(mean: Vec<f64>, raw_scale: &[f64]) -> Result<Self> {
        let var = raw_scale.iter().map(|r| r * r + VAR_FLOOR).collect();
        Self::new(mean, var)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        self.mean
            .iter()
            .zip(&self.var)
            .zip(x)
            .map(|((m, v), xi)| -0.5 * (ln_2pi + v.ln() + (xi - m).powi(2) / v))
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Categorical {
    logits: Vec<f64>,
}

impl Categorical {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.len() < 2 {
            return Err(Error::Dimension {
                expected: 2,
                got: logits.len(),
            });
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite logit".into()));
        }
        Ok(Self { logits })
    }

    /// Builds a categorical from strictly positive probabilities.
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        Self::new(probs.iter().map(|p| p.ln()).collect())
    }

    pub fn k(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn log_probs(&self) -> Vec<f64> {
        let lse = log_sum_exp(&self.logits);
        self.logits.iter().map(|l| l - lse).collect()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs().into_iter().map(f64::exp).collect()
    }
}

/// The encoder output for one token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TagPosterior {
    Gaussian(DiagonalGaussian),
    Categorical(Categorical),
}

impl TagPosterior {
    pub fn dim(&self) -> usize {
        match self {
            TagPosterior::Gaussian(g) => g.dim(),
            TagPosterior::Categorical(c) => c.k(),
        }
    }

    /// Posterior mean (continuous) or probability vector (discrete).
    pub fn summary(&self) -> Vec<f64> {
        match self {
            TagPosterior::Gaussian(g) => g.mean().to_vec(),
            TagPosterior::Categorical(c) => c.probs(),
        }
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension { expected: a, got: b });
    }
    Ok(())
}

/// `KL(p || q)` between diagonal Gaussians.
pub fn gaussian_kl(p: &DiagonalGaussian, q: &DiagonalGaussian) -> Result<f64> {
    check_dims(p.dim(), q.dim())?;
    let kl: f64 = p
        .mean
        .iter()
        .zip(&p.var)
        .zip(q.mean.iter().zip(&q.var))
        .map(|((mp, vp), (mq, vq))| vp / vq + (mq - mp).powi(2) / vq - 1.0 + vq.ln() - vp.ln())
        .sum();
    Ok((0.5 * kl).max(0.0))
}

/// `KL(p || q)` between categoricals over the same support.
pub fn categorical_kl(p: &Categorical, q: &Categorical) -> Result<f64> {
    check_dims(p.k(), q.k())?;
    let lp = p.log_probs();
    let lq = q.log_probs();
    let kl: f64 = lp
        .iter()
        .zip(&lq)
        .map(|(a, b)| if *a == f64::NEG_INFINITY { 0.0 } else { a.exp() * (a - b) })
        .sum();
    Ok(kl.max(0.0))
}

pub fn posterior_kl(p: &TagPosterior, q: &TagPosterior) -> Result<f64> {
    match (p, q) {
        (TagPosterior::Gaussian(a), TagPosterior::Gaussian(b)) => gaussian_kl(a, b),
        (TagPosterior::Categorical(a), TagPosterior::Categorical(b)) => categorical_kl(a, b),
        _ => Err(Error::Numeric("KL between a Gaussian and a categorical".into())),
    }
}

pub fn categorical_entropy(p: &Categorical) -> f64 {
    p.log_probs()
        .iter()
        .map(|lp| if *lp == f64::NEG_INFINITY { 0.0 } else { -lp.exp() * lp })
        .sum::<f64>()
        .max(0.0)
}

/// Entropy of an empirical distribution given by counts.
pub fn entropy_of_counts(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// `mean + sqrt(var) ⊙ z` for caller-supplied standard-normal draws `z`.
pub fn sample_gaussian(p: &DiagonalGaussian, z: &[f64]) -> Result<Vec<f64>> {
    check_dims(p.dim(), z.len())?;
    Ok(p.mean
        .iter()
        .zip(&p.var)
        .zip(z)
        .map(|((m, v), zi)| m + v.sqrt() * zi)
        .collect())
}

/// Standard Gumbel draw from a uniform variate.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
    -(-u.ln()).ln()
}

/// Gumbel-softmax relaxation at temperature `tau`; `tau = 0` gives the exact
/// one-hot Gumbel-max sample.
pub fn sample_gumbel_softmax(p: &Categorical, tau: f64, gumbel: &[f64]) -> Result<Vec<f64>> {
    check_dims(p.k(), gumbel.len())?;
    if !(tau >= 0.0) {
        return Err(Error::Numeric(format!("temperature must be non-negative, got {tau}")));
    }
    let perturbed: Vec<f64> = p.logits.iter().zip(gumbel).map(|(l, g)| l + g).collect();
    if tau == 0.0 {
        let best = argmax(&perturbed);
        let mut one_hot = vec![0.0; p.k()];
        one_hot[best] = 1.0;
        return Ok(one_hot);
    }
    let scaled: Vec<f64> = perturbed.iter().map(|v| v / tau).collect();
    let lse = log_sum_exp(&scaled);
    Ok(scaled.iter().map(|v| (v - lse).exp()).collect())
}

/// Index of the first maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Sum over rows of `KL(N(mean_p, var_p) || N(mean_q, var_q))`. All inputs
/// have one distribution per row and matching shapes.
pub fn gaussian_kl_rows(tape: &mut Tape, mean_p: Var, var_p: Var, mean_q: Var, var_q: Var) -> Var {
    let ratio = tape.div(var_p, var_q);
    let diff = tape.sub(mean_q, mean_p);
    let diff_sq = tape.square(diff);
    let maha = tape.div(diff_sq, var_q);
    let log_q = tape.ln(var_q);
    let log_p = tape.ln(var_p);
    let log_ratio = tape.sub(log_q, log_p);
    let a = tape.add(ratio, maha);
    let b = tape.add(a, log_ratio);
    let c = tape.offset(b, -1.0);
    let total = tape.sum(c);
    tape.scale(total, 0.5)
}

/// Sum over rows of `KL(softmax(logits_p) || softmax(logits_q))`.
pub fn categorical_kl_rows(tape: &mut Tape, logits_p: Var, logits_q: Var) -> Var {
    let lp = tape.log_softmax(logits_p);
    let lq = tape.log_softmax(logits_q);
    let p = tape.exp(lp);
    let diff = tape.sub(lp, lq);
    let weighted = tape.mul(p, diff);
    tape.sum(weighted)
}

/// Raw encoder outputs to variances: `raw² + VAR_FLOOR`.
pub fn variance_from_raw(tape: &mut Tape, raw: Var) -> Var {
    let sq = tape.square(raw);
    tape.offset(sq, VAR_FLOOR)
}

/// Reparameterized Gaussian draw; `z` is held fixed.
pub fn gaussian_sample_rows(tape: &mut Tape, mean: Var, var: Var, z: Mat) -> Var {
    let sd = tape.sqrt(var);
    let zv = tape.leaf(z);
    let noise = tape.mul(sd, zv);
    tape.add(mean, noise)
}

/// Relaxed categorical draw `softmax((logits + g) / tau)`, `tau > 0`.
pub fn gumbel_softmax_rows(tape: &mut Tape, logits: Var, gumbel: Mat, tau: f64) -> Var {
    assert!(tau > 0.0, "relaxed sampling needs a positive temperature");
    let g = tape.leaf(gumbel);
    let perturbed = tape.add(logits, g);
    let scaled = tape.scale(perturbed, 1.0 / tau);
    tape.softmax(scaled)
}

/// One-hot Gumbel-max draws, one per row; not differentiable.
pub fn gumbel_max_rows(logits: &Mat, gumbel: &Mat) -> Mat {
    let mut out = Array2::zeros(logits.dim());
    for (r, (lrow, grow)) in logits.rows().into_iter().zip(gumbel.rows()).enumerate() {
        let perturbed: Vec<f64> = lrow.iter().zip(grow.iter()).map(|(l, g)| l + g).collect();
        out[[r, argmax(&perturbed)]] = 1.0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::testing::max_rel_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gauss(mean: &[f64], var: &[f64]) -> DiagonalGaussian {
        DiagonalGaussian::new(mean.to_vec(), var.to_vec()).unwrap()
    }

    #[test]
    fn gaussian_kl_identity_is_zero() {
        let p = gauss(&[0.3, -1.0], &[0.5, 2.0]);
        assert_eq!(gaussian_kl(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn gaussian_kl_unit_shift() {
        // Closed form against the Monte-Carlo values in the acceptance suite.
        let kl = gaussian_kl(&gauss(&[0.0], &[1.0]), &gauss(&[1.0], &[1.0])).unwrap();
        assert!((kl - 0.5).abs() < 1e-15);
        let kl2 = gaussian_kl(&gauss(&[0.0, 0.0], &[1.0, 1.0]), &gauss(&[1.0, 1.0], &[1.0, 1.0])).unwrap();
        assert!((kl2 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gaussian_kl_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = gauss(&[0.2, -0.4, 1.0], &[0.7, 1.3, 0.4]);
        let q = gauss(&[-0.1, 0.3, 0.5], &[1.1, 0.9, 0.8]);
        let n = 200_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let z: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let x = sample_gaussian(&p, &z).unwrap();
            acc += p.log_density(&x) - q.log_density(&x);
        }
        let mc = acc / n as f64;
        assert!((mc - gaussian_kl(&p, &q).unwrap()).abs() < 1e-2);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = gauss(&[0.0], &[1.0]);
        let q = gauss(&[0.0, 0.0], &[1.0, 1.0]);
        assert!(matches!(gaussian_kl(&p, &q), Err(Error::Dimension { .. })));
        let c2 = Categorical::new(vec![0.0, 0.0]).unwrap();
        let c3 = Categorical::new(vec![0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(categorical_kl(&c2, &c3), Err(Error::Dimension { .. })));
        assert!(sample_gaussian(&p, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn categorical_needs_two_outcomes() {
        assert!(Categorical::new(vec![1.0]).is_err());
    }

    #[test]
    fn categorical_kl_examples() {
        let u = Categorical::new(vec![0.0; 4]).unwrap();
        assert_eq!(categorical_kl(&u, &u).unwrap(), 0.0);

        let p = Categorical::from_probs(&[0.5, 0.5]).unwrap();
        let q = Categorical::from_probs(&[0.25, 0.75]).unwrap();
        let direct = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        let kl = categorical_kl(&p, &q).unwrap();
        assert!((kl - direct).abs() < 1e-12);
        assert!((kl - 0.1438).abs() < 1e-4);

        let sharp = Categorical::from_probs(&[1.0 - 1e-9, 1e-9]).unwrap();
        let half = Categorical::from_probs(&[0.5, 0.5]).unwrap();
        let kl = categorical_kl(&sharp, &half).unwrap();
        assert!((kl - 2f64.ln()).abs() < 1e-6, "{kl}");
    }

    #[test]
    fn sample_gaussian_examples() {
        let p = gauss(&[1.0, -2.0], &[0.3, 4.0]);
        assert_eq!(sample_gaussian(&p, &[0.0, 0.0]).unwrap(), vec![1.0, -2.0]);

        let floor = DiagonalGaussian::from_raw(vec![0.5, 0.5], &[0.0, 0.0]).unwrap();
        let z = [3.0, -2.5];
        let t = sample_gaussian(&floor, &z).unwrap();
        for ((ti, zi), m) in t.iter().zip(&z).zip(floor.mean()) {
            assert!((ti - m).abs() <= VAR_FLOOR.sqrt() * zi.abs() + 1e-15);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let z: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let t = sample_gaussian(&p, &z).unwrap();
            sum[0] += t[0];
            sum[1] += t[1];
        }
        for j in 0..2 {
            let tol = 3.0 * p.var()[j].sqrt() / (n as f64).sqrt();
            assert!((sum[j] / n as f64 - p.mean()[j]).abs() < tol);
        }
    }

    #[test]
    fn gumbel_softmax_zero_temperature_is_one_hot() {
        let p = Categorical::new(vec![0.1, 2.0, -1.0]).unwrap();
        let t = sample_gumbel_softmax(&p, 0.0, &[0.0, 0.0, 5.0]).unwrap();
        assert_eq!(t, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn gumbel_softmax_high_temperature_is_uniform() {
        let p = Categorical::new(vec![3.0, -2.0, 0.5, 1.0]).unwrap();
        let t = sample_gumbel_softmax(&p, 1e6, &[0.2, 1.5, -0.3, 0.0]).unwrap();
        for v in t {
            assert!((v - 0.25).abs() < 1e-3);
        }
    }

    #[test]
    fn gumbel_max_frequencies_match_softmax() {
        let p = Categorical::new(vec![0.5, -0.2, 1.1, 0.0]).unwrap();
        let probs = p.probs();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let g: Vec<f64> = (0..4).map(|_| gumbel_from_uniform(rng.gen())).collect();
            let t = sample_gumbel_softmax(&p, 0.0, &g).unwrap();
            counts[argmax(&t)] += 1;
        }
        for (c, p) in counts.iter().zip(&probs) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.02);
        }
    }

    #[test]
    fn gumbel_softmax_low_temperature_is_nearly_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut sharp = 0;
        let trials = 2000;
        for _ in 0..trials {
            let top = rng.gen_range(0..5);
            let logits: Vec<f64> = (0..5).map(|i| if i == top { 5.0 } else { rng.gen_range(-1.0..0.0) }).collect();
            let p = Categorical::new(logits).unwrap();
            let g: Vec<f64> = (0..5).map(|_| gumbel_from_uniform(rng.gen())).collect();
            let t = sample_gumbel_softmax(&p, 0.1, &g).unwrap();
            if t.iter().cloned().fold(0.0, f64::max) >= 0.99 {
                sharp += 1;
            }
        }
        assert!(sharp as f64 >= 0.95 * trials as f64, "{sharp}");
    }

    #[test]
    fn gumbel_uniform_is_clamped() {
        assert!(gumbel_from_uniform(0.0).is_finite());
        assert!(gumbel_from_uniform(1.0).is_finite());
    }

    #[test]
    fn entropy_bounds() {
        let mut one_hot = vec![-1e9; 5];
        one_hot[2] = 0.0;
        assert!(categorical_entropy(&Categorical::new(one_hot).unwrap()) < 1e-12);
        let u = Categorical::new(vec![0.0; 17]).unwrap();
        assert!((categorical_entropy(&u) - 17f64.ln()).abs() < 1e-12);
        assert!((17f64.ln() - 2.833).abs() < 1e-3);
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn graph_kls_match_value_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (mp, rp, mq, rq) = (
            rand_mat(&mut rng, 3, 4),
            rand_mat(&mut rng, 3, 4),
            rand_mat(&mut rng, 3, 4),
            rand_mat(&mut rng, 3, 4),
        );
        let mut tape = Tape::new();
        let vars: Vec<Var> = [&mp, &rp, &mq, &rq].iter().map(|m| tape.leaf((*m).clone())).collect();
        let vp = variance_from_raw(&mut tape, vars[1]);
        let vq = variance_from_raw(&mut tape, vars[3]);
        let kl = gaussian_kl_rows(&mut tape, vars[0], vp, vars[2], vq);
        let cat = categorical_kl_rows(&mut tape, vars[0], vars[2]);
        let mut expect_g = 0.0;
        let mut expect_c = 0.0;
        for r in 0..3 {
            let p = DiagonalGaussian::from_raw(mp.row(r).to_vec(), rp.row(r).as_slice().unwrap()).unwrap();
            let q = DiagonalGaussian::from_raw(mq.row(r).to_vec(), rq.row(r).as_slice().unwrap()).unwrap();
            expect_g += gaussian_kl(&p, &q).unwrap();
            let cp = Categorical::new(mp.row(r).to_vec()).unwrap();
            let cq = Categorical::new(mq.row(r).to_vec()).unwrap();
            expect_c += categorical_kl(&cp, &cq).unwrap();
        }
        assert!((tape.scalar(kl) - expect_g).abs() < 1e-12);
        assert!((tape.scalar(cat) - expect_c).abs() < 1e-12);
    }

    #[test]
    fn kl_and_sampler_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let params: Vec<Mat> = (0..4).map(|_| rand_mat(&mut rng, 2, 3)).collect();
        let z = rand_mat(&mut rng, 2, 3);
        let g = rand_mat(&mut rng, 2, 3);
        let w = rand_mat(&mut rng, 2, 3);

        let err = max_rel_error(&params, |t, v| {
            let vp = variance_from_raw(t, v[1]);
            let vq = variance_from_raw(t, v[3]);
            gaussian_kl_rows(t, v[0], vp, v[2], vq)
        });
        assert!(err < 1e-4, "gaussian kl {err}");

        let err = max_rel_error(&params[..2], |t, v| categorical_kl_rows(t, v[0], v[1]));
        assert!(err < 1e-4, "categorical kl {err}");

        let err = max_rel_error(&params[..2], |t, v| {
            let var = variance_from_raw(t, v[1]);
            let s = gaussian_sample_rows(t, v[0], var, z.clone());
            let wv = t.leaf(w.clone());
            let prod = t.mul(s, wv);
            t.sum(prod)
        });
        assert!(err < 1e-4, "gaussian sampler {err}");

        let err = max_rel_error(&params[..1], |t, v| {
            let s = gumbel_softmax_rows(t, v[0], g.clone(), 0.7);
            let wv = t.leaf(w.clone());
            let prod = t.mul(s, wv);
            t.sum(prod)
        });
        assert!(err < 1e-4, "gumbel softmax {err}");
    }
}
