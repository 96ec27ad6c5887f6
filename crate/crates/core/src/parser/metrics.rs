//! Attachment scores and the paired permutation test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parser::ParseTree;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttachmentScores {
    pub uas: f64,
    pub las: f64,
}

/// Per-sentence counts, summable across a corpus.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttachmentCounts {
    pub tokens: usize,
    pub head_correct: usize,
    pub labeled_correct: usize,
}

impl AttachmentCounts {
    pub fn of(pred: &ParseTree, gold: &ParseTree) -> Result<Self> {
        if pred.len() != gold.len() {
            return Err(Error::Dimension {
                expected: gold.len(),
                got: pred.len(),
            });
        }
        let mut c = AttachmentCounts {
            tokens: gold.len(),
            ..Default::default()
        };
        for m in 0..gold.len() {
            if pred.heads[m] == gold.heads[m] {
                c.head_correct += 1;
                if pred.labels[m] == gold.labels[m] {
                    c.labeled_correct += 1;
                }
            }
        }
        Ok(c)
    }

    pub fn add(&mut self, other: AttachmentCounts) {
        self.tokens += other.tokens;
        self.head_correct += other.head_correct;
        self.labeled_correct += other.labeled_correct;
    }

    pub fn scores(&self) -> AttachmentScores {
        if self.tokens == 0 {
            return AttachmentScores::default();
        }
        AttachmentScores {
            uas: self.head_correct as f64 / self.tokens as f64,
            las: self.labeled_correct as f64 / self.tokens as f64,
        }
    }
}

/// UAS and LAS over all tokens (punctuation included).
pub fn attachment_scores(pred: &ParseTree, gold: &ParseTree) -> Result<AttachmentScores> {
    Ok(AttachmentCounts::of(pred, gold)?.scores())
}

/// Two-sided paired sign-flip permutation test on the difference of
/// per-sentence correct counts. The statistic is `|Σ (a_i − b_i)|`.
///
/// When `2^m ≤ iterations`, with `m` the number of sentences whose counts
/// differ, all sign assignments are enumerated and the p-value is exact.
/// Otherwise `iterations` random flips are drawn from a generator seeded
/// with `seed` and the p-value is `(hits + 1) / (iterations + 1)`.
pub fn paired_permutation_test(a: &[f64], b: &[f64], iterations: usize, seed: u64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Config("permutation test needs at least one sentence".into()));
    }
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Ok(1.0);
    }
    let observed = diffs.iter().sum::<f64>().abs();
    // Guard against summation-order noise when comparing statistics.
    let threshold = observed - 1e-9 * observed.max(1.0);
    let m = diffs.len();
    if m < 63 && (1u64 << m) <= iterations as u64 {
        let total = 1u64 << m;
        let mut hits = 0u64;
        for mask in 0..total {
            let s: f64 = diffs
                .iter()
                .enumerate()
                .map(|(i, d)| if mask >> i & 1 == 1 { -d } else { *d })
                .sum();
            if s.abs() >= threshold {
                hits += 1;
            }
        }
        return Ok(hits as f64 / total as f64);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..iterations {
        let s: f64 = diffs.iter().map(|d| if rng.gen::<bool>() { -d } else { *d }).sum();
        if s.abs() >= threshold {
            hits += 1;
        }
    }
    Ok((hits + 1) as f64 / (iterations + 1) as f64)
}
