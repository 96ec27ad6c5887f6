//! Partition function over single-rooted arborescences via the matrix-tree
//! theorem.
//!
//! Scores are an `(n+1) × n` matrix `S` with `S[h][m]` the score of head `h`
//! (row 0 = root, row `i` = word `i`) attaching word `m+1` (column `m`).
//! Self-arcs `S[m+1][m]` are ignored. The root row of the Laplacian is
//! replaced by root scores, which restricts the sum to trees where exactly
//! one word attaches to the root.

use crate::error::{Error, Result};
use crate::linalg::Lu;
use crate::tape::Mat;

/// Shift applied to each column so its largest admissible score is 0.
/// Every tree takes exactly one arc per column, so the shifts add up.
fn column_shifts(arcs: &Mat) -> Vec<f64> {
    let n = arcs.ncols();
    (0..n)
        .map(|m| {
            (0..=n)
                .filter(|&h| h != m + 1)
                .map(|h| arcs[[h, m]])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// `log Z` and the arc marginals `∂ log Z / ∂ S` (same shape as `arcs`, zero
/// on self-arcs).
pub fn log_partition_with_marginals(arcs: &Mat) -> Result<(f64, Mat)> {
    match log_partition_floored(arcs, f64::NEG_INFINITY) {
        // Weights that underflow to zero can leave the Laplacian exactly
        // singular; flooring the shifted scores keeps it invertible at the
        // cost of a negligible overestimate of Z.
        Err(Error::Numeric(_)) if arcs.iter().all(|v| v.is_finite()) => log_partition_floored(arcs, SCORE_FLOOR),
        other => other,
    }
}

/// Lowest shifted score used by the fallback; small enough to leave regular
/// partitions alone, large enough to survive cancellation in the LU.
const SCORE_FLOOR: f64 = -30.0;

fn log_partition_floored(arcs: &Mat, floor: f64) -> Result<(f64, Mat)> {
    let n = arcs.ncols();
    if n == 0 || arcs.nrows() != n + 1 {
        return Err(Error::Dimension {
            expected: n + 1,
            got: arcs.nrows(),
        });
    }
    if arcs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite arc score".into()));
    }
    let shifts = column_shifts(arcs);
    // Every tree has exactly one root arc, so the root row can be shifted
    // as a whole; otherwise it may underflow when no word prefers the root.
    let root_shift = (0..n).map(|m| arcs[[0, m]] - shifts[m]).fold(f64::NEG_INFINITY, f64::max);
    let weight = |h: usize, m: usize| -> f64 {
        if h == m + 1 {
            0.0
        } else if h == 0 {
            (arcs[[0, m]] - shifts[m] - root_shift).max(floor).exp()
        } else {
            (arcs[[h, m]] - shifts[m]).max(floor).exp()
        }
    };

    let mut lap = Mat::zeros((n, n));
    for m in 0..n {
        // Row 0 (word 1) is replaced by the root scores.
        lap[[0, m]] = weight(0, m);
        let mut incoming = 0.0;
        for h in (1..=n).filter(|&h| h != m + 1) {
            let w = weight(h, m);
            incoming += w;
            if h - 1 != 0 {
                lap[[h - 1, m]] = -w;
            }
        }
        if m != 0 {
            lap[[m, m]] = incoming;
        }
    }

    let lu = Lu::new(&lap)?;
    let (sign, log_det) = lu.log_det();
    if sign <= 0.0 || !log_det.is_finite() {
        return Err(Error::Numeric("matrix-tree determinant is not positive".into()));
    }
    let log_z = log_det + shifts.iter().sum::<f64>() + root_shift;

    let inv = lu.inverse();
    let mut marg = Mat::zeros(arcs.dim());
    for m in 0..n {
        marg[[0, m]] = weight(0, m) * inv[[m, 0]];
        for h in 1..=n {
            if h == m + 1 {
                continue;
            }
            let hw = h - 1;
            let diag = if m != 0 { inv[[m, m]] } else { 0.0 };
            let off = if hw != 0 { inv[[m, hw]] } else { 0.0 };
            marg[[h, m]] = weight(h, m) * (diag - off);
        }
    }
    Ok((log_z, marg))
}

pub fn log_partition(arcs: &Mat) -> Result<f64> {
    log_partition_with_marginals(arcs).map(|(z, _)| z)
}
