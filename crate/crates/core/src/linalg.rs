//! Small dense linear algebra: LU with partial pivoting and the cyclic Jacobi
//! eigensolver for symmetric matrices.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tape::Mat;

/// LU factorization `P·A = L·U` stored compactly.
pub struct Lu {
    lu: Mat,
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    /// Factorizes a square matrix. Fails if a pivot is exactly zero or the
    /// magnitude ratio of pivots exceeds what `f64` can resolve.
    pub fn new(a: &Mat) -> Result<Self> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "LU needs a square matrix");
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for k in 0..n {
            let mut p = k;
            for r in k + 1..n {
                if lu[[r, k]].abs() > lu[[p, k]].abs() {
                    p = r;
                }
            }
            if lu[[p, k]].abs() <= scale * 1e-300 || lu[[p, k]] == 0.0 {
                return Err(Error::Numeric(format!("singular matrix at pivot {k}")));
            }
            if p != k {
                for c in 0..n {
                    lu.swap([k, c], [p, c]);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = lu[[k, k]];
            for r in k + 1..n {
                let f = lu[[r, k]] / pivot;
                lu[[r, k]] = f;
                if f != 0.0 {
                    for c in k + 1..n {
                        lu[[r, c]] -= f * lu[[k, c]];
                    }
                }
            }
        }
        Ok(Self { lu, perm, sign })
    }

    /// `(sign, log|det|)`
    pub fn log_det(&self) -> (f64, f64) {
        let mut sign = self.sign;
        let mut log = 0.0;
        for i in 0..self.lu.nrows() {
            let d = self.lu[[i, i]];
            if d < 0.0 {
                sign = -sign;
            }
            log += d.abs().ln();
        }
        (sign, log)
    }

    pub fn inverse(&self) -> Mat {
        let n = self.lu.nrows();
        let mut inv = Array2::zeros((n, n));
        let mut col = vec![0.0; n];
        for j in 0..n {
            for (i, c) in col.iter_mut().enumerate() {
                *c = if self.perm[i] == j { 1.0 } else { 0.0 };
            }
            // Forward substitution with unit lower triangle.
            for i in 0..n {
                let mut s = col[i];
                for k in 0..i {
                    s -= self.lu[[i, k]] * col[k];
                }
                col[i] = s;
            }
            for i in (0..n).rev() {
                let mut s = col[i];
                for k in i + 1..n {
                    s -= self.lu[[i, k]] * col[k];
                }
                col[i] = s / self.lu[[i, i]];
            }
            for i in 0..n {
                inv[[i, j]] = col[i];
            }
        }
        inv
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in non-increasing order and the matching unit
/// eigenvectors as columns.
pub fn symmetric_eigen(a: &Mat) -> (Vec<f64>, Mat) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "eigensolver needs a square matrix");
    let mut m = a.clone();
    let mut v: Mat = Array2::eye(n);
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[[i, j]] * m[[i, j]])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * norm.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].partial_cmp(&m[[i, i]]).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&i| m[[i, i]]).collect();
    let vectors = v.select(ndarray::Axis(1), &order);
    (values, vectors)
}
