//! Dense LU with partial pivoting, for coarse-grid and oracle solves.

use crate::error::{Error, Result};

/// LU factorization with partial pivoting of a square dense matrix stored
/// row-major.
#[derive(Debug, Clone)]
pub struct DenseLu {
    n: usize,
    lu: Vec<f64>,
    piv: Vec<usize>,
}

impl DenseLu {
    pub fn factor(a: &[Vec<f64>]) -> Result<DenseLu> {
        let n = a.len();
        let mut lu = Vec::with_capacity(n * n);
        for row in a {
            if row.len() != n {
                return Err(Error::DimensionMismatch("dense LU needs a square matrix".into()));
            }
            lu.extend_from_slice(row);
        }
        let mut piv: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut p = k;
            let mut best = lu[k * n + k].abs();
            for r in k + 1..n {
                let v = lu[r * n + k].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if best == 0.0 {
                return Err(Error::Factorization(format!(
                    "singular to machine precision at column {k}"
                )));
            }
            if p != k {
                for c in 0..n {
                    lu.swap(k * n + c, p * n + c);
                }
                piv.swap(k, p);
            }
            let pivot = lu[k * n + k];
            for r in k + 1..n {
                let m = lu[r * n + k] / pivot;
                lu[r * n + k] = m;
                for c in k + 1..n {
                    lu[r * n + c] -= m * lu[k * n + c];
                }
            }
        }
        Ok(DenseLu { n, lu, piv })
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.n {
            return Err(Error::DimensionMismatch("dense solve rhs length".into()));
        }
        let n = self.n;
        let mut x: Vec<f64> = self.piv.iter().map(|&p| b[p]).collect();
        for r in 1..n {
            let mut acc = x[r];
            for c in 0..r {
                acc -= self.lu[r * n + c] * x[c];
            }
            x[r] = acc;
        }
        for r in (0..n).rev() {
            let mut acc = x[r];
            for c in r + 1..n {
                acc -= self.lu[r * n + c] * x[c];
            }
            x[r] = acc / self.lu[r * n + r];
        }
        Ok(x)
    }
}

/// One-shot dense solve.
pub fn dense_lu_solve(a: &[Vec<f64>], b: &[f64]) -> Result<Vec<f64>> {
    DenseLu::factor(a)?.solve(b)
}
