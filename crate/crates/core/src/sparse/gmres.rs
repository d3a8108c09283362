//! Right-preconditioned GMRES.

use crate::error::{Error, Result};
use crate::sparse::csr::{norm2, CsrMatrix};

/// Right preconditioner interface: maps a residual-space vector to a
/// solution-space correction.
pub trait Preconditioner {
    fn apply(&self, r: &[f64]) -> Result<Vec<f64>>;
}

/// Identity preconditioner (plain GMRES).
pub struct IdentityPrecond;

impl Preconditioner for IdentityPrecond {
    fn apply(&self, r: &[f64]) -> Result<Vec<f64>> {
        Ok(r.to_vec())
    }
}

impl<F> Preconditioner for F
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    fn apply(&self, r: &[f64]) -> Result<Vec<f64>> {
        self(r)
    }
}

#[derive(Debug, Clone)]
pub struct GmresOutcome {
    pub iterations: usize,
    pub converged: bool,
    pub relative_residual: f64,
    /// Relative residual estimate after each iteration.
    pub history: Vec<f64>,
}

/// Solves `A x = b` with right-preconditioned GMRES from a zero initial
/// guess. `restart` is the Krylov dimension per cycle; passing
/// `restart = maxit` gives the unrestarted method used throughout.
///
/// The iteration count equals the number of preconditioner applications.
/// Convergence is declared on the true residual `||b - Ax|| / ||b||`.
pub fn gmres(
    a: &CsrMatrix,
    b: &[f64],
    precond: &dyn Preconditioner,
    rtol: f64,
    maxit: usize,
    restart: usize,
) -> Result<(Vec<f64>, GmresOutcome)> {
    if a.n_rows != a.n_cols || b.len() != a.n_rows {
        return Err(Error::DimensionMismatch("gmres: A square and len(b) = n".into()));
    }
    let n = a.n_rows;
    let b_norm = norm2(b);
    if b_norm == 0.0 {
        return Ok((
            vec![0.0; n],
            GmresOutcome {
                iterations: 0,
                converged: true,
                relative_residual: 0.0,
                history: Vec::new(),
            },
        ));
    }

    let mut x = vec![0.0; n];
    let mut total_iters = 0usize;
    let mut history: Vec<f64> = Vec::new();

    'outer: loop {
        // residual for the current x (x = 0 on the first cycle)
        let mut r = b.to_vec();
        if total_iters > 0 {
            let ax = a.spmv(&x)?;
            for i in 0..n {
                r[i] -= ax[i];
            }
        }
        let beta = norm2(&r);
        if beta / b_norm <= rtol {
            return Ok((
                x,
                GmresOutcome {
                    iterations: total_iters,
                    converged: true,
                    relative_residual: beta / b_norm,
                    history,
                },
            ));
        }

        let m = restart.min(maxit - total_iters);
        let mut v: Vec<Vec<f64>> = Vec::with_capacity(m + 1); // Krylov basis
        let mut z: Vec<Vec<f64>> = Vec::with_capacity(m); // preconditioned basis
        let mut h = vec![vec![0.0; m]; m + 1];
        let mut cs = vec![0.0; m];
        let mut sn = vec![0.0; m];
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        v.push(r.iter().map(|ri| ri / beta).collect());

        let mut k_used = 0;
        for k in 0..m {
            let zk = precond.apply(&v[k])?;
            total_iters += 1;
            let mut w = a.spmv(&zk)?;
            z.push(zk);
            // modified Gram-Schmidt
            for j in 0..=k {
                let hjk = crate::sparse::csr::dot(&w, &v[j]);
                h[j][k] = hjk;
                for i in 0..n {
                    w[i] -= hjk * v[j][i];
                }
            }
            let wn = norm2(&w);
            if !wn.is_finite() || !g.iter().all(|x| x.is_finite()) {
                return Err(Error::LinearSolver("gmres: non-finite Arnoldi vector".into()));
            }
            h[k + 1][k] = wn;
            // apply accumulated Givens rotations to the new column
            for j in 0..k {
                let t = cs[j] * h[j][k] + sn[j] * h[j + 1][k];
                h[j + 1][k] = -sn[j] * h[j][k] + cs[j] * h[j + 1][k];
                h[j][k] = t;
            }
            let denom = (h[k][k] * h[k][k] + wn * wn).sqrt();
            if denom == 0.0 {
                // lucky breakdown with a zero column: solution already exact
                k_used = k + 1;
                break;
            }
            cs[k] = h[k][k] / denom;
            sn[k] = wn / denom;
            h[k][k] = denom;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_used = k + 1;

            let est = g[k + 1].abs() / b_norm;
            history.push(est);
            if wn == 0.0 || est <= rtol {
                break;
            }
            if wn > 0.0 {
                v.push(w.iter().map(|wi| wi / wn).collect());
            }
        }

        // back substitution for y, then x += Z y
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let mut acc = g[i];
            for j in i + 1..k_used {
                acc -= h[i][j] * y[j];
            }
            if h[i][i] == 0.0 {
                return Err(Error::LinearSolver("gmres: singular Hessenberg".into()));
            }
            y[i] = acc / h[i][i];
        }
        for (j, yj) in y.iter().enumerate() {
            for i in 0..n {
                x[i] += yj * z[j][i];
            }
        }

        let ax = a.spmv(&x)?;
        let res: f64 = b
            .iter()
            .zip(&ax)
            .map(|(bi, axi)| (bi - axi) * (bi - axi))
            .sum::<f64>()
            .sqrt();
        let rel = res / b_norm;
        if rel <= rtol {
            return Ok((
                x,
                GmresOutcome {
                    iterations: total_iters,
                    converged: true,
                    relative_residual: rel,
                    history,
                },
            ));
        }
        if total_iters >= maxit {
            return Ok((
                x,
                GmresOutcome {
                    iterations: total_iters,
                    converged: false,
                    relative_residual: rel,
                    history,
                },
            ));
        }
        if k_used == 0 {
            break 'outer;
        }
    }
    Err(Error::LinearSolver("gmres: stalled without progress".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::dense::DenseLu;

    #[test]
    fn identity_converges_in_one() {
        let a = CsrMatrix::identity(5);
        let b = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let (x, out) = gmres(&a, &b, &IdentityPrecond, 1e-10, 50, 50).unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 1);
        for i in 0..5 {
            assert!((x[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_exact_in_krylov_dimension() {
        let a = CsrMatrix::from_triplets(3, 3, &[(0, 0, 1.0), (1, 1, 2.0), (2, 2, 3.0)]).unwrap();
        let b = vec![1.0, 2.0, 3.0];
        let (x, out) = gmres(&a, &b, &IdentityPrecond, 1e-12, 10, 10).unwrap();
        assert!(out.converged && out.iterations <= 3);
        for xi in &x {
            assert!((xi - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn exact_preconditioner_one_iteration() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 50;
        let mut trip = Vec::new();
        let mut dense = vec![vec![0.0; n]; n];
        for r in 0..n {
            for c in 0..n {
                let v = if r == c {
                    rng.gen_range(2.0..4.0)
                } else if rng.gen_bool(0.2) {
                    rng.gen_range(-0.5..0.5)
                } else {
                    continue;
                };
                trip.push((r, c, v));
                dense[r][c] = v;
            }
        }
        let a = CsrMatrix::from_triplets(n, n, &trip).unwrap();
        let lu = DenseLu::factor(&dense).unwrap();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pc = move |r: &[f64]| lu.solve(r);
        let (_, out) = gmres(&a, &b, &pc, 1e-8, 20, 20).unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 1);
    }

    #[test]
    fn zero_rhs_zero_solution() {
        let a = CsrMatrix::identity(4);
        let (x, out) = gmres(&a, &[0.0; 4], &IdentityPrecond, 1e-8, 10, 10).unwrap();
        assert_eq!(x, vec![0.0; 4]);
        assert_eq!(out.iterations, 0);
        assert!(out.converged);
    }
}
