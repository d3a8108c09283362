//! Algebraic multigrid: classical scalar Ruge-Stuben V-cycles and an
//! unknown-based variant for coupled pressure-temperature systems.

pub mod ruge_stuben;
pub mod uamg;

use crate::error::{Error, Result};
use crate::sparse::csr::CsrMatrix;
use crate::sparse::dense::DenseLu;
use crate::sparse::gmres::Preconditioner;
use ruge_stuben::{direct_interpolation, split_cf, strength_graph, PointKind};

#[derive(Debug, Clone, Copy)]
pub struct AmgParams {
    /// Strength-of-connection threshold.
    pub theta: f64,
    pub max_levels: usize,
    /// Rows at or below this size are solved directly.
    pub coarse_cutoff: usize,
}

impl Default for AmgParams {
    fn default() -> Self {
        AmgParams {
            theta: 0.25,
            max_levels: 25,
            coarse_cutoff: 50,
        }
    }
}

#[derive(Debug)]
struct Level {
    matrix: CsrMatrix,
    prolongation: CsrMatrix,
    restriction: CsrMatrix,
}

/// Multigrid hierarchy for one matrix. Immutable after setup.
#[derive(Debug)]
pub struct AmgHierarchy {
    levels: Vec<Level>,
    coarsest: CsrMatrix,
    coarse_solve: DenseLu,
}

impl AmgHierarchy {
    pub fn num_levels(&self) -> usize {
        self.levels.len() + 1
    }

    pub fn level_size(&self, l: usize) -> usize {
        if l < self.levels.len() {
            self.levels[l].matrix.n_rows
        } else {
            self.coarsest.n_rows
        }
    }

    pub fn level_matrix(&self, l: usize) -> &CsrMatrix {
        if l < self.levels.len() {
            &self.levels[l].matrix
        } else {
            &self.coarsest
        }
    }

    pub fn level_operators(&self, l: usize) -> (&CsrMatrix, &CsrMatrix) {
        (&self.levels[l].restriction, &self.levels[l].prolongation)
    }
}

/// One symmetric Gauss-Seidel sweep (forward then backward).
fn sgs_sweep(a: &CsrMatrix, x: &mut [f64], b: &[f64]) {
    let n = a.n_rows;
    for i in 0..n {
        gs_update(a, x, b, i);
    }
    for i in (0..n).rev() {
        gs_update(a, x, b, i);
    }
}

#[inline]
fn gs_update(a: &CsrMatrix, x: &mut [f64], b: &[f64], i: usize) {
    let (cols, vals) = a.row(i);
    let mut acc = b[i];
    let mut diag = 0.0;
    for (&c, &v) in cols.iter().zip(vals) {
        if c == i {
            diag = v;
        } else {
            acc -= v * x[c];
        }
    }
    if diag != 0.0 {
        x[i] = acc / diag;
    }
}

/// Builds a classical AMG hierarchy with Galerkin coarse operators
/// `A_c = R A P`, `R = P^T`.
pub fn amg_setup(a: &CsrMatrix, params: &AmgParams) -> Result<AmgHierarchy> {
    if a.n_rows != a.n_cols {
        return Err(Error::DimensionMismatch("amg needs a square matrix".into()));
    }
    let mut levels: Vec<Level> = Vec::new();
    let mut current = a.clone();
    while current.n_rows > params.coarse_cutoff && levels.len() + 1 < params.max_levels {
        let strong = strength_graph(&current, params.theta);
        if strong.iter().all(|s| s.is_empty()) {
            break; // no strong connections: smoother + direct solve only
        }
        let kind = split_cf(&strong);
        let nc = kind.iter().filter(|&&k| k == PointKind::Coarse).count();
        if nc == 0 || nc >= current.n_rows {
            break; // coarsening stalled
        }
        let p = direct_interpolation(&current, &strong, &kind);
        let r = p.transpose();
        let coarse = r.matmul(&current)?.matmul(&p)?;
        levels.push(Level {
            matrix: std::mem::replace(&mut current, coarse),
            prolongation: p,
            restriction: r,
        });
    }
    let coarse_solve = DenseLu::factor(&current.to_dense())
        .map_err(|e| Error::Factorization(format!("amg coarse solve: {e}")))?;
    Ok(AmgHierarchy {
        levels,
        coarsest: current,
        coarse_solve,
    })
}

/// One V(2,2) cycle from a zero initial guess; linear in `b`.
pub fn amg_vcycle(h: &AmgHierarchy, b: &[f64]) -> Result<Vec<f64>> {
    vcycle_level(h, 0, b)
}

fn vcycle_level(h: &AmgHierarchy, l: usize, b: &[f64]) -> Result<Vec<f64>> {
    if l == h.levels.len() {
        return h.coarse_solve.solve(b);
    }
    let level = &h.levels[l];
    let a = &level.matrix;
    let mut x = vec![0.0; a.n_rows];
    sgs_sweep(a, &mut x, b);
    sgs_sweep(a, &mut x, b);
    let ax = a.spmv(&x)?;
    let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, axi)| bi - axi).collect();
    let rc = level.restriction.spmv(&r)?;
    let ec = vcycle_level(h, l + 1, &rc)?;
    let e = level.prolongation.spmv(&ec)?;
    for (xi, ei) in x.iter_mut().zip(&e) {
        *xi += ei;
    }
    sgs_sweep(a, &mut x, b);
    sgs_sweep(a, &mut x, b);
    Ok(x)
}

/// V-cycle wrapped as a right preconditioner.
pub struct AmgPrecond(pub AmgHierarchy);

impl Preconditioner for AmgPrecond {
    fn apply(&self, r: &[f64]) -> Result<Vec<f64>> {
        amg_vcycle(&self.0, r)
    }
}
