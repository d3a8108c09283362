//! Unknown-based AMG for the coupled pressure-temperature subsystem.
//!
//! Coarsening and interpolation are built independently from the diagonal
//! blocks `A_pp` and `A_TT`; the block-diagonal prolongation is applied to
//! the full coupled matrix via Galerkin, so the coupling blocks survive on
//! every coarse level.

use crate::amg::ruge_stuben::{direct_interpolation, split_cf, strength_graph, PointKind};
use crate::amg::AmgParams;
use crate::error::{Error, Result};
use crate::sparse::csr::CsrMatrix;
use crate::sparse::dense::DenseLu;
use crate::sparse::gmres::Preconditioner;

#[derive(Debug)]
struct ULevel {
    matrix: CsrMatrix,
    prolongation: CsrMatrix,
    restriction: CsrMatrix,
}

#[derive(Debug)]
pub struct UamgHierarchy {
    levels: Vec<ULevel>,
    coarsest: CsrMatrix,
    coarse_solve: DenseLu,
    np_per_level: Vec<usize>,
}

impl UamgHierarchy {
    pub fn num_levels(&self) -> usize {
        self.levels.len() + 1
    }

    pub fn level_matrix(&self, l: usize) -> &CsrMatrix {
        if l < self.levels.len() {
            &self.levels[l].matrix
        } else {
            &self.coarsest
        }
    }

    /// Number of pressure unknowns on each level (levels.len() + 1 entries).
    pub fn level_np(&self) -> &[usize] {
        &self.np_per_level
    }

    fn new(levels: Vec<ULevel>, coarsest: CsrMatrix, np_per_level: Vec<usize>) -> Result<Self> {
        let coarse_solve = DenseLu::factor(&coarsest.to_dense())
            .map_err(|e| Error::Factorization(format!("uamg coarse solve: {e}")))?;
        Ok(UamgHierarchy {
            levels,
            coarsest,
            coarse_solve,
            np_per_level,
        })
    }
}

fn block_diag(p_p: &CsrMatrix, p_t: &CsrMatrix) -> CsrMatrix {
    let n_rows = p_p.n_rows + p_t.n_rows;
    let n_cols = p_p.n_cols + p_t.n_cols;
    let mut row_offsets = Vec::with_capacity(n_rows + 1);
    let mut col_indices = Vec::with_capacity(p_p.nnz() + p_t.nnz());
    let mut values = Vec::with_capacity(p_p.nnz() + p_t.nnz());
    row_offsets.push(0);
    for r in 0..p_p.n_rows {
        let (cols, vals) = p_p.row(r);
        col_indices.extend_from_slice(cols);
        values.extend_from_slice(vals);
        row_offsets.push(col_indices.len());
    }
    for r in 0..p_t.n_rows {
        let (cols, vals) = p_t.row(r);
        col_indices.extend(cols.iter().map(|&c| c + p_p.n_cols));
        values.extend_from_slice(vals);
        row_offsets.push(col_indices.len());
    }
    CsrMatrix {
        n_rows,
        n_cols,
        row_offsets,
        col_indices,
        values,
    }
}

fn scalar_prolongation(a: &CsrMatrix, params: &AmgParams) -> Option<CsrMatrix> {
    let strong = strength_graph(a, params.theta);
    if strong.iter().all(|s| s.is_empty()) {
        return None;
    }
    let kind = split_cf(&strong);
    let nc = kind.iter().filter(|&&k| k == PointKind::Coarse).count();
    if nc == 0 || nc >= a.n_rows {
        return None;
    }
    Some(direct_interpolation(a, &strong, &kind))
}

/// Builds the unknown-based hierarchy for a coupled matrix ordered
/// pressure block first, temperature block second.
pub fn uamg_setup(a: &CsrMatrix, np: usize, params: &AmgParams) -> Result<UamgHierarchy> {
    if a.n_rows != a.n_cols || np > a.n_rows {
        return Err(Error::DimensionMismatch("uamg: square matrix with np <= n".into()));
    }
    let mut levels: Vec<ULevel> = Vec::new();
    let mut current = a.clone();
    let mut np_cur = np;
    let mut np_per_level = vec![np_cur];
    while current.n_rows > params.coarse_cutoff && levels.len() + 1 < params.max_levels {
        let nt = current.n_rows - np_cur;
        let p_rows: Vec<usize> = (0..np_cur).collect();
        let t_rows: Vec<usize> = (np_cur..np_cur + nt).collect();
        let app = current.submatrix(&p_rows, &p_rows);
        let att = current.submatrix(&t_rows, &t_rows);
        let (pp, pt) = match (scalar_prolongation(&app, params), scalar_prolongation(&att, params)) {
            (Some(pp), Some(pt)) => (pp, pt),
            (Some(pp), None) => (pp, CsrMatrix::identity(nt)),
            (None, Some(pt)) => (CsrMatrix::identity(np_cur), pt),
            (None, None) => break,
        };
        let ncp = pp.n_cols;
        let nct = pt.n_cols;
        if ncp + nct >= current.n_rows {
            break;
        }
        let p = block_diag(&pp, &pt);
        let r = p.transpose();
        let coarse = r.matmul(&current)?.matmul(&p)?;
        levels.push(ULevel {
            matrix: std::mem::replace(&mut current, coarse),
            prolongation: p,
            restriction: r,
        });
        np_cur = ncp;
        np_per_level.push(np_cur);
    }
    UamgHierarchy::new(levels, current, np_per_level)
}

/// One V(2,2) cycle on the coupled system from a zero initial guess.
pub fn uamg_vcycle(h: &UamgHierarchy, b: &[f64]) -> Result<Vec<f64>> {
    vcycle_level(h, 0, b)
}

fn vcycle_level(h: &UamgHierarchy, l: usize, b: &[f64]) -> Result<Vec<f64>> {
    if l == h.levels.len() {
        return h.coarse_solve.solve(b);
    }
    let level = &h.levels[l];
    let a = &level.matrix;
    let mut x = vec![0.0; a.n_rows];
    super::sgs_sweep(a, &mut x, b);
    super::sgs_sweep(a, &mut x, b);
    let ax = a.spmv(&x)?;
    let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, axi)| bi - axi).collect();
    let rc = level.restriction.spmv(&r)?;
    let ec = vcycle_level(h, l + 1, &rc)?;
    let e = level.prolongation.spmv(&ec)?;
    for (xi, ei) in x.iter_mut().zip(&e) {
        *xi += ei;
    }
    super::sgs_sweep(a, &mut x, b);
    super::sgs_sweep(a, &mut x, b);
    Ok(x)
}

pub struct UamgPrecond(pub UamgHierarchy);

impl Preconditioner for UamgPrecond {
    fn apply(&self, r: &[f64]) -> Result<Vec<f64>> {
        uamg_vcycle(&self.0, r)
    }
}
