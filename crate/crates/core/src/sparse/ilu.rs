//! Incomplete LU factorization with level of fill, and its subdomain
//! block-Jacobi variant.

use crate::error::{Error, Result};
use crate::sparse::csr::CsrMatrix;
use crate::sparse::gmres::Preconditioner;

/// Combined L/U factors on a level-of-fill sparsity pattern. L has an
/// implicit unit diagonal; the stored diagonal belongs to U.
#[derive(Debug, Clone)]
pub struct IluFactors {
    pub n: usize,
    pub fill_level: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
    diag_pos: Vec<usize>,
}

impl IluFactors {
    /// Sparsity pattern of the combined factors as a structural CSR.
    pub fn pattern_nnz(&self) -> usize {
        self.col_indices.len()
    }

    /// z = (LU)^{-1} r by forward and back substitution.
    pub fn solve(&self, r: &[f64]) -> Result<Vec<f64>> {
        if r.len() != self.n {
            return Err(Error::DimensionMismatch("ilu solve rhs length".into()));
        }
        let mut z = r.to_vec();
        for i in 0..self.n {
            let mut acc = z[i];
            for k in self.row_offsets[i]..self.diag_pos[i] {
                acc -= self.values[k] * z[self.col_indices[k]];
            }
            z[i] = acc;
        }
        for i in (0..self.n).rev() {
            let mut acc = z[i];
            for k in self.diag_pos[i] + 1..self.row_offsets[i + 1] {
                acc -= self.values[k] * z[self.col_indices[k]];
            }
            z[i] = acc / self.values[self.diag_pos[i]];
        }
        Ok(z)
    }

    /// Recomputes L*U restricted to the factor pattern (test support).
    pub fn product_entry(&self, i: usize, j: usize) -> f64 {
        let mut acc = 0.0;
        // L row i (unit diagonal) times U column j
        for k in self.row_offsets[i]..self.diag_pos[i] {
            let c = self.col_indices[k];
            if c <= j {
                acc += self.values[k] * self.u_entry(c, j);
            }
        }
        if i <= j {
            acc += self.u_entry(i, j);
        }
        acc
    }

    fn u_entry(&self, r: usize, c: usize) -> f64 {
        if c < r {
            return 0.0;
        }
        for k in self.diag_pos[r]..self.row_offsets[r + 1] {
            if self.col_indices[k] == c {
                return self.values[k];
            }
        }
        0.0
    }
}

/// Symbolic + numeric ILU(k) without pivoting.
pub fn ilu_factor(a: &CsrMatrix, fill_level: usize) -> Result<IluFactors> {
    if a.n_rows != a.n_cols {
        return Err(Error::DimensionMismatch("ilu needs a square matrix".into()));
    }
    let n = a.n_rows;

    // Symbolic phase: per row, column -> fill level, grown row by row.
    // Levels of previous rows' U parts are kept for lookups.
    let mut row_cols: Vec<Vec<usize>> = Vec::with_capacity(n);
    let mut row_levels: Vec<Vec<usize>> = Vec::with_capacity(n);
    let mut diag_pos_sym: Vec<usize> = Vec::with_capacity(n);

    let mut level = vec![usize::MAX; n]; // usize::MAX = not present
    let mut active: Vec<usize> = Vec::new();

    for i in 0..n {
        active.clear();
        let (cols, _) = a.row(i);
        for &c in cols {
            level[c] = 0;
            active.push(c);
        }
        if level[i] == usize::MAX {
            // keep the diagonal structurally present
            level[i] = 0;
            active.push(i);
        }
        active.sort_unstable();

        // process columns k < i in increasing order, allowing new fill
        let mut idx = 0;
        while idx < active.len() {
            let k = active[idx];
            idx += 1;
            if k >= i {
                break;
            }
            let lev_ik = level[k];
            if lev_ik > fill_level {
                continue;
            }
            let kcols = &row_cols[k];
            let klevs = &row_levels[k];
            let dk = diag_pos_sym[k];
            for t in dk + 1..kcols.len() {
                let j = kcols[t];
                let new_lev = lev_ik + klevs[t] + 1;
                if new_lev > fill_level {
                    continue;
                }
                if level[j] == usize::MAX {
                    level[j] = new_lev;
                    // maintain sorted order of the remaining active list
                    let pos = active[idx..]
                        .binary_search(&j)
                        .unwrap_or_else(|e| e)
                        + idx;
                    active.insert(pos, j);
                } else if new_lev < level[j] {
                    level[j] = new_lev;
                }
            }
        }

        let mut cols_i = Vec::with_capacity(active.len());
        let mut levs_i = Vec::with_capacity(active.len());
        let mut dpos = usize::MAX;
        for &c in active.iter() {
            if c == i {
                dpos = cols_i.len();
            }
            cols_i.push(c);
            levs_i.push(level[c]);
            level[c] = usize::MAX;
        }
        debug_assert!(dpos != usize::MAX);
        diag_pos_sym.push(dpos);
        row_cols.push(cols_i);
        row_levels.push(levs_i);
    }

    // Flatten pattern.
    let mut row_offsets = Vec::with_capacity(n + 1);
    row_offsets.push(0usize);
    let mut col_indices = Vec::new();
    for cols in &row_cols {
        col_indices.extend_from_slice(cols);
        row_offsets.push(col_indices.len());
    }
    let diag_pos: Vec<usize> = (0..n).map(|i| row_offsets[i] + diag_pos_sym[i]).collect();

    // Numeric phase (IKJ) on the fixed pattern.
    let mut values = vec![0.0; col_indices.len()];
    let mut work = vec![0.0; n];
    let mut pos_of = vec![usize::MAX; n];
    for i in 0..n {
        let span = row_offsets[i]..row_offsets[i + 1];
        for k in span.clone() {
            pos_of[col_indices[k]] = k;
            work[col_indices[k]] = 0.0;
        }
        let (cols, vals) = a.row(i);
        for (c, v) in cols.iter().zip(vals) {
            work[*c] = *v;
        }
        for k in span.clone() {
            let c = col_indices[k];
            if c >= i {
                break;
            }
            let ukk = values[diag_pos[c]];
            if ukk == 0.0 {
                return Err(Error::Factorization(format!("ilu({fill_level}): zero pivot in row {c}")));
            }
            let lik = work[c] / ukk;
            work[c] = lik;
            for t in diag_pos[c] + 1..row_offsets[c + 1] {
                let j = col_indices[t];
                if pos_of[j] != usize::MAX {
                    work[j] -= lik * values[t];
                }
            }
        }
        for k in span.clone() {
            values[k] = work[col_indices[k]];
        }
        if values[diag_pos[i]] == 0.0 {
            return Err(Error::Factorization(format!("ilu({fill_level}): zero pivot in row {i}")));
        }
        for k in span {
            pos_of[col_indices[k]] = usize::MAX;
        }
    }

    Ok(IluFactors {
        n,
        fill_level,
        row_offsets,
        col_indices,
        values,
        diag_pos,
    })
}

impl Preconditioner for IluFactors {
    fn apply(&self, r: &[f64]) -> Result<Vec<f64>> {
        self.solve(r)
    }
}

/// Row partition into contiguous subdomains.
#[derive(Debug, Clone)]
pub struct Partition {
    /// start offsets, length P + 1, covering [0, n)
    pub offsets: Vec<usize>,
}

impl Partition {
    pub fn single(n: usize) -> Partition {
        Partition { offsets: vec![0, n] }
    }

    /// Splits n rows into p near-equal contiguous ranges.
    pub fn contiguous(n: usize, p: usize) -> Partition {
        let p = p.max(1).min(n.max(1));
        let mut offsets = Vec::with_capacity(p + 1);
        for i in 0..=p {
            offsets.push(i * n / p);
        }
        Partition { offsets }
    }

    /// Expands a partition over cells to a partition over rows with
    /// `stride` unknowns per cell (cell-interleaved ordering keeps the rows
    /// of one cell contiguous).
    pub fn scaled(&self, stride: usize) -> Partition {
        Partition {
            offsets: self.offsets.iter().map(|&o| o * stride).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }
}

/// Block-Jacobi ILU(k): independent ILU factors of the diagonal subdomain
/// blocks; off-subdomain couplings are dropped.
#[derive(Debug, Clone)]
pub struct BlockJacobiIlu {
    partition: Partition,
    blocks: Vec<IluFactors>,
}

pub fn block_jacobi_ilu(a: &CsrMatrix, partition: &Partition, fill_level: usize) -> Result<BlockJacobiIlu> {
    if *partition.offsets.last().unwrap() != a.n_rows || partition.offsets[0] != 0 {
        return Err(Error::DimensionMismatch("partition must cover all rows".into()));
    }
    let mut blocks = Vec::with_capacity(partition.count());
    for b in 0..partition.count() {
        let rows: Vec<usize> = partition.range(b).collect();
        let sub = a.submatrix(&rows, &rows);
        blocks.push(ilu_factor(&sub, fill_level).map_err(|e| {
            Error::Factorization(format!("block {b}: {e}"))
        })?);
    }
    Ok(BlockJacobiIlu {
        partition: partition.clone(),
        blocks,
    })
}

impl BlockJacobiIlu {
    pub fn solve(&self, r: &[f64]) -> Result<Vec<f64>> {
        let mut z = vec![0.0; r.len()];
        for (b, fac) in self.blocks.iter().enumerate() {
            let range = self.partition.range(b);
            let zb = fac.solve(&r[range.clone()])?;
            z[range].copy_from_slice(&zb);
        }
        Ok(z)
    }
}

impl Preconditioner for BlockJacobiIlu {
    fn apply(&self, r: &[f64]) -> Result<Vec<f64>> {
        self.solve(r)
    }
}
