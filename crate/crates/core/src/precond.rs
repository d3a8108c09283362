//! Multiplicative two-stage preconditioners for the block Newton system:
//! a restricted first stage (pressure or pressure-temperature subsystem,
//! optionally decoupled) combined with an ILU second stage on the full
//! matrix, `M⁻¹ = M₂⁻¹(I − A M₁⁻¹) + M₁⁻¹` (stages swappable).

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::amg::uamg::{uamg_setup, uamg_vcycle, UamgHierarchy};
use crate::amg::{amg_setup, amg_vcycle, AmgHierarchy, AmgParams};
use crate::discretization::{BlockSystem, EqRow, Unknown};
use crate::error::{Error, Result};
use crate::sparse::csr::CsrMatrix;
use crate::sparse::dense::DenseLu;
use crate::sparse::gmres::Preconditioner;
use crate::sparse::ilu::{block_jacobi_ilu, BlockJacobiIlu, Partition};

/// Which unknowns the first stage restricts to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Restriction {
    Pressure,
    PressureTemperature,
}

/// Solver applied to the restricted subsystem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FirstStageSolver {
    AmgVcycle,
    DenseLu,
    /// Five-step block factorization of the p-T system with a sparse
    /// Schur complement approximation; `lu` selects exact sub-solves,
    /// otherwise one AMG V-cycle each.
    BlockSchur { lu: bool },
    Uamg,
    BlockDiagLu,
    BlockDiagAmg,
}

/// Decoupling applied before the restricted solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decouple {
    None,
    QuasiImpes,
    TrueImpes,
}

#[derive(Debug, Clone, Copy)]
pub struct StageOneSpec {
    pub restriction: Restriction,
    pub solver: FirstStageSolver,
    pub decouple: Decouple,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOrder {
    RestrictedFirst,
    IluFirst,
}

/// Second-stage solver on the full matrix. `DenseLu` exists for exactness
/// checks and tiny systems; production runs use ILU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageTwo {
    Ilu,
    DenseLu,
}

#[derive(Debug, Clone, Copy)]
pub struct TwoStageSpec {
    pub stage_one: StageOneSpec,
    /// ILU level of fill for the second stage.
    pub ilu_level: usize,
    /// Block-Jacobi subdomain count for the second stage (1 = global ILU).
    pub subdomains: usize,
    pub order: StageOrder,
    pub stage_two: StageTwo,
    pub amg: AmgParams,
}

impl TwoStageSpec {
    /// Builds a spec from its catalog name.
    pub fn from_variant(name: &str) -> Result<TwoStageSpec> {
        let (restriction, solver, decouple, ilu_level) = match name {
            "cpr-amg" => (
                Restriction::Pressure,
                FirstStageSolver::AmgVcycle,
                Decouple::None,
                0,
            ),
            "cpr-lu" => (
                Restriction::Pressure,
                FirstStageSolver::DenseLu,
                Decouple::None,
                0,
            ),
            "cpr-amg-ilu1" => (
                Restriction::Pressure,
                FirstStageSolver::AmgVcycle,
                Decouple::None,
                1,
            ),
            "cptr-block-amg" => (
                Restriction::PressureTemperature,
                FirstStageSolver::BlockSchur { lu: false },
                Decouple::None,
                0,
            ),
            "cptr-block-lu" => (
                Restriction::PressureTemperature,
                FirstStageSolver::BlockSchur { lu: true },
                Decouple::None,
                0,
            ),
            "cptr-uamg" => (
                Restriction::PressureTemperature,
                FirstStageSolver::Uamg,
                Decouple::None,
                0,
            ),
            "cptr-uamg-ti" => (
                Restriction::PressureTemperature,
                FirstStageSolver::Uamg,
                Decouple::TrueImpes,
                0,
            ),
            "cptr-bd-lu" => (
                Restriction::PressureTemperature,
                FirstStageSolver::BlockDiagLu,
                Decouple::None,
                0,
            ),
            "cptr-bd-amg" => (
                Restriction::PressureTemperature,
                FirstStageSolver::BlockDiagAmg,
                Decouple::None,
                0,
            ),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown preconditioner variant '{other}'"
                )))
            }
        };
        Ok(TwoStageSpec {
            stage_one: StageOneSpec {
                restriction,
                solver,
                decouple,
            },
            ilu_level,
            subdomains: 1,
            order: StageOrder::RestrictedFirst,
            stage_two: StageTwo::Ilu,
            amg: AmgParams::default(),
        })
    }

    pub fn validate(&self, scaling_enabled: bool) -> Result<()> {
        if matches!(self.stage_one.solver, FirstStageSolver::BlockSchur { .. })
            && self.stage_one.decouple != Decouple::None
        {
            return Err(Error::InvalidArgument(
                "the block-Schur first stage cannot be combined with decoupling".into(),
            ));
        }
        if matches!(
            self.stage_one.solver,
            FirstStageSolver::BlockSchur { .. }
                | FirstStageSolver::Uamg
                | FirstStageSolver::BlockDiagLu
                | FirstStageSolver::BlockDiagAmg
        ) && self.stage_one.restriction != Restriction::PressureTemperature
        {
            return Err(Error::InvalidArgument(
                "p-T first-stage solvers require the pressure-temperature restriction".into(),
            ));
        }
        if self.order == StageOrder::IluFirst && !scaling_enabled {
            return Err(Error::InvalidArgument(
                "the ilu-first stage order requires equation scaling".into(),
            ));
        }
        if self.subdomains == 0 {
            return Err(Error::InvalidArgument("subdomains must be >= 1".into()));
        }
        Ok(())
    }
}

/// Outcome of assembling a decoupling operator `D` (cell-blockwise
/// `diag(A_0s) diag(A_ss)⁻¹` for Quasi-IMPES, column-sum blocks for
/// True-IMPES). Columns of `D` index the eliminated equations.
#[derive(Debug)]
pub struct DecoupleOperator {
    pub d: CsrMatrix,
    /// Cells whose block was numerically singular; `D` is zero there.
    pub fallback_cells: Vec<usize>,
}

fn block_component_index(field_major_index: usize, n: usize) -> (usize, usize) {
    (field_major_index / n, field_major_index % n)
}

/// Builds the decoupling operator for the given restriction. The returned
/// matrix maps the eliminated-equation space onto the restricted-equation
/// space, both field-major.
pub fn decouple_operator(
    sys: &BlockSystem,
    restriction: Restriction,
    kind: Decouple,
) -> Result<DecoupleOperator> {
    let n = sys.n_cells;
    let (zero_eqs, s_eqs, s_unknowns): (&[EqRow], &[EqRow], &[Unknown]) = match restriction {
        Restriction::Pressure => (
            &[EqRow::Pressure],
            &[EqRow::Energy, EqRow::Oil],
            &[Unknown::T, Unknown::S],
        ),
        Restriction::PressureTemperature => {
            (&[EqRow::Pressure, EqRow::Energy], &[EqRow::Oil], &[Unknown::S])
        }
    };
    let k = zero_eqs.len();
    let m = s_eqs.len();
    let a_0s = sys.block(zero_eqs, s_unknowns);
    let a_ss = sys.block(s_eqs, s_unknowns);

    // Per-cell blocks a_i (k x m) and B_i (m x m). Quasi-IMPES takes the
    // cell-diagonal block; True-IMPES sums each block column over all cells.
    let mut a_blocks = vec![[[0.0f64; 2]; 2]; n];
    let mut b_blocks = vec![[[0.0f64; 2]; 2]; n];
    let accumulate = |blocks: &mut Vec<[[f64; 2]; 2]>, mat: &CsrMatrix, diagonal_only: bool| {
        for r in 0..mat.n_rows {
            let (rc, ri) = block_component_index(r, n);
            let (cols, vals) = mat.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let (cc, ci) = block_component_index(c, n);
                if diagonal_only && ci != ri {
                    continue;
                }
                blocks[ci][rc][cc] += v;
            }
        }
    };
    let diagonal_only = match kind {
        Decouple::None => {
            return Err(Error::InvalidArgument(
                "decouple_operator called with kind = none".into(),
            ))
        }
        Decouple::QuasiImpes => true,
        Decouple::TrueImpes => false,
    };
    accumulate(&mut a_blocks, &a_0s, diagonal_only);
    accumulate(&mut b_blocks, &a_ss, diagonal_only);

    let mut triplets = Vec::with_capacity(n * k * m);
    let mut fallback_cells = Vec::new();
    for i in 0..n {
        let a = &a_blocks[i];
        let b = &b_blocks[i];
        let d = match m {
            1 => {
                if b[0][0] == 0.0 {
                    None
                } else {
                    Some([[a[0][0] / b[0][0], 0.0], [a[1][0] / b[0][0], 0.0]])
                }
            }
            2 => {
                let det = b[0][0] * b[1][1] - b[0][1] * b[1][0];
                let scale = b
                    .iter()
                    .flatten()
                    .fold(0.0f64, |acc, v| acc.max(v.abs()));
                if !det.is_finite() || det.abs() <= 1e-14 * scale * scale {
                    None
                } else {
                    // a B^{-1} with B^{-1} = adj(B) / det
                    let inv = [
                        [b[1][1] / det, -b[0][1] / det],
                        [-b[1][0] / det, b[0][0] / det],
                    ];
                    let mut d = [[0.0; 2]; 2];
                    for r in 0..k {
                        for c in 0..2 {
                            d[r][c] = a[r][0] * inv[0][c] + a[r][1] * inv[1][c];
                        }
                    }
                    Some(d)
                }
            }
            _ => unreachable!(),
        };
        match d {
            Some(d) => {
                for r in 0..k {
                    for c in 0..m {
                        if d[r][c] != 0.0 {
                            triplets.push((r * n + i, c * n + i, d[r][c]));
                        }
                    }
                }
            }
            None => fallback_cells.push(i),
        }
    }
    Ok(DecoupleOperator {
        d: CsrMatrix::from_triplets(k * n, m * n, &triplets)?,
        fallback_cells,
    })
}

/// One exact or multigrid solve used inside composite first stages.
#[derive(Debug)]
enum SubSolver {
    Amg(AmgHierarchy),
    Lu(DenseLu),
}

impl SubSolver {
    fn build(a: &CsrMatrix, lu: bool, params: &AmgParams, what: &str) -> Result<SubSolver> {
        if lu {
            Ok(SubSolver::Lu(DenseLu::factor(&a.to_dense()).map_err(
                |e| Error::Factorization(format!("{what}: {e}")),
            )?))
        } else {
            Ok(SubSolver::Amg(amg_setup(a, params)?))
        }
    }

    fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        match self {
            SubSolver::Amg(h) => amg_vcycle(h, b),
            SubSolver::Lu(lu) => lu.solve(b),
        }
    }
}

impl Preconditioner for SubSolver {
    fn apply(&self, r: &[f64]) -> Result<Vec<f64>> {
        self.solve(r)
    }
}

/// Applies the five-step block factorization of the p-T system:
/// pressure solve, Schur right-hand side, Schur solve, pressure
/// back-substitution right-hand side, pressure back-substitution.
/// `b0` and the result are ordered all pressures first, then temperatures.
pub fn block_schur_apply(
    pp_solve: &dyn Preconditioner,
    schur_solve: &dyn Preconditioner,
    a_pt: &CsrMatrix,
    a_tp: &CsrMatrix,
    b0: &[f64],
) -> Result<Vec<f64>> {
    let np = a_pt.n_rows;
    if b0.len() != np + a_tp.n_rows {
        return Err(Error::DimensionMismatch(
            "block-schur rhs length must equal np + nt".into(),
        ));
    }
    let stage = |s: &'static str| move |e: Error| Error::PrecondStage {
        stage: s,
        source: Box::new(e),
    };
    let (b_p, b_t) = b0.split_at(np);
    let x_p = pp_solve.apply(b_p).map_err(stage("pressure solve"))?;
    let atp_xp = a_tp.spmv(&x_p)?;
    let bt_tilde: Vec<f64> = b_t.iter().zip(&atp_xp).map(|(b, v)| b - v).collect();
    let d_t = schur_solve
        .apply(&bt_tilde)
        .map_err(stage("schur solve"))?;
    let apt_dt = a_pt.spmv(&d_t)?;
    let bp_tilde: Vec<f64> = b_p.iter().zip(&apt_dt).map(|(b, v)| b - v).collect();
    let mut x = pp_solve
        .apply(&bp_tilde)
        .map_err(stage("pressure back-substitution"))?;
    x.extend(d_t);
    Ok(x)
}

/// Prepared solver for the restricted first-stage matrix.
#[derive(Debug)]
enum RestrictedSolver {
    Amg(AmgHierarchy),
    Lu(DenseLu),
    Uamg(UamgHierarchy),
    BlockDiag {
        pp: SubSolver,
        tt: SubSolver,
        np: usize,
    },
    BlockSchur {
        pp: SubSolver,
        schur: SubSolver,
        a_pt: CsrMatrix,
        a_tp: CsrMatrix,
    },
}

impl RestrictedSolver {
    fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        match self {
            RestrictedSolver::Amg(h) => amg_vcycle(h, b),
            RestrictedSolver::Lu(lu) => lu.solve(b),
            RestrictedSolver::Uamg(h) => uamg_vcycle(h, b),
            RestrictedSolver::BlockDiag { pp, tt, np } => {
                let (b_p, b_t) = b.split_at(*np);
                let mut x = pp.solve(b_p)?;
                x.extend(tt.solve(b_t)?);
                Ok(x)
            }
            RestrictedSolver::BlockSchur {
                pp,
                schur,
                a_pt,
                a_tp,
            } => block_schur_apply(pp, schur, a_pt, a_tp, b),
        }
    }
}

#[derive(Debug)]
enum SecondStage {
    Ilu(BlockJacobiIlu),
    Lu(DenseLu),
}

/// A fully set-up two-stage preconditioner for one Jacobian. Immutable
/// after construction; `apply` is safe to call concurrently.
pub struct PreconditionerStack {
    a: CsrMatrix,
    order: StageOrder,
    restricted_rows: Vec<usize>,
    restricted_cols: Vec<usize>,
    eliminated_rows: Vec<usize>,
    decouple: Option<CsrMatrix>,
    /// Cells skipped by the decoupling operator due to singular blocks.
    pub decouple_fallback_cells: Vec<usize>,
    first: RestrictedSolver,
    second: SecondStage,
    stage_one_count: AtomicUsize,
    stage_two_count: AtomicUsize,
}

/// Builds the full stack for one Jacobian. `schur_t` is the sparse Schur
/// complement approximation for the temperature block; it is required by
/// (and only used for) block-Schur first stages.
pub fn build_preconditioner(
    spec: &TwoStageSpec,
    sys: &BlockSystem,
    schur_t: Option<&CsrMatrix>,
) -> Result<PreconditionerStack> {
    let n = sys.n_cells;
    let (zero_eqs, zero_unknowns, s_eqs): (&[EqRow], &[Unknown], &[EqRow]) =
        match spec.stage_one.restriction {
            Restriction::Pressure => (
                &[EqRow::Pressure],
                &[Unknown::P],
                &[EqRow::Energy, EqRow::Oil],
            ),
            Restriction::PressureTemperature => (
                &[EqRow::Pressure, EqRow::Energy],
                &[Unknown::P, Unknown::T],
                &[EqRow::Oil],
            ),
        };
    let restricted_rows = sys.rows_for(zero_eqs);
    let restricted_cols = sys.cols_for(zero_unknowns);
    let eliminated_rows = sys.rows_for(s_eqs);

    let a_00 = sys.block(zero_eqs, zero_unknowns);
    let (restricted, decouple, fallback) = match spec.stage_one.decouple {
        Decouple::None => (a_00, None, Vec::new()),
        kind => {
            let op = decouple_operator(sys, spec.stage_one.restriction, kind)?;
            let a_s0 = sys.block(s_eqs, zero_unknowns);
            let correction = op.d.matmul(&a_s0)?;
            let s = add_scaled(&a_00, &correction, -1.0)?;
            (s, Some(op.d), op.fallback_cells)
        }
    };

    let first = match spec.stage_one.solver {
        FirstStageSolver::AmgVcycle => RestrictedSolver::Amg(amg_setup(&restricted, &spec.amg)?),
        FirstStageSolver::DenseLu => RestrictedSolver::Lu(
            DenseLu::factor(&restricted.to_dense())
                .map_err(|e| Error::Factorization(format!("first-stage lu: {e}")))?,
        ),
        FirstStageSolver::Uamg => RestrictedSolver::Uamg(uamg_setup(&restricted, n, &spec.amg)?),
        FirstStageSolver::BlockDiagLu | FirstStageSolver::BlockDiagAmg => {
            let lu = spec.stage_one.solver == FirstStageSolver::BlockDiagLu;
            let idx: Vec<usize> = (0..n).collect();
            let idx_t: Vec<usize> = (n..2 * n).collect();
            let app = restricted.submatrix(&idx, &idx);
            let att = restricted.submatrix(&idx_t, &idx_t);
            RestrictedSolver::BlockDiag {
                pp: SubSolver::build(&app, lu, &spec.amg, "block-diag pressure")?,
                tt: SubSolver::build(&att, lu, &spec.amg, "block-diag temperature")?,
                np: n,
            }
        }
        FirstStageSolver::BlockSchur { lu } => {
            let schur = schur_t.ok_or_else(|| {
                Error::InvalidArgument(
                    "block-schur first stage needs a Schur complement approximation".into(),
                )
            })?;
            let idx: Vec<usize> = (0..n).collect();
            let idx_t: Vec<usize> = (n..2 * n).collect();
            RestrictedSolver::BlockSchur {
                pp: SubSolver::build(
                    &restricted.submatrix(&idx, &idx),
                    lu,
                    &spec.amg,
                    "block-schur pressure",
                )?,
                schur: SubSolver::build(schur, lu, &spec.amg, "block-schur temperature")?,
                a_pt: restricted.submatrix(&idx, &idx_t),
                a_tp: restricted.submatrix(&idx_t, &idx),
            }
        }
    };

    let second = match spec.stage_two {
        StageTwo::Ilu => {
            let partition = if spec.subdomains <= 1 {
                Partition::single(3 * n)
            } else {
                Partition::contiguous(n, spec.subdomains).scaled(3)
            };
            SecondStage::Ilu(block_jacobi_ilu(&sys.matrix, &partition, spec.ilu_level)?)
        }
        StageTwo::DenseLu => SecondStage::Lu(
            DenseLu::factor(&sys.matrix.to_dense())
                .map_err(|e| Error::Factorization(format!("second-stage lu: {e}")))?,
        ),
    };

    Ok(PreconditionerStack {
        a: sys.matrix.clone(),
        order: spec.order,
        restricted_rows,
        restricted_cols,
        eliminated_rows,
        decouple,
        decouple_fallback_cells: fallback,
        first,
        second,
        stage_one_count: AtomicUsize::new(0),
        stage_two_count: AtomicUsize::new(0),
    })
}

/// `a + alpha * b` for same-shaped CSR matrices.
fn add_scaled(a: &CsrMatrix, b: &CsrMatrix, alpha: f64) -> Result<CsrMatrix> {
    if a.n_rows != b.n_rows || a.n_cols != b.n_cols {
        return Err(Error::DimensionMismatch("matrix sum shapes differ".into()));
    }
    let mut triplets = Vec::with_capacity(a.nnz() + b.nnz());
    for r in 0..a.n_rows {
        let (cols, vals) = a.row(r);
        triplets.extend(cols.iter().zip(vals).map(|(&c, &v)| (r, c, v)));
        let (cols, vals) = b.row(r);
        triplets.extend(cols.iter().zip(vals).map(|(&c, &v)| (r, c, alpha * v)));
    }
    CsrMatrix::from_triplets(a.n_rows, a.n_cols, &triplets)
}

impl PreconditionerStack {
    fn apply_restricted(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.stage_one_count.fetch_add(1, Ordering::Relaxed);
        let mut rb: Vec<f64> = self.restricted_rows.iter().map(|&r| b[r]).collect();
        if let Some(d) = &self.decouple {
            let bs: Vec<f64> = self.eliminated_rows.iter().map(|&r| b[r]).collect();
            let dbs = d.spmv(&bs)?;
            for (v, w) in rb.iter_mut().zip(&dbs) {
                *v -= w;
            }
        }
        let xr = self
            .first
            .solve(&rb)
            .map_err(|e| Error::PrecondStage {
                stage: "restricted",
                source: Box::new(e),
            })?;
        let mut x = vec![0.0; b.len()];
        for (&c, &v) in self.restricted_cols.iter().zip(&xr) {
            x[c] = v;
        }
        Ok(x)
    }

    fn apply_ilu(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.stage_two_count.fetch_add(1, Ordering::Relaxed);
        match &self.second {
            SecondStage::Ilu(ilu) => ilu.solve(b),
            SecondStage::Lu(lu) => lu.solve(b),
        }
        .map_err(|e| Error::PrecondStage {
            stage: "ilu",
            source: Box::new(e),
        })
    }

    /// Number of (first-stage, second-stage) applications so far.
    pub fn stage_counts(&self) -> (usize, usize) {
        (
            self.stage_one_count.load(Ordering::Relaxed),
            self.stage_two_count.load(Ordering::Relaxed),
        )
    }
}

impl Preconditioner for PreconditionerStack {
    fn apply(&self, b: &[f64]) -> Result<Vec<f64>> {
        let x1 = match self.order {
            StageOrder::RestrictedFirst => self.apply_restricted(b)?,
            StageOrder::IluFirst => self.apply_ilu(b)?,
        };
        let ax1 = self.a.spmv(&x1)?;
        let r: Vec<f64> = b.iter().zip(&ax1).map(|(bi, v)| bi - v).collect();
        let x2 = match self.order {
            StageOrder::RestrictedFirst => self.apply_ilu(&r)?,
            StageOrder::IluFirst => self.apply_restricted(&r)?,
        };
        Ok(x1.iter().zip(&x2).map(|(a, b)| a + b).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretization::{
        assemble_jacobian, assemble_schur_approx, ReservoirModel, Scaling, SourceKind, SourceTerm,
        State,
    };
    use crate::grid::build_grid;
    use crate::props::PropertyConfig;
    use crate::sparse::csr::norm2;
    use crate::sparse::gmres::gmres;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const ALL_VARIANTS: [&str; 9] = [
        "cpr-amg",
        "cpr-lu",
        "cpr-amg-ilu1",
        "cptr-block-amg",
        "cptr-block-lu",
        "cptr-uamg",
        "cptr-uamg-ti",
        "cptr-bd-lu",
        "cptr-bd-amg",
    ];

    fn test_model(nx: usize, ny: usize, sources: Vec<SourceTerm>) -> ReservoirModel {
        let grid = build_grid(nx, ny, 1, 50.0, 50.0, 1.0).unwrap();
        let n = grid.num_cells();
        let props = PropertyConfig::default();
        let s0 = 0.9;
        let c_ref = s0 * props.c_v_oil + (1.0 - s0) * props.c_v_water;
        ReservoirModel {
            grid,
            phi: vec![0.2; n],
            perm_x: vec![3e-13; n],
            perm_y: vec![3e-13; n],
            perm_z: vec![3e-13; n],
            props,
            sources,
            dt: 864000.0,
            gravity: 0.0,
            scaling: Scaling {
                enabled: true,
                t_ref: 288.706,
                c_ref,
            },
        }
    }

    fn well_sources(n_cells: usize) -> Vec<SourceTerm> {
        vec![
            SourceTerm {
                kind: SourceKind::InjectorConstRate {
                    rate: 3e-7,
                    t_inj: 373.15,
                },
                cells: vec![(0, 1.0)],
            },
            SourceTerm {
                kind: SourceKind::ProducerConstRate { rate: 3e-7 },
                cells: vec![(n_cells - 1, 1.0)],
            },
            SourceTerm {
                kind: SourceKind::Heater {
                    u: 100.0,
                    t_heater: 373.15,
                },
                cells: vec![(n_cells / 2, 1.0)],
            },
        ]
    }

    fn perturbed_state(n: usize, seed: u64) -> State {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = State::uniform(n, 4.1369e7, 288.706, 0.9);
        for i in 0..n {
            s.p[i] += rng.gen_range(-1.0..1.0) * 2e6;
            s.t[i] += rng.gen_range(0.0..1.0) * 30.0;
            s.s_o[i] += rng.gen_range(-1.0..1.0) * 0.05;
        }
        s
    }

    fn test_system(nx: usize, ny: usize, seed: u64) -> (ReservoirModel, State, BlockSystem) {
        let m = test_model(nx, ny, well_sources(nx * ny));
        let prev = State::uniform(nx * ny, 4.1369e7, 288.706, 0.9);
        let s = perturbed_state(nx * ny, seed);
        let sys = assemble_jacobian(&m, &s, &prev).unwrap();
        (m, s, sys)
    }

    fn rand_rhs(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Drops all entries coupling different fields (row eq != column unknown).
    fn zero_coupling(sys: &BlockSystem) -> BlockSystem {
        let mut t = Vec::new();
        for r in 0..sys.matrix.n_rows {
            let (cols, vals) = sys.matrix.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                if r % 3 == c % 3 {
                    t.push((r, c, v));
                }
            }
        }
        BlockSystem {
            matrix: CsrMatrix::from_triplets(sys.matrix.n_rows, sys.matrix.n_cols, &t).unwrap(),
            n_cells: sys.n_cells,
        }
    }

    #[test]
    fn variant_catalog_round_trips() {
        for name in ALL_VARIANTS {
            let spec = TwoStageSpec::from_variant(name).unwrap();
            spec.validate(true).unwrap();
        }
        assert!(TwoStageSpec::from_variant("cpr-gmres").is_err());
    }

    #[test]
    fn invalid_combinations_are_rejected() {
        let mut spec = TwoStageSpec::from_variant("cptr-block-lu").unwrap();
        spec.stage_one.decouple = Decouple::QuasiImpes;
        assert!(spec.validate(true).is_err());
        let mut spec = TwoStageSpec::from_variant("cpr-amg").unwrap();
        spec.order = StageOrder::IluFirst;
        assert!(spec.validate(false).is_err());
        assert!(spec.validate(true).is_ok());
        let mut spec = TwoStageSpec::from_variant("cptr-uamg").unwrap();
        spec.subdomains = 0;
        assert!(spec.validate(true).is_err());
    }

    #[test]
    fn apply_is_linear_for_every_variant() {
        let (m, s, sys) = test_system(4, 4, 7);
        let schur = assemble_schur_approx(&m, &s).unwrap();
        let n = sys.matrix.n_rows;
        let b1 = rand_rhs(n, 1);
        let b2 = rand_rhs(n, 2);
        let (alpha, beta) = (1.7, -0.4);
        let combo: Vec<f64> = b1
            .iter()
            .zip(&b2)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        for name in ALL_VARIANTS {
            let spec = TwoStageSpec::from_variant(name).unwrap();
            let p = build_preconditioner(&spec, &sys, Some(&schur)).unwrap();
            let x1 = p.apply(&b1).unwrap();
            let x2 = p.apply(&b2).unwrap();
            let xc = p.apply(&combo).unwrap();
            let scale = norm2(&xc).max(norm2(&x1));
            for i in 0..n {
                let want = alpha * x1[i] + beta * x2[i];
                assert!(
                    (xc[i] - want).abs() <= 1e-12 * scale,
                    "{name}: nonlinear at {i}"
                );
            }
        }
    }

    #[test]
    fn exact_first_stage_alone_solves_the_system() {
        // M1 = exact dense inverse of the full matrix, M2 arbitrary.
        let (_, _, sys) = test_system(3, 3, 5);
        let a = &sys.matrix;
        let lu = DenseLu::factor(&a.to_dense()).unwrap();
        let m1 = |r: &[f64]| lu.solve(r);
        let m2 = |r: &[f64]| -> Result<Vec<f64>> { Ok(r.iter().map(|v| 0.5 * v).collect()) };
        let b = rand_rhs(a.n_rows, 3);
        // x1 = A^-1 b leaves a zero residual for the second stage.
        let x1 = m1(&b).unwrap();
        let ax1 = a.spmv(&x1).unwrap();
        let r1: Vec<f64> = b.iter().zip(&ax1).map(|(bi, v)| bi - v).collect();
        let x2: Vec<f64> = m2(&r1).unwrap();
        let x: Vec<f64> = x1.iter().zip(&x2).map(|(p, q)| p + q).collect();
        let exact = lu.solve(&b).unwrap();
        for (xi, ei) in x.iter().zip(&exact) {
            assert!((xi - ei).abs() <= 1e-9 * norm2(&exact));
        }
        assert!(norm2(&r1) <= 1e-9 * norm2(&b));
    }

    #[test]
    fn exact_second_stage_with_zero_first_stage_solves_the_system() {
        let (_, _, sys) = test_system(3, 3, 6);
        let a = &sys.matrix;
        let lu = DenseLu::factor(&a.to_dense()).unwrap();
        let m1 = |r: &[f64]| -> Result<Vec<f64>> { Ok(vec![0.0; r.len()]) };
        let b = rand_rhs(a.n_rows, 4);
        let x1 = m1(&b).unwrap();
        let ax1 = a.spmv(&x1).unwrap();
        let r1: Vec<f64> = b.iter().zip(&ax1).map(|(bi, v)| bi - v).collect();
        let x2 = lu.solve(&r1).unwrap();
        let x: Vec<f64> = x1.iter().zip(&x2).map(|(p, q)| p + q).collect();
        let exact = lu.solve(&b).unwrap();
        for (xi, ei) in x.iter().zip(&exact) {
            assert!((xi - ei).abs() <= 1e-10 * norm2(&exact).max(1.0));
        }
    }

    #[test]
    fn decoupled_system_gives_one_iteration_for_every_variant() {
        // 8-cell model, coupling blocks zeroed, exact sub-solves everywhere
        // (large AMG coarse cutoff turns every hierarchy into a direct solve).
        let (_, _, full) = test_system(4, 2, 9);
        let sys = zero_coupling(&full);
        // With zero coupling the temperature Schur complement is A_TT itself.
        let schur_exact = sys.block(&[EqRow::Energy], &[Unknown::T]);
        let b = rand_rhs(sys.matrix.n_rows, 8);
        for name in ALL_VARIANTS {
            let mut spec = TwoStageSpec::from_variant(name).unwrap();
            spec.stage_two = StageTwo::DenseLu;
            spec.amg.coarse_cutoff = 10_000; // direct coarse solve: exact
            let p = build_preconditioner(&spec, &sys, Some(&schur_exact)).unwrap();
            let (_, out) = gmres(&sys.matrix, &b, &p, 1e-10, 20, 20).unwrap();
            assert!(out.converged, "{name} failed to converge");
            assert_eq!(out.iterations, 1, "{name}: {} iterations", out.iterations);
        }
    }

    #[test]
    fn cpr_lu_zeroes_the_pressure_row_residual() {
        let (_, _, sys) = test_system(4, 4, 11);
        let spec = TwoStageSpec::from_variant("cpr-lu").unwrap();
        let p = build_preconditioner(&spec, &sys, None).unwrap();
        let b = rand_rhs(sys.matrix.n_rows, 12);
        let x1 = p.apply_restricted(&b).unwrap();
        let ax1 = sys.matrix.spmv(&x1).unwrap();
        let mut res_p = 0.0f64;
        let mut rhs_p = 0.0f64;
        for &r in &sys.rows_for(&[EqRow::Pressure]) {
            res_p += (b[r] - ax1[r]).powi(2);
            rhs_p += b[r].powi(2);
        }
        assert!(res_p.sqrt() <= 1e-12 * rhs_p.sqrt());
    }

    #[test]
    fn zero_rhs_maps_to_zero_for_first_stages() {
        let (m, s, sys) = test_system(3, 3, 13);
        let schur = assemble_schur_approx(&m, &s).unwrap();
        let b = vec![0.0; sys.matrix.n_rows];
        for name in ["cpr-amg", "cptr-block-lu", "cptr-uamg", "cptr-bd-amg"] {
            let spec = TwoStageSpec::from_variant(name).unwrap();
            let p = build_preconditioner(&spec, &sys, Some(&schur)).unwrap();
            let x = p.apply_restricted(&b).unwrap();
            assert!(x.iter().all(|&v| v == 0.0), "{name}");
        }
    }

    #[test]
    fn block_schur_with_exact_dense_schur_gives_one_iteration() {
        // Exact sub-solves and the exact dense Schur complement make the
        // five-step factorization an exact inverse of A00.
        let (_, _, sys) = test_system(4, 4, 15);
        let a00 = sys.block(
            &[EqRow::Pressure, EqRow::Energy],
            &[Unknown::P, Unknown::T],
        );
        let n = sys.n_cells;
        let idx: Vec<usize> = (0..n).collect();
        let idx_t: Vec<usize> = (n..2 * n).collect();
        let app = a00.submatrix(&idx, &idx);
        let a_pt = a00.submatrix(&idx, &idx_t);
        let a_tp = a00.submatrix(&idx_t, &idx);
        let att = a00.submatrix(&idx_t, &idx_t);
        // Dense exact Schur complement S = A_TT - A_Tp App^-1 A_pT.
        let app_lu = DenseLu::factor(&app.to_dense()).unwrap();
        let mut s_dense = att.to_dense();
        for j in 0..n {
            let col: Vec<f64> = (0..n).map(|i| a_pt.get(i, j)).collect();
            let w = app_lu.solve(&col).unwrap();
            let atw = a_tp.spmv(&w).unwrap();
            for i in 0..n {
                s_dense[i][j] -= atw[i];
            }
        }
        let s_lu = DenseLu::factor(&s_dense).unwrap();
        let pp = move |r: &[f64]| app_lu.solve(r);
        let schur = move |r: &[f64]| s_lu.solve(r);
        let precond = move |r: &[f64]| block_schur_apply(&pp, &schur, &a_pt, &a_tp, r);
        let b = rand_rhs(2 * n, 16);
        let (_, out) = gmres(&a00, &b, &precond, 1e-10, 10, 10).unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 1);
    }

    #[test]
    fn block_schur_decoupled_collapses_to_block_diagonal_inverse() {
        // A_pT = A_Tp = 0 and S~ = A_TT: the factorization is exact.
        let (_, _, full) = test_system(3, 3, 17);
        let sys = zero_coupling(&full);
        let a00 = sys.block(
            &[EqRow::Pressure, EqRow::Energy],
            &[Unknown::P, Unknown::T],
        );
        let n = sys.n_cells;
        let idx: Vec<usize> = (0..n).collect();
        let idx_t: Vec<usize> = (n..2 * n).collect();
        let app_lu = DenseLu::factor(&a00.submatrix(&idx, &idx).to_dense()).unwrap();
        let att_lu = DenseLu::factor(&a00.submatrix(&idx_t, &idx_t).to_dense()).unwrap();
        let a_pt = a00.submatrix(&idx, &idx_t);
        let a_tp = a00.submatrix(&idx_t, &idx);
        let pp = move |r: &[f64]| app_lu.solve(r);
        let tt = move |r: &[f64]| att_lu.solve(r);
        let b = rand_rhs(2 * n, 18);
        let x = block_schur_apply(&pp, &tt, &a_pt, &a_tp, &b).unwrap();
        let ax = a00.spmv(&x).unwrap();
        let res: Vec<f64> = b.iter().zip(&ax).map(|(bi, v)| bi - v).collect();
        assert!(norm2(&res) <= 1e-10 * norm2(&b));
        let zero = block_schur_apply(&pp, &tt, &a_pt, &a_tp, &vec![0.0; 2 * n]).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quasi_impes_cancels_the_cell_block_diagonal() {
        for restriction in [Restriction::Pressure, Restriction::PressureTemperature] {
            let (_, _, sys) = test_system(4, 3, 19);
            let op = decouple_operator(&sys, restriction, Decouple::QuasiImpes).unwrap();
            assert!(op.fallback_cells.is_empty());
            let (zero_eqs, s_eqs, s_unknowns): (&[EqRow], &[EqRow], &[Unknown]) =
                match restriction {
                    Restriction::Pressure => (
                        &[EqRow::Pressure],
                        &[EqRow::Energy, EqRow::Oil],
                        &[Unknown::T, Unknown::S],
                    ),
                    Restriction::PressureTemperature => (
                        &[EqRow::Pressure, EqRow::Energy],
                        &[EqRow::Oil],
                        &[Unknown::S],
                    ),
                };
            let a_0s = sys.block(zero_eqs, s_unknowns);
            let a_ss = sys.block(s_eqs, s_unknowns);
            let residual = add_scaled(&a_0s, &op.d.matmul(&a_ss).unwrap(), -1.0).unwrap();
            let n = sys.n_cells;
            let k = zero_eqs.len();
            let m = s_unknowns.len();
            let mut max_offdiag = 0.0f64;
            for r in 0..k * n {
                for c in 0..m * n {
                    let v = residual.get(r, c);
                    if r % n == c % n {
                        let scale = a_0s.get(r, c).abs().max(1.0);
                        assert!(
                            v.abs() <= 1e-10 * scale,
                            "diag block not cancelled at ({r},{c}): {v}"
                        );
                    } else {
                        max_offdiag = max_offdiag.max(v.abs());
                    }
                }
            }
            // Off-diagonal blocks remain (upwind couplings), so D is not a
            // full elimination.
            assert!(max_offdiag > 0.0);
        }
    }

    #[test]
    fn true_impes_matches_dense_column_sum_oracle() {
        // Random 3-cell block system; colsum blocks computed densely.
        let n = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut t = Vec::new();
        for r in 0..3 * n {
            for c in 0..3 * n {
                if r == c {
                    t.push((r, c, 10.0 + rng.gen_range(0.0..1.0)));
                } else if rng.gen_bool(0.6) {
                    t.push((r, c, rng.gen_range(-1.0..1.0)));
                }
            }
        }
        let sys = BlockSystem {
            matrix: CsrMatrix::from_triplets(3 * n, 3 * n, &t).unwrap(),
            n_cells: n,
        };
        let op = decouple_operator(&sys, Restriction::Pressure, Decouple::TrueImpes).unwrap();
        let a_0s = sys
            .block(&[EqRow::Pressure], &[Unknown::T, Unknown::S])
            .to_dense();
        let a_ss = sys
            .block(&[EqRow::Energy, EqRow::Oil], &[Unknown::T, Unknown::S])
            .to_dense();
        for i in 0..n {
            // colsum blocks: sum block (j,i) over all block rows j.
            let mut a = [0.0f64; 2];
            let mut b = [[0.0f64; 2]; 2];
            for j in 0..n {
                for c in 0..2 {
                    a[c] += a_0s[j][c * n + i];
                    for r in 0..2 {
                        b[r][c] += a_ss[r * n + j][c * n + i];
                    }
                }
            }
            let det = b[0][0] * b[1][1] - b[0][1] * b[1][0];
            let want = [
                (a[0] * b[1][1] - a[1] * b[1][0]) / det,
                (-a[0] * b[0][1] + a[1] * b[0][0]) / det,
            ];
            for c in 0..2 {
                let got = op.d.get(i, c * n + i);
                assert!(
                    (got - want[c]).abs() <= 1e-12 * want[c].abs().max(1.0),
                    "cell {i} comp {c}: {got} vs {}",
                    want[c]
                );
            }
        }
    }

    #[test]
    fn decoupling_without_saturation_coupling_is_identity() {
        // A_0s = 0 -> D = 0 and S equals A_00.
        let n = 2;
        let mut t = Vec::new();
        for i in 0..n {
            for (r, c, v) in [
                (3 * i, 3 * i, 4.0),
                (3 * i + 1, 3 * i + 1, 5.0),
                (3 * i + 2, 3 * i + 2, 6.0),
                (3 * i + 2, 3 * i, 0.5), // A_sp nonzero is fine
            ] {
                t.push((r, c, v));
            }
        }
        let sys = BlockSystem {
            matrix: CsrMatrix::from_triplets(3 * n, 3 * n, &t).unwrap(),
            n_cells: n,
        };
        let op = decouple_operator(&sys, Restriction::Pressure, Decouple::QuasiImpes).unwrap();
        assert_eq!(op.d.nnz(), 0);
        assert!(op.fallback_cells.is_empty());
    }

    #[test]
    fn singular_cell_block_falls_back_to_zero() {
        // Cell 1 has a singular A_ss block (zero oil/S diagonal and energy/S).
        let n = 2;
        let mut t = vec![
            (0, 0, 1.0),
            (1, 1, 1.0),
            (2, 2, 1.0),
            (0, 1, 0.3),
            (0, 2, 0.4),
            (1, 2, 0.2),
            (2, 1, 0.1),
            // cell 1: pressure couples to S but the s-block is singular
            (3, 3, 1.0),
            (4, 4, 1.0),
            (3, 5, 0.7),
        ];
        t.push((5, 3, 0.5)); // oil eq depends on p only
        let sys = BlockSystem {
            matrix: CsrMatrix::from_triplets(3 * n, 3 * n, &t).unwrap(),
            n_cells: n,
        };
        let op = decouple_operator(&sys, Restriction::Pressure, Decouple::QuasiImpes).unwrap();
        assert_eq!(op.fallback_cells, vec![1]);
        // The fallback zeroes D for that cell only.
        assert_eq!(op.d.get(1, 1), 0.0);
        assert_eq!(op.d.get(1, 3), 0.0);
    }

    #[test]
    fn stage_order_applies_each_stage_exactly_once() {
        let (m, s, sys) = test_system(3, 3, 23);
        let schur = assemble_schur_approx(&m, &s).unwrap();
        let b = rand_rhs(sys.matrix.n_rows, 24);
        for order in [StageOrder::RestrictedFirst, StageOrder::IluFirst] {
            let mut spec = TwoStageSpec::from_variant("cptr-block-amg").unwrap();
            spec.order = order;
            let p = build_preconditioner(&spec, &sys, Some(&schur)).unwrap();
            for calls in 1..=3usize {
                p.apply(&b).unwrap();
                assert_eq!(p.stage_counts(), (calls, calls), "{order:?}");
            }
        }
    }

    #[test]
    fn every_variant_preconditions_gmres_on_a_perturbed_jacobian() {
        let (m, s, sys) = test_system(6, 6, 25);
        let schur = assemble_schur_approx(&m, &s).unwrap();
        let b = rand_rhs(sys.matrix.n_rows, 26);
        for name in ALL_VARIANTS {
            let spec = TwoStageSpec::from_variant(name).unwrap();
            let p = build_preconditioner(&spec, &sys, Some(&schur)).unwrap();
            let (x, out) = gmres(&sys.matrix, &b, &p, 1e-8, 200, 200).unwrap();
            assert!(out.converged, "{name}: {}", out.relative_residual);
            let ax = sys.matrix.spmv(&x).unwrap();
            let res: Vec<f64> = b.iter().zip(&ax).map(|(bi, v)| bi - v).collect();
            assert!(norm2(&res) <= 1e-7 * norm2(&b), "{name}");
        }
    }

    #[test]
    fn block_schur_error_reports_the_failing_step() {
        let bad = |_: &[f64]| -> Result<Vec<f64>> {
            Err(Error::LinearSolver("synthetic".into()))
        };
        let ok = |r: &[f64]| -> Result<Vec<f64>> { Ok(r.to_vec()) };
        let a = CsrMatrix::identity(2);
        let err = block_schur_apply(&bad, &ok, &a, &a, &[1.0, 2.0, 3.0, 4.0]).unwrap_err();
        match err {
            Error::PrecondStage { stage, .. } => assert_eq!(stage, "pressure solve"),
            other => panic!("unexpected error {other:?}"),
        }
        let err = block_schur_apply(&ok, &bad, &a, &a, &[1.0, 2.0, 3.0, 4.0]).unwrap_err();
        match err {
            Error::PrecondStage { stage, .. } => assert_eq!(stage, "schur solve"),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
