//! Fully implicit DG(0)/TPFA discretization: nonlinear residual, analytic
//! block Jacobian, equation weighting/scaling, and the sparse Schur
//! complement approximation for the temperature block.

pub mod assembly;
pub mod schur;

pub use assembly::{assemble_jacobian, assemble_residual, residual_row_norms, weighted_residual};
pub use schur::assemble_schur_approx;

use crate::error::{Error, Result};
use crate::grid::StructuredGrid;
use crate::props::PropertyConfig;
use crate::sparse::csr::CsrMatrix;

/// Per-cell primary unknowns at one time level. Water saturation is never
/// stored; `S_w = 1 - S_o`.
#[derive(Debug, Clone)]
pub struct State {
    /// Pressure (Pa).
    pub p: Vec<f64>,
    /// Temperature (K).
    pub t: Vec<f64>,
    /// Oil saturation (dimensionless).
    pub s_o: Vec<f64>,
}

impl State {
    pub fn uniform(n_cells: usize, p: f64, t: f64, s_o: f64) -> Self {
        State {
            p: vec![p; n_cells],
            t: vec![t; n_cells],
            s_o: vec![s_o; n_cells],
        }
    }

    pub fn num_cells(&self) -> usize {
        self.p.len()
    }

    /// Adds `lambda` times a cell-interleaved update `(dp, dT, dS)` per cell.
    pub fn apply_update(&mut self, delta: &[f64], lambda: f64) {
        debug_assert_eq!(delta.len(), 3 * self.num_cells());
        for i in 0..self.num_cells() {
            self.p[i] += lambda * delta[3 * i];
            self.t[i] += lambda * delta[3 * i + 1];
            self.s_o[i] += lambda * delta[3 * i + 2];
        }
    }

    /// Flattens to the cell-interleaved unknown vector (p, T, S per cell).
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 * self.num_cells());
        for i in 0..self.num_cells() {
            v.push(self.p[i]);
            v.push(self.t[i]);
            v.push(self.s_o[i]);
        }
        v
    }
}

/// Source/sink model attached to a weighted cell set (discrete delta).
#[derive(Debug, Clone)]
pub enum SourceKind {
    /// Water-only injection at a fixed volumetric rate (m^3/s) and
    /// injection temperature (K).
    InjectorConstRate { rate: f64, t_inj: f64 },
    /// Production at a fixed total volumetric rate (m^3/s), split between
    /// phases by their mobility fractions.
    ProducerConstRate { rate: f64 },
    /// Production driven by a bottom-hole pressure: per-phase volumetric
    /// rate `well_index * (k_r/mu) * max(p - p_bhp, 0)`.
    ProducerBhp { p_bhp: f64, well_index: f64 },
    /// Local energy source `U * (T_heater - T)`.
    Heater { u: f64, t_heater: f64 },
}

#[derive(Debug, Clone)]
pub struct SourceTerm {
    pub kind: SourceKind,
    /// Cells with weights; weights must sum to 1 over the set.
    pub cells: Vec<(usize, f64)>,
}

/// Row scaling of the weighted system: pressure rows by `t_ref`, oil rows
/// by `c_ref * t_ref`; energy rows untouched.
#[derive(Debug, Clone, Copy)]
pub struct Scaling {
    pub enabled: bool,
    /// Reference temperature (K), taken as the initial reservoir temperature.
    pub t_ref: f64,
    /// Reference specific heat (J/(kg K)): saturation-weighted initial mix.
    pub c_ref: f64,
}

impl Scaling {
    pub fn row_factors(&self) -> (f64, f64, f64) {
        if self.enabled {
            (self.t_ref, 1.0, self.c_ref * self.t_ref)
        } else {
            (1.0, 1.0, 1.0)
        }
    }
}

/// Grid, rock fields, fluid properties, sources, and time step.
#[derive(Debug, Clone)]
pub struct ReservoirModel {
    pub grid: StructuredGrid,
    pub phi: Vec<f64>,
    pub perm_x: Vec<f64>,
    pub perm_y: Vec<f64>,
    pub perm_z: Vec<f64>,
    pub props: PropertyConfig,
    pub sources: Vec<SourceTerm>,
    /// Time step (s).
    pub dt: f64,
    /// Gravitational acceleration (m/s^2); 0 for the 2D cases.
    pub gravity: f64,
    pub scaling: Scaling,
}

impl ReservoirModel {
    pub fn validate(&self) -> Result<()> {
        let n = self.grid.num_cells();
        if self.phi.len() != n
            || self.perm_x.len() != n
            || self.perm_y.len() != n
            || self.perm_z.len() != n
        {
            return Err(Error::DimensionMismatch(
                "rock field lengths must equal the cell count".into(),
            ));
        }
        if self.phi.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::InvalidArgument("porosity must lie in (0,1)".into()));
        }
        if self
            .perm_x
            .iter()
            .chain(&self.perm_y)
            .chain(&self.perm_z)
            .any(|&v| !(v > 0.0))
        {
            return Err(Error::InvalidArgument(
                "permeabilities must be positive".into(),
            ));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidArgument("dt must be positive".into()));
        }
        for s in &self.sources {
            let wsum: f64 = s.cells.iter().map(|&(_, w)| w).sum();
            if (wsum - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidArgument(format!(
                    "source weights sum to {wsum}, expected 1"
                )));
            }
            if s.cells.iter().any(|&(c, _)| c >= n) {
                return Err(Error::InvalidArgument("source cell out of range".into()));
            }
        }
        self.props.validate()
    }
}

/// Raw (unweighted) per-cell residuals of the three conservation equations.
#[derive(Debug, Clone)]
pub struct ResidualVector {
    pub f_w: Vec<f64>,
    pub f_e: Vec<f64>,
    pub f_o: Vec<f64>,
}

/// Equation rows of the block system, in the weighted form: the pressure
/// equation is `c_vw F_w + c_vo F_o`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EqRow {
    Pressure,
    Energy,
    Oil,
}

/// Primary unknown columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unknown {
    P,
    T,
    S,
}

fn eq_offset(eq: EqRow) -> usize {
    match eq {
        EqRow::Pressure => 0,
        EqRow::Energy => 1,
        EqRow::Oil => 2,
    }
}

fn unknown_offset(u: Unknown) -> usize {
    match u {
        Unknown::P => 0,
        Unknown::T => 1,
        Unknown::S => 2,
    }
}

/// Weighted, scaled Jacobian in cell-interleaved ordering: row `3i + e` is
/// equation `e` of cell `i`, column `3j + u` is unknown `u` of cell `j`.
#[derive(Debug, Clone)]
pub struct BlockSystem {
    pub matrix: CsrMatrix,
    pub n_cells: usize,
}

impl BlockSystem {
    /// Row indices of the given equations, field-major (all cells of the
    /// first equation, then the next).
    pub fn rows_for(&self, eqs: &[EqRow]) -> Vec<usize> {
        let mut out = Vec::with_capacity(eqs.len() * self.n_cells);
        for &eq in eqs {
            let off = eq_offset(eq);
            out.extend((0..self.n_cells).map(|i| 3 * i + off));
        }
        out
    }

    /// Column indices of the given unknowns, field-major.
    pub fn cols_for(&self, unknowns: &[Unknown]) -> Vec<usize> {
        let mut out = Vec::with_capacity(unknowns.len() * self.n_cells);
        for &u in unknowns {
            let off = unknown_offset(u);
            out.extend((0..self.n_cells).map(|i| 3 * i + off));
        }
        out
    }

    /// Extracts a sub-block with field-major internal ordering.
    pub fn block(&self, eqs: &[EqRow], unknowns: &[Unknown]) -> CsrMatrix {
        self.matrix
            .submatrix(&self.rows_for(eqs), &self.cols_for(unknowns))
    }

    /// Permutation `perm[new] = old` from cell-interleaved to field-wise
    /// ordering (all pressure rows, then energy, then oil).
    pub fn field_wise_permutation(&self) -> Vec<usize> {
        let mut perm = Vec::with_capacity(3 * self.n_cells);
        for f in 0..3 {
            perm.extend((0..self.n_cells).map(|i| 3 * i + f));
        }
        perm
    }

    /// The same operator with field-wise row/column ordering.
    pub fn to_field_wise(&self) -> CsrMatrix {
        let perm = self.field_wise_permutation();
        self.matrix.submatrix(&perm, &perm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;

    #[test]
    fn state_update_and_flatten() {
        let mut s = State::uniform(2, 1.0, 10.0, 0.5);
        s.apply_update(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 0.5);
        assert_eq!(s.p, vec![1.5, 3.0]);
        assert_eq!(s.t, vec![11.0, 12.5]);
        assert_eq!(s.s_o, vec![2.0, 3.5]);
        assert_eq!(s.to_vec(), vec![1.5, 11.0, 2.0, 3.0, 12.5, 3.5]);
    }

    #[test]
    fn model_validation_catches_bad_fields() {
        let grid = build_grid(2, 1, 1, 1.0, 1.0, 1.0).unwrap();
        let mut m = ReservoirModel {
            grid,
            phi: vec![0.2; 2],
            perm_x: vec![1e-13; 2],
            perm_y: vec![1e-13; 2],
            perm_z: vec![1e-13; 2],
            props: crate::props::PropertyConfig::default(),
            sources: vec![],
            dt: 1.0,
            gravity: 0.0,
            scaling: Scaling {
                enabled: true,
                t_ref: 288.706,
                c_ref: 4000.0,
            },
        };
        assert!(m.validate().is_ok());
        m.phi[0] = 1.5;
        assert!(m.validate().is_err());
        m.phi[0] = 0.2;
        m.sources.push(SourceTerm {
            kind: SourceKind::Heater {
                u: 1.0,
                t_heater: 373.15,
            },
            cells: vec![(0, 0.4), (1, 0.4)],
        });
        assert!(m.validate().is_err());
    }

    #[test]
    fn block_index_maps_cover_all_rows() {
        let sys = BlockSystem {
            matrix: CsrMatrix::identity(9),
            n_cells: 3,
        };
        let mut all = sys.rows_for(&[EqRow::Pressure, EqRow::Energy, EqRow::Oil]);
        all.sort_unstable();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
        assert_eq!(sys.cols_for(&[Unknown::T]), vec![1, 4, 7]);
        let perm = sys.field_wise_permutation();
        assert_eq!(perm, vec![0, 3, 6, 1, 4, 7, 2, 5, 8]);
    }
}
