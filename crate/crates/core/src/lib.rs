//! Fully implicit thermal two-phase porous-media flow simulator built
//! around pluggable two-stage preconditioners (CPR and CPTR families).
//!
//! The crate is organized bottom-up:
//!
//! - [`grid`]: structured grids with interior-facet topology
//! - [`props`]: fluid/rock property correlations with analytic derivatives
//! - [`discretization`]: fully implicit DG(0)/TPFA residual, block Jacobian,
//!   and the sparse Schur complement approximation
//! - [`sparse`]: CSR kernels, GMRES, ILU(k), block-Jacobi ILU, dense LU
//! - [`amg`]: classical Ruge-Stuben AMG and unknown-based AMG
//! - [`precond`]: the two-stage preconditioner framework and its variants
//! - [`solver`]: Newton with line search and the time loop
//! - [`cases`]: case catalog, config files, metrics, CLI support, and the
//!   dense Schur condition-number oracle

pub mod amg;
pub mod cases;
pub mod discretization;
pub mod error;
pub mod grid;
pub mod precond;
pub mod props;
pub mod solver;
pub mod sparse;

pub use error::{Error, Result};
