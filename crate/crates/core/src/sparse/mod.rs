//! Sparse CSR kernels, right-preconditioned GMRES, ILU(k), subdomain
//! block-Jacobi ILU, and dense LU for coarse and oracle solves.

pub mod csr;
pub mod dense;
pub mod gmres;
pub mod ilu;
pub mod matrix_market;

pub use csr::{axpy, dot, norm2, CsrMatrix};
pub use dense::{dense_lu_solve, DenseLu};
pub use gmres::{gmres, GmresOutcome, IdentityPrecond, Preconditioner};
pub use ilu::{block_jacobi_ilu, ilu_factor, BlockJacobiIlu, IluFactors, Partition};
pub use matrix_market::{read_matrix_market, write_matrix_market};
