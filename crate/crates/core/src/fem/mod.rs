//! Finite element building blocks: quadrature, Lagrangian spaces, sparse
//! storage with Dirichlet handling, and direct linear solves.
//!
//! Form assembly lives in [`crate::forms`], which interprets integrands on
//! top of these spaces.

mod quadrature;
mod space;
mod sparse;

pub use quadrature::{edge_gauss, quadrature, QuadratureRule, UnsupportedDegree};
pub use space::{reference_basis, Block, Degree, Family, FunctionSpace, UnknownMarker};
pub use sparse::{
    apply_dirichlet, dot, norm, solve_linear, zero_entries, Factorization, SolveError,
    SparseMatrix, TripletBuilder, RESIDUAL_TARGET,
};
