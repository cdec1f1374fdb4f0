//! Moving-mesh shape optimization on 2D triangular meshes.

pub mod fem;
pub mod forms;
pub mod mesh;
pub mod pde;
pub mod control;
pub mod metric;
pub mod functional;
pub mod optim;
pub mod meshio;
