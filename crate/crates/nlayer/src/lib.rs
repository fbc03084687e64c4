//! Numerical construction of N-layer clustered solutions of the singularly
//! perturbed problem −ε²Div(A(x)∇u) = |u|^p − Ψ(x) on a planar domain with
//! Dirichlet boundary conditions, where Ψ is the first Dirichlet
//! eigenfunction of −Div(A∇·).
//!
//! The crate is organized bottom-up:
//!
//! * [`profile1d`] — the 1D homoclinic layer profile, its linearizations,
//!   eigenpair and the scalar interaction constants.
//! * [`geometry`] — closed curves under a matrix field A: the skewed Fermi
//!   frame, expansion coefficients, weighted length functional and its
//!   variations, and the Jacobi coefficients.
//! * [`field2d`] — discretization of −Div(A∇·) on a 2D grid, the first
//!   Dirichlet eigenpair, and the negative background branch.
//! * [`toda`] — the reduced Jacobi–Toda system for the layer locations:
//!   interaction distance, lattice matrices, refinement recursion, periodic
//!   solvers and resonance-gap certification.
//! * [`assembler`] — assembly of the global ansatz on the 2D grid, residual
//!   measurement and Newton refinement.

pub mod assembler;
pub mod error;
pub mod field2d;
pub mod geometry;
pub mod linalg;
pub mod profile1d;
pub mod toda;

pub use error::Error;

/// Crate-wide result type.
pub type Result<T> = std::result::Result<T, Error>;
