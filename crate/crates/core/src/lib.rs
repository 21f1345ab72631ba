//! Numerical laboratory for two-scale Harnack estimates.
//!
//! The crate covers sliding-paraboloid contact sets and their dyadic covers,
//! membership checkers for the supersolution classes `P_Lambda^I(r)` and the
//! weak-Harnack classes `W_M^a(rho)`, three families of elliptic operators
//! (axis-aligned difference operators, degenerate periodic coefficients and
//! nonlocal kernels) with Dirichlet solvers, and experiments measuring the
//! Harnack-type conclusions on their solutions.

pub mod classes;
pub mod cli;
pub mod contact;
pub mod error;
pub mod experiments;
pub mod lattice;
pub mod operators;

pub use error::{Error, Result};
pub use lattice::{build_lattice, BoxSpec, DyadicCube, GridFunction, Lattice, Region};

/// Shortest round-trip decimal representation of `x`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

#[inline]
pub(crate) fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}
