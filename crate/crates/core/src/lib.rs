//! Periodic homogenization of semilinear elliptic systems
//! `-div(a(x/ε) ∇u) = div F(x, u)` with P1 finite elements.
//!
//! The modules follow the computation:
//!
//! - [`mesh`], [`fem`] and [`sparse`] hold the discretization and a direct
//!   sparse solver.
//! - [`expr`] and [`coeff`] describe oscillating tensors.
//! - [`nonlin`] defines flux nonlinearities with analytic Jacobians.
//! - [`cell`] solves the corrector problems and computes `â`.
//! - [`solver`] runs Newton's method, the frozen-Jacobian fixed-point
//!   iteration, and the nondegeneracy and uniqueness checks.
//! - [`norms`] provides discrete norms, rate fits and the linear probes.
//! - [`config`], [`pipeline`] and [`schema`] drive whole experiments from
//!   TOML files and write schema-described CSV output.
//!
//! The guide in `book/` explains the workflow. Its code blocks are compiled as
//! doctests of this crate.

pub mod cell;
pub mod coeff;
pub mod config;
pub mod expr;
pub mod fem;
pub mod mesh;
pub mod nonlin;
pub mod norms;
pub mod pipeline;
pub mod schema;
pub mod solver;
pub mod sparse;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
    #[doc = include_str!("../../../book/src/expressions.md")]
    mod expressions {}
    #[doc = include_str!("../../../book/src/homogenization.md")]
    mod homogenization {}
    #[doc = include_str!("../../../book/src/fixed-point.md")]
    mod fixed_point {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    mod diagnostics {}
    #[doc = include_str!("../../../book/src/outputs.md")]
    mod outputs {}
}
