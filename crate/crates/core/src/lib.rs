//! Reduction of the time-dependent multifactor Black-Scholes equation with
//! knock-out (Dirichlet) boundaries to an equivalent constant-coefficient
//! equation, plus the numerical machinery needed to check that reduction.
//!
//! The crate is organised bottom-up:
//!
//! * [`coefficients`] holds piecewise constant/linear schedules, the market
//!   model and the exact time averages of its coefficients.
//! * [`domain_grid`] describes the knock-out region, its log-space grid and
//!   the payoffs evaluated on it.
//! * [`discrete_operator`] assembles the finite-difference elliptic operator.
//! * [`timestepper`] marches the parabolic problem with a theta scheme.
//! * [`semigroup_lab`] checks the exponential identity, Yosida approximants and
//!   piecewise composition on dense matrices.
//! * [`mc_oracle`] and [`analytic_oracles`] are independent pricers.
//! * [`verify`] runs the refinement and agreement experiments.
//! * [`config`] and [`runner`] drive experiments from JSON documents.

pub mod analytic_oracles;
pub mod coefficients;
pub mod config;
pub mod discrete_operator;
pub mod domain_grid;
mod error;
pub mod linalg;
pub mod mc_oracle;
pub mod runner;
pub mod semigroup_lab;
pub mod timestepper;
pub mod verify;

pub use error::{Error, Result};
