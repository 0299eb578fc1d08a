//! Numerics for backward stochastic differential equations driven by a
//! finite-state continuous-time Markov chain.
//!
//! The chain `X` lives on the unit vectors of `R^N` and decomposes as
//! `X_t = X_0 + ∫ A X_s ds + M_t` with `M` a square-integrable martingale.
//! On top of that decomposition the crate provides:
//!
//! - [`chain`]: path simulation, transition matrices, the Ψ-calculus
//!   (bracket density, Moore-Penrose pseudoinverse, seminorm) and the
//!   Doléans-Dade exponential;
//! - [`bsde`]: a backward solver for classical chain BSDEs through the
//!   Markovian reduction `Y_t = u(t)'X_t`;
//! - [`abse`]: anticipated BSDEs solved by Picard iteration over classical
//!   solves, with contraction diagnostics and an a-priori estimate check;
//! - [`sdde`]: the dual stochastic differential delayed equation and a
//!   Monte-Carlo verification of the duality closed formula;
//! - [`compare`]: a property harness for the comparison theorem;
//! - [`config`] and [`export`]: JSON problem descriptions and CSV output.

// index loops mirror the (node, state) structure of grid quantities
#![allow(clippy::needless_range_loop)]

pub mod abse;
pub mod bsde;
pub mod chain;
pub mod compare;
pub mod config;
pub mod error;
pub mod export;
pub mod grid;
pub mod mc;
pub mod sdde;

pub use error::{Error, Result};

/// Library version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
