//! Multiuser detection of discrete-valued signals over an underdetermined
//! linear Gaussian channel `y = S A b + w`.
//!
//! The crate provides the MAP-SOAV detector (a sum-of-absolute-values convex
//! surrogate of the MAP problem, solved by an accelerated proximal-gradient
//! method with a closed-form proximity operator), the LMMSE and LASSO
//! baselines, an exhaustive MAP oracle for small systems, a sampled-waveform
//! filter-bank front end, and a seeded Monte Carlo harness.
//!
//! ```
//! use soav_mud::prior::SymbolPrior;
//! use soav_mud::soav::{default_offset, solve_weights, DEFAULT_OFFSET};
//!
//! let prior = SymbolPrior::bpsk_with_inactivity(0.8).unwrap();
//! let c = default_offset(&prior, DEFAULT_OFFSET);
//! let weights = solve_weights(&prior, c).unwrap();
//! assert!((weights.q[0] - 5.0).abs() < 1e-9);
//! assert!(weights.is_convex());
//! ```

// `!(x > 0.0)` is used on purpose so that NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod detect;
pub mod error;
pub mod frontend;
pub mod harness;
pub mod optim;
pub mod prior;
pub mod soav;

pub use error::{Error, Result};
