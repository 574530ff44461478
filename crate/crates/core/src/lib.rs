//! Macro- and micro-level stochastic claims reserving.
//!
//! The crate fits cross-classified (quasi-)Poisson models on run-off
//! triangles and on simulated individual payments, computes reserve best
//! estimates with their unconditional MSEP, provides Mack's chain-ladder
//! baseline, and fits a Poisson model with a claim-level random intercept.

pub mod error;
pub mod glm;
pub mod linalg;
pub mod linmodel;
pub mod microsim;
pub mod mixed;
pub mod reserve;
pub mod triangle;

pub use error::{Error, Result};
