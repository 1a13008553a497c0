//! Identification of discrete-time nonlinear state-space models from short
//! input/output records.
//!
//! The pipeline runs from periodic excitation design and best linear
//! approximation ([`frf`]) through a parametric linear fit ([`linfit`]) to
//! nonlinear models with polynomial ([`pnlss`]) or network ([`nlss2`]) terms,
//! optionally reparameterized into parallel univariate branches
//! ([`decouple`]). [`harness`] wires the stages into reproducible experiments
//! on a simulated two-tank process ([`tanksim`]).

// `!(x < tol)` style checks are used on purpose so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod decouple;
pub mod error;
pub mod frf;
pub mod harness;
pub mod io;
pub mod linfit;
pub mod model;
pub mod nlss2;
pub mod optimizer;
pub mod par;
pub mod pnlss;
pub mod signals;
pub mod tanksim;

pub use error::{Error, Result};
pub use par::Execution;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Every random draw in the crate goes through this generator.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
