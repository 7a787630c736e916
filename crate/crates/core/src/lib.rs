//! Orthogonal trace-sum maximization.
//!
//! Given a symmetric block matrix `S` with zero diagonal blocks, find
//! `O_i in R^{d_i x r}` with `O_i^T O_i = I` maximizing
//! `sum_{i != j} tr(O_i^T S_ij O_j)`. The crate provides
//!
//! * [`model`]: the additive-noise generator and `.otsm` instance files,
//! * [`solver`]: spectral initialization plus block-coordinate ascent,
//! * [`certificate`]: dual certificates proving that a stationary point is the
//!   unique optimum of the semidefinite relaxation, together with the
//!   closed-form noise conditions and perturbation bounds,
//! * [`sdp`]: a small operator-splitting solver for the relaxation, used as
//!   an independent oracle,
//! * [`experiment`]: single trials and seeded Monte Carlo sweeps.

pub mod blockmat;
pub mod certificate;
pub mod config;
pub mod error;
pub mod experiment;
pub mod model;
pub mod sdp;
pub mod solver;

pub use blockmat::{BlockPartition, BlockSymMatrix};
pub use config::Tolerances;
pub use error::{OtsmError, Result};
pub use model::{GroundTruth, ProblemInstance, StiefelStack};
