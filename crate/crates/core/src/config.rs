//! Numeric tolerances shared by every module.
//!
//! Each threshold lives here once; call sites read them from [`Tolerances`]
//! (usually through [`Tolerances::DEFAULT`]) instead of hard-coding literals.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Relative asymmetry allowed after a symmetric constructor.
    pub symmetry: f64,
    /// Relative reconstruction residual of a symmetric eigendecomposition.
    pub eig_residual: f64,
    /// Orthonormality of frames handed to projectors.
    pub orthonormal: f64,
    /// Orthonormality of Stiefel blocks.
    pub stiefel: f64,
    /// Target accuracy of the trace equation in the capped-block projection.
    pub bisection: f64,
    /// Relative singular value below which a polar factor input is treated as rank deficient.
    pub polar_rank: f64,
    /// Relative support-condition residual for the certificate decomposition.
    pub support: f64,
    /// Relative strictness margin for the certificate shift.
    pub shift_margin: f64,
    /// Eigenvalue threshold (relative to the largest) for numerical rank.
    pub rank_threshold: f64,
}

impl Tolerances {
    pub const DEFAULT: Tolerances = Tolerances {
        symmetry: 1e-12,
        eig_residual: 1e-9,
        orthonormal: 1e-10,
        stiefel: 1e-9,
        bisection: 1e-10,
        polar_rank: 1e-13,
        support: 1e-7,
        shift_margin: 1e-6,
        rank_threshold: 1e-5,
    };
}

impl Default for Tolerances {
    fn default() -> Self {
        Self::DEFAULT
    }
}
