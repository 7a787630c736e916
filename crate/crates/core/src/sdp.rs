//! Reference solver for the convex relaxation
//! `max <S, U>` over symmetric `U >= 0` with `U_ii <= I` and `tr U_ii = r`.
//!
//! Two-set ADMM: `X` lives in the PSD cone, `Z` in the set of symmetric
//! matrices whose diagonal blocks satisfy the capped-trace constraints.
//!
//! ```text
//! X <- proj_psd(Z - Y)
//! Z <- proj_cap(X + Y + S / rho)      (diagonal blocks only)
//! Y <- Y + X - Z
//! ```
//!
//! The returned matrix is `Z`, which satisfies the block constraints exactly
//! and the PSD constraint up to the primal residual.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::blockmat::{proj_block_cap, proj_psd, spectral_decomp, symmetric_part, BlockPartition, BlockSymMatrix};
use crate::config::Tolerances;
use crate::error::{OtsmError, Result};
use crate::model::{ProblemInstance, StiefelStack};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdpConfig {
    pub rho: f64,
    pub max_iters: usize,
    /// Relative to `1 + ||S||_F`.
    pub primal_tol: f64,
    /// Relative to `1 + ||S||_F`.
    pub dual_tol: f64,
    /// Residual balancing: double `rho` when the primal residual dominates by
    /// 10x, halve it in the opposite case.
    pub adaptive_rho: bool,
}

impl Default for SdpConfig {
    fn default() -> Self {
        SdpConfig { rho: 1.0, max_iters: 20_000, primal_tol: 1e-7, dual_tol: 1e-7, adaptive_rho: false }
    }
}

impl SdpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(OtsmError::InvalidConfig(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.primal_tol > 0.0) || !(self.dual_tol > 0.0) {
            return Err(OtsmError::InvalidConfig("tolerances must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(OtsmError::InvalidConfig("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub u: BlockSymMatrix,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub objective: f64,
    pub numerical_rank: usize,
    pub converged: bool,
    /// Penalty in effect at exit.
    pub rho: f64,
}

/// Constraint violations of a candidate relaxation solution.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Feasibility {
    pub min_eigenvalue: f64,
    pub max_block_eigenvalue: f64,
    pub max_trace_deviation: f64,
}

impl Feasibility {
    pub fn within(&self, tol: f64) -> bool {
        self.min_eigenvalue >= -tol && self.max_block_eigenvalue <= 1.0 + tol && self.max_trace_deviation <= tol
    }
}

pub fn feasibility(u: &BlockSymMatrix) -> Result<Feasibility> {
    let p = u.partition();
    let mut max_block_eigenvalue = f64::NEG_INFINITY;
    let mut max_trace_deviation: f64 = 0.0;
    for i in 0..p.num_blocks() {
        let b = u.block(i, i).into_owned();
        max_block_eigenvalue = max_block_eigenvalue.max(spectral_decomp(&symmetric_part(&b))?.max());
        max_trace_deviation = max_trace_deviation.max((b.trace() - p.rank() as f64).abs());
    }
    Ok(Feasibility { min_eigenvalue: u.spectral_decomp()?.min(), max_block_eigenvalue, max_trace_deviation })
}

fn project_cap_blocks(p: &BlockPartition, mut a: DMatrix<f64>) -> Result<DMatrix<f64>> {
    for i in 0..p.num_blocks() {
        let (off, d) = (p.offset(i), p.dim(i));
        let block = symmetric_part(&a.view((off, off), (d, d)).into_owned());
        a.view_mut((off, off), (d, d)).copy_from(&proj_block_cap(&block, p.rank())?);
    }
    Ok(symmetric_part(&a))
}

/// Solves the relaxation of `instance`, warm-started at `O O^T` when a stack
/// is given and at zero otherwise.
pub fn solve_sdp(instance: &ProblemInstance, config: &SdpConfig, warm: Option<&StiefelStack>) -> Result<SdpSolution> {
    config.validate()?;
    let p = instance.partition();
    let s = instance.coupling().entries();
    let n = p.total_dim();
    let mut z = match warm {
        Some(o) => {
            if o.partition() != p {
                return Err(OtsmError::PartitionMismatch);
            }
            let stacked = o.stacked();
            symmetric_part(&(&stacked * stacked.transpose()))
        }
        None => DMatrix::zeros(n, n),
    };
    let mut y = DMatrix::zeros(n, n);
    let scale = 1.0 + s.norm();
    let (primal_tol, dual_tol) = (config.primal_tol * scale, config.dual_tol * scale);
    let mut rho = config.rho;

    let mut primal = f64::INFINITY;
    let mut dual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < config.max_iters {
        iterations += 1;
        let x = proj_psd(&(&z - &y))?;
        let z_new = project_cap_blocks(p, &x + &y + s / rho)?;
        y += &x - &z_new;
        primal = (&x - &z_new).norm();
        dual = rho * (&z_new - &z).norm();
        z = z_new;
        if primal <= primal_tol && dual <= dual_tol {
            converged = true;
            break;
        }
        if config.adaptive_rho {
            if primal > 10.0 * dual {
                rho *= 2.0;
                y /= 2.0;
            } else if dual > 10.0 * primal {
                rho /= 2.0;
                y *= 2.0;
            }
        }
    }
    let objective = s.dot(&z);
    let numerical_rank = numerical_rank(&z, Tolerances::DEFAULT.rank_threshold)?;
    Ok(SdpSolution {
        u: BlockSymMatrix::from_symmetric_unchecked(p, z),
        iterations,
        primal_residual: primal,
        dual_residual: dual,
        objective,
        numerical_rank,
        converged,
        rho,
    })
}

/// Number of eigenvalues above `threshold * lambda_max(U)`; zero when `U` has
/// no positive eigenvalue.
pub fn numerical_rank(u: &DMatrix<f64>, threshold: f64) -> Result<usize> {
    let dec = spectral_decomp(&symmetric_part(u))?;
    let top = dec.max();
    if !(top > 0.0) {
        return Ok(0);
    }
    Ok(dec.values.iter().filter(|&&v| v > threshold * top).count())
}

/// `||U - O O^T||_F`.
pub fn tightness_gap(u: &BlockSymMatrix, o: &StiefelStack) -> Result<f64> {
    if u.partition() != o.partition() {
        return Err(OtsmError::PartitionMismatch);
    }
    let stacked = o.stacked();
    Ok((u.entries() - &stacked * stacked.transpose()).norm())
}
