//! Dual certificates for the semidefinite relaxation, plus the closed-form
//! noise conditions and perturbation bounds they are compared against.
//!
//! At a stationary stack `Ṽ` (so `[S Ṽ]_i = Ṽ_i Λ_i` with `Λ_i` symmetric)
//! the coupling splits as `S = T1 + T2` where `T2 = blockdiag(Ṽ_i Λ_i Ṽ_i^T)`
//! and `T1` keeps the off-diagonal blocks of `S` and has `T1 Ṽ = 0`. Shifting
//! by `c` moves `c (I - Ṽ_i Ṽ_i^T)` out of each diagonal block of `T1`; if
//! every `Λ_i - c I` is positive definite and `T1 - c blockdiag(I - Ṽ_iṼ_i^T)`
//! is negative definite on the complement of `span(Ṽ)`, then `Ṽ Ṽ^T` is the
//! unique solution of the relaxation. Larger `c` only helps the second test,
//! so only `c` just below `min_i λ_min(Λ_i)` is tried.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Serialize, Serializer};

use crate::blockmat::{
    operator_norm, orthonormal_complement, spectral_decomp, symmetric_part, BlockSymMatrix,
};
use crate::config::Tolerances;
use crate::error::{OtsmError, Result};
use crate::model::{GroundTruth, StiefelStack};
use crate::solver::stationarity;

fn serialize_blocks<S: Serializer>(blocks: &[DMatrix<f64>], s: S) -> std::result::Result<S::Ok, S::Error> {
    let rows: Vec<Vec<Vec<f64>>> = blocks
        .iter()
        .map(|b| b.row_iter().map(|row| row.iter().copied().collect()).collect())
        .collect();
    rows.serialize(s)
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    pub t1: BlockSymMatrix,
    pub t2: BlockSymMatrix,
    /// Symmetrized `Λ_i = Ṽ_i^T [S Ṽ]_i`.
    pub lambda: Vec<DMatrix<f64>>,
    /// `max_i ||skew(Λ_i)||_F` before symmetrization.
    pub symmetry_residual: f64,
    pub stationarity_residual: f64,
    /// `||Π⊥ T1 Π⊥ - T1||_F` with `Π⊥` the projector onto `span(Ṽ)^⊥`.
    pub t1_support_residual: f64,
    /// `||T1 Ṽ||_F`.
    pub t1_annihilation_residual: f64,
    /// `max_i ||Π_i [T2]_ii Π_i - [T2]_ii||_F` with `Π_i = Ṽ_i Ṽ_i^T`.
    pub t2_support_residual: f64,
}

/// Splits `S = T1 + T2` at `Ṽ`. Refuses when the stationarity residual of `Ṽ`
/// exceeds `stat_tol`.
pub fn build_decomposition(s: &BlockSymMatrix, v: &StiefelStack, stat_tol: f64) -> Result<Decomposition> {
    if s.partition() != v.partition() {
        return Err(OtsmError::PartitionMismatch);
    }
    let stationarity_residual = stationarity(s, v)?;
    if !(stationarity_residual <= stat_tol) {
        return Err(OtsmError::NonStationary { residual: stationarity_residual, tol: stat_tol });
    }
    let p = s.partition();
    let stacked = v.stacked();
    let sv = s.entries() * &stacked;

    let mut lambda = Vec::with_capacity(p.num_blocks());
    let mut symmetry_residual: f64 = 0.0;
    let mut t1 = s.entries().clone();
    let mut t2 = DMatrix::zeros(p.total_dim(), p.total_dim());
    for i in 0..p.num_blocks() {
        let vi = v.block(i);
        let raw = vi.transpose() * sv.rows(p.offset(i), p.dim(i));
        symmetry_residual = symmetry_residual.max(0.5 * (&raw - raw.transpose()).norm());
        let li = symmetric_part(&raw);
        let diag = symmetric_part(&(vi * &li * vi.transpose()));
        let (off, d) = (p.offset(i), p.dim(i));
        t1.view_mut((off, off), (d, d)).copy_from(&(-&diag));
        t2.view_mut((off, off), (d, d)).copy_from(&diag);
        lambda.push(li);
    }

    let t1_v = &t1 * &stacked;
    // Π = Ṽ Ṽ^T / m because Ṽ^T Ṽ = m I.
    let m = p.num_blocks() as f64;
    let proj = &stacked * stacked.transpose() / m;
    let perp = DMatrix::identity(p.total_dim(), p.total_dim()) - &proj;
    let t1_support_residual = (&perp * &t1 * &perp - &t1).norm();
    let t2_support_residual = (0..p.num_blocks())
        .map(|i| {
            let vi = v.block(i);
            let pi = vi * vi.transpose();
            let b = t2.view((p.offset(i), p.offset(i)), (p.dim(i), p.dim(i)));
            (&pi * b * &pi - b).norm()
        })
        .fold(0.0, f64::max);

    Ok(Decomposition {
        t1: BlockSymMatrix::from_symmetric_unchecked(p, t1),
        t2: BlockSymMatrix::from_symmetric_unchecked(p, t2),
        lambda,
        symmetry_residual,
        stationarity_residual,
        t1_support_residual,
        t1_annihilation_residual: t1_v.norm(),
        t2_support_residual,
    })
}

/// `-m (Π_L2 - Π_L1)`: blocks `V_i V_j^T` off the diagonal and
/// `-(m - 1) V_i V_i^T` on it.
pub fn clean_certificate(truth: &GroundTruth) -> BlockSymMatrix {
    let p = truth.partition();
    let m = p.num_blocks() as f64;
    let v = truth.stacked();
    let mut a = &v * v.transpose();
    for i in 0..p.num_blocks() {
        let (off, d) = (p.offset(i), p.dim(i));
        let vi = truth.block(i);
        a.view_mut((off, off), (d, d)).copy_from(&(vi * vi.transpose() * (1.0 - m)));
    }
    BlockSymMatrix::from_symmetric_unchecked(p, symmetric_part(&a))
}

/// `λ_max` of `T1 - c blockdiag(I - Ṽ_i Ṽ_i^T)` restricted to `span(Ṽ)^⊥`.
pub fn shifted_complement_max(decomp: &Decomposition, v: &StiefelStack, c: f64) -> Result<f64> {
    let p = v.partition();
    let mut shifted = decomp.t1.entries().clone();
    for i in 0..p.num_blocks() {
        let (off, d) = (p.offset(i), p.dim(i));
        let vi = v.block(i);
        let perp_i = DMatrix::identity(d, d) - vi * vi.transpose();
        let mut b = shifted.view_mut((off, off), (d, d));
        b -= perp_i * c;
    }
    let basis = orthonormal_complement(&v.stacked());
    if basis.ncols() == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    let restricted = symmetric_part(&(basis.transpose() * shifted * &basis));
    Ok(spectral_decomp(&restricted)?.max())
}

#[derive(Debug, Clone, Serialize)]
pub struct Certificate {
    #[serde(serialize_with = "serialize_blocks")]
    pub lambda: Vec<DMatrix<f64>>,
    pub c: f64,
    pub eps_c: f64,
    pub lambda_min_blocks: f64,
    pub lambda_complement: f64,
    pub symmetry_residual: f64,
    pub stationarity_residual: f64,
    pub t1_support_residual: f64,
    pub t2_support_residual: f64,
    pub valid: bool,
}

impl Certificate {
    /// `lambda_min_blocks - c`, positive when the diagonal test passes.
    pub fn block_margin(&self) -> f64 {
        self.lambda_min_blocks - self.c
    }

    /// `-lambda_complement`, positive when the complement test passes.
    pub fn complement_margin(&self) -> f64 {
        -self.lambda_complement
    }
}

pub fn certify(s: &BlockSymMatrix, v: &StiefelStack, stat_tol: f64) -> Result<Certificate> {
    let decomp = build_decomposition(s, v, stat_tol)?;
    certify_decomposition(&decomp, v, s.frobenius_norm(), stat_tol)
}

pub fn certify_decomposition(
    decomp: &Decomposition,
    v: &StiefelStack,
    s_norm: f64,
    stat_tol: f64,
) -> Result<Certificate> {
    let tol = Tolerances::DEFAULT;
    let lambda_min_blocks = decomp
        .lambda
        .iter()
        .map(|l| spectral_decomp(l).map(|e| e.min()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    let eps_c = tol.shift_margin * (1.0 + lambda_min_blocks.abs());
    let c = lambda_min_blocks - eps_c;
    let lambda_complement = shifted_complement_max(decomp, v, c)?;
    let support_tol = tol.support * (1.0 + s_norm);
    let valid = lambda_min_blocks > c
        && lambda_complement < -eps_c
        && decomp.symmetry_residual <= stat_tol
        && decomp.t1_support_residual <= support_tol
        && decomp.t2_support_residual <= support_tol;
    Ok(Certificate {
        lambda: decomp.lambda.clone(),
        c,
        eps_c,
        lambda_min_blocks,
        lambda_complement,
        symmetry_residual: decomp.symmetry_residual,
        stationarity_residual: decomp.stationarity_residual,
        t1_support_residual: decomp.t1_support_residual,
        t2_support_residual: decomp.t2_support_residual,
        valid,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionReport {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    pub terms: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl ConditionReport {
    fn new(lhs: f64, rhs: f64, terms: BTreeMap<String, f64>, reason: Option<String>) -> Self {
        let holds = reason.is_none() && lhs > rhs;
        ConditionReport { lhs, rhs, holds, terms, reason }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// The noise condition exactly as printed.
    AsStated,
    /// Adds `sqrt(r)` to the numerator of the first fraction, matching the
    /// blockwise perturbation bound that the condition is derived from.
    Lemma7Consistent,
}

/// `max_i ||[W X]_i||_F`.
fn max_block_frobenius(w: &BlockSymMatrix, x: &DMatrix<f64>) -> f64 {
    let p = w.partition();
    let wx = w.entries() * x;
    (0..p.num_blocks())
        .map(|i| wx.rows(p.offset(i), p.dim(i)).norm())
        .fold(0.0, f64::max)
}

/// Noise-size condition on `W` under which the relaxation is tight:
/// `m - 1 > 2m 2A' / (m - 4||W|| sqrt r) + 2A + 4||W|| sqrt(r/m)` with
/// `A = max_i ||[W V]_i||_F + 4 ||W||^2 sqrt(r/m)`.
pub fn deterministic_condition(w: &BlockSymMatrix, truth: &GroundTruth, variant: Variant) -> Result<ConditionReport> {
    if w.partition() != truth.partition() {
        return Err(OtsmError::PartitionMismatch);
    }
    let p = w.partition();
    let (m, r) = (p.num_blocks() as f64, p.rank() as f64);
    let w_norm = w.operator_norm()?;
    let wv_max = max_block_frobenius(w, &truth.stacked());
    let a = wv_max + 4.0 * w_norm * w_norm * (r / m).sqrt();
    let a_prime = match variant {
        Variant::AsStated => a,
        Variant::Lemma7Consistent => a + r.sqrt(),
    };
    let denominator = m - 4.0 * w_norm * r.sqrt();
    let global_term = 4.0 * w_norm * (r / m).sqrt();

    let mut terms = BTreeMap::new();
    terms.insert("w_norm".to_string(), w_norm);
    terms.insert("wv_block_max".to_string(), wv_max);
    terms.insert("a".to_string(), a);
    terms.insert("a_prime".to_string(), a_prime);
    terms.insert("denominator".to_string(), denominator);
    terms.insert("two_a".to_string(), 2.0 * a);
    terms.insert("global_term".to_string(), global_term);

    let lhs = m - 1.0;
    if denominator <= 0.0 {
        let reason = format!("m - 4||W|| sqrt(r) = {denominator:e} is not positive");
        return Ok(ConditionReport::new(lhs, f64::INFINITY, terms, Some(reason)));
    }
    let ratio_term = 2.0 * m * 2.0 * a_prime / denominator;
    terms.insert("ratio_term".to_string(), ratio_term);
    let rhs = ratio_term + 2.0 * a + global_term;
    Ok(ConditionReport::new(lhs, rhs, terms, None))
}

/// `m^{1/4} / (16 r^{3/4} d^{1/2})`.
pub fn sigma_star(m: usize, d: usize, r: usize) -> f64 {
    (m as f64).powf(0.25) / (16.0 * (r as f64).powf(0.75) * (d as f64).sqrt())
}

#[derive(Debug, Clone, Serialize)]
pub struct CorollaryReport {
    pub condition: ConditionReport,
    /// `1 - (r^2 / (r^2 + 2 log m))^{-r^2/2} - 2 exp(-D/8)`, evaluated verbatim.
    pub probability: f64,
    pub sigma_star: f64,
    pub notes: Vec<String>,
}

/// The Gaussian-noise version of [`deterministic_condition`], with
/// `delta = 2 log m` and `t = sqrt(D)/2` substituted, evaluated exactly as
/// parenthesized: `X = sigma sqrt(m) (r^2 + 2 log m) + 48 D sigma^2 sqrt(r/m)`
/// and `m - 1 > 2m 2X / (m - 16 sigma sqrt(D r)) + 2X + 16 sigma sqrt(D r / m)`.
pub fn corollary_condition(m: usize, d: usize, r: usize, sigma: f64) -> Result<CorollaryReport> {
    if m < 2 || d == 0 || r == 0 || d < r {
        return Err(OtsmError::InvalidConfig(format!("need m >= 2 and d >= r >= 1, got m={m} d={d} r={r}")));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(OtsmError::InvalidConfig(format!("sigma must be finite and nonnegative, got {sigma}")));
    }
    let (mf, rf) = (m as f64, r as f64);
    let big_d = (m * d) as f64;
    let log_m = mf.ln();
    let wv_term = sigma * mf.sqrt() * (rf * rf + 2.0 * log_m);
    let sq_term = 48.0 * big_d * sigma * sigma * (rf / mf).sqrt();
    let x = wv_term + sq_term;
    let denominator = mf - 16.0 * sigma * (big_d * rf).sqrt();
    let global_term = 16.0 * sigma * (big_d * rf / mf).sqrt();

    let mut terms = BTreeMap::new();
    terms.insert("wv_term".to_string(), wv_term);
    terms.insert("norm_squared_term".to_string(), sq_term);
    terms.insert("x".to_string(), x);
    terms.insert("denominator".to_string(), denominator);
    terms.insert("two_x".to_string(), 2.0 * x);
    terms.insert("global_term".to_string(), global_term);

    let lhs = mf - 1.0;
    let condition = if denominator <= 0.0 {
        let reason = format!("m - 16 sigma sqrt(D r) = {denominator:e} is not positive");
        ConditionReport::new(lhs, f64::INFINITY, terms, Some(reason))
    } else {
        let ratio_term = 2.0 * mf * 2.0 * x / denominator;
        terms.insert("ratio_term".to_string(), ratio_term);
        ConditionReport::new(lhs, ratio_term + 2.0 * x + global_term, terms, None)
    };
    let probability =
        1.0 - (rf * rf / (rf * rf + 2.0 * log_m)).powf(-rf * rf / 2.0) - 2.0 * (-big_d / 8.0).exp();
    Ok(CorollaryReport {
        condition,
        probability,
        sigma_star: sigma_star(m, d, r),
        notes: vec![
            "sigma sqrt(m) (r^2 + 2 log m) is evaluated as written; sigma sqrt(m (r^2 + 2 log m)) is another reading".into(),
            "the probability expression is reported verbatim and can be negative".into(),
        ],
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Lemma5Bounds {
    /// Bound on `||T1* - T1||`.
    pub bound1: f64,
    /// Per-block bound on `||Λ_i - (m - 1) I||`.
    pub bound2: Vec<f64>,
}

/// Operator-norm bounds on how far the decomposition at an aligned `Ṽ` sits
/// from the clean one. `[W Ṽ]_i = sum_j W_ij Ṽ_j` is used in both bounds.
pub fn lemma5_bounds(w: &BlockSymMatrix, truth: &GroundTruth, aligned: &StiefelStack) -> Result<Lemma5Bounds> {
    if w.partition() != truth.partition() || w.partition() != aligned.partition() {
        return Err(OtsmError::PartitionMismatch);
    }
    let p = w.partition();
    let m = p.num_blocks();
    let r = p.rank();
    let vt = aligned.stacked();
    let wvt = w.entries() * &vt;
    let cross = truth.stacked().transpose() * &vt - DMatrix::identity(r, r) * m as f64;
    let cross_norm = operator_norm(&cross)?;

    let mut max_diff: f64 = 0.0;
    let mut wvt_norms = Vec::with_capacity(m);
    let mut bound2 = Vec::with_capacity(m);
    for i in 0..m {
        let (vi, ti) = (truth.block(i), aligned.block(i));
        max_diff = max_diff.max(operator_norm(&(ti - vi))?);
        let wi = operator_norm(&wvt.rows(p.offset(i), p.dim(i)).into_owned())?;
        wvt_norms.push(wi);
        let inner = operator_norm(&(ti.transpose() * vi - DMatrix::identity(r, r)))?;
        bound2.push(wi + m as f64 * inner + cross_norm);
    }
    let wvt_max = wvt_norms.iter().copied().fold(0.0, f64::max);
    Ok(Lemma5Bounds { bound1: m as f64 * max_diff + wvt_max + cross_norm, bound2 })
}

#[derive(Debug, Clone, Serialize)]
pub struct Lemma7Bounds {
    /// Bound on `||Ṽ - V||_F`.
    pub b_global: f64,
    /// Bound on `max_i ||[W Ṽ]_i||_F`.
    pub b_wv: f64,
    /// Bound on `max_i ||Ṽ_i - V_i||_F`; infinite when `m <= 4||W|| sqrt r`.
    pub b_blockwise: f64,
    pub unbounded: bool,
}

pub fn lemma7_bounds(w: &BlockSymMatrix, truth: &GroundTruth) -> Result<Lemma7Bounds> {
    if w.partition() != truth.partition() {
        return Err(OtsmError::PartitionMismatch);
    }
    let p = w.partition();
    let (m, r) = (p.num_blocks() as f64, p.rank() as f64);
    let w_norm = w.operator_norm()?;
    let b_wv = max_block_frobenius(w, &truth.stacked()) + 4.0 * w_norm * w_norm * (r / m).sqrt();
    let denominator = m - 4.0 * w_norm * r.sqrt();
    let unbounded = denominator <= 0.0;
    Ok(Lemma7Bounds {
        b_global: 4.0 * w_norm * (r / m).sqrt(),
        b_wv,
        b_blockwise: if unbounded { f64::INFINITY } else { 2.0 * (b_wv + r.sqrt()) / denominator },
        unbounded,
    })
}

/// Observed counterparts of the bounds above for an aligned stack.
#[derive(Debug, Clone, Serialize)]
pub struct PerturbationObserved {
    pub global_error: f64,
    pub blockwise_error: f64,
    pub wv_block_max: f64,
    pub t1_gap: f64,
    pub lambda_gaps: Vec<f64>,
}

pub fn observed_perturbation(
    w: &BlockSymMatrix,
    truth: &GroundTruth,
    aligned: &StiefelStack,
    decomp: &Decomposition,
) -> Result<PerturbationObserved> {
    let p = w.partition();
    let m = p.num_blocks();
    let r = p.rank();
    let diff = aligned.stacked() - truth.stacked();
    let blockwise_error = (0..m)
        .map(|i| diff.rows(p.offset(i), p.dim(i)).norm())
        .fold(0.0, f64::max);
    let t1_gap = operator_norm(&(clean_certificate(truth).entries() - decomp.t1.entries()))?;
    let lambda_gaps = decomp
        .lambda
        .iter()
        .map(|l| operator_norm(&(l - DMatrix::identity(r, r) * (m as f64 - 1.0))))
        .collect::<Result<Vec<_>>>()?;
    Ok(PerturbationObserved {
        global_error: diff.norm(),
        blockwise_error,
        wv_block_max: max_block_frobenius(w, &aligned.stacked()),
        t1_gap,
        lambda_gaps,
    })
}
