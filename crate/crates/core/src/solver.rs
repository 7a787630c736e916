//! Spectral initialization and cyclic block-coordinate ascent for
//! `max sum_{i != j} tr(O_i^T S_ij O_j)` over stacks of orthonormal frames.
//!
//! With all other blocks fixed the objective is `2 tr(O_i^T G_i) + const`,
//! `G_i = sum_{j != i} S_ij O_j`, which the polar factor of `G_i` maximizes.
//! Sweeping `i = 1..m` therefore never decreases the objective, and the fixed
//! points satisfy `G_i = O_i Lambda_i` with `Lambda_i` symmetric PSD.

use nalgebra::{DMatrix, DVector, SVD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blockmat::{leading_eigvecs, symmetric_part, BlockSymMatrix};
use crate::config::Tolerances;
use crate::error::{OtsmError, Result};
use crate::model::{random_stiefel, GroundTruth, ProblemInstance, StiefelStack};

/// Consecutive stalled sweeps (no objective progress and no new best
/// stationarity) after which the solver gives up.
const STALL_SWEEPS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Spectral,
    Truth,
    Random(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateOrder {
    Ascending,
    /// A fresh permutation per sweep drawn from the given seed.
    Shuffled(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_sweeps: usize,
    pub obj_tol: f64,
    pub stat_tol: f64,
    pub init: Init,
    pub order: UpdateOrder,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_sweeps: 500,
            obj_tol: 1e-10,
            stat_tol: 1e-8,
            init: Init::Spectral,
            order: UpdateOrder::Ascending,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_sweeps == 0 {
            return Err(OtsmError::InvalidConfig("max_sweeps must be at least 1".into()));
        }
        if !(self.obj_tol > 0.0) || !(self.stat_tol > 0.0) {
            return Err(OtsmError::InvalidConfig("tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SolverResult {
    pub stack: StiefelStack,
    pub objective: f64,
    /// Objective after each sweep.
    pub trajectory: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
    pub stationarity: f64,
}

impl SolverResult {
    /// Largest relative decrease between consecutive trajectory entries
    /// (zero for a monotone trajectory).
    pub fn max_relative_decrease(&self) -> f64 {
        self.trajectory
            .windows(2)
            .map(|w| (w[0] - w[1]) / (1.0 + w[0].abs()))
            .fold(0.0, f64::max)
    }
}

fn check_partition(s: &BlockSymMatrix, o: &StiefelStack) -> Result<()> {
    if s.partition() != o.partition() {
        return Err(OtsmError::PartitionMismatch);
    }
    Ok(())
}

/// `tr(O^T S O)`, which equals the off-diagonal block sum since `S_ii = 0`.
pub fn objective(s: &BlockSymMatrix, o: &StiefelStack) -> Result<f64> {
    check_partition(s, o)?;
    let stacked = o.stacked();
    let so = s.entries() * &stacked;
    Ok(stacked.dot(&so))
}

/// `max_i ||[S O]_i - O_i sym(O_i^T [S O]_i)||_F`.
pub fn stationarity(s: &BlockSymMatrix, o: &StiefelStack) -> Result<f64> {
    check_partition(s, o)?;
    let p = s.partition();
    let so = s.entries() * o.stacked();
    Ok((0..p.num_blocks())
        .map(|i| {
            let g = so.rows(p.offset(i), p.dim(i));
            let oi = o.block(i);
            let lambda = symmetric_part(&(oi.transpose() * g));
            (g - oi * lambda).norm()
        })
        .fold(0.0, f64::max))
}

/// Orthonormal polar factor `A B^T` of `M = A Sigma B^T` (`d x r`, `d >= r`).
///
/// When `M` is rank deficient the missing singular pairs are completed
/// deterministically: Gram-Schmidt over the standard basis in index order on
/// both sides, each new vector signed so its largest-magnitude entry is
/// positive, paired in the order produced.
pub fn polar_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (d, r) = m.shape();
    if d < r {
        return Err(OtsmError::dims(format!("rows >= {r}"), d));
    }
    let svd = SVD::try_new(m.clone(), true, true, f64::EPSILON, 0)
        .ok_or(OtsmError::SvdFailure(d, r))?;
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let smax = svd.singular_values.max();
    let cutoff = Tolerances::DEFAULT.polar_rank * smax;
    let kept: Vec<usize> = (0..r)
        .filter(|&k| smax > 0.0 && svd.singular_values[k] > cutoff)
        .collect();
    if kept.len() == r {
        return Ok(u * v_t);
    }

    let left: Vec<DVector<f64>> = kept.iter().map(|&k| u.column(k).into_owned()).collect();
    let right: Vec<DVector<f64>> = kept
        .iter()
        .map(|&k| v_t.row(k).transpose().into_owned())
        .collect();
    let missing = r - kept.len();
    let left_fill = complete_basis(&left, d, missing);
    let right_fill = complete_basis(&right, r, missing);

    let mut out = DMatrix::zeros(d, r);
    for (a, b) in left.iter().chain(&left_fill).zip(right.iter().chain(&right_fill)) {
        out += a * b.transpose();
    }
    Ok(out)
}

/// `count` unit vectors orthogonal to `basis` (and to each other), from
/// Gram-Schmidt on `e_1, e_2, ...`.
fn complete_basis(basis: &[DVector<f64>], n: usize, count: usize) -> Vec<DVector<f64>> {
    let mut all: Vec<DVector<f64>> = basis.to_vec();
    let mut added = Vec::with_capacity(count);
    for k in 0..n {
        if added.len() == count {
            break;
        }
        let mut v = DVector::zeros(n);
        v[k] = 1.0;
        for _ in 0..2 {
            for b in &all {
                let c = b.dot(&v);
                v.axpy(-c, b, 1.0);
            }
        }
        let norm = v.norm();
        if norm > 1e-8 {
            v /= norm;
            let lead = v.iamax();
            if v[lead] < 0.0 {
                v.neg_mut();
            }
            all.push(v.clone());
            added.push(v);
        }
    }
    added
}

/// Top-`r` eigenvectors of `S`, scaled by `sqrt(m)` and rounded blockwise to
/// the nearest orthonormal frames.
pub fn spectral_init(instance: &ProblemInstance) -> Result<StiefelStack> {
    let p = instance.partition();
    let phi = leading_eigvecs(instance.coupling().entries(), p.rank())?
        * (p.num_blocks() as f64).sqrt();
    let blocks = (0..p.num_blocks())
        .map(|i| polar_factor(&phi.rows(p.offset(i), p.dim(i)).into_owned()))
        .collect::<Result<Vec<_>>>()?;
    Ok(StiefelStack::new_unchecked(p, blocks))
}

/// One pass of `O_i <- polar(sum_{j != i} S_ij O_j)` for `i = 0..m` in order,
/// each update seeing the blocks already refreshed in this pass.
pub fn bca_sweep(s: &BlockSymMatrix, o: &StiefelStack) -> Result<StiefelStack> {
    let order: Vec<usize> = (0..o.partition().num_blocks()).collect();
    bca_sweep_ordered(s, o, &order)
}

pub fn bca_sweep_ordered(s: &BlockSymMatrix, o: &StiefelStack, order: &[usize]) -> Result<StiefelStack> {
    check_partition(s, o)?;
    let p = s.partition();
    let mut stacked = o.stacked();
    for &i in order {
        let (off, d) = (p.offset(i), p.dim(i));
        // S_ii = 0, so the full block row times the stack is the neighbour sum.
        let g = s.entries().rows(off, d) * &stacked;
        let oi = polar_factor(&g)?;
        stacked.rows_mut(off, d).copy_from(&oi);
    }
    let blocks = (0..p.num_blocks())
        .map(|i| stacked.rows(p.offset(i), p.dim(i)).into_owned())
        .collect();
    Ok(StiefelStack::new_unchecked(p, blocks))
}

pub fn solve(instance: &ProblemInstance, config: &SolverConfig) -> Result<SolverResult> {
    config.validate()?;
    let p = instance.partition();
    let s = instance.coupling();
    let mut o = match config.init {
        Init::Spectral => spectral_init(instance)?,
        Init::Truth => instance
            .truth()
            .ok_or_else(|| OtsmError::InvalidConfig("truth initialization needs a ground truth".into()))?
            .stack()
            .clone(),
        Init::Random(seed) => random_stiefel(p, seed).stack().clone(),
    };
    let mut order: Vec<usize> = (0..p.num_blocks()).collect();
    let mut shuffle_rng = match config.order {
        UpdateOrder::Ascending => None,
        UpdateOrder::Shuffled(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
    };

    let mut f = objective(s, &o)?;
    let mut best_stat = stationarity(s, &o)?;
    let mut stat = best_stat;
    let mut trajectory = Vec::new();
    let mut stalled = 0;
    for _ in 0..config.max_sweeps {
        if let Some(rng) = shuffle_rng.as_mut() {
            order.shuffle(rng);
        }
        o = bca_sweep_ordered(s, &o, &order)?;
        let f_new = objective(s, &o)?;
        stat = stationarity(s, &o)?;
        trajectory.push(f_new);
        let rel_gain = (f_new - f) / f.abs().max(1.0);
        f = f_new;
        if stat <= config.stat_tol {
            break;
        }
        if rel_gain < config.obj_tol && stat >= best_stat {
            stalled += 1;
            if stalled >= STALL_SWEEPS {
                break;
            }
        } else {
            stalled = 0;
        }
        best_stat = best_stat.min(stat);
    }
    Ok(SolverResult {
        objective: f,
        sweeps: trajectory.len(),
        converged: stat <= config.stat_tol,
        stationarity: stat,
        trajectory,
        stack: o,
    })
}

/// Right-multiplies `O` by the orthogonal Procrustes factor of `V^T O` so that
/// `V^T O Q` is symmetric positive semidefinite.
pub fn align(truth: &GroundTruth, o: &StiefelStack) -> Result<StiefelStack> {
    if truth.partition() != o.partition() {
        return Err(OtsmError::PartitionMismatch);
    }
    let r = o.partition().rank();
    let mut cross = DMatrix::zeros(r, r);
    for (v, b) in truth.stack().blocks().iter().zip(o.blocks()) {
        cross += v.transpose() * b;
    }
    // polar(M^T) = B A^T for M = A Sigma B^T
    let q = polar_factor(&cross.transpose())?;
    Ok(o.right_mul(&q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockmat::{spectral_decomp, BlockPartition};
    use crate::model::{assemble, canonical_stiefel, sample_noise};
    use nalgebra::QR;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    fn random_frame(rng: &mut ChaCha8Rng, d: usize, r: usize) -> DMatrix<f64> {
        QR::new(gaussian(rng, d, r)).q()
    }

    fn clean(m: usize, d: usize, r: usize, seed: u64) -> ProblemInstance {
        let p = BlockPartition::uniform(m, d, r).unwrap();
        ProblemInstance::generate(&p, 0.0, seed).unwrap()
    }

    fn gram_gap(a: &StiefelStack, b: &StiefelStack) -> f64 {
        let (x, y) = (a.stacked(), b.stacked());
        (&x * x.transpose() - &y * y.transpose()).norm()
    }

    #[test]
    fn objective_examples() {
        let inst = clean(5, 3, 2, 1);
        let v = inst.truth().unwrap().stack();
        let f = objective(inst.coupling(), v).unwrap();
        assert!((f - (5 * 4 * 2) as f64).abs() < 1e-11);

        let p = BlockPartition::uniform(2, 1, 1).unwrap();
        let s = BlockSymMatrix::symmetrize(&p, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]))
            .unwrap();
        let o = StiefelStack::new(
            &p,
            vec![DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, -1.0)],
        )
        .unwrap();
        assert_eq!(objective(&s, &o).unwrap(), -2.0);
    }

    #[test]
    fn objective_matches_block_double_sum() {
        let p = BlockPartition::new(vec![3, 2, 4, 2], 2).unwrap();
        let inst = ProblemInstance::generate(&p, 0.7, 3).unwrap();
        let o = random_stiefel(&p, 99);
        let mut brute = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    brute += (o.block(i).transpose() * inst.coupling().block(i, j) * o.block(j)).trace();
                }
            }
        }
        let f = objective(inst.coupling(), o.stack()).unwrap();
        assert!((f - brute).abs() <= 1e-12 * (1.0 + brute.abs()));
    }

    #[test]
    fn polar_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q0 = random_frame(&mut rng, 5, 3);
        assert!((polar_factor(&(&q0 * 5.0)).unwrap() - &q0).norm() < 1e-12);
        assert!((polar_factor(&DMatrix::identity(3, 3)).unwrap() - DMatrix::identity(3, 3)).norm() < 1e-15);

        let deficient = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(polar_factor(&deficient).unwrap(), DMatrix::identity(2, 2));

        // all-zero input completes to [I; 0]
        assert_eq!(polar_factor(&DMatrix::zeros(3, 2)).unwrap(), DMatrix::identity(3, 2));
    }

    #[test]
    fn polar_beats_random_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (d, r) in [(3, 3), (5, 2), (4, 1)] {
            let m = gaussian(&mut rng, d, r);
            let best = (polar_factor(&m).unwrap().transpose() * &m).trace();
            for _ in 0..1000 {
                let q = random_frame(&mut rng, d, r);
                assert!((q.transpose() * &m).trace() <= best + 1e-12);
            }
        }
    }

    #[test]
    fn spectral_init_recovers_clean_span() {
        for (m, d, r) in [(6, 2, 2), (5, 4, 2), (4, 3, 1)] {
            let inst = clean(m, d, r, 7);
            let o = spectral_init(&inst).unwrap();
            assert!(o.orthonormality_residual() <= 1e-9);
            assert!(gram_gap(&o, inst.truth().unwrap().stack()) <= 1e-6);
        }

        let p = BlockPartition::uniform(2, 1, 1).unwrap();
        let s = BlockSymMatrix::symmetrize(&p, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]))
            .unwrap();
        let o = spectral_init(&ProblemInstance::from_coupling(s)).unwrap();
        assert_eq!(o.block(0)[(0, 0)], o.block(1)[(0, 0)]);
        assert_eq!(o.block(0)[(0, 0)].abs(), 1.0);
    }

    #[test]
    fn truth_is_a_fixed_point_of_the_clean_sweep() {
        let inst = clean(6, 3, 2, 4);
        let v = inst.truth().unwrap().stack();
        let next = bca_sweep(inst.coupling(), v).unwrap();
        for i in 0..6 {
            assert!((next.block(i) - v.block(i)).norm() <= 1e-12);
        }
    }

    #[test]
    fn sweep_is_monotone_on_random_instances() {
        for seed in 0..100u64 {
            let m = 2 + (seed % 7) as usize;
            let d = 1 + (seed % 3) as usize;
            let r = 1 + (seed % d as u64) as usize;
            let p = BlockPartition::uniform(m, d, r).unwrap();
            let inst = ProblemInstance::generate(&p, 0.2 + (seed % 5) as f64 * 0.4, seed).unwrap();
            let mut o = random_stiefel(&p, seed + 1000).stack().clone();
            let mut f = objective(inst.coupling(), &o).unwrap();
            for _ in 0..5 {
                o = bca_sweep(inst.coupling(), &o).unwrap();
                let f_new = objective(inst.coupling(), &o).unwrap();
                assert!(f_new >= f - 1e-9 * (1.0 + f.abs()), "seed {seed}: {f} -> {f_new}");
                f = f_new;
            }
        }
    }

    #[test]
    fn two_blocks_converge_in_one_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for d in [1, 2, 3] {
            let p = BlockPartition::uniform(2, d, d).unwrap();
            let s12 = gaussian(&mut rng, d, d);
            let s = BlockSymMatrix::from_upper_blocks(&p, |i, j| {
                if i == j { DMatrix::zeros(d, d) } else { s12.clone() }
            })
            .unwrap();
            let inst = ProblemInstance::from_coupling(s);
            let config = SolverConfig { init: Init::Random(3), ..SolverConfig::default() };
            let res = solve(&inst, &config).unwrap();
            let nuclear: f64 = s12.singular_values().iter().sum();
            assert!((res.trajectory[0] - 2.0 * nuclear).abs() <= 1e-10 * nuclear);
            assert!(res.converged);
        }
    }

    #[test]
    fn solve_examples() {
        let inst = clean(8, 3, 2, 8);
        let res = solve(&inst, &SolverConfig::default()).unwrap();
        assert!(res.converged);
        assert!(gram_gap(&res.stack, inst.truth().unwrap().stack()) <= 1e-8);

        let p = BlockPartition::uniform(10, 2, 2).unwrap();
        let inst = ProblemInstance::generate(&p, 1e-6, 3).unwrap();
        let res = solve(&inst, &SolverConfig::default()).unwrap();
        assert!(res.converged && res.stationarity <= 1e-8);

        let inst = ProblemInstance::generate(&p, 0.8, 3).unwrap();
        let res = solve(&inst, &SolverConfig { max_sweeps: 1, ..SolverConfig::default() }).unwrap();
        assert_eq!(res.trajectory.len(), 1);
        assert_eq!(res.sweeps, 1);

        assert!(SolverConfig { max_sweeps: 0, ..SolverConfig::default() }.validate().is_err());
    }

    #[test]
    fn trajectories_are_monotone() {
        for seed in 0..20 {
            let p = BlockPartition::uniform(8, 3, 2).unwrap();
            let inst = ProblemInstance::generate(&p, 0.5 * (seed % 4) as f64, seed).unwrap();
            let res = solve(&inst, &SolverConfig { init: Init::Random(seed), ..SolverConfig::default() }).unwrap();
            assert!(res.max_relative_decrease() <= 1e-9);
        }
    }

    #[test]
    fn shuffled_order_is_reproducible() {
        let p = BlockPartition::uniform(6, 2, 2).unwrap();
        let inst = ProblemInstance::generate(&p, 0.3, 1).unwrap();
        let cfg = SolverConfig { order: UpdateOrder::Shuffled(9), ..SolverConfig::default() };
        let a = solve(&inst, &cfg).unwrap();
        let b = solve(&inst, &cfg).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        assert!(a.converged);
    }

    #[test]
    fn align_undoes_a_global_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = BlockPartition::uniform(5, 3, 2).unwrap();
        let v = random_stiefel(&p, 1);
        let q0 = random_frame(&mut rng, 2, 2);
        let rotated = v.stack().right_mul(&q0);
        let back = align(&v, &rotated).unwrap();
        for i in 0..5 {
            assert!((back.block(i) - v.block(i)).norm() <= 1e-10);
        }
    }

    #[test]
    fn align_contract_and_idempotence() {
        let p = BlockPartition::uniform(6, 3, 2).unwrap();
        let v = random_stiefel(&p, 2);
        let w = sample_noise(&p, 0.4, 2).unwrap();
        let inst = assemble(v.clone(), w).unwrap();
        let o = solve(&inst, &SolverConfig::default()).unwrap().stack;
        let a = align(&v, &o).unwrap();
        let cross = v.stacked().transpose() * a.stacked();
        assert!((&cross - cross.transpose()).norm() <= 1e-9);
        assert!(spectral_decomp(&symmetric_part(&cross)).unwrap().min() >= -1e-9);

        let nuclear: f64 = (v.stacked().transpose() * o.stacked()).singular_values().iter().sum();
        assert!((cross.trace() - nuclear).abs() <= 1e-9);

        let again = align(&v, &a).unwrap();
        for i in 0..6 {
            assert!((again.block(i) - a.block(i)).norm() <= 1e-10);
        }
    }

    #[test]
    fn truth_init_requires_truth() {
        let p = BlockPartition::uniform(3, 2, 1).unwrap();
        let inst = ProblemInstance::from_coupling(sample_noise(&p, 1.0, 0).unwrap());
        let cfg = SolverConfig { init: Init::Truth, ..SolverConfig::default() };
        assert!(solve(&inst, &cfg).is_err());
        let inst = assemble(canonical_stiefel(&p), BlockSymMatrix::zeros(&p)).unwrap();
        assert!(solve(&inst, &cfg).unwrap().converged);
    }
}
