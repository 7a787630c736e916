//! Block-partitioned dense symmetric matrices and the spectral primitives
//! built on top of them.
//!
//! A [`BlockPartition`] splits `0..D` into `m` consecutive ranges of sizes
//! `d_1, ..., d_m` and carries the common frame rank `r`. A
//! [`BlockSymMatrix`] is a dense `D x D` symmetric matrix addressed through
//! such a partition. Everything is dense: the coupling matrices in this crate
//! are dense by construction.

use std::ops::Range;

use nalgebra::{DMatrix, DMatrixView, DVector, SymmetricEigen, QR, SVD};

use crate::config::Tolerances;
use crate::error::{OtsmError, Result};

/// Iteration cap for the symmetric QR algorithm, per unit of dimension.
const EIG_ITERS_PER_DIM: usize = 200;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    dims: Vec<usize>,
    rank: usize,
    offsets: Vec<usize>,
    total: usize,
}

impl BlockPartition {
    pub fn new(dims: Vec<usize>, rank: usize) -> Result<Self> {
        if dims.len() < 2 {
            return Err(OtsmError::InvalidPartition(format!(
                "need at least two blocks, got {}",
                dims.len()
            )));
        }
        if rank == 0 {
            return Err(OtsmError::InvalidPartition("rank r must be positive".into()));
        }
        if let Some((i, &d)) = dims.iter().enumerate().find(|(_, &d)| d < rank) {
            return Err(OtsmError::InvalidPartition(format!(
                "block {i} has d_i = {d} < r = {rank}; every block needs d_i >= r"
            )));
        }
        let mut offsets = Vec::with_capacity(dims.len());
        let mut total = 0;
        for &d in &dims {
            offsets.push(total);
            total += d;
        }
        Ok(BlockPartition {
            dims,
            rank,
            offsets,
            total,
        })
    }

    /// `m` blocks of equal size `d`.
    pub fn uniform(m: usize, d: usize, rank: usize) -> Result<Self> {
        Self::new(vec![d; m], rank)
    }

    pub fn num_blocks(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dim(&self, i: usize) -> usize {
        self.dims[i]
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// `D = sum_i d_i`.
    pub fn total_dim(&self) -> usize {
        self.total
    }

    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    pub fn range(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i] + self.dims[i]
    }
}

/// Dense `D x D` symmetric matrix with a block partition.
///
/// Every constructor leaves the entries exactly symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSymMatrix {
    partition: BlockPartition,
    entries: DMatrix<f64>,
}

impl BlockSymMatrix {
    pub fn zeros(partition: &BlockPartition) -> Self {
        let n = partition.total_dim();
        BlockSymMatrix {
            partition: partition.clone(),
            entries: DMatrix::zeros(n, n),
        }
    }

    /// Wraps `(A + A^T) / 2`.
    pub fn symmetrize(partition: &BlockPartition, a: DMatrix<f64>) -> Result<Self> {
        let n = partition.total_dim();
        if a.nrows() != n || a.ncols() != n {
            return Err(OtsmError::dims(
                format!("{n}x{n}"),
                format!("{}x{}", a.nrows(), a.ncols()),
            ));
        }
        Ok(BlockSymMatrix {
            partition: partition.clone(),
            entries: symmetric_part(&a),
        })
    }

    /// Builds the matrix from its upper block triangle. `block(i, j)` is called
    /// for `i <= j` and must return a `d_i x d_j` matrix; lower blocks are the
    /// transposes and diagonal blocks are symmetrized.
    pub fn from_upper_blocks<F>(partition: &BlockPartition, mut block: F) -> Result<Self>
    where
        F: FnMut(usize, usize) -> DMatrix<f64>,
    {
        let mut out = Self::zeros(partition);
        let m = partition.num_blocks();
        for i in 0..m {
            for j in i..m {
                let b = block(i, j);
                let (di, dj) = (partition.dim(i), partition.dim(j));
                if b.nrows() != di || b.ncols() != dj {
                    return Err(OtsmError::dims(
                        format!("block ({i},{j}) of {di}x{dj}"),
                        format!("{}x{}", b.nrows(), b.ncols()),
                    ));
                }
                let (oi, oj) = (partition.offset(i), partition.offset(j));
                if i == j {
                    let s = symmetric_part(&b);
                    out.entries.view_mut((oi, oj), (di, dj)).copy_from(&s);
                } else {
                    out.entries.view_mut((oi, oj), (di, dj)).copy_from(&b);
                    out.entries
                        .view_mut((oj, oi), (dj, di))
                        .copy_from(&b.transpose());
                }
            }
        }
        Ok(out)
    }

    pub fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_entries(self) -> DMatrix<f64> {
        self.entries
    }

    /// The `d_i x d_j` block at `(i, j)`.
    pub fn block(&self, i: usize, j: usize) -> DMatrixView<'_, f64> {
        let p = &self.partition;
        self.entries
            .view((p.offset(i), p.offset(j)), (p.dim(i), p.dim(j)))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.norm()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.amax()
    }

    pub fn spectral_decomp(&self) -> Result<SpectralDecomp> {
        spectral_decomp(&self.entries)
    }

    /// Largest absolute eigenvalue.
    pub fn operator_norm(&self) -> Result<f64> {
        let dec = self.spectral_decomp()?;
        Ok(dec.values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs())))
    }

    pub fn leading_eigvecs(&self, k: usize) -> Result<DMatrix<f64>> {
        leading_eigvecs(&self.entries, k)
    }

    /// Frobenius-nearest positive semidefinite matrix.
    pub fn proj_psd(&self) -> Result<BlockSymMatrix> {
        Ok(BlockSymMatrix {
            partition: self.partition.clone(),
            entries: proj_psd(&self.entries)?,
        })
    }

    /// Applies `f` to every entry pair of `self` and `other`.
    pub fn zip_map(&self, other: &BlockSymMatrix, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.partition != other.partition {
            return Err(OtsmError::PartitionMismatch);
        }
        Ok(BlockSymMatrix {
            partition: self.partition.clone(),
            entries: self.entries.zip_map(&other.entries, f),
        })
    }

    pub(crate) fn from_symmetric_unchecked(partition: &BlockPartition, entries: DMatrix<f64>) -> Self {
        debug_assert!(is_symmetric(&entries, Tolerances::DEFAULT.symmetry));
        BlockSymMatrix {
            partition: partition.clone(),
            entries,
        }
    }
}

/// Eigenvalues in descending order with matching orthonormal eigenvectors.
#[derive(Debug, Clone)]
pub struct SpectralDecomp {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SpectralDecomp {
    pub fn min(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn max(&self) -> f64 {
        self.values[0]
    }

    /// `Q diag(f(lambda)) Q^T`, symmetrized.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        self.reconstruct_indexed(|k| f(self.values[k]))
    }

    /// `Q diag(x) Q^T` for replacement eigenvalues `x`.
    pub fn reconstruct_with_values(&self, x: &[f64]) -> DMatrix<f64> {
        self.reconstruct_indexed(|k| x[k])
    }

    fn reconstruct_indexed(&self, x: impl Fn(usize) -> f64) -> DMatrix<f64> {
        let mut scaled = self.vectors.clone();
        for (k, mut col) in scaled.column_iter_mut().enumerate() {
            col *= x(k);
        }
        symmetric_part(&(scaled * self.vectors.transpose()))
    }
}

/// `(A + A^T) / 2`; exactly symmetric.
pub fn symmetric_part(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = DMatrix::zeros(n, n);
    for j in 0..n {
        out[(j, j)] = a[(j, j)];
        for i in j + 1..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

pub fn is_symmetric(a: &DMatrix<f64>, rel_tol: f64) -> bool {
    if !a.is_square() {
        return false;
    }
    let scale = 1.0 + a.amax();
    let n = a.nrows();
    (0..n).all(|j| (j + 1..n).all(|i| (a[(i, j)] - a[(j, i)]).abs() <= rel_tol * scale))
}

/// Symmetric eigendecomposition, eigenvalues sorted in descending order.
///
/// Only the lower triangle of `a` is read.
pub fn spectral_decomp(a: &DMatrix<f64>) -> Result<SpectralDecomp> {
    let n = a.nrows();
    if !a.is_square() {
        return Err(OtsmError::dims(
            "square matrix",
            format!("{}x{}", a.nrows(), a.ncols()),
        ));
    }
    if n == 0 {
        return Ok(SpectralDecomp {
            values: DVector::zeros(0),
            vectors: DMatrix::zeros(0, 0),
        });
    }
    let eig = SymmetricEigen::try_new(a.clone(), f64::EPSILON, EIG_ITERS_PER_DIM * n.max(1))
        .ok_or(OtsmError::EigenFailure(n))?;
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(OtsmError::EigenFailure(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&p, &q| eig.eigenvalues[q].total_cmp(&eig.eigenvalues[p]));
    let values = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(SpectralDecomp { values, vectors })
}

/// Largest singular value of an arbitrary rectangular matrix.
pub fn operator_norm(a: &DMatrix<f64>) -> Result<f64> {
    if a.is_empty() {
        return Ok(0.0);
    }
    if a.is_square() && is_symmetric(a, 0.0) {
        let dec = spectral_decomp(a)?;
        return Ok(dec.max().abs().max(dec.min().abs()));
    }
    let (r, c) = a.shape();
    let svd = SVD::try_new(a.clone(), false, false, f64::EPSILON, 0).ok_or(OtsmError::SvdFailure(r, c))?;
    Ok(svd.singular_values.max())
}

/// Eigenvectors of the `k` largest eigenvalues, as `D x k` orthonormal columns.
pub fn leading_eigvecs(a: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    if k > a.nrows() {
        return Err(OtsmError::dims(format!("k <= {}", a.nrows()), k));
    }
    let dec = spectral_decomp(a)?;
    Ok(dec.vectors.columns(0, k).into_owned())
}

pub fn proj_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(spectral_decomp(a)?.reconstruct_with(|v| v.max(0.0)))
}

/// Frobenius projection of a symmetric `d x d` block onto
/// `{B = B^T : B <= I, tr B = r}`.
///
/// The eigenvalues are moved to `min(1, lambda_k + t)` with the shift `t`
/// found by bisection on the (monotone) trace equation.
pub fn proj_block_cap(a: &DMatrix<f64>, r: usize) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    if r > d {
        return Err(OtsmError::InvalidConfig(format!(
            "capped projection needs r <= d, got r = {r}, d = {d}"
        )));
    }
    let dec = spectral_decomp(a)?;
    let x = cap_simplex_values(dec.values.as_slice(), r as f64, Tolerances::DEFAULT.bisection);
    Ok(dec.reconstruct_with_values(&x))
}

/// Euclidean projection of `lambda` onto `{x : x_k <= 1, sum x = target}`.
pub(crate) fn cap_simplex_values(lambda: &[f64], target: f64, tol: f64) -> Vec<f64> {
    let d = lambda.len();
    let trace = |t: f64| lambda.iter().map(|&l| (l + t).min(1.0)).sum::<f64>();
    let lmax = lambda.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lmin = lambda.iter().copied().fold(f64::INFINITY, f64::min);
    let mut lo = target / d as f64 - lmax - 1.0;
    let mut hi = 1.0 - lmin;
    let mut t = 0.5 * (lo + hi);
    for _ in 0..400 {
        t = 0.5 * (lo + hi);
        let f = trace(t);
        if (f - target).abs() <= tol {
            break;
        }
        if f < target {
            lo = t;
        } else {
            hi = t;
        }
        if hi - lo <= f64::EPSILON * (1.0 + t.abs()) {
            break;
        }
    }
    // Solve exactly on the linear piece the bisection landed on.
    let capped: Vec<bool> = lambda.iter().map(|&l| l + t >= 1.0).collect();
    let n_capped = capped.iter().filter(|&&c| c).count();
    if n_capped < d {
        let free_sum: f64 = lambda
            .iter()
            .zip(&capped)
            .filter(|(_, &c)| !c)
            .map(|(&l, _)| l)
            .sum();
        let t_exact = (target - n_capped as f64 - free_sum) / (d - n_capped) as f64;
        let consistent = lambda.iter().zip(&capped).all(|(&l, &c)| {
            if c {
                l + t_exact >= 1.0 - tol
            } else {
                l + t_exact <= 1.0 + tol
            }
        });
        if consistent {
            t = t_exact;
        }
    }
    lambda.iter().map(|&l| (l + t).min(1.0)).collect()
}

/// Orthogonal projector `B B^T` onto the span of an orthonormal frame.
pub fn proj_span(b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_orthonormal(b, Tolerances::DEFAULT.orthonormal)?;
    Ok(symmetric_part(&(b * b.transpose())))
}

/// `I - B B^T`.
pub fn proj_span_perp(b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = proj_span(b)?;
    Ok(DMatrix::identity(p.nrows(), p.ncols()) - p)
}

pub fn check_orthonormal(b: &DMatrix<f64>, tol: f64) -> Result<()> {
    let k = b.ncols();
    let residual = (b.transpose() * b - DMatrix::<f64>::identity(k, k)).norm();
    if residual > tol {
        return Err(OtsmError::NotOrthonormal { residual });
    }
    Ok(())
}

/// Orthonormal basis (`n x (n - k)`) of the orthogonal complement of the
/// column space of a full-column-rank `n x k` matrix, via a full Householder QR.
pub fn orthonormal_complement(b: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, k) = b.shape();
    let qr = QR::new(b.clone());
    let mut q_t = DMatrix::<f64>::identity(n, n);
    qr.q_tr_mul(&mut q_t);
    q_t.rows(k, n - k).transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    fn random_sym(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        symmetric_part(&gaussian(rng, n, n))
    }

    fn pair() -> BlockPartition {
        BlockPartition::new(vec![1, 1], 1).unwrap()
    }

    #[test]
    fn partition_invariants() {
        let p = BlockPartition::new(vec![3, 2, 4], 2).unwrap();
        assert_eq!(p.total_dim(), 9);
        assert_eq!(p.range(2), 5..9);
        assert!(BlockPartition::new(vec![3], 1).is_err());
        assert!(BlockPartition::new(vec![1, 3], 2).is_err());
        assert!(BlockPartition::new(vec![2, 2], 0).is_err());
    }

    #[test]
    fn symmetrize_examples() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        let s = BlockSymMatrix::symmetrize(&pair(), a).unwrap();
        assert_eq!(s.entries(), &DMatrix::from_element(2, 2, 1.0));

        let fixed = DMatrix::from_row_slice(2, 2, &[3.0, -1.0, -1.0, 2.0]);
        let s = BlockSymMatrix::symmetrize(&pair(), fixed.clone()).unwrap();
        assert_eq!(s.entries(), &fixed);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = BlockPartition::uniform(3, 2, 1).unwrap();
        let a = gaussian(&mut rng, 6, 6);
        let s = BlockSymMatrix::symmetrize(&p, a.clone()).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(s.entries()[(i, j)], s.entries()[(j, i)]);
                assert_eq!(s.entries()[(i, j)], 0.5 * (a[(i, j)] + a[(j, i)]));
            }
        }
        assert!(BlockSymMatrix::symmetrize(&p, DMatrix::zeros(5, 5)).is_err());
    }

    #[test]
    fn block_accessor_uses_offsets() {
        let p = BlockPartition::new(vec![1, 2], 1).unwrap();
        let a = DMatrix::from_fn(3, 3, |i, j| (i * 3 + j) as f64);
        let s = BlockSymMatrix::symmetrize(&p, a).unwrap();
        let b = s.block(0, 1);
        assert_eq!(b.shape(), (1, 2));
        assert_eq!(b[(0, 0)], s.entries()[(0, 1)]);
        assert_eq!(b[(0, 1)], s.entries()[(0, 2)]);
    }

    #[test]
    fn spectral_examples() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0, 2.0]));
        let dec = spectral_decomp(&a).unwrap();
        assert_eq!(dec.values.as_slice(), &[3.0, 2.0, 1.0]);

        let dec = spectral_decomp(&DMatrix::identity(4, 4)).unwrap();
        assert!(dec.values.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        check_orthonormal(&dec.vectors, 1e-12).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_sym(&mut rng, 8);
        let dec = spectral_decomp(&a).unwrap();
        let recon = &dec.vectors * DMatrix::from_diagonal(&dec.values) * dec.vectors.transpose();
        assert!((recon - &a).norm() <= 1e-9);
        assert!(dec.values.as_slice().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn spectral_residual_up_to_200() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1, 5, 50, 200] {
            let a = random_sym(&mut rng, n);
            let dec = spectral_decomp(&a).unwrap();
            let aq = &a * &dec.vectors;
            let ql = &dec.vectors * DMatrix::from_diagonal(&dec.values);
            assert!((aq - ql).norm() <= 1e-9 * (1.0 + a.norm()), "n = {n}");
        }
    }

    #[test]
    fn operator_norm_examples() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![-5.0, 2.0]));
        assert_eq!(operator_norm(&a).unwrap(), 5.0);
        let s = BlockSymMatrix::symmetrize(&pair(), a).unwrap();
        assert_eq!(s.operator_norm().unwrap(), 5.0);
        assert_eq!(operator_norm(&DMatrix::zeros(3, 4)).unwrap(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = gaussian(&mut rng, 5, 3);
        let gram = a.transpose() * &a;
        let oracle = spectral_decomp(&gram).unwrap().max().sqrt();
        assert!((operator_norm(&a).unwrap() - oracle).abs() <= 1e-12 * oracle);
    }

    #[test]
    fn leading_eigvec_examples() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0, 0.0]));
        let v = leading_eigvecs(&a, 1).unwrap();
        assert!((v[(0, 0)].abs() - 1.0).abs() < 1e-15);
        assert!(v[(1, 0)].abs() < 1e-15 && v[(2, 0)].abs() < 1e-15);

        let v = leading_eigvecs(&DMatrix::identity(3, 3), 2).unwrap();
        check_orthonormal(&v, 1e-10).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_sym(&mut rng, 10);
        let full = spectral_decomp(&a).unwrap();
        let v = leading_eigvecs(&a, 3).unwrap();
        check_orthonormal(&v, 1e-10).unwrap();
        for k in 0..3 {
            let col = v.column(k);
            let rq = (col.transpose() * &a * col)[(0, 0)];
            assert!((rq - full.values[k]).abs() <= 1e-9);
        }
        assert!(leading_eigvecs(&a, 11).is_err());
    }

    #[test]
    fn proj_psd_examples() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, -1.0]));
        let p = proj_psd(&a).unwrap();
        assert!((p - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0]))).norm() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = gaussian(&mut rng, 5, 5);
        let psd = &g * g.transpose();
        assert!((proj_psd(&psd).unwrap() - &psd).norm() <= 1e-10 * (1.0 + psd.norm()));

        // variational inequality <A - P, Z - P> <= 0 for PSD Z
        let a = random_sym(&mut rng, 6);
        let p = proj_psd(&a).unwrap();
        for _ in 0..100 {
            let g = gaussian(&mut rng, 6, 3);
            let z = &g * g.transpose();
            assert!((&a - &p).dot(&(z - &p)) <= 1e-10);
        }
    }

    #[test]
    fn proj_block_cap_examples() {
        let p = proj_block_cap(&DMatrix::identity(2, 2), 1).unwrap();
        assert!((p - DMatrix::identity(2, 2) * 0.5).norm() < 1e-12);

        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 0.0]));
        let p = proj_block_cap(&a, 1).unwrap();
        assert!((p - DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]))).norm() < 1e-12);

        let p = proj_block_cap(&DMatrix::zeros(3, 3), 2).unwrap();
        assert!((p - DMatrix::identity(3, 3) * (2.0 / 3.0)).norm() < 1e-12);

        assert!(proj_block_cap(&DMatrix::zeros(1, 1), 2).is_err());
    }

    #[test]
    fn proj_block_cap_feasible_and_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..50 {
            let d = 1 + trial % 5;
            let r = 1 + trial % d;
            let a = random_sym(&mut rng, d) * 3.0;
            let p = proj_block_cap(&a, r).unwrap();
            let dec = spectral_decomp(&p).unwrap();
            assert!(dec.max() <= 1.0 + 1e-9);
            assert!((p.trace() - r as f64).abs() <= 1e-9);
            let pp = proj_block_cap(&p, r).unwrap();
            assert!((pp - &p).norm() <= 1e-9);
        }
    }

    #[test]
    fn proj_span_examples() {
        let e1 = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let p = proj_span(&e1).unwrap();
        assert_eq!(p, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        let q = proj_span_perp(&e1).unwrap();
        assert_eq!(p + q, DMatrix::identity(2, 2));

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let frame = QR::new(gaussian(&mut rng, 7, 3)).q();
        let p = proj_span(&frame).unwrap();
        assert!((&p * &p - &p).norm() <= 1e-10);
        assert!((p.trace() - 3.0).abs() <= 1e-10);

        let bad = DMatrix::from_column_slice(2, 1, &[2.0, 0.0]);
        assert!(matches!(proj_span(&bad), Err(OtsmError::NotOrthonormal { .. })));
    }

    #[test]
    fn complement_is_orthonormal_and_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = gaussian(&mut rng, 9, 3);
        let c = orthonormal_complement(&b);
        assert_eq!(c.shape(), (9, 6));
        check_orthonormal(&c, 1e-12).unwrap();
        assert!((b.transpose() * &c).norm() <= 1e-12 * b.norm());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn sym_matrix(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
            proptest::collection::vec(-5.0..5.0f64, n * n)
                .prop_map(move |v| symmetric_part(&DMatrix::from_vec(n, n, v)))
        }

        proptest! {
            #[test]
            fn psd_projection_idempotent_nonexpansive(a in sym_matrix(5), b in sym_matrix(5)) {
                let pa = proj_psd(&a).unwrap();
                let pb = proj_psd(&b).unwrap();
                prop_assert!((proj_psd(&pa).unwrap() - &pa).norm() <= 1e-9);
                prop_assert!((&pa - &pb).norm() <= (&a - &b).norm() + 1e-9);
            }

            #[test]
            fn cap_projection_idempotent_nonexpansive(a in sym_matrix(4), b in sym_matrix(4), r in 1usize..=4) {
                let pa = proj_block_cap(&a, r).unwrap();
                let pb = proj_block_cap(&b, r).unwrap();
                prop_assert!((proj_block_cap(&pa, r).unwrap() - &pa).norm() <= 1e-9);
                prop_assert!((&pa - &pb).norm() <= (&a - &b).norm() + 1e-9);
                prop_assert!(spectral_decomp(&pa).unwrap().max() <= 1.0 + 1e-9);
                prop_assert!((pa.trace() - r as f64).abs() <= 1e-9);
            }
        }
    }
}
