//! Ground truth, noise and problem instances for the additive model
//! `S_ij = V_i V_j^T + W_ij` (`i != j`), `S_ii = 0`.
//!
//! Randomness comes from ChaCha20 keyed by the 64-bit seed. Every block owns
//! its own ChaCha stream, `stream = mix(tag, i, j)`, so a given block is
//! reproducible regardless of the order in which blocks are drawn. Gaussian
//! variates use the ziggurat sampler of `rand_distr::StandardNormal`.

mod format;
mod rng;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

pub use format::{export_text, load_instance, save_instance, FORMAT_MAJOR, FORMAT_MINOR, MAGIC};
pub use rng::{block_rng, mix_seed};

use crate::blockmat::{BlockPartition, BlockSymMatrix};
use crate::config::Tolerances;
use crate::error::{OtsmError, Result};

const TAG_TRUTH: u64 = 0x7472_7574_68;
const TAG_NOISE: u64 = 0x6e6f_6973_65;

/// Blocks `O_i` (`d_i x r`) with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelStack {
    partition: BlockPartition,
    blocks: Vec<DMatrix<f64>>,
}

impl StiefelStack {
    pub fn new(partition: &BlockPartition, blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        if blocks.len() != partition.num_blocks() {
            return Err(OtsmError::dims(
                format!("{} blocks", partition.num_blocks()),
                blocks.len(),
            ));
        }
        let r = partition.rank();
        for (i, b) in blocks.iter().enumerate() {
            if b.shape() != (partition.dim(i), r) {
                return Err(OtsmError::dims(
                    format!("block {i} of {}x{r}", partition.dim(i)),
                    format!("{}x{}", b.nrows(), b.ncols()),
                ));
            }
            let residual = (b.transpose() * b - DMatrix::<f64>::identity(r, r)).norm();
            if !(residual <= Tolerances::DEFAULT.stiefel) {
                return Err(OtsmError::NotOrthonormal { residual });
            }
        }
        Ok(StiefelStack {
            partition: partition.clone(),
            blocks,
        })
    }

    /// Splits a `D x r` matrix into blocks and validates them.
    pub fn from_stacked(partition: &BlockPartition, stacked: &DMatrix<f64>) -> Result<Self> {
        let (n, r) = (partition.total_dim(), partition.rank());
        if stacked.shape() != (n, r) {
            return Err(OtsmError::dims(
                format!("{n}x{r}"),
                format!("{}x{}", stacked.nrows(), stacked.ncols()),
            ));
        }
        let blocks = (0..partition.num_blocks())
            .map(|i| stacked.rows(partition.offset(i), partition.dim(i)).into_owned())
            .collect();
        Self::new(partition, blocks)
    }

    pub(crate) fn new_unchecked(partition: &BlockPartition, blocks: Vec<DMatrix<f64>>) -> Self {
        StiefelStack {
            partition: partition.clone(),
            blocks,
        }
    }

    pub fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> &DMatrix<f64> {
        &self.blocks[i]
    }

    pub fn into_blocks(self) -> Vec<DMatrix<f64>> {
        self.blocks
    }

    /// The `D x r` matrix with the blocks stacked vertically.
    pub fn stacked(&self) -> DMatrix<f64> {
        let p = &self.partition;
        let mut out = DMatrix::zeros(p.total_dim(), p.rank());
        for (i, b) in self.blocks.iter().enumerate() {
            out.rows_mut(p.offset(i), p.dim(i)).copy_from(b);
        }
        out
    }

    /// `max_i ||O_i^T O_i - I||_F`.
    pub fn orthonormality_residual(&self) -> f64 {
        let r = self.partition.rank();
        self.blocks
            .iter()
            .map(|b| (b.transpose() * b - DMatrix::<f64>::identity(r, r)).norm())
            .fold(0.0, f64::max)
    }

    /// Right-multiplies every block by the same `r x r` matrix.
    pub fn right_mul(&self, q: &DMatrix<f64>) -> StiefelStack {
        StiefelStack::new_unchecked(&self.partition, self.blocks.iter().map(|b| b * q).collect())
    }
}

/// The clean signal `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth(StiefelStack);

impl GroundTruth {
    pub fn new(stack: StiefelStack) -> Self {
        GroundTruth(stack)
    }

    pub fn stack(&self) -> &StiefelStack {
        &self.0
    }

    pub fn partition(&self) -> &BlockPartition {
        self.0.partition()
    }

    pub fn block(&self, i: usize) -> &DMatrix<f64> {
        self.0.block(i)
    }

    pub fn stacked(&self) -> DMatrix<f64> {
        self.0.stacked()
    }
}

/// Each block is the Q factor of a `d_i x r` standard Gaussian draw, with the
/// signs fixed so that `diag(R) >= 0`.
pub fn random_stiefel(partition: &BlockPartition, seed: u64) -> GroundTruth {
    let r = partition.rank();
    let blocks = (0..partition.num_blocks())
        .map(|i| {
            let d = partition.dim(i);
            let mut rng = block_rng(seed, TAG_TRUTH, i as u64, 0);
            let g = DMatrix::from_fn(d, r, |_, _| rng.sample::<f64, _>(StandardNormal));
            let qr = g.qr();
            let mut q = qr.q();
            let rr = qr.r();
            for k in 0..r {
                if rr[(k, k)] < 0.0 {
                    q.column_mut(k).neg_mut();
                }
            }
            q
        })
        .collect();
    GroundTruth(StiefelStack::new_unchecked(partition, blocks))
}

/// `V_i = [I_r; 0]` for every block.
pub fn canonical_stiefel(partition: &BlockPartition) -> GroundTruth {
    let r = partition.rank();
    let blocks = partition
        .dims()
        .iter()
        .map(|&d| DMatrix::identity(d, r))
        .collect();
    GroundTruth(StiefelStack::new_unchecked(partition, blocks))
}

/// Symmetric noise with i.i.d. `N(0, sigma^2)` entries in the blocks below
/// the diagonal, `W_ji = W_ij^T` and zero diagonal blocks.
pub fn sample_noise(partition: &BlockPartition, sigma: f64, seed: u64) -> Result<BlockSymMatrix> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(OtsmError::InvalidConfig(format!(
            "noise level must be a finite nonnegative number, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(BlockSymMatrix::zeros(partition));
    }
    // Block (i, j) with i > j is sampled row-major from its own stream; the
    // builder receives the transposed upper block.
    BlockSymMatrix::from_upper_blocks(partition, |j, i| {
        if i == j {
            return DMatrix::zeros(partition.dim(i), partition.dim(i));
        }
        let (di, dj) = (partition.dim(i), partition.dim(j));
        let mut rng = block_rng(seed, TAG_NOISE, i as u64, j as u64);
        let mut lower = DMatrix::zeros(di, dj);
        for row in 0..di {
            for col in 0..dj {
                lower[(row, col)] = sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        lower.transpose()
    })
}

/// A coupling matrix `S` with zero diagonal blocks and optional generation
/// metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    partition: BlockPartition,
    s: BlockSymMatrix,
    truth: Option<GroundTruth>,
    noise: Option<BlockSymMatrix>,
    sigma: Option<f64>,
    seed: u64,
}

impl ProblemInstance {
    /// Wraps an arbitrary symmetric coupling matrix. Diagonal blocks are
    /// cleared since they never enter the objective.
    pub fn from_coupling(s: BlockSymMatrix) -> Self {
        let partition = s.partition().clone();
        let mut entries = s.into_entries();
        for i in 0..partition.num_blocks() {
            let (o, d) = (partition.offset(i), partition.dim(i));
            entries.view_mut((o, o), (d, d)).fill(0.0);
        }
        ProblemInstance {
            s: BlockSymMatrix::from_symmetric_unchecked(&partition, entries),
            partition,
            truth: None,
            noise: None,
            sigma: None,
            seed: 0,
        }
    }

    /// Random ground truth plus Gaussian noise, both keyed by `seed`.
    pub fn generate(partition: &BlockPartition, sigma: f64, seed: u64) -> Result<Self> {
        let truth = random_stiefel(partition, seed);
        let noise = sample_noise(partition, sigma, seed)?;
        Ok(assemble(truth, noise)?.with_metadata(Some(sigma), seed))
    }

    pub fn with_metadata(mut self, sigma: Option<f64>, seed: u64) -> Self {
        self.sigma = sigma;
        self.seed = seed;
        self
    }

    pub fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    pub fn coupling(&self) -> &BlockSymMatrix {
        &self.s
    }

    pub fn truth(&self) -> Option<&GroundTruth> {
        self.truth.as_ref()
    }

    pub fn noise(&self) -> Option<&BlockSymMatrix> {
        self.noise.as_ref()
    }

    pub fn sigma(&self) -> Option<f64> {
        self.sigma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub(crate) fn from_parts(
        s: BlockSymMatrix,
        truth: Option<GroundTruth>,
        noise: Option<BlockSymMatrix>,
        sigma: Option<f64>,
        seed: u64,
    ) -> Self {
        ProblemInstance {
            partition: s.partition().clone(),
            s,
            truth,
            noise,
            sigma,
            seed,
        }
    }
}

/// `S_ij = V_i V_j^T + W_ij` for `i != j` and `S_ii = 0`.
pub fn assemble(truth: GroundTruth, noise: BlockSymMatrix) -> Result<ProblemInstance> {
    let partition = truth.partition().clone();
    if noise.partition() != &partition {
        return Err(OtsmError::PartitionMismatch);
    }
    for i in 0..partition.num_blocks() {
        if noise.block(i, i).iter().any(|&v| v != 0.0) {
            return Err(OtsmError::NonzeroDiagonalBlock(i));
        }
    }
    let s = BlockSymMatrix::from_upper_blocks(&partition, |i, j| {
        if i == j {
            DMatrix::zeros(partition.dim(i), partition.dim(i))
        } else {
            truth.block(i) * truth.block(j).transpose() + noise.block(i, j)
        }
    })?;
    Ok(ProblemInstance {
        partition,
        s,
        truth: Some(truth),
        noise: Some(noise),
        sigma: None,
        seed: 0,
    })
}
