//! Latin hypercube collocation and per-epoch data batching.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplingError {
    #[error("sample count must be at least 1")]
    ZeroCount,
    #[error("dimension {dim}: bounds [{lo}, {hi}] are degenerate")]
    DegenerateBounds { dim: usize, lo: f64, hi: f64 },
    #[error("batch size {batch} invalid for {n} samples")]
    BatchSize { batch: usize, n: usize },
}

/// Deterministic generator for `(seed, stream)`; distinct `tag`s keep
/// unrelated consumers of one seed independent.
pub fn stream_rng(seed: u64, tag: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

/// Scaled collocation points with their sampling box.
#[derive(Debug, Clone, PartialEq)]
pub struct CollocationBatch {
    /// One point per row.
    pub points: Array2<f64>,
    pub bounds: Vec<(f64, f64)>,
}

impl CollocationBatch {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Latin hypercube sample of `n` points.
///
/// Each dimension is split into `n` equal strata; an independent random
/// permutation assigns one stratum per point and the position inside the
/// stratum is uniform.
pub fn lhs(n: usize, bounds: &[(f64, f64)], rng: &mut impl Rng) -> Result<CollocationBatch, SamplingError> {
    if n == 0 {
        return Err(SamplingError::ZeroCount);
    }
    for (dim, &(lo, hi)) in bounds.iter().enumerate() {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(SamplingError::DegenerateBounds { dim, lo, hi });
        }
    }
    let d = bounds.len();
    let mut points = Array2::zeros((n, d));
    let mut strata: Vec<usize> = (0..n).collect();
    for (j, &(lo, hi)) in bounds.iter().enumerate() {
        strata.shuffle(rng);
        for (i, &k) in strata.iter().enumerate() {
            let u: f64 = rng.random();
            // Clamp guards the open upper edge against rounding.
            let x = lo + (hi - lo) * (k as f64 + u) / n as f64;
            points[[i, j]] = x.min(hi);
        }
    }
    Ok(CollocationBatch {
        points,
        bounds: bounds.to_vec(),
    })
}

/// [`lhs`] driven by a seed.
pub fn lhs_seeded(n: usize, bounds: &[(f64, f64)], seed: u64) -> Result<CollocationBatch, SamplingError> {
    lhs(n, bounds, &mut ChaCha8Rng::seed_from_u64(seed))
}

const BATCH_TAG: u64 = 0xBA7C;

/// Shuffled partition of `0..n` into batches of `batch` (last may be short).
pub fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>, SamplingError> {
    if batch == 0 || batch > n {
        return Err(SamplingError::BatchSize { batch, n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, BATCH_TAG, epoch));
    Ok(idx.chunks(batch).map(<[usize]>::to_vec).collect())
}
