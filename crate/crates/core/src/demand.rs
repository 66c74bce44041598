//! Demand matrices and synthetic demand generation.
//!
//! Entries are drawn from a two-mode mixture: a uniform draw `s` selects the
//! low mode when `s > high_prob_threshold` and the high mode otherwise. With
//! the defaults (threshold 0.8) roughly 80% of entries come from the high mode.
//! Sequences repeat a cycle of `cycle_length` freshly sampled matrices.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Flow, VertexId};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum DemandError {
    #[error("demand matrix needs {expected} entries, got {got}")]
    EntryCount { expected: usize, got: usize },
    #[error("negative or non-finite demand {value} at ({row},{col})")]
    InvalidEntry { row: usize, col: usize, value: f64 },
    #[error("nonzero diagonal demand at vertex {0}")]
    NonzeroDiagonal(usize),
    #[error("need at least {min} vertices, got {got}")]
    TooFewVertices { min: usize, got: usize },
    #[error("invalid bimodal parameters: {0}")]
    Params(String),
    #[error("cycle length and sequence length must be positive")]
    EmptySequence,
    #[error("matrix {index} has {got} vertices, sequence has {expected}")]
    MixedSizes {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("sequence file: {0}")]
    Json(#[from] serde_json::Error),
}

/// Square matrix of traffic volumes with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandMatrix<T> {
    size: usize,
    entries: Vec<T>,
}

impl<T: Scalar> DemandMatrix<T> {
    /// Row-major construction with validation.
    pub fn new(size: usize, entries: Vec<T>) -> Result<Self, DemandError> {
        if entries.len() != size * size {
            return Err(DemandError::EntryCount {
                expected: size * size,
                got: entries.len(),
            });
        }
        for (k, &value) in entries.iter().enumerate() {
            let (row, col) = (k / size, k % size);
            if !(value >= T::zero()) || !value.is_finite() {
                return Err(DemandError::InvalidEntry {
                    row,
                    col,
                    value: value.as_f64(),
                });
            }
            if row == col && value != T::zero() {
                return Err(DemandError::NonzeroDiagonal(row));
            }
        }
        Ok(Self { size, entries })
    }

    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> T) -> Result<Self, DemandError> {
        let entries = (0..size * size).map(|k| f(k / size, k % size)).collect();
        Self::new(size, entries)
    }

    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            entries: vec![T::zero(); size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, source: VertexId, sink: VertexId) -> T {
        self.entries[source * self.size + sink]
    }

    /// Row-major entries.
    pub fn entries(&self) -> &[T] {
        &self.entries
    }

    pub fn total(&self) -> T {
        self.entries.iter().copied().sum()
    }

    /// Total demand leaving `v`.
    pub fn out_sum(&self, v: VertexId) -> T {
        self.entries[v * self.size..(v + 1) * self.size]
            .iter()
            .copied()
            .sum()
    }

    /// Total demand arriving at `v`.
    pub fn in_sum(&self, v: VertexId) -> T {
        (0..self.size).map(|r| self.get(r, v)).sum()
    }

    pub fn scaled(&self, k: T) -> Self {
        Self {
            size: self.size,
            entries: self.entries.iter().map(|&d| d * k).collect(),
        }
    }

    /// Positive-demand flows in row-major order.
    pub fn flows(&self) -> impl Iterator<Item = Flow<T>> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, &d)| d > T::zero())
            .map(move |(k, &demand)| Flow {
                source: k / self.size,
                sink: k % self.size,
                demand,
            })
    }

    /// Relabels vertices: entry `(i, j)` moves to `(perm[i], perm[j])`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut entries = vec![T::zero(); self.entries.len()];
        for i in 0..self.size {
            for j in 0..self.size {
                entries[perm[i] * self.size + perm[j]] = self.get(i, j);
            }
        }
        Self {
            size: self.size,
            entries,
        }
    }
}

/// Two-mode Gaussian mixture for demand entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BimodalParams {
    pub low_mean: f64,
    pub low_std: f64,
    pub high_mean: f64,
    pub high_std: f64,
    pub high_prob_threshold: f64,
}

impl Default for BimodalParams {
    fn default() -> Self {
        Self {
            low_mean: 400.0,
            low_std: 100.0,
            high_mean: 800.0,
            high_std: 100.0,
            high_prob_threshold: 0.8,
        }
    }
}

impl BimodalParams {
    pub fn validate(&self) -> Result<(), DemandError> {
        let ok = self.low_mean >= 0.0
            && self.high_mean >= 0.0
            && self.low_std >= 0.0
            && self.high_std >= 0.0
            && (0.0..=1.0).contains(&self.high_prob_threshold);
        if ok {
            Ok(())
        } else {
            Err(DemandError::Params(format!("{self:?}")))
        }
    }

    /// Swaps the roles of the two modes' selection probabilities, giving the
    /// low mode probability `threshold` instead of `1 - threshold`.
    pub fn with_rare_elephants(mut self) -> Self {
        self.high_prob_threshold = 1.0 - self.high_prob_threshold;
        self
    }
}

/// Samples one bimodal demand matrix.
pub fn gen_bimodal_dm<T: Scalar, R: Rng + ?Sized>(
    v_count: usize,
    params: &BimodalParams,
    rng: &mut R,
) -> Result<DemandMatrix<T>, DemandError> {
    if v_count < 2 {
        return Err(DemandError::TooFewVertices {
            min: 2,
            got: v_count,
        });
    }
    params.validate()?;
    let low = Normal::new(params.low_mean, params.low_std)
        .map_err(|e| DemandError::Params(e.to_string()))?;
    let high = Normal::new(params.high_mean, params.high_std)
        .map_err(|e| DemandError::Params(e.to_string()))?;
    let mut entries = vec![T::zero(); v_count * v_count];
    for i in 0..v_count {
        for j in 0..v_count {
            if i == j {
                continue;
            }
            let s: f64 = rng.gen();
            let draw = if s > params.high_prob_threshold {
                low.sample(rng)
            } else {
                high.sample(rng)
            };
            entries[i * v_count + j] = T::of(draw.max(0.0));
        }
    }
    DemandMatrix::new(v_count, entries)
}

/// Ordered demand matrices; cyclic sequences repeat their first
/// `cycle_length` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandSequence<T> {
    pub matrices: Vec<DemandMatrix<T>>,
    pub cycle_length: usize,
}

impl<T: Scalar> DemandSequence<T> {
    pub fn new(matrices: Vec<DemandMatrix<T>>, cycle_length: usize) -> Result<Self, DemandError> {
        if matrices.is_empty() || cycle_length == 0 {
            return Err(DemandError::EmptySequence);
        }
        let n = matrices[0].size();
        if let Some((index, m)) = matrices.iter().enumerate().find(|(_, m)| m.size() != n) {
            return Err(DemandError::MixedSizes {
                index,
                expected: n,
                got: m.size(),
            });
        }
        Ok(Self {
            matrices,
            cycle_length,
        })
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn v_count(&self) -> usize {
        self.matrices[0].size()
    }

    /// True when every matrix equals the one `cycle_length` positions earlier.
    pub fn is_cyclic(&self) -> bool {
        (self.cycle_length..self.matrices.len())
            .all(|i| self.matrices[i] == self.matrices[i % self.cycle_length])
    }

    pub fn to_json(&self) -> Result<String, DemandError> {
        let file = SequenceFile {
            v_count: self.v_count(),
            cycle_length: self.cycle_length,
            matrices: self
                .matrices
                .iter()
                .map(|m| m.entries().iter().map(|x| x.as_f64()).collect())
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self, DemandError> {
        let file: SequenceFile = serde_json::from_str(text)?;
        let matrices = file
            .matrices
            .into_iter()
            .map(|m| DemandMatrix::new(file.v_count, m.into_iter().map(T::of).collect()))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(matrices, file.cycle_length)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceFile {
    v_count: usize,
    cycle_length: usize,
    matrices: Vec<Vec<f64>>,
}

/// Samples `cycle_length` matrices and repeats them up to `total_length`.
pub fn gen_cyclical_sequence<T: Scalar, R: Rng + ?Sized>(
    v_count: usize,
    params: &BimodalParams,
    cycle_length: usize,
    total_length: usize,
    rng: &mut R,
) -> Result<DemandSequence<T>, DemandError> {
    if cycle_length == 0 || total_length == 0 {
        return Err(DemandError::EmptySequence);
    }
    let cycle = (0..cycle_length.min(total_length))
        .map(|_| gen_bimodal_dm(v_count, params, rng))
        .collect::<Result<Vec<_>, _>>()?;
    let matrices = (0..total_length)
        .map(|i| cycle[i % cycle_length].clone())
        .collect();
    DemandSequence::new(matrices, cycle_length)
}
