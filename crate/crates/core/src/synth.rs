//! Seeded synthetic symmetric block matrices for benchmarks and tests.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blockcsr::{BlockCsrMatrix, BlockLayout, MatrixError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("target occupancy must lie in (0, 1], got {0}")]
    InvalidOccupancy(f64),
    #[error("profile needs a positive block size and block count")]
    EmptyProfile,
    #[error(
        "occupancy {target} is not reachable within 10% on {n} block rows (closest {reached})"
    )]
    Infeasible { target: f64, n: usize, reached: f64 },
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    /// Diagonals filled outward from the main one.
    Banded,
    /// Uniformly random off-diagonal pairs plus the diagonal.
    Random,
    Dense,
}

/// Shape, sparsity and seed of a generated matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkProfile {
    pub name: String,
    pub block_size: usize,
    pub n_block_rows: usize,
    pub target_occupancy: f64,
    pub pattern: Pattern,
    pub seed: u64,
}

impl BenchmarkProfile {
    /// Water-like: blocks of 23, 10% occupancy.
    pub fn h2o(n_block_rows: usize, seed: u64) -> Self {
        Self {
            name: "H2O".into(),
            block_size: 23,
            n_block_rows,
            target_occupancy: 0.10,
            pattern: Pattern::Random,
            seed,
        }
    }

    /// Small blocks of 6 at 2% occupancy, so small instances are not empty.
    pub fn se_analogue(n_block_rows: usize, seed: u64) -> Self {
        Self {
            name: "SE-analogue".into(),
            block_size: 6,
            n_block_rows,
            target_occupancy: 0.02,
            pattern: Pattern::Banded,
            seed,
        }
    }

    /// Fully dense with blocks of 32.
    pub fn dense(n_block_rows: usize, seed: u64) -> Self {
        Self {
            name: "Dense".into(),
            block_size: 32,
            n_block_rows,
            target_occupancy: 1.0,
            pattern: Pattern::Dense,
            seed,
        }
    }

    pub fn by_name(name: &str, n_block_rows: usize, seed: u64) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "h2o" => Some(Self::h2o(n_block_rows, seed)),
            "se" | "se-analogue" => Some(Self::se_analogue(n_block_rows, seed)),
            "dense" => Some(Self::dense(n_block_rows, seed)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.block_size == 0 || self.n_block_rows == 0 {
            return Err(SynthError::EmptyProfile);
        }
        let o = self.target_occupancy;
        if !(o > 0.0 && o <= 1.0) {
            return Err(SynthError::InvalidOccupancy(o));
        }
        Ok(())
    }

    /// Number of stored blocks the generator will produce.
    pub fn block_count(&self) -> Result<usize, SynthError> {
        self.validate()?;
        let n = self.n_block_rows;
        let total = n * n;
        if self.pattern == Pattern::Dense {
            return Ok(total);
        }
        let want = (self.target_occupancy * total as f64).round() as usize;
        // diagonal blocks count once, off-diagonal ones come in pairs
        let k = if want > n && (want - n) % 2 == 1 {
            want - 1
        } else {
            want.min(total)
        };
        let reached = k as f64 / total as f64;
        if k == 0 || (reached - self.target_occupancy).abs() > 0.1 * self.target_occupancy {
            return Err(SynthError::Infeasible {
                target: self.target_occupancy,
                n,
                reached,
            });
        }
        Ok(k)
    }
}

fn upper_pair(idx: usize, n: usize) -> (usize, usize) {
    // row-major enumeration of the strict upper triangle
    let mut r = 0;
    let mut rem = idx;
    while rem >= n - 1 - r {
        rem -= n - 1 - r;
        r += 1;
    }
    (r, r + 1 + rem)
}

/// Generates the symmetric matrix described by `p`.
pub fn generate(p: &BenchmarkProfile) -> Result<BlockCsrMatrix, SynthError> {
    let k = p.block_count()?;
    let n = p.n_block_rows;
    let bs = p.block_size;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut coords: Vec<(usize, usize)> = Vec::with_capacity(k);
    match p.pattern {
        Pattern::Dense => {
            for r in 0..n {
                for c in r..n {
                    coords.push((r, c));
                }
            }
        }
        Pattern::Random => {
            let diag = if k >= n { n } else { k };
            let diag = if (k - diag) % 2 == 1 { diag - 1 } else { diag };
            let pick = sample(&mut rng, n, diag);
            coords.extend(pick.iter().map(|d| (d, d)));
            let pairs = (k - diag) / 2;
            let upper = n * (n - 1) / 2;
            coords.extend(
                sample(&mut rng, upper, pairs)
                    .iter()
                    .map(|i| upper_pair(i, n)),
            );
        }
        Pattern::Banded => {
            let mut left = k;
            'outer: for off in 0..n {
                for r in 0..n - off {
                    let need = if off == 0 { 1 } else { 2 };
                    if left < need {
                        if off == 0 {
                            continue;
                        }
                        break 'outer;
                    }
                    coords.push((r, r + off));
                    left -= need;
                    if left == 0 {
                        break 'outer;
                    }
                }
            }
        }
    }
    coords.sort_unstable();
    let mut entries = Vec::with_capacity(2 * coords.len());
    for (r, c) in coords {
        let vals: Vec<f64> = (0..bs * bs).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if r == c {
            let mut sym = vals.clone();
            for a in 0..bs {
                for b in 0..bs {
                    sym[a * bs + b] = 0.5 * (vals[a * bs + b] + vals[b * bs + a]);
                }
            }
            entries.push((r, c, sym));
        } else {
            let mut t = vec![0.0; bs * bs];
            for a in 0..bs {
                for b in 0..bs {
                    t[b * bs + a] = vals[a * bs + b];
                }
            }
            entries.push((r, c, vals));
            entries.push((c, r, t));
        }
    }
    let layout = Arc::new(BlockLayout::uniform(n, bs)?);
    Ok(BlockCsrMatrix::build(layout, entries)?)
}
