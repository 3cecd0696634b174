#![allow(dead_code)]

use std::sync::Arc;

use bsmm::blockcsr::{serial_spgemm_oracle, BlockCsrMatrix, BlockLayout, FilterConfig};
use bsmm::gridplan::{make_distribution, partition, DistributedMatrix, ProcessGrid};
use bsmm::synth::{generate, BenchmarkProfile, Pattern};

pub fn profile(n: usize, bs: usize, occ: f64, pattern: Pattern, seed: u64) -> BenchmarkProfile {
    BenchmarkProfile {
        name: "test".into(),
        block_size: bs,
        n_block_rows: n,
        target_occupancy: occ,
        pattern,
        seed,
    }
}

pub fn matrix(n: usize, bs: usize, occ: f64, pattern: Pattern, seed: u64) -> BlockCsrMatrix {
    generate(&profile(n, bs, occ, pattern, seed)).unwrap()
}

pub fn dense(n: usize, bs: usize, seed: u64) -> BlockCsrMatrix {
    matrix(n, bs, 1.0, Pattern::Dense, seed)
}

pub fn distribute(m: &BlockCsrMatrix, grid: ProcessGrid, seed: u64) -> DistributedMatrix {
    let d = Arc::new(make_distribution(m.layout(), grid, seed).unwrap());
    partition(m, d).unwrap()
}

pub fn zeros_like(x: &DistributedMatrix) -> DistributedMatrix {
    DistributedMatrix::zeros(x.distribution().clone(), x.layout().clone()).unwrap()
}

pub fn grid(pr: usize, pc: usize) -> ProcessGrid {
    ProcessGrid::new(pr, pc).unwrap()
}

/// Largest per-panel relative Frobenius error of `got` against the serial
/// product `a * b`, split with the same distribution.
pub fn max_panel_error(
    got: &DistributedMatrix,
    a: &BlockCsrMatrix,
    b: &BlockCsrMatrix,
    cfg: &FilterConfig,
) -> f64 {
    let want = serial_spgemm_oracle(a, b, cfg).unwrap();
    let want = partition(&want, got.distribution().clone()).unwrap();
    got.panels()
        .iter()
        .zip(want.panels())
        .map(|(g, w)| {
            let d = g.diff_frobenius(w).unwrap();
            let n = w.frobenius_norm();
            if n > 0.0 {
                d / n
            } else {
                d
            }
        })
        .fold(0.0, f64::max)
}

/// Uniform layout helper for hand-built matrices.
pub fn layout(n: usize, bs: usize) -> Arc<BlockLayout> {
    Arc::new(BlockLayout::uniform(n, bs).unwrap())
}

/// `Q D Q^T` and `Q sign(D) Q^T` for `Q` a product of `reflectors`
/// Householder reflections and eigenvalues drawn from `±[lo, hi]`.
pub fn spectrum_pair(
    n_blocks: usize,
    bs: usize,
    lo: f64,
    hi: f64,
    reflectors: usize,
    seed: u64,
) -> (BlockCsrMatrix, BlockCsrMatrix) {
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    let n = n_blocks * bs;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut q = DMatrix::<f64>::identity(n, n);
    for _ in 0..reflectors {
        let v = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let h = DMatrix::identity(n, n) - (&v * v.transpose()) * (2.0 / v.norm_squared());
        q *= h;
    }
    let eig: Vec<f64> = (0..n)
        .map(|i| {
            let mag = rng.gen_range(lo..=hi);
            if i % 2 == 0 {
                mag
            } else {
                -mag
            }
        })
        .collect();
    let d = DMatrix::from_diagonal(&DVector::from_vec(eig.clone()));
    let s = DMatrix::from_diagonal(&DVector::from_iterator(n, eig.iter().map(|x| x.signum())));
    let x = &q * d * q.transpose();
    let sx = &q * s * q.transpose();
    let to_blocks = |m: DMatrix<f64>| {
        let row_major: Vec<f64> = m.transpose().iter().copied().collect();
        BlockCsrMatrix::from_dense(layout(n_blocks, bs), &row_major).unwrap()
    };
    (to_blocks(x), to_blocks(sx))
}

pub fn dense_of(m: &BlockCsrMatrix) -> nalgebra::DMatrix<f64> {
    let n = m.layout().total_rows();
    nalgebra::DMatrix::from_row_slice(n, m.layout().total_cols(), &m.to_dense())
}
