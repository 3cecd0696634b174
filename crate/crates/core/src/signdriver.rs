//! Newton–Schulz iteration for the matrix sign function,
//! `X <- X (3I - X^2) / 2`, on distributed matrices.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::blockcsr::{FilterConfig, MatrixError};
use crate::exec::{MultiplyError, MultiplyOutcome};
use crate::gridplan::{DistributedMatrix, PlanError, TopologyError};
use crate::multiply_ptp::cannon_multiply_on;
use crate::multiply_rma::rma_multiply_on;
use crate::transport::{Runtime, TransportConfig};

#[derive(Debug, Error)]
pub enum SignError {
    #[error("max_iterations must be at least 1")]
    NoIterations,
    #[error("convergence tolerance must be positive and finite, got {0}")]
    BadTolerance(f64),
    #[error("matrix must be square with matching row and column blocks")]
    NotSquare,
    #[error("cannot scale the zero matrix")]
    ZeroMatrix,
    #[error(
        "iteration diverged at step {iteration}: norm {norm:.3e} grew for 3 consecutive steps"
    )]
    Diverged { iteration: usize, norm: f64 },
    #[error(transparent)]
    Multiply(#[from] MultiplyError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

/// Relative excess over `sqrt(dim)` tolerated before a growing norm counts as
/// divergence; an iterate with all eigenvalues at +-1 sits exactly on the bound.
const DIVERGENCE_SLACK: f64 = 1e-6;

/// Which engine performs the multiplications.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "algorithm", rename_all = "lowercase")]
pub enum Engine {
    Ptp,
    Rma { l: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignRunConfig {
    max_iterations: usize,
    tolerance: f64,
    filter: FilterConfig,
    engine: Engine,
}

impl SignRunConfig {
    pub fn new(
        max_iterations: usize,
        tolerance: f64,
        filter: FilterConfig,
        engine: Engine,
    ) -> Result<Self, SignError> {
        if max_iterations == 0 {
            return Err(SignError::NoIterations);
        }
        if !(tolerance > 0.0 && tolerance.is_finite()) {
            return Err(SignError::BadTolerance(tolerance));
        }
        Ok(Self {
            max_iterations,
            tolerance,
            filter,
            engine,
        })
    }

    pub fn max_iterations(&self) -> usize {
        self.max_iterations
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    pub fn filter(&self) -> &FilterConfig {
        &self.filter
    }

    pub fn engine(&self) -> Engine {
        self.engine
    }
}

/// One row of the iteration log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignStep {
    pub iter: usize,
    /// `||X_{n+1} - X_n||_F / ||X_n||_F`.
    pub delta_norm: f64,
    pub occupancy: f64,
    pub frobenius: f64,
    pub bytes_a: u64,
    pub bytes_b: u64,
    pub bytes_c: u64,
    pub multiplications: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignReport {
    pub steps: Vec<SignStep>,
    pub converged: bool,
    pub multiplications: usize,
    /// Set when the requested replication factor was replaced by 1.
    pub fallback: Option<TopologyError>,
}

impl SignReport {
    /// `iter,delta_norm,occupancy,bytes_a,bytes_b,bytes_c,multiplications`.
    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("iter,delta_norm,occupancy,bytes_a,bytes_b,bytes_c,multiplications\n");
        for st in &self.steps {
            let _ = writeln!(
                s,
                "{},{:e},{},{},{},{},{}",
                st.iter,
                st.delta_norm,
                st.occupancy,
                st.bytes_a,
                st.bytes_b,
                st.bytes_c,
                st.multiplications
            );
        }
        s
    }
}

fn check_square(x: &DistributedMatrix) -> Result<(), SignError> {
    let l = x.layout();
    if !l.is_square() || l.row_block_sizes() != l.col_block_sizes() {
        return Err(SignError::NotSquare);
    }
    Ok(())
}

/// Divides `x` by its Frobenius norm, an upper bound of its spectral radius.
pub fn spectral_scale(x: &DistributedMatrix) -> Result<DistributedMatrix, SignError> {
    check_square(x)?;
    let f = x.frobenius_norm();
    if f == 0.0 {
        return Err(SignError::ZeroMatrix);
    }
    Ok(x.map_panels(|_, p| Ok(p.scaled(1.0 / f)))?)
}

/// Frobenius norm of `a - b` for two matrices with the same distribution.
pub fn distributed_diff(a: &DistributedMatrix, b: &DistributedMatrix) -> Result<f64, MatrixError> {
    let mut sq = 0.0;
    for (p, q) in a.panels().iter().zip(b.panels()) {
        let d = p.diff_frobenius(q)?;
        sq += d * d;
    }
    Ok(sq.sqrt())
}

/// `a * b` with the configured engine.
fn multiply(
    rt: &Runtime,
    a: &DistributedMatrix,
    b: &DistributedMatrix,
    cfg: &SignRunConfig,
) -> Result<MultiplyOutcome, SignError> {
    let zero = DistributedMatrix::zeros(a.distribution().clone(), a.layout().clone())?;
    Ok(match cfg.engine {
        Engine::Ptp => cannon_multiply_on(rt, a, b, &zero, &cfg.filter)?,
        Engine::Rma { l } => rma_multiply_on(rt, a, b, &zero, &cfg.filter, l)?,
    })
}

/// Iterates until the relative increment drops to the tolerance or
/// `max_iterations` is reached, using two distributed multiplications per step.
pub fn sign_iterate(
    x0: &DistributedMatrix,
    cfg: &SignRunConfig,
) -> Result<(DistributedMatrix, SignReport), SignError> {
    let rt = Runtime::new(x0.grid(), TransportConfig::default());
    sign_iterate_on(&rt, x0, cfg)
}

pub fn sign_iterate_on(
    rt: &Runtime,
    x0: &DistributedMatrix,
    cfg: &SignRunConfig,
) -> Result<(DistributedMatrix, SignReport), SignError> {
    check_square(x0)?;
    let dim = x0.layout().total_rows() as f64;
    let dist = x0.distribution().clone();
    let mut x = x0.clone();
    let mut norm = x.frobenius_norm();
    let mut growth = 0;
    let mut report = SignReport {
        steps: Vec::new(),
        converged: false,
        multiplications: 0,
        fallback: None,
    };
    for iter in 1..=cfg.max_iterations {
        let sq = multiply(rt, &x, &x, cfg)?;
        // 3I - X^2, identity blocks injected on the ranks owning them
        let y = sq.result.map_panels(|rank, p| {
            p.scaled(-1.0)
                .add_scaled_identity(3.0, |r| dist.owner(r, r) == rank)
        })?;
        let prod = multiply(rt, &x, &y, cfg)?;
        let next = prod.result.map_panels(|_, p| Ok(p.scaled(0.5)))?;
        report.multiplications += 2;
        report.fallback = prod.fallback.clone();

        let delta = distributed_diff(&next, &x)? / norm.max(f64::MIN_POSITIVE);
        let (s1, s2) = (sq.total_stats(), prod.total_stats());
        let next_norm = next.frobenius_norm();
        report.steps.push(SignStep {
            iter,
            delta_norm: delta,
            occupancy: next.occupancy(),
            frobenius: next_norm,
            bytes_a: s1.bytes_a() + s2.bytes_a(),
            bytes_b: s1.bytes_b() + s2.bytes_b(),
            bytes_c: s1.bytes_c() + s2.bytes_c(),
            multiplications: 2,
        });
        growth = if next_norm > norm { growth + 1 } else { 0 };
        x = next;
        norm = next_norm;
        if delta <= cfg.tolerance {
            report.converged = true;
            break;
        }
        if growth >= 3 && norm > dim.sqrt() * (1.0 + DIVERGENCE_SLACK) {
            return Err(SignError::Diverged {
                iteration: iter,
                norm,
            });
        }
    }
    Ok((x, report))
}

/// `||X^2 - I||_F / ||I||_F`, using the given engine for the square.
pub fn involution_residual(
    rt: &Runtime,
    x: &DistributedMatrix,
    cfg: &SignRunConfig,
) -> Result<f64, SignError> {
    let exact = SignRunConfig {
        filter: FilterConfig::disabled(),
        ..cfg.clone()
    };
    let sq = multiply(rt, x, x, &exact)?;
    let dist = x.distribution().clone();
    let diff = sq
        .result
        .map_panels(|rank, p| p.add_scaled_identity(-1.0, |r| dist.owner(r, r) == rank))?;
    let dim = x.layout().total_rows() as f64;
    Ok(diff.frobenius_norm() / dim.sqrt())
}
