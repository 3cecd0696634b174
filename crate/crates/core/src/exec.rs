//! Plumbing shared by the two distributed multiplication engines: input
//! checks, image extraction and the result record.

use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::blockcsr::{BlockCsrMatrix, BlockLayout, MatrixError, ProductCounts};
use crate::gridplan::{
    DimDistribution, DistributedMatrix, Distribution, PlanError, Topology, TopologyError,
};
use crate::transport::{CommStats, Payload, RunError, TraceEvent, TransportError};

#[derive(Debug, Error)]
pub enum MultiplyError {
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("operands are distributed inconsistently: {0}")]
    Distribution(String),
    #[error("buffer ledger violation: {0}")]
    BufferLedger(String),
    #[error("missing partial result from layer {layer} on rank {rank}")]
    MissingPartial { rank: usize, layer: usize },
    #[error("rank {rank} failed: {source}")]
    Rank {
        rank: usize,
        #[source]
        source: Box<MultiplyError>,
    },
}

impl From<RunError<MultiplyError>> for MultiplyError {
    fn from(e: RunError<MultiplyError>) -> Self {
        MultiplyError::Rank {
            rank: e.rank,
            source: Box::new(e.error),
        }
    }
}

/// Which engine produced a result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Ptp,
    Rma,
}

/// Temporary buffers a rank allocated during one multiplication.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BufferLedger {
    pub windows: usize,
    pub a_slots: usize,
    pub b_slots: usize,
    pub c_partials: usize,
    pub c_reduce: usize,
}

impl BufferLedger {
    pub fn total(&self) -> usize {
        self.windows + self.a_slots + self.b_slots + self.c_partials + self.c_reduce
    }
}

/// Result of a distributed multiplication with its accounting.
#[derive(Debug, Clone)]
pub struct MultiplyOutcome {
    pub algorithm: Algorithm,
    pub result: DistributedMatrix,
    /// Topology actually used.
    pub topology: Topology,
    /// Why the requested replication factor was replaced by 1, if it was.
    pub fallback: Option<TopologyError>,
    pub stats: Vec<CommStats>,
    pub trace: Vec<TraceEvent>,
    pub local_multiplies: Vec<usize>,
    pub products: ProductCounts,
    /// Per-rank buffer ledger (one-sided engine only).
    pub buffers: Vec<BufferLedger>,
    pub reallocations: u64,
    pub epoch: u64,
}

impl MultiplyOutcome {
    pub fn total_stats(&self) -> CommStats {
        CommStats::total(&self.stats)
    }
}

/// Distribution of `C = A * B` and its layout, after checking that the
/// operands line up.
pub(crate) fn product_frame(
    a: &DistributedMatrix,
    b: &DistributedMatrix,
    c: &DistributedMatrix,
) -> Result<(Arc<Distribution>, Arc<BlockLayout>), MultiplyError> {
    let grid = a.grid();
    if b.grid() != grid || c.grid() != grid {
        return Err(MultiplyError::Distribution(
            "operands use different grids".into(),
        ));
    }
    let inner_a = a.distribution().cols();
    let inner_b = b.distribution().rows();
    if !Arc::ptr_eq(inner_a, inner_b) && inner_a != inner_b {
        return Err(MultiplyError::Distribution(
            "column distribution of A differs from row distribution of B".into(),
        ));
    }
    let layout = Arc::new(a.layout().product(b.layout())?);
    if **c.layout() != *layout {
        return Err(MatrixError::LayoutMismatch("C layout does not match A * B".into()).into());
    }
    let same = |x: &DimDistribution, y: &DimDistribution| x == y;
    if !same(c.distribution().rows(), a.distribution().rows())
        || !same(c.distribution().cols(), b.distribution().cols())
    {
        return Err(MultiplyError::Distribution(
            "C is not distributed like the rows of A and the columns of B".into(),
        ));
    }
    Ok((c.distribution().clone(), layout))
}

/// Splits `panel` into `count` images, image `n` holding the blocks whose
/// column (`by_cols`) or row index has virtual index `first + n`.
pub fn split_images(
    panel: &BlockCsrMatrix,
    dim: &DimDistribution,
    by_cols: bool,
    first: usize,
    count: usize,
) -> Vec<BlockCsrMatrix> {
    let mut entries: Vec<Vec<(usize, usize, Vec<f64>)>> = vec![Vec::new(); count];
    for blk in panel.blocks() {
        let v = dim.virtual_index(if by_cols { blk.col } else { blk.row });
        entries[v - first].push((blk.row, blk.col, blk.values.to_vec()));
    }
    entries
        .into_iter()
        .map(|e| BlockCsrMatrix::build(panel.layout().clone(), e).expect("subset of a valid panel"))
        .collect()
}

pub(crate) fn payloads(images: &[BlockCsrMatrix]) -> Vec<Payload> {
    images.iter().map(Payload::from_panel).collect()
}

pub(crate) fn add_counts(total: &mut ProductCounts, c: ProductCounts) {
    total.multiplied += c.multiplied;
    total.skipped += c.skipped;
}
