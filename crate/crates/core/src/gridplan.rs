//! Process grids, replication factors, data distribution and the per-tick
//! index arithmetic shared by both multiplication schemes.
//!
//! A `P_R x P_C` grid has virtual dimension `V = lcm(P_R, P_C)`. Every block
//! row and column is given a virtual index in `0..V` (round robin over a
//! seeded permutation); grid row `v / (V / P_R)` owns virtual rows `v`, and
//! likewise for columns. An A transfer ships one *image*: the part of a
//! process panel whose columns carry a single virtual index. B images are
//! cut along rows the same way.
//!
//! The replicated (2.5D) scheme splits each C panel across `L` ranks. Ranks
//! sharing `(i mod side3d, j mod side3d)` form a reduction group; each member
//! computes partial results for all `L` panels of the group over `V / L`
//! virtual indices.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::blockcsr::{BlockCsrMatrix, BlockLayout, MatrixError};

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Exact integer square root, if `n` is a perfect square.
pub fn exact_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r.saturating_sub(1)..=r + 1).find(|x| x * x == n)
}

/// Reasons a grid or replication factor is rejected.
#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize)]
pub enum TopologyError {
    #[error("process grid dimensions must be positive, got {p_rows}x{p_cols}")]
    EmptyGrid { p_rows: usize, p_cols: usize },
    #[error("replication factor L must be at least 1")]
    ZeroL,
    #[error("max grid dimension {mx} is not a multiple of min dimension {mn}")]
    NotMultiple { mx: usize, mn: usize },
    #[error("max grid dimension {mx} exceeds the square of min dimension {mn}")]
    TooElongated { mx: usize, mn: usize },
    #[error("non-square grid requires L = {expected}, got {requested}")]
    LMismatch { requested: usize, expected: usize },
    #[error("square grid requires a perfect-square L, got {0}")]
    NotSquareL(usize),
    #[error("sqrt(L) = {root} does not divide grid dimension {p}")]
    RootNotDividing { p: usize, root: usize },
    #[error("virtual dimension {v} is not a multiple of L = {l}")]
    TicksNotDivisible { v: usize, l: usize },
}

/// A `p_rows x p_cols` grid of ranks, numbered row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct ProcessGrid {
    p_rows: usize,
    p_cols: usize,
}

impl ProcessGrid {
    pub fn new(p_rows: usize, p_cols: usize) -> Result<Self, TopologyError> {
        if p_rows == 0 || p_cols == 0 {
            return Err(TopologyError::EmptyGrid { p_rows, p_cols });
        }
        Ok(Self { p_rows, p_cols })
    }

    pub fn p_rows(&self) -> usize {
        self.p_rows
    }

    pub fn p_cols(&self) -> usize {
        self.p_cols
    }

    pub fn size(&self) -> usize {
        self.p_rows * self.p_cols
    }

    /// Virtual dimension `lcm(P_R, P_C)`.
    pub fn v(&self) -> usize {
        lcm(self.p_rows, self.p_cols)
    }

    pub fn rank_of(&self, i: usize, j: usize) -> usize {
        i * self.p_cols + j
    }

    pub fn coords(&self, rank: usize) -> (usize, usize) {
        (rank / self.p_cols, rank % self.p_cols)
    }
}

/// Position of a rank in the 3D decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Coords3d {
    pub i3d: usize,
    pub j3d: usize,
    pub layer: usize,
    pub side3d: usize,
}

/// A process grid together with an accepted replication factor `L`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Topology {
    grid: ProcessGrid,
    v: usize,
    l: usize,
    l_r: usize,
    l_c: usize,
    side3d: usize,
    n_ticks: usize,
}

impl Topology {
    /// Plain 2D topology (`L = 1`).
    pub fn two_d(grid: ProcessGrid) -> Self {
        let v = grid.v();
        Self {
            grid,
            v,
            l: 1,
            l_r: 1,
            l_c: 1,
            side3d: grid.p_rows.max(grid.p_cols),
            n_ticks: v,
        }
    }

    pub fn grid(&self) -> ProcessGrid {
        self.grid
    }

    pub fn p_rows(&self) -> usize {
        self.grid.p_rows
    }

    pub fn p_cols(&self) -> usize {
        self.grid.p_cols
    }

    pub fn v(&self) -> usize {
        self.v
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn l_r(&self) -> usize {
        self.l_r
    }

    pub fn l_c(&self) -> usize {
        self.l_c
    }

    pub fn side3d(&self) -> usize {
        self.side3d
    }

    /// Number of ticks: `V / L`.
    pub fn n_ticks(&self) -> usize {
        self.n_ticks
    }

    pub fn is_square(&self) -> bool {
        self.grid.p_rows == self.grid.p_cols
    }

    /// Number of A receive slots: `max(2, L_R)` for square grids with `L > 1`, else 2.
    pub fn nbuffers_a(&self) -> usize {
        if self.is_square() && self.l > 1 {
            self.l_r.max(2)
        } else {
            2
        }
    }

    /// Dimensions of the 3D decomposition; their product is `P`.
    pub fn dims3d(&self) -> [usize; 3] {
        let (pr, pc) = (self.grid.p_rows, self.grid.p_cols);
        if self.l == 1 {
            return [pr, pc, 1];
        }
        if self.is_square() {
            [pr / self.l_r, pc / self.l_c, self.l]
        } else {
            let (mn, mx) = (pr.min(pc), pr.max(pc));
            [mn, mx / self.l, self.l]
        }
    }

    pub fn rank_coords_3d(&self, i: usize, j: usize) -> Coords3d {
        let i3d = i / self.side3d;
        let j3d = j / self.side3d;
        Coords3d {
            i3d,
            j3d,
            layer: j3d * self.l_r + i3d,
            side3d: self.side3d,
        }
    }

    /// Indices `(icomm3d, jcomm3d)` of the C panel worked on at `tick`.
    pub fn panel_slot(&self, tick: usize) -> (usize, usize) {
        (tick % self.l_r, (tick / self.l_r) % self.l_c)
    }

    /// Grid coordinates of the C panel `(i3, j3)` of rank `(i, j)`'s group.
    pub fn c_home(&self, i: usize, j: usize, i3: usize, j3: usize) -> (usize, usize) {
        (
            i3 * self.side3d + i % self.side3d,
            j3 * self.side3d + j % self.side3d,
        )
    }

    /// Virtual contraction index used by rank `(i, j)` at `tick`.
    ///
    /// The offset only depends on the reduction group, the layer and the
    /// tick group `tick / L`, so the A and B images fetched at the start of a
    /// tick stay valid for all `L` panel products of that tick.
    pub fn virtual_index(&self, i: usize, j: usize, tick: usize) -> usize {
        let c3 = self.rank_coords_3d(i, j);
        let (pr, pc, v) = (self.grid.p_rows, self.grid.p_cols, self.v);
        let base = (i % self.side3d) * (v / pr) + (j % self.side3d) * (v / pc);
        (base + c3.layer + self.l * (tick / self.l)) % v
    }

    /// Grid coordinates `(m, k)` of the rank holding the A image needed at `tick`.
    pub fn a_source_rank(&self, i: usize, j: usize, tick: usize) -> (usize, usize) {
        let (icomm, _) = self.panel_slot(tick);
        let m = icomm * self.side3d + i % self.side3d;
        let k = self.virtual_index(i, j, tick) / (self.v / self.grid.p_cols);
        (m, k)
    }

    /// Grid coordinates `(k, n)` of the rank holding the B image needed at `tick`.
    pub fn b_source_rank(&self, i: usize, j: usize, tick: usize) -> (usize, usize) {
        let (_, jcomm) = self.panel_slot(tick);
        let n = jcomm * self.side3d + j % self.side3d;
        let k = self.virtual_index(i, j, tick) / (self.v / self.grid.p_rows);
        (k, n)
    }
}

/// Validates `L` for a `p_rows x p_cols` grid and derives the 3D decomposition.
pub fn validate_l(p_rows: usize, p_cols: usize, l: usize) -> Result<Topology, TopologyError> {
    let grid = ProcessGrid::new(p_rows, p_cols)?;
    if l == 0 {
        return Err(TopologyError::ZeroL);
    }
    let base = Topology::two_d(grid);
    if l == 1 {
        return Ok(base);
    }
    let (mn, mx) = (p_rows.min(p_cols), p_rows.max(p_cols));
    let (l_r, l_c) = if p_rows != p_cols {
        if mx % mn != 0 {
            return Err(TopologyError::NotMultiple { mx, mn });
        }
        if mx > mn * mn {
            return Err(TopologyError::TooElongated { mx, mn });
        }
        if l != mx / mn {
            return Err(TopologyError::LMismatch {
                requested: l,
                expected: mx / mn,
            });
        }
        if p_rows > p_cols {
            (l, 1)
        } else {
            (1, l)
        }
    } else {
        let root = exact_sqrt(l).ok_or(TopologyError::NotSquareL(l))?;
        if !p_rows.is_multiple_of(root) {
            return Err(TopologyError::RootNotDividing { p: p_rows, root });
        }
        (root, root)
    };
    let v = base.v;
    if !v.is_multiple_of(l) {
        return Err(TopologyError::TicksNotDivisible { v, l });
    }
    Ok(Topology {
        grid,
        v,
        l,
        l_r,
        l_c,
        side3d: mx / l_r.max(l_c),
        n_ticks: v / l,
    })
}

/// Like [`validate_l`], but falls back to `L = 1` when `l` is rejected and
/// returns the reason alongside.
pub fn resolve_l(grid: ProcessGrid, l: usize) -> (Topology, Option<TopologyError>) {
    match validate_l(grid.p_rows, grid.p_cols, l) {
        Ok(t) => (t, None),
        Err(e) => (Topology::two_d(grid), Some(e)),
    }
}

/// Distribution of one matrix dimension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DimDistribution {
    position: Vec<usize>,
    virtual_of: Vec<usize>,
    v: usize,
}

impl DimDistribution {
    /// Seeded permutation of `n` block indices; position `p` gets virtual index `p mod v`.
    pub fn new(n: usize, v: usize, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut position = vec![0; n];
        for (p, &block) in order.iter().enumerate() {
            position[block] = p;
        }
        let virtual_of = position.iter().map(|p| p % v).collect();
        Self {
            position,
            virtual_of,
            v,
        }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    /// Permuted position of each block index.
    pub fn permutation(&self) -> &[usize] {
        &self.position
    }

    pub fn virtual_index(&self, block: usize) -> usize {
        self.virtual_of[block]
    }

    /// Grid coordinate (out of `nprocs`, which divides `V`) owning `block`.
    pub fn owner(&self, block: usize, nprocs: usize) -> usize {
        self.virtual_of[block] / (self.v / nprocs)
    }
}

/// Row and column distribution of a matrix over a process grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Distribution {
    grid: ProcessGrid,
    rows: Arc<DimDistribution>,
    cols: Arc<DimDistribution>,
}

impl Distribution {
    pub fn new(grid: ProcessGrid, rows: Arc<DimDistribution>, cols: Arc<DimDistribution>) -> Self {
        Self { grid, rows, cols }
    }

    pub fn grid(&self) -> ProcessGrid {
        self.grid
    }

    pub fn rows(&self) -> &Arc<DimDistribution> {
        &self.rows
    }

    pub fn cols(&self) -> &Arc<DimDistribution> {
        &self.cols
    }

    pub fn row_owner(&self, r: usize) -> usize {
        self.rows.owner(r, self.grid.p_rows)
    }

    pub fn col_owner(&self, c: usize) -> usize {
        self.cols.owner(c, self.grid.p_cols)
    }

    /// Rank owning block `(r, c)`.
    pub fn owner(&self, r: usize, c: usize) -> usize {
        self.grid.rank_of(self.row_owner(r), self.col_owner(c))
    }
}

/// Errors from distribution and partitioning.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("cannot distribute an empty layout")]
    EmptyLayout,
    #[error("distribution covers {dist_rows}x{dist_cols} blocks, matrix has {rows}x{cols}")]
    DistributionMismatch {
        dist_rows: usize,
        dist_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("panel for rank {rank} holds block ({row}, {col}) owned by rank {owner}")]
    ForeignBlock {
        rank: usize,
        row: usize,
        col: usize,
        owner: usize,
    },
    #[error("expected {expected} panels, got {found}")]
    PanelCount { expected: usize, found: usize },
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

/// Seeded, reproducible distribution of `layout` over `grid`.
pub fn make_distribution(
    layout: &BlockLayout,
    grid: ProcessGrid,
    seed: u64,
) -> Result<Distribution, PlanError> {
    if layout.n_block_rows() == 0 || layout.n_block_cols() == 0 {
        return Err(PlanError::EmptyLayout);
    }
    let v = grid.v();
    let rows = Arc::new(DimDistribution::new(layout.n_block_rows(), v, seed));
    let cols = if layout.is_square() {
        rows.clone()
    } else {
        Arc::new(DimDistribution::new(layout.n_block_cols(), v, seed))
    };
    Ok(Distribution::new(grid, rows, cols))
}

/// A matrix split into one panel per rank.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributedMatrix {
    distribution: Arc<Distribution>,
    layout: Arc<BlockLayout>,
    panels: Vec<BlockCsrMatrix>,
}

impl DistributedMatrix {
    /// Assembles a distributed matrix from per-rank panels, checking ownership.
    pub fn from_panels(
        distribution: Arc<Distribution>,
        layout: Arc<BlockLayout>,
        panels: Vec<BlockCsrMatrix>,
    ) -> Result<Self, PlanError> {
        let grid = distribution.grid();
        if panels.len() != grid.size() {
            return Err(PlanError::PanelCount {
                expected: grid.size(),
                found: panels.len(),
            });
        }
        check_dims(&distribution, &layout)?;
        for (rank, p) in panels.iter().enumerate() {
            crate::blockcsr::ensure_same_layout(p.layout(), &layout)?;
            for blk in p.blocks() {
                let owner = distribution.owner(blk.row, blk.col);
                if owner != rank {
                    return Err(PlanError::ForeignBlock {
                        rank,
                        row: blk.row,
                        col: blk.col,
                        owner,
                    });
                }
            }
        }
        Ok(Self {
            distribution,
            layout,
            panels,
        })
    }

    /// All-empty panels.
    pub fn zeros(
        distribution: Arc<Distribution>,
        layout: Arc<BlockLayout>,
    ) -> Result<Self, PlanError> {
        check_dims(&distribution, &layout)?;
        let panels = (0..distribution.grid().size())
            .map(|_| BlockCsrMatrix::empty(layout.clone()))
            .collect();
        Ok(Self {
            distribution,
            layout,
            panels,
        })
    }

    pub(crate) fn from_parts_unchecked(
        distribution: Arc<Distribution>,
        layout: Arc<BlockLayout>,
        panels: Vec<BlockCsrMatrix>,
    ) -> Self {
        Self {
            distribution,
            layout,
            panels,
        }
    }

    pub fn grid(&self) -> ProcessGrid {
        self.distribution.grid()
    }

    pub fn distribution(&self) -> &Arc<Distribution> {
        &self.distribution
    }

    pub fn layout(&self) -> &Arc<BlockLayout> {
        &self.layout
    }

    pub fn panels(&self) -> &[BlockCsrMatrix] {
        &self.panels
    }

    pub fn panel(&self, i: usize, j: usize) -> &BlockCsrMatrix {
        &self.panels[self.grid().rank_of(i, j)]
    }

    pub fn into_panels(self) -> Vec<BlockCsrMatrix> {
        self.panels
    }

    /// Union of all panels as one matrix.
    pub fn reassemble(&self) -> BlockCsrMatrix {
        let entries = self
            .panels
            .iter()
            .flat_map(|p| p.blocks().map(|b| (b.row, b.col, b.values.to_vec())))
            .collect();
        BlockCsrMatrix::build(self.layout.clone(), entries)
            .expect("panels are disjoint and share the layout")
    }

    pub fn n_blocks(&self) -> usize {
        self.panels.iter().map(|p| p.n_blocks()).sum()
    }

    pub fn occupancy(&self) -> f64 {
        let total = self.layout.total_rows() * self.layout.total_cols();
        if total == 0 {
            return 0.0;
        }
        self.panels.iter().map(|p| p.n_values()).sum::<usize>() as f64 / total as f64
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.panels
            .iter()
            .map(|p| {
                let n = p.frobenius_norm();
                n * n
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Applies `f` to every panel, keeping the distribution.
    pub fn map_panels<F>(&self, f: F) -> Result<Self, MatrixError>
    where
        F: Fn(usize, &BlockCsrMatrix) -> Result<BlockCsrMatrix, MatrixError>,
    {
        let panels = self
            .panels
            .iter()
            .enumerate()
            .map(|(rank, p)| f(rank, p))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_parts_unchecked(
            self.distribution.clone(),
            self.layout.clone(),
            panels,
        ))
    }
}

fn check_dims(d: &Distribution, layout: &BlockLayout) -> Result<(), PlanError> {
    if d.rows().len() != layout.n_block_rows() || d.cols().len() != layout.n_block_cols() {
        return Err(PlanError::DistributionMismatch {
            dist_rows: d.rows().len(),
            dist_cols: d.cols().len(),
            rows: layout.n_block_rows(),
            cols: layout.n_block_cols(),
        });
    }
    Ok(())
}

/// Splits `m` into disjoint per-rank panels following `d`.
pub fn partition(m: &BlockCsrMatrix, d: Arc<Distribution>) -> Result<DistributedMatrix, PlanError> {
    check_dims(&d, m.layout())?;
    let grid = d.grid();
    let mut entries: Vec<Vec<(usize, usize, Vec<f64>)>> = vec![Vec::new(); grid.size()];
    for blk in m.blocks() {
        entries[d.owner(blk.row, blk.col)].push((blk.row, blk.col, blk.values.to_vec()));
    }
    let panels = entries
        .into_iter()
        .map(|e| BlockCsrMatrix::build(m.layout().clone(), e))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DistributedMatrix::from_parts_unchecked(
        d,
        m.layout().clone(),
        panels,
    ))
}

/// One remote read of an A or B image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Fetch {
    /// Grid coordinates of the rank holding the image.
    pub src: (usize, usize),
    pub virtual_index: usize,
    /// Receive slot the image lands in.
    pub slot: usize,
}

/// One local multiply `C[target] += A[a_slot] * B[b_slot]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Compute {
    pub a_slot: usize,
    pub b_slot: usize,
    /// `(icomp3d, jcomp3d)`: which of the group's C panels is updated.
    pub target: (usize, usize),
    /// Grid coordinates of the rank owning that C panel.
    pub home: (usize, usize),
    /// The partial panel is complete after this product and leaves the rank.
    pub send_partial: bool,
}

/// Work of one loop iteration `t` in `0..=V`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScheduleStep {
    pub iteration: usize,
    pub fetch_a: Option<Fetch>,
    pub fetch_b: Option<Fetch>,
    pub compute: Option<Compute>,
    /// Value of the A/B comm slot indices after this iteration's fetches.
    pub comm_slots: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RankSchedule {
    pub coords: (usize, usize),
    pub coords3d: Coords3d,
    pub steps: Vec<ScheduleStep>,
}

impl RankSchedule {
    pub fn a_fetches(&self) -> usize {
        self.steps.iter().filter(|s| s.fetch_a.is_some()).count()
    }

    pub fn b_fetches(&self) -> usize {
        self.steps.iter().filter(|s| s.fetch_b.is_some()).count()
    }

    pub fn computes(&self) -> usize {
        self.steps.iter().filter(|s| s.compute.is_some()).count()
    }

    pub fn partial_sends(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| s.compute.is_some_and(|c| c.send_partial))
            .count()
    }
}

/// Per-rank, per-iteration plan of the replicated one-sided multiplication.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MultiplySchedule {
    pub topology: Topology,
    pub ranks: Vec<RankSchedule>,
}

/// Plans fetches, slot rotation, local products and partial-C transfers for
/// every rank of `t`.
pub fn build_schedule(t: &Topology) -> MultiplySchedule {
    let grid = t.grid();
    let v = t.v();
    let l = t.l();
    let square_replicated = t.is_square() && l > 1;
    let nbuf_a = t.nbuffers_a();
    let ranks = (0..grid.size())
        .map(|rank| {
            let (i, j) = grid.coords(rank);
            let c3 = t.rank_coords_3d(i, j);
            let mut comm_a = vec![false; t.l_r()];
            let mut comm_b = vec![false; t.l_c()];
            let mut lcomm_a = nbuf_a - 1;
            let mut lcomm_b = 1usize;
            let (mut icomp, mut jcomp) = (0usize, 0usize);
            let (mut lcomp_a, mut lcomp_b) = (0usize, 0usize);
            let mut steps = Vec::with_capacity(v + 1);
            for it in 0..=v {
                let mut step = ScheduleStep {
                    iteration: it,
                    fetch_a: None,
                    fetch_b: None,
                    compute: None,
                    comm_slots: (lcomm_a, lcomm_b),
                };
                let mut slot_now = (0, 0);
                if it < v {
                    if it % l == 0 {
                        comm_a.iter_mut().for_each(|f| *f = true);
                        comm_b.iter_mut().for_each(|f| *f = true);
                    }
                    let (icomm, jcomm) = t.panel_slot(it);
                    slot_now = (icomm, jcomm);
                    let vi = t.virtual_index(i, j, it);
                    if comm_a[icomm] {
                        comm_a[icomm] = false;
                        lcomm_a = (lcomm_a + 1) % nbuf_a;
                        step.fetch_a = Some(Fetch {
                            src: t.a_source_rank(i, j, it),
                            virtual_index: vi,
                            slot: lcomm_a,
                        });
                    }
                    if comm_b[jcomm] {
                        comm_b[jcomm] = false;
                        lcomm_b = (lcomm_b + 1) % 2;
                        step.fetch_b = Some(Fetch {
                            src: t.b_source_rank(i, j, it),
                            virtual_index: vi,
                            slot: lcomm_b,
                        });
                    }
                    step.comm_slots = (lcomm_a, lcomm_b);
                }
                if it > 0 {
                    let home = t.c_home(i, j, icomp, jcomp);
                    step.compute = Some(Compute {
                        a_slot: lcomp_a,
                        b_slot: lcomp_b,
                        target: (icomp, jcomp),
                        home,
                        send_partial: it > v - l && l > 1 && home != (i, j),
                    });
                }
                if it < v {
                    icomp = slot_now.0;
                    jcomp = slot_now.1;
                    lcomp_a = if square_replicated { icomp } else { lcomm_a };
                    lcomp_b = lcomm_b;
                }
                steps.push(step);
            }
            RankSchedule {
                coords: (i, j),
                coords3d: c3,
                steps,
            }
        })
        .collect();
    MultiplySchedule {
        topology: t.clone(),
        ranks,
    }
}

/// A failure of the coverage property found by [`verify_coverage`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoverageViolation {
    /// A product used an A and a B image with different virtual indices.
    MismatchedPair {
        rank: (usize, usize),
        iteration: usize,
        a: Option<usize>,
        b: Option<usize>,
    },
    /// A C panel received the listed virtual indices instead of `0..V` once each.
    BadContraction {
        panel: (usize, usize),
        indices: Vec<usize>,
    },
    /// A fetch overwrote the slot read by the product of the same iteration.
    SlotConflict {
        rank: (usize, usize),
        iteration: usize,
    },
    /// The partial-C sends of a rank differ from `L - 1`.
    PartialSends { rank: (usize, usize), count: usize },
}

/// Replays the slot contents of every rank and checks that each C panel
/// receives every virtual index exactly once, from matching A/B images.
pub fn verify_coverage(s: &MultiplySchedule) -> Vec<CoverageViolation> {
    let t = &s.topology;
    let mut violations = Vec::new();
    let mut per_panel: Vec<Vec<usize>> = vec![Vec::new(); t.grid().size()];
    for rs in &s.ranks {
        let mut a_slots: Vec<Option<usize>> = vec![None; t.nbuffers_a()];
        let mut b_slots: Vec<Option<usize>> = vec![None; 2];
        let mut pending: Vec<(bool, usize, usize)> = Vec::new();
        for step in &rs.steps {
            // completion of the previous iteration's reads
            for (is_a, slot, vi) in pending.drain(..) {
                if is_a {
                    a_slots[slot] = Some(vi);
                } else {
                    b_slots[slot] = Some(vi);
                }
            }
            if let Some(c) = step.compute {
                let in_flight = |f: Option<Fetch>, s: usize| f.is_some_and(|f| f.slot == s);
                if in_flight(step.fetch_a, c.a_slot) || in_flight(step.fetch_b, c.b_slot) {
                    violations.push(CoverageViolation::SlotConflict {
                        rank: rs.coords,
                        iteration: step.iteration,
                    });
                }
                let (a, b) = (a_slots[c.a_slot], b_slots[c.b_slot]);
                match (a, b) {
                    (Some(x), Some(y)) if x == y => {
                        per_panel[t.grid().rank_of(c.home.0, c.home.1)].push(x)
                    }
                    _ => violations.push(CoverageViolation::MismatchedPair {
                        rank: rs.coords,
                        iteration: step.iteration,
                        a,
                        b,
                    }),
                }
            }
            if let Some(f) = step.fetch_a {
                pending.push((true, f.slot, f.virtual_index));
            }
            if let Some(f) = step.fetch_b {
                pending.push((false, f.slot, f.virtual_index));
            }
        }
        let sends = rs.partial_sends();
        if sends != t.l() - 1 {
            violations.push(CoverageViolation::PartialSends {
                rank: rs.coords,
                count: sends,
            });
        }
    }
    for (rank, mut idx) in per_panel.into_iter().enumerate() {
        idx.sort_unstable();
        let expected: Vec<usize> = (0..t.v()).collect();
        if idx != expected {
            violations.push(CoverageViolation::BadContraction {
                panel: t.grid().coords(rank),
                indices: idx,
            });
        }
    }
    violations
}

impl MultiplySchedule {
    pub fn rank(&self, i: usize, j: usize) -> &RankSchedule {
        &self.ranks[self.topology.grid().rank_of(i, j)]
    }

    /// Debug dump, one row per fetch iteration and rank:
    /// `tick,rank_i,rank_j,fetchA,srcA_i,srcA_j,fetchB,srcB_i,srcB_j,bufA,bufB`.
    pub fn to_csv(&self) -> String {
        let t = &self.topology;
        let mut out = String::from(
            "tick,rank_i,rank_j,fetchA,srcA_i,srcA_j,fetchB,srcB_i,srcB_j,bufA,bufB\n",
        );
        for tick in 0..t.v() {
            for rs in &self.ranks {
                let (i, j) = rs.coords;
                let step = &rs.steps[tick];
                let (ai, aj) = t.a_source_rank(i, j, tick);
                let (bi, bj) = t.b_source_rank(i, j, tick);
                let _ = writeln!(
                    out,
                    "{tick},{i},{j},{},{ai},{aj},{},{bi},{bj},{},{}",
                    step.fetch_a.is_some() as u8,
                    step.fetch_b.is_some() as u8,
                    step.comm_slots.0,
                    step.comm_slots.1
                );
            }
        }
        out
    }

    /// Distinct `(A source, virtual index)` pairs fetched by a rank.
    pub fn distinct_a_fetches(&self, i: usize, j: usize) -> usize {
        self.rank(i, j)
            .steps
            .iter()
            .filter_map(|s| s.fetch_a.map(|f| (f.src, f.virtual_index)))
            .collect::<HashSet<_>>()
            .len()
    }
}
