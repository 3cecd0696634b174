//! Replicated (2.5D) multiplication with one-sided reads.
//!
//! Each rank publishes its A and B images in read-only windows and pulls the
//! images it needs with `rget`; owners never take part. With `L > 1` a rank
//! keeps one partial C panel per member of its reduction group, reuses the
//! fetched images across the `L` products of a tick, and ships the finished
//! partials to their home ranks during the last `L - 1` products. The home
//! rank adds them in ascending layer order.

use crate::blockcsr::{
    add_accumulate, post_filter, BlockAccumulator, BlockCsrMatrix, FilterConfig, ProductCounts,
};
use crate::costmodel::buffer_count;
use crate::exec::{
    add_counts, payloads, product_frame, split_images, Algorithm, BufferLedger, MultiplyError,
    MultiplyOutcome,
};
use crate::gridplan::{build_schedule, resolve_l, DistributedMatrix, MultiplySchedule, Topology};
use crate::transport::{Kind, Payload, Request, Runtime, TransportConfig};

/// Temporary storage of one rank.
#[derive(Debug, Clone)]
pub struct RmaBuffers {
    pub window_a: Vec<Payload>,
    pub window_b: Vec<Payload>,
    pub a_slots: Vec<Option<BlockCsrMatrix>>,
    pub b_slots: Vec<Option<BlockCsrMatrix>>,
    /// `[i3][j3]`; the entry at the rank's own 3D coordinates is its C panel.
    pub c_partials: Vec<Vec<Option<BlockAccumulator>>>,
    pub c_reduce: Option<BlockCsrMatrix>,
    own: (usize, usize),
    partials_made: usize,
    reduce_used: bool,
}

impl RmaBuffers {
    fn new(t: &Topology, own: (usize, usize), own_panel: BlockAccumulator) -> Self {
        let mut c_partials = vec![vec![None; t.l_c()]; t.l_r()];
        c_partials[own.0][own.1] = Some(own_panel);
        Self {
            window_a: Vec::new(),
            window_b: Vec::new(),
            a_slots: vec![None; t.nbuffers_a()],
            b_slots: vec![None; 2],
            c_partials,
            c_reduce: None,
            own,
            partials_made: 0,
            reduce_used: false,
        }
    }

    /// Buffers that were actually allocated.
    pub fn ledger(&self) -> BufferLedger {
        BufferLedger {
            windows: 2,
            a_slots: self.a_slots.len(),
            b_slots: self.b_slots.len(),
            c_partials: self.partials_made,
            c_reduce: self.reduce_used as usize,
        }
    }

    fn take_partial(
        &mut self,
        target: (usize, usize),
        empty: impl FnOnce() -> BlockAccumulator,
    ) -> BlockAccumulator {
        self.c_partials[target.0][target.1]
            .take()
            .unwrap_or_else(|| {
                self.partials_made += 1;
                empty()
            })
    }
}

/// Adds `incoming` partial panels, keyed by source layer, to `home` in
/// ascending layer order. Every layer listed in `expected` must be present.
pub fn reduce_partials(
    home: &BlockCsrMatrix,
    incoming: Vec<(usize, BlockCsrMatrix)>,
    expected: &[usize],
    rank: usize,
) -> Result<BlockCsrMatrix, MultiplyError> {
    let mut incoming = incoming;
    incoming.sort_by_key(|(layer, _)| *layer);
    let mut want: Vec<usize> = expected.to_vec();
    want.sort_unstable();
    for &layer in &want {
        if !incoming.iter().any(|(l, _)| *l == layer) {
            return Err(MultiplyError::MissingPartial { rank, layer });
        }
    }
    let mut acc = home.clone();
    for (_, p) in &incoming {
        acc = add_accumulate(&acc, p)?;
    }
    Ok(acc)
}

/// `C + A * B` with replication factor `l` on a private runtime.
pub fn rma_multiply(
    a: &DistributedMatrix,
    b: &DistributedMatrix,
    c: &DistributedMatrix,
    cfg: &FilterConfig,
    l: usize,
) -> Result<MultiplyOutcome, MultiplyError> {
    let rt = Runtime::new(a.grid(), TransportConfig::default());
    rma_multiply_on(&rt, a, b, c, cfg, l)
}

/// `C + A * B` with replication factor `l` on `rt`, followed by the
/// post-filter. An invalid `l` falls back to 1; the reason is returned in
/// [`MultiplyOutcome::fallback`].
pub fn rma_multiply_on(
    rt: &Runtime,
    a: &DistributedMatrix,
    b: &DistributedMatrix,
    c: &DistributedMatrix,
    cfg: &FilterConfig,
    l: usize,
) -> Result<MultiplyOutcome, MultiplyError> {
    let (cdist, clayout) = product_frame(a, b, c)?;
    let (t, fallback) = resolve_l(a.grid(), l);
    let schedule = build_schedule(&t);
    rma_with_schedule(rt, a, b, c, cfg, &schedule).map(|(panels, mut o)| {
        o.result = DistributedMatrix::from_parts_unchecked(cdist, clayout, panels);
        o.fallback = fallback;
        o
    })
}

fn rma_with_schedule(
    rt: &Runtime,
    a: &DistributedMatrix,
    b: &DistributedMatrix,
    c: &DistributedMatrix,
    cfg: &FilterConfig,
    schedule: &MultiplySchedule,
) -> Result<(Vec<BlockCsrMatrix>, MultiplyOutcome), MultiplyError> {
    let t = &schedule.topology;
    let v = t.v();
    let expected_buffers = buffer_count(t);
    let out = rt.spawn_ranks(t, |ctx| {
        let (i, j) = ctx.coords();
        let me = ctx.rank();
        let (sc, sr) = (v / t.p_cols(), v / t.p_rows());
        let c3 = t.rank_coords_3d(i, j);
        let mut bufs = RmaBuffers::new(
            t,
            (c3.i3d, c3.j3d),
            BlockAccumulator::from_matrix(c.panel(i, j)),
        );
        bufs.window_a = payloads(&split_images(
            a.panel(i, j),
            a.distribution().cols(),
            true,
            j * sc,
            sc,
        ));
        bufs.window_b = payloads(&split_images(
            b.panel(i, j),
            b.distribution().rows(),
            false,
            i * sr,
            sr,
        ));

        let need_a = bufs.window_a.iter().map(Payload::len).sum();
        let need_b = bufs.window_b.iter().map(Payload::len).sum();
        ctx.preflight_resize_check(Kind::A, need_a)?;
        ctx.preflight_resize_check(Kind::B, need_b)?;
        ctx.window_create(Kind::A, bufs.window_a.clone());
        ctx.window_create(Kind::B, bufs.window_b.clone());
        ctx.barrier()?;

        let empty_c = || BlockAccumulator::new(c.layout().clone());
        let mut counts = ProductCounts::default();
        let mut multiplies = 0usize;
        let mut pending: Vec<Request> = Vec::new();
        let mut landing: Vec<(bool, usize)> = Vec::new();
        let mut c_sends: Vec<Request> = Vec::new();
        for step in &schedule.ranks[me].steps {
            if step.iteration > 0 {
                let done = ctx.waitall(std::mem::take(&mut pending))?;
                for ((is_a, slot), got) in landing.drain(..).zip(done) {
                    let p = got.into_payload().expect("remote read yields data");
                    if is_a {
                        bufs.a_slots[slot] = Some(p.to_panel(a.layout().clone())?);
                    } else {
                        bufs.b_slots[slot] = Some(p.to_panel(b.layout().clone())?);
                    }
                }
            }
            let tick = step.iteration as i64;
            if let Some(f) = step.fetch_a {
                let owner = ctx.rank_of(f.src.0, f.src.1);
                pending.push(ctx.rget(owner, Kind::A, f.virtual_index - f.src.1 * sc, tick)?);
                landing.push((true, f.slot));
            }
            if let Some(f) = step.fetch_b {
                let owner = ctx.rank_of(f.src.0, f.src.1);
                pending.push(ctx.rget(owner, Kind::B, f.virtual_index - f.src.0 * sr, tick)?);
                landing.push((false, f.slot));
            }
            if let Some(cmp) = step.compute {
                let mut target = bufs.take_partial(cmp.target, empty_c);
                let (Some(ab), Some(bb)) = (&bufs.a_slots[cmp.a_slot], &bufs.b_slots[cmp.b_slot])
                else {
                    return Err(MultiplyError::BufferLedger(format!(
                        "rank {me} multiplies an empty slot at iteration {}",
                        step.iteration
                    )));
                };
                let n = target.multiply_accumulate(ab, bb, cfg)?;
                bufs.c_partials[cmp.target.0][cmp.target.1] = Some(target);
                add_counts(&mut counts, n);
                multiplies += 1;
                if cmp.send_partial {
                    let done = bufs.c_partials[cmp.target.0][cmp.target.1]
                        .take()
                        .expect("partial exists")
                        .finish();
                    let home = ctx.rank_of(cmp.home.0, cmp.home.1);
                    c_sends.push(ctx.isend(home, Kind::C, tick, Payload::from_panel(&done))?);
                }
            }
        }

        let own = bufs.own;
        let mut panel = bufs.c_partials[own.0][own.1]
            .take()
            .expect("own panel")
            .finish();
        if t.l() > 1 {
            let mut recvs = Vec::new();
            let mut layers = Vec::new();
            let members = ctx.groups().reduce.members.clone();
            for &peer in members.iter().filter(|&&r| r != me) {
                let rs = &schedule.ranks[peer];
                let step = rs
                    .steps
                    .iter()
                    .find(|s| {
                        s.compute
                            .is_some_and(|c| c.send_partial && c.home == (i, j))
                    })
                    .ok_or(MultiplyError::MissingPartial {
                        rank: me,
                        layer: rs.coords3d.layer,
                    })?;
                recvs.push(ctx.irecv(peer, Kind::C, step.iteration as i64)?);
                layers.push(rs.coords3d.layer);
            }
            let nrecv = recvs.len();
            recvs.extend(c_sends);
            let mut incoming = Vec::with_capacity(nrecv);
            for (n, got) in ctx.waitall(recvs)?.into_iter().enumerate().take(nrecv) {
                let p = got.into_payload().expect("receive yields data");
                bufs.c_reduce = Some(p.to_panel(c.layout().clone())?);
                bufs.reduce_used = true;
                incoming.push((layers[n], bufs.c_reduce.take().unwrap()));
            }
            panel = reduce_partials(&panel, incoming, &layers, me)?;
        } else if !c_sends.is_empty() {
            ctx.waitall(c_sends)?;
        }
        let ledger = bufs.ledger();
        if ledger.total() != expected_buffers {
            return Err(MultiplyError::BufferLedger(format!(
                "rank {me} allocated {} buffers ({ledger:?}), expected {expected_buffers}",
                ledger.total()
            )));
        }
        Ok::<_, MultiplyError>((post_filter(&panel, cfg), multiplies, counts, ledger))
    })?;
    let mut products = ProductCounts::default();
    let mut local_multiplies = Vec::new();
    let mut panels = Vec::new();
    let mut buffers = Vec::new();
    for (p, n, k, led) in out.results {
        panels.push(p);
        local_multiplies.push(n);
        add_counts(&mut products, k);
        buffers.push(led);
    }
    let placeholder = DistributedMatrix::from_parts_unchecked(
        c.distribution().clone(),
        c.layout().clone(),
        Vec::new(),
    );
    Ok((
        panels,
        MultiplyOutcome {
            algorithm: Algorithm::Rma,
            result: placeholder,
            topology: t.clone(),
            fallback: None,
            stats: out.stats,
            trace: out.trace,
            local_multiplies,
            products,
            buffers,
            reallocations: out.reallocations,
            epoch: out.epoch,
        },
    ))
}
