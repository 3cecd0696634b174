//! Cannon-style multiplication on the virtual grid with point-to-point shifts.
//!
//! Every tick each rank receives one A image and one B image, multiplies the
//! pair it received on the previous tick and swaps its communication and
//! computation buffers. Images are sent by the rank that owns them, so the
//! same code runs on square and rectangular grids. C panels stay local.

use std::sync::Arc;

use crate::blockcsr::{
    post_filter, BlockAccumulator, BlockCsrMatrix, BlockLayout, FilterConfig, ProductCounts,
};
use crate::exec::{
    add_counts, payloads, product_frame, split_images, Algorithm, MultiplyError, MultiplyOutcome,
};
use crate::gridplan::{DistributedMatrix, Topology};
use crate::transport::{Kind, Payload, RankContext, Request, Runtime, TransportConfig};

/// Tag of the initial alignment shift.
pub const PRE_SHIFT_TICK: i64 = -1;

/// The four image buffers of one rank.
#[derive(Debug, Clone, Default)]
pub struct PtpBuffers {
    pub a_comm: Option<BlockCsrMatrix>,
    pub a_comp: Option<BlockCsrMatrix>,
    pub b_comm: Option<BlockCsrMatrix>,
    pub b_comp: Option<BlockCsrMatrix>,
}

impl PtpBuffers {
    pub const COUNT: usize = 4;

    pub fn swap(&mut self) {
        std::mem::swap(&mut self.a_comm, &mut self.a_comp);
        std::mem::swap(&mut self.b_comm, &mut self.b_comp);
    }
}

struct RankImages {
    a: Vec<Payload>,
    b: Vec<Payload>,
    a_layout: Arc<BlockLayout>,
    b_layout: Arc<BlockLayout>,
}

/// Posts the sends this rank owes for `tick` and the two receives it needs.
/// The receives are the last two requests, A first.
fn start_shift(
    ctx: &mut RankContext<'_>,
    t: &Topology,
    img: &RankImages,
    tick: usize,
    tag: i64,
) -> Result<Vec<Request>, MultiplyError> {
    let (i, j) = ctx.coords();
    let (pr, pc, v) = (t.p_rows(), t.p_cols(), t.v());
    let (sc, sr) = (v / pc, v / pr);
    let mut reqs = Vec::new();
    for j2 in 0..pc {
        let vi = t.virtual_index(i, j2, tick);
        if vi / sc == j {
            let dst = ctx.rank_of(i, j2);
            reqs.push(ctx.isend(dst, Kind::A, tag, img.a[vi - j * sc].clone())?);
        }
    }
    for i2 in 0..pr {
        let vi = t.virtual_index(i2, j, tick);
        if vi / sr == i {
            let dst = ctx.rank_of(i2, j);
            reqs.push(ctx.isend(dst, Kind::B, tag, img.b[vi - i * sr].clone())?);
        }
    }
    let (am, ak) = t.a_source_rank(i, j, tick);
    let (bk, bn) = t.b_source_rank(i, j, tick);
    let (sa, sb) = (ctx.rank_of(am, ak), ctx.rank_of(bk, bn));
    reqs.push(ctx.irecv(sa, Kind::A, tag)?);
    reqs.push(ctx.irecv(sb, Kind::B, tag)?);
    Ok(reqs)
}

fn finish_shift(
    ctx: &mut RankContext<'_>,
    reqs: Vec<Request>,
    img: &RankImages,
    bufs: &mut PtpBuffers,
) -> Result<(), MultiplyError> {
    let mut done = ctx.waitall(reqs)?;
    let b = done
        .pop()
        .and_then(|c| c.into_payload())
        .expect("B receive");
    let a = done
        .pop()
        .and_then(|c| c.into_payload())
        .expect("A receive");
    bufs.a_comm = Some(a.to_panel(img.a_layout.clone())?);
    bufs.b_comm = Some(b.to_panel(img.b_layout.clone())?);
    Ok(())
}

/// `C + A * B` with a private runtime.
pub fn cannon_multiply(
    a: &DistributedMatrix,
    b: &DistributedMatrix,
    c: &DistributedMatrix,
    cfg: &FilterConfig,
) -> Result<MultiplyOutcome, MultiplyError> {
    let rt = Runtime::new(a.grid(), TransportConfig::default());
    cannon_multiply_on(&rt, a, b, c, cfg)
}

/// `C + A * B` on `rt`, followed by the post-filter.
pub fn cannon_multiply_on(
    rt: &Runtime,
    a: &DistributedMatrix,
    b: &DistributedMatrix,
    c: &DistributedMatrix,
    cfg: &FilterConfig,
) -> Result<MultiplyOutcome, MultiplyError> {
    let (cdist, clayout) = product_frame(a, b, c)?;
    let t = Topology::two_d(a.grid());
    let v = t.v();
    let out = rt.spawn_ranks(&t, |ctx| {
        let (i, j) = ctx.coords();
        let (sc, sr) = (v / t.p_cols(), v / t.p_rows());
        let img = RankImages {
            a: payloads(&split_images(
                a.panel(i, j),
                a.distribution().cols(),
                true,
                j * sc,
                sc,
            )),
            b: payloads(&split_images(
                b.panel(i, j),
                b.distribution().rows(),
                false,
                i * sr,
                sr,
            )),
            a_layout: a.layout().clone(),
            b_layout: b.layout().clone(),
        };
        let mut bufs = PtpBuffers::default();
        let mut panel = BlockAccumulator::from_matrix(c.panel(i, j));
        let mut counts = ProductCounts::default();
        let mut multiplies = 0;

        let pre = start_shift(ctx, &t, &img, 0, PRE_SHIFT_TICK)?;
        finish_shift(ctx, pre, &img, &mut bufs)?;
        bufs.swap();
        for tick in 0..v {
            let pending = if tick + 1 < v {
                Some(start_shift(ctx, &t, &img, tick + 1, (tick + 1) as i64)?)
            } else {
                None
            };
            let (ac, bc) = (bufs.a_comp.as_ref().unwrap(), bufs.b_comp.as_ref().unwrap());
            let n = panel.multiply_accumulate(ac, bc, cfg)?;
            add_counts(&mut counts, n);
            multiplies += 1;
            if let Some(reqs) = pending {
                finish_shift(ctx, reqs, &img, &mut bufs)?;
            }
            bufs.swap();
        }
        Ok::<_, MultiplyError>((post_filter(&panel.finish(), cfg), multiplies, counts))
    })?;
    let mut products = ProductCounts::default();
    let mut local_multiplies = Vec::with_capacity(out.results.len());
    let mut panels = Vec::with_capacity(out.results.len());
    for (p, n, k) in out.results {
        panels.push(p);
        local_multiplies.push(n);
        add_counts(&mut products, k);
    }
    Ok(MultiplyOutcome {
        algorithm: Algorithm::Ptp,
        result: DistributedMatrix::from_parts_unchecked(cdist, clayout, panels),
        topology: t,
        fallback: None,
        stats: out.stats,
        trace: out.trace,
        local_multiplies,
        products,
        buffers: Vec::new(),
        reallocations: out.reallocations,
        epoch: out.epoch,
    })
}
