use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::time::Duration;

use bsmm::blockcsr::{BlockCsrMatrix, BlockLayout};
use bsmm::gridplan::{validate_l, ProcessGrid, Topology};
use bsmm::transport::{
    trace_csv, CommStats, Completed, Kind, Payload, Runtime, TransportConfig, TransportError,
};

fn runtime(pr: usize, pc: usize) -> (Runtime, Topology) {
    let t = validate_l(pr, pc, 1).unwrap();
    (Runtime::new(t.grid(), TransportConfig::default()), t)
}

fn short_timeout(grid: ProcessGrid) -> Runtime {
    Runtime::new(
        grid,
        TransportConfig {
            timeout: Duration::from_millis(300),
            ..Default::default()
        },
    )
}

#[test]
fn single_rank_runs_body() {
    let (rt, t) = runtime(1, 1);
    let out = rt
        .spawn_ranks(&t, |ctx| Ok::<_, TransportError>(ctx.rank() + 41))
        .unwrap();
    assert_eq!(out.results, vec![41]);
    assert_eq!(out.stats[0], CommStats::default());
}

#[test]
fn neighbor_exchange_after_barrier() {
    let (rt, t) = runtime(3, 3);
    let out = rt
        .spawn_ranks(&t, |ctx| {
            ctx.barrier()?;
            let (i, j) = ctx.coords();
            let right = ctx.rank_of(i, (j + 1) % 3);
            let left = ctx.rank_of(i, (j + 2) % 3);
            let s = ctx.isend(right, Kind::A, 0, Payload::raw(vec![ctx.rank() as u8]))?;
            let r = ctx.irecv(left, Kind::A, 0)?;
            let done = ctx.waitall(vec![s, r])?;
            assert_eq!(done[0], Completed::Sent);
            Ok::<_, TransportError>(done[1].clone().into_payload().unwrap().bytes()[0] as usize)
        })
        .unwrap();
    for (rank, got) in out.results.iter().enumerate() {
        let (i, j) = (rank / 3, rank % 3);
        assert_eq!(*got, i * 3 + (j + 2) % 3);
    }
    assert!(out.stats.iter().all(|s| s.msgs_a == 1 && s.payload_a == 1));
}

#[derive(Debug, thiserror::Error)]
enum BodyError {
    #[error("boom")]
    Boom,
    #[error(transparent)]
    Transport(#[from] TransportError),
}

#[test]
fn failing_rank_is_identified_and_others_stop() {
    let grid = ProcessGrid::new(2, 2).unwrap();
    let rt = short_timeout(grid);
    let t = Topology::two_d(grid);
    let err = rt
        .spawn_ranks(&t, |ctx| {
            if ctx.rank() == 2 {
                return Err(BodyError::Boom);
            }
            // would wait forever without the abort
            let r = ctx.irecv(2, Kind::B, 0)?;
            ctx.waitall(vec![r])?;
            Ok(())
        })
        .unwrap_err();
    assert_eq!(err.rank, 2);
    assert!(matches!(err.error, BodyError::Boom));
}

#[test]
fn panicking_rank_is_reported() {
    let (rt, t) = runtime(1, 2);
    let err = rt
        .spawn_ranks(&t, |ctx| {
            if ctx.rank() == 1 {
                panic!("bad rank");
            }
            Ok::<_, TransportError>(())
        })
        .unwrap_err();
    assert_eq!(err.rank, 1);
    assert!(matches!(err.error, TransportError::Panic { rank: 1, .. }));
}

#[test]
fn unmatched_receive_times_out() {
    let grid = ProcessGrid::new(1, 2).unwrap();
    let rt = short_timeout(grid);
    let err = rt
        .spawn_ranks(&Topology::two_d(grid), |ctx| {
            if ctx.rank() == 0 {
                let r = ctx.irecv(1, Kind::C, 7)?;
                ctx.waitall(vec![r])?;
            }
            Ok::<_, TransportError>(())
        })
        .unwrap_err();
    assert_eq!(err.rank, 0);
    assert!(matches!(err.error, TransportError::Timeout { rank: 0, .. }));
}

#[test]
fn empty_panel_counts_metadata_only() {
    let (rt, t) = runtime(1, 2);
    let layout = Arc::new(BlockLayout::uniform(3, 2).unwrap());
    let empty = BlockCsrMatrix::empty(layout);
    let out = rt
        .spawn_ranks(&t, |ctx| {
            let reqs = if ctx.rank() == 0 {
                vec![ctx.isend(1, Kind::A, 0, Payload::from_panel(&empty))?]
            } else {
                vec![ctx.irecv(0, Kind::A, 0)?]
            };
            ctx.waitall(reqs)?;
            Ok::<_, TransportError>(())
        })
        .unwrap();
    let s = &out.stats[1];
    assert_eq!((s.payload_a, s.meta_a, s.msgs_a), (0, 8, 1));
    assert_eq!(out.stats[0].msgs_a, 0);
}

#[test]
fn ping_pong_is_bit_exact() {
    let (rt, t) = runtime(2, 1);
    let layout = Arc::new(BlockLayout::uniform(2, 2).unwrap());
    let m = BlockCsrMatrix::build(
        layout.clone(),
        vec![(0, 1, vec![f64::MIN_POSITIVE, -0.0, 1.0 / 3.0, f64::MAX])],
    )
    .unwrap();
    let out = rt
        .spawn_ranks(&t, |ctx| {
            if ctx.rank() == 0 {
                let s = ctx.isend(1, Kind::B, 0, Payload::from_panel(&m))?;
                let r = ctx.irecv(1, Kind::B, 1)?;
                let back = ctx
                    .waitall(vec![s, r])?
                    .pop()
                    .unwrap()
                    .into_payload()
                    .unwrap();
                Ok::<_, TransportError>(Some(back.to_panel(layout.clone())?))
            } else {
                let r = ctx.irecv(0, Kind::B, 0)?;
                let got = ctx.waitall(vec![r])?.pop().unwrap().into_payload().unwrap();
                let s = ctx.isend(0, Kind::B, 1, got)?;
                ctx.waitall(vec![s])?;
                Ok(None)
            }
        })
        .unwrap();
    let back = out.results[0].clone().unwrap();
    let bits = |x: &BlockCsrMatrix| x.to_dense().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&m));
}

#[test]
fn send_completes_only_after_receiver_matches() {
    let (rt, t) = runtime(1, 2);
    let posted = AtomicBool::new(false);
    rt.spawn_ranks(&t, |ctx| {
        if ctx.rank() == 0 {
            let s = ctx.isend(1, Kind::A, 0, Payload::raw(vec![1, 2, 3]))?;
            ctx.waitall(vec![s])?;
            assert!(
                posted.load(Ordering::SeqCst),
                "send finished before the receive"
            );
        } else {
            std::thread::sleep(Duration::from_millis(100));
            posted.store(true, Ordering::SeqCst);
            let r = ctx.irecv(0, Kind::A, 0)?;
            ctx.waitall(vec![r])?;
        }
        Ok::<_, TransportError>(())
    })
    .unwrap();
}

#[test]
fn rget_does_not_need_owner_progress() {
    let (rt, t) = runtime(2, 2);
    let (tx, rx) = mpsc::channel::<()>();
    let rx = Mutex::new(rx);
    let finished = AtomicUsize::new(0);
    let out = rt
        .spawn_ranks(&t, |ctx| {
            ctx.window_create(Kind::A, vec![Payload::raw(vec![ctx.rank() as u8; 4])]);
            ctx.barrier()?;
            if ctx.rank() == 0 {
                // parked until every reader is done
                rx.lock().unwrap().recv().unwrap();
                return Ok::<_, TransportError>(0);
            }
            let r = ctx.rget(0, Kind::A, 0, 0)?;
            let p = ctx.waitall(vec![r])?.pop().unwrap().into_payload().unwrap();
            if finished.fetch_add(1, Ordering::SeqCst) == 2 {
                tx.send(()).unwrap();
            }
            Ok(p.bytes().iter().map(|&b| b as usize).sum())
        })
        .unwrap();
    assert_eq!(out.results, vec![0, 0, 0, 0]);
    assert!(out.stats[1..]
        .iter()
        .all(|s| s.payload_a == 4 && s.msgs_a == 1));
}

#[test]
fn concurrent_rgets_see_identical_bytes_and_self_reads_count() {
    let (rt, t) = runtime(3, 3);
    let data: Vec<u8> = (0..=255).collect();
    let out = rt
        .spawn_ranks(&t, |ctx| {
            let img = if ctx.rank() == 4 {
                data.clone()
            } else {
                vec![]
            };
            ctx.window_create(Kind::B, vec![Payload::raw(img)]);
            ctx.barrier()?;
            let r = ctx.rget(4, Kind::B, 0, 0)?;
            let p = ctx.waitall(vec![r])?.pop().unwrap().into_payload().unwrap();
            Ok::<_, TransportError>(p.bytes().to_vec())
        })
        .unwrap();
    assert!(out.results.iter().all(|r| *r == data));
    assert_eq!(out.stats[4].payload_b, 256);
    assert_eq!(out.stats[4].self_payload, 256);
}

#[test]
fn self_transfers_can_be_excluded() {
    let t = validate_l(1, 2, 1).unwrap();
    let rt = Runtime::new(
        t.grid(),
        TransportConfig {
            count_self: false,
            ..Default::default()
        },
    );
    let out = rt
        .spawn_ranks(&t, |ctx| {
            ctx.window_create(Kind::A, vec![Payload::raw(vec![0; 10])]);
            ctx.barrier()?;
            let a = ctx.rget(ctx.rank(), Kind::A, 0, 0)?;
            let b = ctx.rget(1 - ctx.rank(), Kind::A, 0, 0)?;
            ctx.waitall(vec![a, b])?;
            Ok::<_, TransportError>(())
        })
        .unwrap();
    assert!(out
        .stats
        .iter()
        .all(|s| s.payload_a == 10 && s.self_payload == 0));
}

#[test]
fn stale_window_is_rejected() {
    let (rt, t) = runtime(1, 2);
    rt.spawn_ranks(&t, |ctx| {
        ctx.window_create(Kind::A, vec![Payload::raw(vec![1])]);
        Ok::<_, TransportError>(())
    })
    .unwrap();
    let err = rt
        .spawn_ranks(&t, |ctx| {
            if ctx.rank() == 0 {
                ctx.rget(1, Kind::A, 0, 0)?;
            }
            Ok::<_, TransportError>(())
        })
        .unwrap_err();
    assert!(matches!(
        err.error,
        TransportError::StaleWindow {
            owner: 1,
            window_epoch: 1,
            current: 2,
            ..
        }
    ));
    let err = rt
        .spawn_ranks(&t, |ctx| {
            ctx.rget(0, Kind::C, 0, 0)?;
            Ok::<_, TransportError>(())
        })
        .unwrap_err();
    assert!(matches!(err.error, TransportError::MissingWindow { .. }));
}

#[test]
fn unwaited_rget_breaks_the_ledger() {
    let (rt, t) = runtime(1, 1);
    let err = rt
        .spawn_ranks(&t, |ctx| {
            ctx.window_create(Kind::A, vec![Payload::raw(vec![5; 3])]);
            ctx.barrier()?;
            let _lost = ctx.rget(0, Kind::A, 0, 0)?;
            Ok::<_, TransportError>(())
        })
        .unwrap_err();
    assert!(matches!(
        err.error,
        TransportError::LedgerMismatch {
            kind: Kind::A,
            ledger: 3,
            counted: 0
        }
    ));
}

#[test]
fn preflight_reallocates_only_on_growth() {
    let (rt, t) = runtime(2, 2);
    let sizes = [10usize, 40, 25, 40, 5];
    let mut events = Vec::new();
    for step in sizes {
        let out = rt
            .spawn_ranks(&t, |ctx| {
                let need = step + ctx.rank();
                ctx.preflight_resize_check(Kind::A, need)
            })
            .unwrap();
        assert!(out.results.iter().all(|p| p.global_max == step + 3));
        events.push(out.reallocations);
    }
    assert_eq!(events, vec![4, 4, 0, 0, 0]);
    assert_eq!(rt.reallocations(), 8);
}

#[test]
fn sub_groups_partition_ranks_and_are_cached() {
    let t = validate_l(4, 4, 4).unwrap();
    let rt = Runtime::new(t.grid(), TransportConfig::default());
    let g = rt.sub_groups(&t);
    assert!(Arc::ptr_eq(&g, &rt.sub_groups(&t)));
    for rank in 0..16 {
        let sg = &g[rank];
        for grp in [&sg.row, &sg.col, &sg.layer, &sg.reduce] {
            assert_eq!(grp.members[grp.index], rank);
        }
        assert_eq!(sg.row.members.len(), 4);
        assert_eq!(sg.layer.members.len(), 4);
        assert_eq!(sg.reduce.members.len(), 4);
    }
    let mut layers: Vec<_> = g.iter().map(|s| s.layer.members.clone()).collect();
    layers.sort();
    layers.dedup();
    assert_eq!(layers.len(), 4);
    let all: usize = layers.iter().map(|l| l.len()).sum();
    assert_eq!(all, 16);
}

#[test]
fn trace_records_transfers() {
    let t = validate_l(1, 2, 1).unwrap();
    let rt = Runtime::new(
        t.grid(),
        TransportConfig {
            trace: true,
            ..Default::default()
        },
    );
    let out = rt
        .spawn_ranks(&t, |ctx| {
            let other = 1 - ctx.rank();
            let s = ctx.isend(other, Kind::C, -1, Payload::raw(vec![0; 2]))?;
            let r = ctx.irecv(other, Kind::C, -1)?;
            ctx.waitall(vec![s, r])?;
            Ok::<_, TransportError>(())
        })
        .unwrap();
    let csv = trace_csv(&out.trace);
    assert_eq!(
        csv,
        "epoch,tick,rank,kind,bytes,src_rank,dst_rank\n1,-1,0,C,2,1,0\n1,-1,1,C,2,0,1\n"
    );
}

#[test]
fn large_grid_smoke() {
    let (rt, t) = runtime(16, 16);
    let out = rt
        .spawn_ranks(&t, |ctx| {
            let n = ctx.size();
            let next = (ctx.rank() + 1) % n;
            let prev = (ctx.rank() + n - 1) % n;
            let s = ctx.isend(next, Kind::A, 0, Payload::raw(vec![1; 8]))?;
            let r = ctx.irecv(prev, Kind::A, 0)?;
            ctx.waitall(vec![s, r])?;
            ctx.allreduce_max(ctx.rank() as u64)
        })
        .unwrap();
    assert!(out.results.iter().all(|&m| m == 255));
}
