//! In-process multi-rank runtime.
//!
//! Each rank runs on its own OS thread. Ranks talk through two contracts:
//!
//! * point-to-point: `isend` / `irecv` return requests, `waitall` completes
//!   them. A send completes only once the receiver has matched it, so both
//!   ends synchronize.
//! * one-sided: a rank publishes read-only windows of images; other ranks
//!   `rget` an image and complete the read locally, without the owner taking
//!   part.
//!
//! Traffic is counted per rank at the receiving (or requesting) end and,
//! independently, at the origin in a global ledger. The two are compared when
//! a run ends.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::blockcsr::{BlockCsrMatrix, BlockLayout, MatrixError};
use crate::gridplan::{ProcessGrid, Topology};

const POLL: Duration = Duration::from_millis(20);

/// Which matrix a transfer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Kind {
    A,
    B,
    C,
}

impl Kind {
    fn idx(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Kind::A => "A",
            Kind::B => "B",
            Kind::C => "C",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("rank {rank} timed out after {secs:.1}s waiting for {what}")]
    Timeout {
        rank: usize,
        what: String,
        secs: f64,
    },
    #[error("run aborted because another rank failed")]
    Aborted,
    #[error("rank {peer} is outside the grid of {size} ranks")]
    BadPeer { peer: usize, size: usize },
    #[error("rank {owner} has not published window {kind:?}")]
    MissingWindow { owner: usize, kind: Kind },
    #[error(
        "window {kind:?} of rank {owner} belongs to epoch {window_epoch}, run is at {current}"
    )]
    StaleWindow {
        owner: usize,
        kind: Kind,
        window_epoch: u64,
        current: u64,
    },
    #[error("image {index} requested from window {kind:?} of rank {owner} holding {len}")]
    ImageOutOfRange {
        owner: usize,
        kind: Kind,
        index: usize,
        len: usize,
    },
    #[error(
        "ledger mismatch for {kind:?}: origin counted {ledger} bytes, ranks counted {counted}"
    )]
    LedgerMismatch {
        kind: Kind,
        ledger: u64,
        counted: u64,
    },
    #[error("topology {found:?} does not match runtime grid {expected:?}")]
    GridMismatch {
        expected: ProcessGrid,
        found: ProcessGrid,
    },
    #[error("rank {rank} panicked: {msg}")]
    Panic { rank: usize, msg: String },
    #[error("malformed message: {0}")]
    Decode(#[from] MatrixError),
}

/// Failure of a run, tagged with the rank that failed first.
#[derive(Debug, Error)]
#[error("rank {rank} failed: {error}")]
pub struct RunError<E: std::error::Error + 'static> {
    pub rank: usize,
    #[source]
    pub error: E,
}

/// Serialized message: a BCSR1 wire image with its metadata length.
#[derive(Debug, Clone, PartialEq)]
pub struct Payload {
    bytes: Arc<[u8]>,
    meta_len: usize,
}

impl Payload {
    pub fn from_panel(m: &BlockCsrMatrix) -> Self {
        Self {
            bytes: m.to_wire().into(),
            meta_len: m.wire_meta_bytes(),
        }
    }

    /// Opaque bytes; all of them count as payload.
    pub fn raw(bytes: Vec<u8>) -> Self {
        Self {
            bytes: bytes.into(),
            meta_len: 0,
        }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn meta_len(&self) -> usize {
        self.meta_len
    }

    pub fn payload_len(&self) -> usize {
        self.bytes.len() - self.meta_len
    }

    pub fn to_panel(&self, layout: Arc<BlockLayout>) -> Result<BlockCsrMatrix, MatrixError> {
        BlockCsrMatrix::from_wire(layout, &self.bytes)
    }

    fn deep_copy(&self) -> Self {
        Self {
            bytes: self.bytes.to_vec().into(),
            meta_len: self.meta_len,
        }
    }
}

/// Per-rank traffic counters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CommStats {
    pub payload_a: u64,
    pub payload_b: u64,
    pub payload_c: u64,
    pub meta_a: u64,
    pub meta_b: u64,
    pub meta_c: u64,
    pub msgs_a: u64,
    pub msgs_b: u64,
    pub msgs_c: u64,
    pub waitall_events: u64,
    /// Payload bytes whose source was the receiving rank itself.
    pub self_payload: u64,
}

impl CommStats {
    pub fn bytes_a(&self) -> u64 {
        self.payload_a + self.meta_a
    }

    pub fn bytes_b(&self) -> u64 {
        self.payload_b + self.meta_b
    }

    pub fn bytes_c(&self) -> u64 {
        self.payload_c + self.meta_c
    }

    pub fn payload(&self, k: Kind) -> u64 {
        [self.payload_a, self.payload_b, self.payload_c][k.idx()]
    }

    pub fn bytes(&self, k: Kind) -> u64 {
        [self.bytes_a(), self.bytes_b(), self.bytes_c()][k.idx()]
    }

    pub fn msgs(&self, k: Kind) -> u64 {
        [self.msgs_a, self.msgs_b, self.msgs_c][k.idx()]
    }

    fn record(&mut self, k: Kind, p: &Payload, local: bool) {
        let (pl, meta) = (p.payload_len() as u64, p.meta_len() as u64);
        let (pf, mf, nf) = match k {
            Kind::A => (&mut self.payload_a, &mut self.meta_a, &mut self.msgs_a),
            Kind::B => (&mut self.payload_b, &mut self.meta_b, &mut self.msgs_b),
            Kind::C => (&mut self.payload_c, &mut self.meta_c, &mut self.msgs_c),
        };
        *pf += pl;
        *mf += meta;
        *nf += 1;
        if local {
            self.self_payload += pl;
        }
    }

    pub fn merge(&mut self, o: &CommStats) {
        self.payload_a += o.payload_a;
        self.payload_b += o.payload_b;
        self.payload_c += o.payload_c;
        self.meta_a += o.meta_a;
        self.meta_b += o.meta_b;
        self.meta_c += o.meta_c;
        self.msgs_a += o.msgs_a;
        self.msgs_b += o.msgs_b;
        self.msgs_c += o.msgs_c;
        self.waitall_events += o.waitall_events;
        self.self_payload += o.self_payload;
    }

    pub fn total<'a>(all: impl IntoIterator<Item = &'a CommStats>) -> CommStats {
        let mut t = CommStats::default();
        for s in all {
            t.merge(s);
        }
        t
    }
}

/// One counted transfer. `tick` is `-1` for a pre-shift.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceEvent {
    pub epoch: u64,
    pub tick: i64,
    pub rank: usize,
    pub kind: Kind,
    pub bytes: u64,
    pub src_rank: usize,
    pub dst_rank: usize,
}

pub fn trace_csv(events: &[TraceEvent]) -> String {
    let mut s = String::from("epoch,tick,rank,kind,bytes,src_rank,dst_rank\n");
    for e in events {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            e.epoch,
            e.tick,
            e.rank,
            e.kind.label(),
            e.bytes,
            e.src_rank,
            e.dst_rank
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TransportConfig {
    pub timeout: Duration,
    /// Count transfers a rank makes to itself.
    pub count_self: bool,
    pub trace: bool,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(30),
            count_self: true,
            trace: false,
        }
    }
}

/// Ranks of one communicator, and this rank's position in it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub members: Arc<Vec<usize>>,
    pub index: usize,
}

/// Sub-communicators of one rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubGroups {
    pub row: Group,
    pub col: Group,
    pub layer: Group,
    /// Ranks sharing the same C panels (one per layer).
    pub reduce: Group,
}

fn build_groups(t: &Topology) -> Vec<SubGroups> {
    let grid = t.grid();
    let p = grid.size();
    let mut by_key: [HashMap<usize, Vec<usize>>; 4] = Default::default();
    let keys = |rank: usize| {
        let (i, j) = grid.coords(rank);
        let c3 = t.rank_coords_3d(i, j);
        let s = t.side3d();
        [i, j, c3.layer, (i % s) * s + j % s]
    };
    for rank in 0..p {
        for (g, k) in keys(rank).into_iter().enumerate() {
            by_key[g].entry(k).or_default().push(rank);
        }
    }
    let shared: Vec<HashMap<usize, Arc<Vec<usize>>>> = by_key
        .into_iter()
        .map(|m| m.into_iter().map(|(k, v)| (k, Arc::new(v))).collect())
        .collect();
    (0..p)
        .map(|rank| {
            let k = keys(rank);
            let g = |n: usize| {
                let members = shared[n][&k[n]].clone();
                let index = members.iter().position(|&r| r == rank).unwrap();
                Group { members, index }
            };
            SubGroups {
                row: g(0),
                col: g(1),
                layer: g(2),
                reduce: g(3),
            }
        })
        .collect()
}

/// A published, immutable list of images.
#[derive(Debug)]
pub struct Window {
    owner: usize,
    kind: Kind,
    epoch: u64,
    images: Vec<Payload>,
    served: [AtomicU64; 2],
}

impl Window {
    pub fn owner(&self) -> usize {
        self.owner
    }

    pub fn kind(&self) -> Kind {
        self.kind
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn images(&self) -> &[Payload] {
        &self.images
    }
}

#[derive(Debug, Default)]
struct PoolState {
    capacity: HashMap<(usize, Kind), usize>,
    reallocations: u64,
}

#[derive(Default)]
struct Rendezvous {
    done: Mutex<bool>,
    cv: Condvar,
}

struct Envelope {
    src: usize,
    kind: Kind,
    tick: i64,
    payload: Payload,
    done: Arc<Rendezvous>,
}

#[derive(Default)]
struct Mailbox {
    queue: Mutex<Vec<Envelope>>,
    cv: Condvar,
}

#[derive(Default)]
struct CollState {
    arrived: usize,
    generation: u64,
    acc: u64,
    result: u64,
}

#[derive(Default)]
struct Collective {
    state: Mutex<CollState>,
    cv: Condvar,
}

struct Shared<'r> {
    rt: &'r Runtime,
    epoch: u64,
    size: usize,
    mailboxes: Vec<Mailbox>,
    coll: Collective,
    abort: AtomicBool,
    first_failure: Mutex<Option<usize>>,
    /// Bytes sent point-to-point, counted at the sender: [kind][payload, meta].
    sent: [[AtomicU64; 2]; 3],
    reallocations: AtomicU64,
}

impl Shared<'_> {
    fn fail(&self, rank: usize) {
        let mut f = self.first_failure.lock().unwrap();
        if f.is_none() {
            *f = Some(rank);
        }
        self.abort.store(true, Ordering::SeqCst);
    }
}

/// Per-rank communicators keyed by `(P_R, P_C, L)`.
type GroupCache = HashMap<(usize, usize, usize), Arc<Vec<SubGroups>>>;

/// Long-lived runtime for one process grid. Window capacities and published
/// windows persist across runs; each run is a new epoch.
pub struct Runtime {
    grid: ProcessGrid,
    config: TransportConfig,
    epoch: AtomicU64,
    windows: Vec<Mutex<HashMap<Kind, Arc<Window>>>>,
    pool: Mutex<PoolState>,
    groups: Mutex<GroupCache>,
}

/// Results of one run.
#[derive(Debug)]
pub struct RunOutput<T> {
    pub epoch: u64,
    pub results: Vec<T>,
    pub stats: Vec<CommStats>,
    pub trace: Vec<TraceEvent>,
    /// Window reallocations triggered by this run's preflight checks.
    pub reallocations: u64,
}

impl Runtime {
    pub fn new(grid: ProcessGrid, config: TransportConfig) -> Self {
        Self {
            grid,
            config,
            epoch: AtomicU64::new(0),
            windows: (0..grid.size()).map(|_| Mutex::default()).collect(),
            pool: Mutex::default(),
            groups: Mutex::default(),
        }
    }

    pub fn grid(&self) -> ProcessGrid {
        self.grid
    }

    pub fn config(&self) -> &TransportConfig {
        &self.config
    }

    /// Total window reallocations over the runtime's lifetime.
    pub fn reallocations(&self) -> u64 {
        self.pool.lock().unwrap().reallocations
    }

    /// Sub-groups for `t`, computed once per `(P_R, P_C, L)`.
    pub fn sub_groups(&self, t: &Topology) -> Arc<Vec<SubGroups>> {
        let key = (t.p_rows(), t.p_cols(), t.l());
        self.groups
            .lock()
            .unwrap()
            .entry(key)
            .or_insert_with(|| Arc::new(build_groups(t)))
            .clone()
    }

    /// Runs `body` once per rank of `t`, concurrently, and gathers results.
    pub fn spawn_ranks<T, E, F>(&self, t: &Topology, body: F) -> Result<RunOutput<T>, RunError<E>>
    where
        T: Send,
        E: std::error::Error + From<TransportError> + Send + 'static,
        F: Fn(&mut RankContext<'_>) -> Result<T, E> + Sync,
    {
        if t.grid() != self.grid {
            return Err(RunError {
                rank: 0,
                error: TransportError::GridMismatch {
                    expected: self.grid,
                    found: t.grid(),
                }
                .into(),
            });
        }
        let epoch = self.epoch.fetch_add(1, Ordering::SeqCst) + 1;
        let size = self.grid.size();
        let groups = self.sub_groups(t);
        let shared = Shared {
            rt: self,
            epoch,
            size,
            mailboxes: (0..size).map(|_| Mailbox::default()).collect(),
            coll: Collective::default(),
            abort: AtomicBool::new(false),
            first_failure: Mutex::new(None),
            sent: Default::default(),
            reallocations: AtomicU64::new(0),
        };
        let outcomes: Vec<(Result<T, E>, CommStats, Vec<TraceEvent>)> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..size)
                .map(|rank| {
                    let shared = &shared;
                    let body = &body;
                    let groups = &groups[rank];
                    std::thread::Builder::new()
                        .name(format!("rank-{rank}"))
                        .spawn_scoped(s, move || {
                            let mut ctx = RankContext {
                                rank,
                                coords: self.grid.coords(rank),
                                topology: t,
                                groups,
                                shared,
                                stats: CommStats::default(),
                                trace: Vec::new(),
                            };
                            let res = match catch_unwind(AssertUnwindSafe(|| body(&mut ctx))) {
                                Ok(r) => r,
                                Err(p) => {
                                    let msg = p
                                        .downcast_ref::<String>()
                                        .cloned()
                                        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                                        .unwrap_or_default();
                                    Err(TransportError::Panic { rank, msg }.into())
                                }
                            };
                            if res.is_err() {
                                shared.fail(rank);
                            }
                            (res, ctx.stats, ctx.trace)
                        })
                        .expect("spawn rank thread")
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("rank thread body is unwind-guarded"))
                .collect()
        });
        let first = *shared.first_failure.lock().unwrap();
        let mut results = Vec::with_capacity(size);
        let mut stats = Vec::with_capacity(size);
        let mut trace = Vec::new();
        let mut failure = None;
        for (rank, (res, st, tr)) in outcomes.into_iter().enumerate() {
            match res {
                Ok(v) => results.push(v),
                Err(e) => {
                    if Some(rank) == first || failure.is_none() {
                        failure = Some(RunError { rank, error: e });
                    }
                }
            }
            stats.push(st);
            trace.extend(tr);
        }
        if let Some(f) = failure {
            return Err(f);
        }
        if let Err(e) = self.audit(&shared, &stats) {
            return Err(RunError {
                rank: 0,
                error: e.into(),
            });
        }
        trace.sort_by_key(|e| (e.tick, e.rank, e.kind, e.src_rank));
        Ok(RunOutput {
            epoch,
            results,
            stats,
            trace,
            reallocations: shared.reallocations.load(Ordering::SeqCst),
        })
    }

    fn audit(&self, shared: &Shared<'_>, stats: &[CommStats]) -> Result<(), TransportError> {
        let total = CommStats::total(stats);
        let mut ledger = [0u64; 3];
        for (k, l) in ledger.iter_mut().enumerate() {
            *l =
                shared.sent[k][0].load(Ordering::SeqCst) + shared.sent[k][1].load(Ordering::SeqCst);
        }
        for w in &self.windows {
            for win in w.lock().unwrap().values() {
                if win.epoch == shared.epoch {
                    ledger[win.kind.idx()] +=
                        win.served[0].load(Ordering::SeqCst) + win.served[1].load(Ordering::SeqCst);
                }
            }
        }
        for kind in [Kind::A, Kind::B, Kind::C] {
            let counted = total.bytes(kind);
            if counted != ledger[kind.idx()] {
                return Err(TransportError::LedgerMismatch {
                    kind,
                    ledger: ledger[kind.idx()],
                    counted,
                });
            }
        }
        Ok(())
    }
}

/// Handle for a pending operation; complete it with [`RankContext::waitall`].
pub struct Request(Req);

enum Req {
    Send {
        dst: usize,
        done: Arc<Rendezvous>,
    },
    Recv {
        src: usize,
        kind: Kind,
        tick: i64,
    },
    Get {
        window: Arc<Window>,
        index: usize,
        tick: i64,
    },
}

impl std::fmt::Debug for Request {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.0 {
            Req::Send { dst, .. } => write!(f, "Send(to {dst})"),
            Req::Recv { src, kind, tick } => write!(f, "Recv({kind:?} from {src} at {tick})"),
            Req::Get { window, index, .. } => {
                write!(f, "Get({:?}[{index}] of {})", window.kind, window.owner)
            }
        }
    }
}

/// Outcome of a completed request.
#[derive(Debug, Clone, PartialEq)]
pub enum Completed {
    Sent,
    Received(Payload),
}

impl Completed {
    pub fn into_payload(self) -> Option<Payload> {
        match self {
            Completed::Sent => None,
            Completed::Received(p) => Some(p),
        }
    }
}

/// Outcome of [`RankContext::preflight_resize_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Preflight {
    pub global_max: usize,
    pub reallocated: bool,
}

/// What a rank's body sees of the runtime.
pub struct RankContext<'s> {
    rank: usize,
    coords: (usize, usize),
    topology: &'s Topology,
    groups: &'s SubGroups,
    shared: &'s Shared<'s>,
    stats: CommStats,
    trace: Vec<TraceEvent>,
}

impl RankContext<'_> {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn coords(&self) -> (usize, usize) {
        self.coords
    }

    pub fn topology(&self) -> &Topology {
        self.topology
    }

    pub fn groups(&self) -> &SubGroups {
        self.groups
    }

    pub fn size(&self) -> usize {
        self.shared.size
    }

    pub fn epoch(&self) -> u64 {
        self.shared.epoch
    }

    pub fn stats(&self) -> &CommStats {
        &self.stats
    }

    pub fn rank_of(&self, i: usize, j: usize) -> usize {
        self.shared.rt.grid.rank_of(i, j)
    }

    fn check_peer(&self, peer: usize) -> Result<(), TransportError> {
        if peer >= self.shared.size {
            return Err(TransportError::BadPeer {
                peer,
                size: self.shared.size,
            });
        }
        Ok(())
    }

    fn counts(&self, src: usize, dst: usize) -> bool {
        src != dst || self.shared.rt.config.count_self
    }

    /// Waits on `cv` until `ready` holds, honoring abort and the timeout.
    fn block_on<'g, T, R>(
        &self,
        mut guard: MutexGuard<'g, T>,
        cv: &Condvar,
        what: impl Fn() -> String,
        mut ready: impl FnMut(&mut T) -> Option<R>,
    ) -> Result<R, TransportError> {
        let timeout = self.shared.rt.config.timeout;
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(r) = ready(&mut guard) {
                return Ok(r);
            }
            if self.shared.abort.load(Ordering::SeqCst) {
                return Err(TransportError::Aborted);
            }
            let now = Instant::now();
            if now >= deadline {
                self.shared.fail(self.rank);
                return Err(TransportError::Timeout {
                    rank: self.rank,
                    what: what(),
                    secs: timeout.as_secs_f64(),
                });
            }
            guard = cv.wait_timeout(guard, POLL.min(deadline - now)).unwrap().0;
        }
    }

    fn account(&mut self, kind: Kind, tick: i64, src: usize, p: &Payload) {
        if !self.counts(src, self.rank) {
            return;
        }
        self.stats.record(kind, p, src == self.rank);
        if self.shared.rt.config.trace {
            self.trace.push(TraceEvent {
                epoch: self.shared.epoch,
                tick,
                rank: self.rank,
                kind,
                bytes: p.len() as u64,
                src_rank: src,
                dst_rank: self.rank,
            });
        }
    }

    /// Starts sending `payload` to rank `dst`.
    pub fn isend(
        &mut self,
        dst: usize,
        kind: Kind,
        tick: i64,
        payload: Payload,
    ) -> Result<Request, TransportError> {
        self.check_peer(dst)?;
        if self.counts(self.rank, dst) {
            let s = &self.shared.sent[kind.idx()];
            s[0].fetch_add(payload.payload_len() as u64, Ordering::SeqCst);
            s[1].fetch_add(payload.meta_len() as u64, Ordering::SeqCst);
        }
        let done = Arc::new(Rendezvous::default());
        let mb = &self.shared.mailboxes[dst];
        mb.queue.lock().unwrap().push(Envelope {
            src: self.rank,
            kind,
            tick,
            payload,
            done: done.clone(),
        });
        mb.cv.notify_all();
        Ok(Request(Req::Send { dst, done }))
    }

    /// Posts a receive for the message tagged `(kind, tick)` from `src`.
    pub fn irecv(&mut self, src: usize, kind: Kind, tick: i64) -> Result<Request, TransportError> {
        self.check_peer(src)?;
        Ok(Request(Req::Recv { src, kind, tick }))
    }

    /// Creates this rank's window of `kind` for the current epoch. Other
    /// ranks may read it once a [`barrier`](Self::barrier) has passed.
    pub fn window_create(&mut self, kind: Kind, images: Vec<Payload>) -> Arc<Window> {
        let w = Arc::new(Window {
            owner: self.rank,
            kind,
            epoch: self.shared.epoch,
            images,
            served: Default::default(),
        });
        self.shared.rt.windows[self.rank]
            .lock()
            .unwrap()
            .insert(kind, w.clone());
        w
    }

    /// Starts a remote read of image `index` of `owner`'s window `kind`.
    pub fn rget(
        &mut self,
        owner: usize,
        kind: Kind,
        index: usize,
        tick: i64,
    ) -> Result<Request, TransportError> {
        self.check_peer(owner)?;
        let window = self.shared.rt.windows[owner]
            .lock()
            .unwrap()
            .get(&kind)
            .cloned()
            .ok_or(TransportError::MissingWindow { owner, kind })?;
        if window.epoch != self.shared.epoch {
            return Err(TransportError::StaleWindow {
                owner,
                kind,
                window_epoch: window.epoch,
                current: self.shared.epoch,
            });
        }
        let img = window
            .images
            .get(index)
            .ok_or(TransportError::ImageOutOfRange {
                owner,
                kind,
                index,
                len: window.images.len(),
            })?;
        if self.counts(owner, self.rank) {
            window.served[0].fetch_add(img.payload_len() as u64, Ordering::SeqCst);
            window.served[1].fetch_add(img.meta_len() as u64, Ordering::SeqCst);
        }
        Ok(Request(Req::Get {
            window,
            index,
            tick,
        }))
    }

    /// Completes all `reqs`; results are in request order.
    ///
    /// Receives are matched first, then the call blocks until every send
    /// issued here has been matched by its receiver. Remote reads complete
    /// locally.
    pub fn waitall(&mut self, reqs: Vec<Request>) -> Result<Vec<Completed>, TransportError> {
        self.stats.waitall_events += 1;
        let mut out: Vec<Option<Completed>> = (0..reqs.len()).map(|_| None).collect();
        let mut sends = Vec::new();
        for (n, r) in reqs.into_iter().enumerate() {
            match r.0 {
                Req::Recv { src, kind, tick } => {
                    let mb = &self.shared.mailboxes[self.rank];
                    let env = self.block_on(
                        mb.queue.lock().unwrap(),
                        &mb.cv,
                        || format!("{kind:?} message from rank {src} at tick {tick}"),
                        |q| {
                            q.iter()
                                .position(|e| e.src == src && e.kind == kind && e.tick == tick)
                                .map(|pos| q.remove(pos))
                        },
                    )?;
                    *env.done.done.lock().unwrap() = true;
                    env.done.cv.notify_all();
                    self.account(kind, tick, src, &env.payload);
                    out[n] = Some(Completed::Received(env.payload));
                }
                Req::Get {
                    window,
                    index,
                    tick,
                } => {
                    let p = window.images[index].deep_copy();
                    self.account(window.kind, tick, window.owner, &p);
                    out[n] = Some(Completed::Received(p));
                }
                Req::Send { dst, done } => sends.push((n, dst, done)),
            }
        }
        for (n, dst, done) in sends {
            self.block_on(
                done.done.lock().unwrap(),
                &done.cv,
                || format!("rank {dst} to match a send"),
                |d| d.then_some(()),
            )?;
            out[n] = Some(Completed::Sent);
        }
        Ok(out.into_iter().map(|c| c.unwrap()).collect())
    }

    /// Maximum of `value` over all ranks; also a full barrier.
    pub fn allreduce_max(&mut self, value: u64) -> Result<u64, TransportError> {
        let c = &self.shared.coll;
        let mut st = c.state.lock().unwrap();
        st.acc = st.acc.max(value);
        st.arrived += 1;
        let gen = st.generation;
        if st.arrived == self.shared.size {
            st.result = st.acc;
            st.acc = 0;
            st.arrived = 0;
            st.generation += 1;
            c.cv.notify_all();
            return Ok(st.result);
        }
        self.block_on(
            st,
            &c.cv,
            || "a collective to complete".to_string(),
            |s| (s.generation != gen).then_some(s.result),
        )
    }

    pub fn barrier(&mut self) -> Result<(), TransportError> {
        self.allreduce_max(0).map(|_| ())
    }

    /// Agrees on the largest window size any rank needs for `kind` and grows
    /// this rank's pooled window only if it is smaller than that.
    pub fn preflight_resize_check(
        &mut self,
        kind: Kind,
        required: usize,
    ) -> Result<Preflight, TransportError> {
        let global_max = self.allreduce_max(required as u64)? as usize;
        let mut pool = self.shared.rt.pool.lock().unwrap();
        let cap = pool.capacity.entry((self.rank, kind)).or_insert(0);
        let reallocated = global_max > *cap;
        if reallocated {
            *cap = global_max;
            pool.reallocations += 1;
            self.shared.reallocations.fetch_add(1, Ordering::SeqCst);
        }
        Ok(Preflight {
            global_max,
            reallocated,
        })
    }
}
