//! Message passing between logical ranks.
//!
//! A run is a set of `P` ranks, each executing the same closure on its own OS
//! thread and talking to the others only through a [`RankContext`]. Messages are
//! opaque byte vectors matched by (source, tag) with FIFO order per
//! (source, destination, tag).
//!
//! Two backends share the same mailbox machinery:
//!
//! * [`Backend::Deterministic`] lets exactly one rank run at a time. A rank keeps
//!   running until it blocks (receive without a message, barrier not complete) or
//!   finishes, then hands over to the next runnable rank in round-robin order
//!   starting after itself. The interleaving is therefore a pure function of the
//!   program. If no rank can run the world is torn down with a wait-for report.
//! * [`Backend::Threads`] runs all ranks concurrently; a blocked rank gives up
//!   after a timeout.
//!
//! Results never depend on the interleaving because matching is by (source, tag)
//! and every reduction in the crate is order independent.

mod counters;
pub mod wire;

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::str::FromStr;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

pub use counters::{PeerTraffic, TrafficCounters};

use crate::error::{Error, Result};
use crate::sum::ExactSum;
use wire::{Reader, Writer};

/// Largest tag available to callers; higher values are reserved for collectives.
pub const MAX_USER_TAG: u32 = u32::MAX;

const COLLECTIVE_BIT: u64 = 1 << 62;
const SPARSE_BIT: u64 = 1 << 61;
const TAG_GATHER: u64 = COLLECTIVE_BIT | 1;
const TAG_SCATTER: u64 = COLLECTIVE_BIT | 2;
const TAG_BCAST: u64 = COLLECTIVE_BIT | 3;

const RANK_STACK_BYTES: usize = 32 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backend {
    Deterministic,
    Threads { timeout: Duration },
}

impl Backend {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

    pub fn threads() -> Self {
        Backend::Threads {
            timeout: Self::DEFAULT_TIMEOUT,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Backend::Deterministic => "deterministic",
            Backend::Threads { .. } => "threads",
        }
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(Backend::Deterministic),
            "threads" => Ok(Backend::threads()),
            other => Err(Error::config(format!(
                "unknown backend '{other}' (expected deterministic or threads)"
            ))),
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Wait {
    Recv { src: usize, tag: u64 },
    Barrier { generation: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Status {
    Ready,
    Blocked(Wait),
    Done,
    Failed,
}

struct State {
    mailboxes: HashMap<(usize, usize, u64), VecDeque<Vec<u8>>>,
    status: Vec<Status>,
    baton: usize,
    barrier_arrived: usize,
    barrier_generation: u64,
    abort: Option<String>,
    deadlock: Option<String>,
}

impl State {
    fn satisfied(&self, rank: usize, wait: Wait) -> bool {
        match wait {
            Wait::Recv { src, tag } => self
                .mailboxes
                .get(&(rank, src, tag))
                .is_some_and(|q| !q.is_empty()),
            Wait::Barrier { generation } => self.barrier_generation > generation,
        }
    }

    fn runnable(&self, rank: usize) -> bool {
        match self.status[rank] {
            Status::Ready => true,
            Status::Blocked(w) => self.satisfied(rank, w),
            Status::Done | Status::Failed => false,
        }
    }

    fn next_runnable(&self, after: usize) -> Option<usize> {
        let n = self.status.len();
        (1..=n).map(|k| (after + k) % n).find(|&r| self.runnable(r))
    }

    fn deadlock_report(&self) -> String {
        let mut lines = Vec::new();
        for (r, s) in self.status.iter().enumerate() {
            let what = match s {
                Status::Blocked(Wait::Recv { src, tag }) => {
                    format!("rank {r} waits for a message from rank {src} ({})", describe_tag(*tag))
                }
                Status::Blocked(Wait::Barrier { .. }) => format!("rank {r} waits at a barrier"),
                Status::Done => format!("rank {r} has finished"),
                Status::Failed => format!("rank {r} has failed"),
                Status::Ready => format!("rank {r} is ready"),
            };
            lines.push(what);
        }
        if let Some(cycle) = self.wait_cycle() {
            let path: Vec<String> = cycle.iter().map(|r| r.to_string()).collect();
            lines.push(format!("wait-for cycle: {}", path.join(" -> ")));
        }
        lines.join("; ")
    }

    /// Follows receive edges (rank -> awaited source) looking for a cycle.
    fn wait_cycle(&self) -> Option<Vec<usize>> {
        for start in 0..self.status.len() {
            let mut path = vec![start];
            let mut cur = start;
            while let Status::Blocked(Wait::Recv { src, .. }) = self.status[cur] {
                if let Some(pos) = path.iter().position(|&r| r == src) {
                    let mut cycle = path[pos..].to_vec();
                    cycle.push(src);
                    return Some(cycle);
                }
                path.push(src);
                cur = src;
            }
        }
        None
    }
}

fn describe_tag(tag: u64) -> String {
    if tag & SPARSE_BIT != 0 {
        format!("sparse exchange tag {}", tag & 0xffff_ffff)
    } else if tag & COLLECTIVE_BIT != 0 {
        match tag {
            TAG_GATHER => "gather".into(),
            TAG_SCATTER => "scatter".into(),
            TAG_BCAST => "broadcast".into(),
            _ => format!("collective {tag:#x}"),
        }
    } else {
        format!("tag {tag}")
    }
}

struct Shared {
    backend: Backend,
    state: Mutex<State>,
    wake: Vec<Condvar>,
}

impl Shared {
    fn new(size: usize, backend: Backend) -> Self {
        Self {
            backend,
            state: Mutex::new(State {
                mailboxes: HashMap::new(),
                status: vec![Status::Ready; size],
                baton: 0,
                barrier_arrived: 0,
                barrier_generation: 0,
                abort: None,
                deadlock: None,
            }),
            wake: (0..size).map(|_| Condvar::new()).collect(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        // a panicking rank is reported through its result; keep the state usable
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn notify_all(&self) {
        for c in &self.wake {
            c.notify_all();
        }
    }

    fn aborted_error(st: &State) -> Error {
        match &st.deadlock {
            Some(report) => Error::Deadlock {
                report: report.clone(),
            },
            None => Error::Aborted(st.abort.clone().unwrap_or_default()),
        }
    }

    fn wait_for_start(&self, rank: usize) -> Result<()> {
        if self.backend != Backend::Deterministic {
            return Ok(());
        }
        let mut st = self.lock();
        while st.baton != rank && st.abort.is_none() {
            st = self.wake[rank].wait(st).unwrap_or_else(|e| e.into_inner());
        }
        match st.abort {
            Some(_) => Err(Self::aborted_error(&st)),
            None => Ok(()),
        }
    }

    /// Blocks until `wait` is satisfied and returns the guard with the condition holding.
    fn block_until<'a>(
        &'a self,
        rank: usize,
        mut st: MutexGuard<'a, State>,
        wait: Wait,
    ) -> Result<MutexGuard<'a, State>> {
        match self.backend {
            Backend::Deterministic => loop {
                if st.abort.is_some() {
                    return Err(Self::aborted_error(&st));
                }
                if st.satisfied(rank, wait) {
                    st.status[rank] = Status::Ready;
                    return Ok(st);
                }
                st.status[rank] = Status::Blocked(wait);
                match st.next_runnable(rank) {
                    Some(next) => {
                        st.baton = next;
                        self.wake[next].notify_all();
                    }
                    None => {
                        let report = st.deadlock_report();
                        st.abort = Some(report.clone());
                        st.deadlock = Some(report.clone());
                        self.notify_all();
                        return Err(Error::Deadlock { report });
                    }
                }
                while st.baton != rank && st.abort.is_none() {
                    st = self.wake[rank].wait(st).unwrap_or_else(|e| e.into_inner());
                }
            },
            Backend::Threads { timeout } => {
                let deadline = Instant::now() + timeout;
                loop {
                    if st.abort.is_some() {
                        return Err(Self::aborted_error(&st));
                    }
                    if st.satisfied(rank, wait) {
                        st.status[rank] = Status::Ready;
                        return Ok(st);
                    }
                    st.status[rank] = Status::Blocked(wait);
                    let now = Instant::now();
                    if now >= deadline {
                        let waiting_on = match wait {
                            Wait::Recv { src, tag } => {
                                format!("a message from rank {src} ({})", describe_tag(tag))
                            }
                            Wait::Barrier { .. } => "a barrier".to_string(),
                        };
                        let err = Error::Timeout {
                            rank,
                            seconds: timeout.as_secs_f64(),
                            waiting_on,
                        };
                        st.abort = Some(err.to_string());
                        self.notify_all();
                        return Err(err);
                    }
                    st = self.wake[rank]
                        .wait_timeout(st, deadline - now)
                        .unwrap_or_else(|e| e.into_inner())
                        .0;
                }
            }
        }
    }

    fn finish(&self, rank: usize, error: Option<&Error>) {
        let mut st = self.lock();
        match error {
            Some(e) => {
                st.status[rank] = Status::Failed;
                if st.abort.is_none() {
                    st.abort = Some(format!("rank {rank} failed: {e}"));
                }
                self.notify_all();
            }
            None => {
                st.status[rank] = Status::Done;
                if self.backend == Backend::Deterministic && st.abort.is_none() {
                    match st.next_runnable(rank) {
                        Some(next) => {
                            st.baton = next;
                            self.wake[next].notify_all();
                        }
                        None => {
                            let unfinished = st
                                .status
                                .iter()
                                .any(|s| !matches!(s, Status::Done | Status::Failed));
                            if unfinished {
                                let report = st.deadlock_report();
                                st.abort = Some(report.clone());
                                st.deadlock = Some(report);
                                self.notify_all();
                            }
                        }
                    }
                }
            }
        }
    }
}

/// One rank's handle on the world. Created by [`launch`], one per rank.
pub struct RankContext<'w> {
    rank: usize,
    size: usize,
    shared: &'w Shared,
    counters: RefCell<TrafficCounters>,
    sparse_seq: Cell<u64>,
}

impl<'w> RankContext<'w> {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn world_size(&self) -> usize {
        self.size
    }

    pub fn is_root(&self) -> bool {
        self.rank == 0
    }

    pub fn backend(&self) -> Backend {
        self.shared.backend
    }

    /// Snapshot of this rank's traffic so far.
    pub fn counters(&self) -> TrafficCounters {
        self.counters.borrow().clone()
    }

    fn check_peer(&self, peer: usize) -> Result<()> {
        if peer >= self.size {
            return Err(Error::Transport {
                rank: self.rank,
                message: format!("peer {peer} out of range for world size {}", self.size),
            });
        }
        if peer == self.rank {
            return Err(Error::Transport {
                rank: self.rank,
                message: "send to self; local data must be handled directly".into(),
            });
        }
        Ok(())
    }

    fn raw_send(&self, peer: usize, tag: u64, payload: Vec<u8>) -> Result<()> {
        self.check_peer(peer)?;
        let len = payload.len();
        {
            let mut st = self.shared.lock();
            if st.abort.is_some() {
                return Err(Shared::aborted_error(&st));
            }
            st.mailboxes
                .entry((peer, self.rank, tag))
                .or_default()
                .push_back(payload);
        }
        if self.shared.backend != Backend::Deterministic {
            self.shared.wake[peer].notify_all();
        }
        self.counters.borrow_mut().record_send(peer, len);
        Ok(())
    }

    fn raw_receive(&self, peer: usize, tag: u64) -> Result<Vec<u8>> {
        self.check_peer(peer)?;
        let st = self.shared.lock();
        let mut st = self
            .shared
            .block_until(self.rank, st, Wait::Recv { src: peer, tag })?;
        let payload = st
            .mailboxes
            .get_mut(&(self.rank, peer, tag))
            .and_then(|q| q.pop_front())
            .expect("wait condition guarantees a message");
        drop(st);
        self.counters.borrow_mut().record_receive(peer, payload.len());
        Ok(payload)
    }

    /// Delivers `payload` to `peer`. Never blocks.
    pub fn send(&self, peer: usize, tag: u32, payload: Vec<u8>) -> Result<()> {
        self.raw_send(peer, tag as u64, payload)
    }

    /// Blocks until a message from `peer` with `tag` is available and returns it.
    pub fn receive(&self, peer: usize, tag: u32) -> Result<Vec<u8>> {
        self.raw_receive(peer, tag as u64)
    }

    /// No rank returns until every rank has entered. Carries no payload.
    pub fn barrier(&self) -> Result<()> {
        let mut st = self.shared.lock();
        if st.abort.is_some() {
            return Err(Shared::aborted_error(&st));
        }
        let generation = st.barrier_generation;
        st.barrier_arrived += 1;
        if st.barrier_arrived == self.size {
            st.barrier_arrived = 0;
            st.barrier_generation += 1;
            if self.shared.backend != Backend::Deterministic {
                self.shared.notify_all();
            }
            return Ok(());
        }
        self.shared
            .block_until(self.rank, st, Wait::Barrier { generation })
            .map(drop)
    }

    /// Root (rank 0) receives every rank's payload indexed by rank; others get `None`.
    pub fn gather_to_root(&self, payload: Vec<u8>) -> Result<Option<Vec<Vec<u8>>>> {
        if self.rank != 0 {
            self.raw_send(0, TAG_GATHER, payload)?;
            return Ok(None);
        }
        let mut all = Vec::with_capacity(self.size);
        all.push(payload);
        for src in 1..self.size {
            all.push(self.raw_receive(src, TAG_GATHER)?);
        }
        Ok(Some(all))
    }

    /// Root passes one payload per rank; every rank gets its own.
    pub fn scatter_from_root(&self, payloads: Option<Vec<Vec<u8>>>) -> Result<Vec<u8>> {
        if self.rank != 0 {
            return self.raw_receive(0, TAG_SCATTER);
        }
        let payloads = payloads.ok_or_else(|| Error::Transport {
            rank: 0,
            message: "scatter root called without payloads".into(),
        })?;
        if payloads.len() != self.size {
            return Err(Error::Transport {
                rank: 0,
                message: format!("scatter needs {} payloads, got {}", self.size, payloads.len()),
            });
        }
        let mut it = payloads.into_iter();
        let mine = it.next().unwrap();
        for (dst, p) in it.enumerate() {
            self.raw_send(dst + 1, TAG_SCATTER, p)?;
        }
        Ok(mine)
    }

    /// Root's payload is delivered to every rank.
    pub fn broadcast(&self, payload: Option<Vec<u8>>) -> Result<Vec<u8>> {
        if self.rank != 0 {
            return self.raw_receive(0, TAG_BCAST);
        }
        let payload = payload.ok_or_else(|| Error::Transport {
            rank: 0,
            message: "broadcast root called without payload".into(),
        })?;
        for dst in 1..self.size {
            self.raw_send(dst, TAG_BCAST, payload.clone())?;
        }
        Ok(payload)
    }

    /// Every rank receives every rank's payload, indexed by rank.
    pub fn all_gather(&self, payload: Vec<u8>) -> Result<Vec<Vec<u8>>> {
        if self.size == 1 {
            return Ok(vec![payload]);
        }
        let packed = self.gather_to_root(payload)?.map(|all| {
            let mut w = Writer::new();
            for p in &all {
                w.u64(p.len() as u64).bytes(p);
            }
            w.finish()
        });
        let packed = self.broadcast(packed)?;
        let mut r = Reader::new(&packed);
        let mut out = Vec::with_capacity(self.size);
        for _ in 0..self.size {
            let n = r.u64()? as usize;
            out.push(r.bytes(n)?.to_vec());
        }
        r.finish()?;
        Ok(out)
    }

    /// Global exact sums; the result does not depend on how values are spread over ranks.
    pub fn allreduce_exact(&self, local: &[ExactSum]) -> Result<Vec<f64>> {
        if self.size == 1 {
            return Ok(local.iter().map(ExactSum::value).collect());
        }
        let mut w = Writer::new();
        w.u32(local.len() as u32);
        for s in local {
            let b = s.to_bytes();
            w.u32(b.len() as u32).bytes(&b);
        }
        let result = self.gather_to_root(w.finish())?.map(|all| -> Result<Vec<u8>> {
            let mut totals = vec![ExactSum::new(); local.len()];
            for p in &all {
                let mut r = Reader::new(p);
                let n = r.u32()? as usize;
                if n != local.len() {
                    return Err(Error::Wire("allreduce length mismatch between ranks".into()));
                }
                for t in totals.iter_mut() {
                    let len = r.u32()? as usize;
                    t.merge(&ExactSum::from_bytes(r.bytes(len)?)?);
                }
                r.finish()?;
            }
            let mut w = Writer::new();
            for t in &totals {
                w.f64(t.value());
            }
            Ok(w.finish())
        });
        let result = match result {
            Some(r) => Some(r?),
            None => None,
        };
        decode_f64s(&self.broadcast(result)?, local.len())
    }

    /// Convenience form of [`allreduce_exact`](Self::allreduce_exact) taking one partial value per slot.
    pub fn allreduce_sum(&self, local: &[f64]) -> Result<Vec<f64>> {
        let sums: Vec<ExactSum> = local.iter().map(|&x| std::iter::once(x).collect()).collect();
        self.allreduce_exact(&sums)
    }

    pub fn allreduce_max(&self, local: &[f64]) -> Result<Vec<f64>> {
        self.allreduce_with(local, f64::max)
    }

    pub fn allreduce_min(&self, local: &[f64]) -> Result<Vec<f64>> {
        self.allreduce_with(local, f64::min)
    }

    fn allreduce_with(&self, local: &[f64], op: fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        if self.size == 1 {
            return Ok(local.to_vec());
        }
        let mut w = Writer::new();
        for &x in local {
            w.f64(x);
        }
        let combined = match self.gather_to_root(w.finish())? {
            Some(all) => {
                let mut acc = local.to_vec();
                for p in &all[1..] {
                    for (a, b) in acc.iter_mut().zip(decode_f64s(p, local.len())?) {
                        *a = op(*a, b);
                    }
                }
                let mut w = Writer::new();
                for x in acc {
                    w.f64(x);
                }
                Some(w.finish())
            }
            None => None,
        };
        decode_f64s(&self.broadcast(combined)?, local.len())
    }

    /// Neighbourhood exchange where each rank only knows what it sends.
    ///
    /// Empty payloads are not transmitted. All ranks must call this collectively;
    /// the return value lists received payloads sorted by source rank. Sends,
    /// then a barrier, then draining the mailbox: once the barrier has passed every
    /// message of this round is already queued.
    pub fn sparse_exchange(&self, tag: u32, outgoing: Vec<(usize, Vec<u8>)>) -> Result<Vec<(usize, Vec<u8>)>> {
        let seq = self.sparse_seq.get();
        self.sparse_seq.set(seq + 1);
        let wire_tag = SPARSE_BIT | ((seq & 0x1fff_ffff) << 32) | tag as u64;
        for (peer, payload) in outgoing {
            if !payload.is_empty() {
                self.raw_send(peer, wire_tag, payload)?;
            }
        }
        if self.size > 1 {
            self.barrier()?;
        }
        let mut received = Vec::new();
        let mut st = self.shared.lock();
        for src in 0..self.size {
            if let Some(q) = st.mailboxes.get_mut(&(self.rank, src, wire_tag)) {
                while let Some(p) = q.pop_front() {
                    received.push((src, p));
                }
                st.mailboxes.remove(&(self.rank, src, wire_tag));
            }
        }
        drop(st);
        let mut c = self.counters.borrow_mut();
        for (src, p) in &received {
            c.record_receive(*src, p.len());
        }
        Ok(received)
    }
}

fn decode_f64s(bytes: &[u8], n: usize) -> Result<Vec<f64>> {
    let mut r = Reader::new(bytes);
    let out = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(out)
}

fn panic_message(p: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".into()
    }
}

/// Runs `body` on `size` ranks and returns the per-rank results in rank order.
///
/// If any rank fails the others are woken and aborted; the returned error is the
/// root cause (lowest failing rank that was not merely aborted).
pub fn launch<R, F>(backend: Backend, size: usize, body: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(&RankContext<'_>) -> Result<R> + Sync,
{
    if size == 0 {
        return Err(Error::config("world size must be at least 1"));
    }
    let shared = Shared::new(size, backend);
    let results: Vec<Result<R>> = thread::scope(|scope| {
        let handles: Vec<_> = (0..size)
            .map(|rank| {
                let shared = &shared;
                let body = &body;
                thread::Builder::new()
                    .name(format!("rank-{rank}"))
                    .stack_size(RANK_STACK_BYTES)
                    .spawn_scoped(scope, move || {
                        let ctx = RankContext {
                            rank,
                            size,
                            shared,
                            counters: RefCell::new(TrafficCounters::new(size)),
                            sparse_seq: Cell::new(0),
                        };
                        let out = match shared.wait_for_start(rank) {
                            Ok(()) => match catch_unwind(AssertUnwindSafe(|| body(&ctx))) {
                                Ok(r) => r,
                                Err(p) => Err(Error::Transport {
                                    rank,
                                    message: format!("panicked: {}", panic_message(p.as_ref())),
                                }),
                            },
                            Err(e) => Err(e),
                        };
                        shared.finish(rank, out.as_ref().err());
                        out
                    })
                    .expect("failed to spawn rank thread")
            })
            .collect();
        handles
            .into_iter()
            .enumerate()
            .map(|(rank, h)| {
                h.join().unwrap_or_else(|_| {
                    Err(Error::Transport {
                        rank,
                        message: "rank thread panicked".into(),
                    })
                })
            })
            .collect()
    });

    let mut first_error = None;
    let mut values = Vec::with_capacity(size);
    for r in results {
        match r {
            Ok(v) => values.push(v),
            Err(e) => {
                let root_cause = !matches!(e, Error::Aborted(_));
                match &first_error {
                    None => first_error = Some(e),
                    Some(Error::Aborted(_)) if root_cause => first_error = Some(e),
                    _ => {}
                }
            }
        }
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok(values),
    }
}
