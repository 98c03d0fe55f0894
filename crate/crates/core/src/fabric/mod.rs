//! Simulated multi-rank communication fabric.
//!
//! Every rank runs as a cooperative task on one thread. The driver polls the
//! ranks round-robin in rank order; a full round in which no rank makes
//! progress is a deadlock. Message matching is FIFO per `(src, dst, tag)`, so
//! results never depend on the polling order.

mod log;
mod topology;

use std::any::{type_name, Any};
use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::future::{poll_fn, Future};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

use thiserror::Error;

pub use log::{CommEvent, CommKind, CommLog, StageRecord, StageTimeline, Stream};
pub use topology::Topology;

use crate::attnref::AttentionPartial;
use crate::numcore::{Real, Tensor3};
use log::Ledger;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FabricError {
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("rank {rank} addressed out-of-range peer {peer}")]
    BadPeer { rank: usize, peer: usize },
    #[error("deadlock: {0}")]
    Deadlock(WaitGraph),
    #[error("rank {rank} expected {expected} from rank {src} tag {tag:?} but got {got}")]
    PayloadMismatch {
        rank: usize,
        src: usize,
        tag: String,
        expected: &'static str,
        got: &'static str,
    },
    #[error("collective {label:?} has ragged chunk sizes {sizes:?}")]
    Ragged { label: String, sizes: Vec<u64> },
    #[error("collective call on group {group:?} by rank {rank}: {reason}")]
    Collective { rank: usize, group: Vec<usize>, reason: String },
    #[error("rank {rank} moved from stage {from} back to {to}")]
    StageOrder { rank: usize, from: u32, to: u32 },
    #[error("rank {rank} panicked: {message}")]
    RankPanic { rank: usize, message: String },
    #[error("{count} undelivered message(s) from rank {src} to rank {dst} tag {tag:?}")]
    Undelivered { src: usize, dst: usize, tag: String, count: usize },
}

/// What each blocked rank was waiting for when the world stalled.
#[derive(Debug, Clone, PartialEq)]
pub struct WaitGraph {
    pub waits: Vec<(usize, Wait)>,
}

impl WaitGraph {
    /// `(waiting rank, rank it waits on)` edges.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (r, w) in &self.waits {
            match w {
                Wait::Recv { src, .. } => out.push((*r, *src)),
                Wait::SendAck { dst, .. } => out.push((*r, *dst)),
                Wait::Collective { missing, .. } => out.extend(missing.iter().map(|&m| (*r, m))),
            }
        }
        out
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.waits.iter().map(|(r, _)| *r).collect()
    }
}

impl fmt::Display for WaitGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.waits.iter().map(|(r, w)| format!("rank {r} {w}")).collect();
        write!(f, "{}", parts.join("; "))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Wait {
    Recv { src: usize, tag: String },
    SendAck { dst: usize, tag: String },
    Collective { label: String, missing: Vec<usize> },
}

impl fmt::Display for Wait {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Wait::Recv { src, tag } => write!(f, "waits to receive {tag:?} from rank {src}"),
            Wait::SendAck { dst, tag } => write!(f, "waits for rank {dst} to accept {tag:?}"),
            Wait::Collective { label, missing } => write!(f, "waits in {label:?} for ranks {missing:?}"),
        }
    }
}

/// Something that can travel over the fabric.
pub trait Payload: Any {
    fn wire_bytes(&self) -> u64;
}

impl<T: Real> Payload for Tensor3<T> {
    fn wire_bytes(&self) -> u64 {
        (self.len() * T::BYTES) as u64
    }
}

impl<T: Real> Payload for AttentionPartial<T> {
    fn wire_bytes(&self) -> u64 {
        ((self.out.len() + self.lse.len()) * T::BYTES) as u64
    }
}

impl Payload for Vec<f64> {
    fn wire_bytes(&self) -> u64 {
        (self.len() * 8) as u64
    }
}

impl Payload for f64 {
    fn wire_bytes(&self) -> u64 {
        8
    }
}

impl Payload for u64 {
    fn wire_bytes(&self) -> u64 {
        8
    }
}

impl<A: Payload, B: Payload> Payload for (A, B) {
    fn wire_bytes(&self) -> u64 {
        self.0.wire_bytes() + self.1.wire_bytes()
    }
}

struct Envelope {
    payload: Box<dyn Any>,
    type_name: &'static str,
    /// Set for rendezvous sends; the sender waits until this id is consumed.
    ack: Option<u64>,
}

struct Deposit {
    chunks: Vec<Option<(Box<dyn Any>, &'static str)>>,
    bytes: Vec<u64>,
}

struct Collective {
    kind: CommKind,
    label: String,
    id: u64,
    deposits: BTreeMap<usize, Deposit>,
    taken: BTreeSet<usize>,
    done: bool,
}

struct World {
    topo: Topology,
    mailboxes: BTreeMap<(usize, usize, String), VecDeque<Envelope>>,
    consumed: BTreeSet<u64>,
    next_ack: u64,
    collectives: BTreeMap<(Vec<usize>, u64), Collective>,
    coll_seq: BTreeMap<(usize, Vec<usize>), u64>,
    next_collective: u64,
    stage: Vec<u32>,
    waits: Vec<Option<Wait>>,
    progress: u64,
    events: Vec<CommEvent>,
    ledger: Ledger,
}

impl World {
    fn log(&mut self, ev: CommEvent) {
        if ev.bytes > 0 {
            self.events.push(ev);
        }
    }
}

/// A rank's handle on the fabric.
#[derive(Clone)]
pub struct RankCtx {
    rank: usize,
    world: Rc<RefCell<World>>,
}

/// Completion handle for an eager send. The message is already buffered.
#[must_use]
pub struct SendHandle(());

impl SendHandle {
    pub async fn wait(self) {}
}

impl RankCtx {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn world_size(&self) -> usize {
        self.world.borrow().topo.world_size
    }

    pub fn topology(&self) -> Topology {
        self.world.borrow().topo.clone()
    }

    pub fn stage(&self) -> u32 {
        self.world.borrow().stage[self.rank]
    }

    /// Moves this rank to stage `stage`. Stage ids never decrease.
    pub fn begin_stage(&self, stage: u32) -> Result<(), FabricError> {
        let mut w = self.world.borrow_mut();
        let from = w.stage[self.rank];
        if stage < from {
            return Err(FabricError::StageOrder {
                rank: self.rank,
                from,
                to: stage,
            });
        }
        w.stage[self.rank] = stage;
        Ok(())
    }

    /// Charges `flops` of local work to the current stage.
    pub fn compute(&self, flops: u64) {
        let mut w = self.world.borrow_mut();
        let (stage, t) = (w.stage[self.rank], w.topo.compute_time(flops));
        w.ledger.add_compute(self.rank, stage, t);
    }

    fn check_peer(&self, peer: usize) -> Result<(), FabricError> {
        if peer >= self.world_size() {
            return Err(FabricError::BadPeer { rank: self.rank, peer });
        }
        Ok(())
    }

    fn post<P: Payload>(&self, dst: usize, tag: &str, payload: P, blocking: bool, stream: Stream) -> Result<Option<u64>, FabricError> {
        self.check_peer(dst)?;
        let mut w = self.world.borrow_mut();
        let bytes = payload.wire_bytes();
        let stage = w.stage[self.rank];
        let t = w.topo.link_time(self.rank, dst, bytes);
        let ack = blocking.then(|| {
            w.next_ack += 1;
            w.next_ack
        });
        let seq = w.events.len() as u64;
        w.log(CommEvent {
            seq,
            stage,
            kind: CommKind::P2p,
            src: self.rank,
            dst,
            bytes,
            label: tag.to_string(),
            collective: None,
            stream,
            blocking,
            modeled_time: t,
            exposed: blocking,
        });
        if blocking {
            w.ledger.add_blocking(self.rank, stage, t);
        } else {
            w.ledger.add_async(self.rank, stage, stream, t);
        }
        w.mailboxes
            .entry((self.rank, dst, tag.to_string()))
            .or_default()
            .push_back(Envelope {
                payload: Box::new(payload),
                type_name: type_name::<P>(),
                ack,
            });
        w.progress += 1;
        Ok(ack)
    }

    /// Rendezvous send: completes once `dst` has received the message.
    pub async fn send<P: Payload>(&self, dst: usize, tag: &str, payload: P) -> Result<(), FabricError> {
        let ack = self
            .post(dst, tag, payload, true, Stream::Main)?
            .expect("blocking send has an ack id");
        poll_fn(|_| {
            let mut w = self.world.borrow_mut();
            if w.consumed.remove(&ack) {
                w.waits[self.rank] = None;
                w.progress += 1;
                Poll::Ready(Ok(()))
            } else {
                w.waits[self.rank] = Some(Wait::SendAck { dst, tag: tag.to_string() });
                Poll::Pending
            }
        })
        .await
    }

    /// Eager send on `stream`: the payload is buffered immediately and the
    /// transfer overlaps with this stage's compute.
    pub fn isend<P: Payload>(&self, dst: usize, tag: &str, payload: P, stream: Stream) -> Result<SendHandle, FabricError> {
        self.post(dst, tag, payload, false, stream)?;
        Ok(SendHandle(()))
    }

    pub async fn recv<P: Payload>(&self, src: usize, tag: &str) -> Result<P, FabricError> {
        self.check_peer(src)?;
        let key = (src, self.rank, tag.to_string());
        poll_fn(|_| {
            let mut w = self.world.borrow_mut();
            let Some(env) = w.mailboxes.get_mut(&key).and_then(VecDeque::pop_front) else {
                w.waits[self.rank] = Some(Wait::Recv { src, tag: tag.to_string() });
                return Poll::Pending;
            };
            if w.mailboxes.get(&key).is_some_and(VecDeque::is_empty) {
                w.mailboxes.remove(&key);
            }
            w.waits[self.rank] = None;
            w.progress += 1;
            if let Some(id) = env.ack {
                w.consumed.insert(id);
            }
            let got = env.type_name;
            Poll::Ready(env.payload.downcast::<P>().map(|b| *b).map_err(|_| FabricError::PayloadMismatch {
                rank: self.rank,
                src,
                tag: tag.to_string(),
                expected: type_name::<P>(),
                got,
            }))
        })
        .await
    }

    /// Chunk `i` goes to `group[i]`; the result holds one chunk from every
    /// member in group order. The self chunk never touches the wire.
    pub async fn all_to_all<P: Payload>(&self, group: &[usize], chunks: Vec<P>, label: &str) -> Result<Vec<P>, FabricError> {
        self.collective(CommKind::AllToAll, group, chunks, label).await
    }

    /// Every member ends with all members' chunks in group order.
    pub async fn all_gather<P: Payload + Clone>(&self, group: &[usize], local: P, label: &str) -> Result<Vec<P>, FabricError> {
        let chunks = vec![local; group.len()];
        self.collective(CommKind::AllGather, group, chunks, label).await
    }

    async fn collective<P: Payload>(&self, kind: CommKind, group: &[usize], chunks: Vec<P>, label: &str) -> Result<Vec<P>, FabricError> {
        let fail = |reason: String| FabricError::Collective {
            rank: self.rank,
            group: group.to_vec(),
            reason,
        };
        let me = group
            .iter()
            .position(|&r| r == self.rank)
            .ok_or_else(|| fail("caller is not a member".into()))?;
        if group.iter().collect::<BTreeSet<_>>().len() != group.len() {
            return Err(fail("duplicate members".into()));
        }
        for &r in group {
            self.check_peer(r)?;
        }
        if chunks.len() != group.len() {
            return Err(fail(format!("{} chunks for {} members", chunks.len(), group.len())));
        }
        let key = {
            let mut w = self.world.borrow_mut();
            let seq = w.coll_seq.entry((self.rank, group.to_vec())).or_insert(0);
            let key = (group.to_vec(), *seq);
            *seq += 1;
            let next_id = w.next_collective;
            let entry = w.collectives.entry(key.clone()).or_insert_with(|| Collective {
                kind,
                label: label.to_string(),
                id: next_id,
                deposits: BTreeMap::new(),
                taken: BTreeSet::new(),
                done: false,
            });
            if entry.kind != kind || entry.label != label {
                let reason = format!(
                    "{} {:?} matched against {} {:?}",
                    kind.name(),
                    label,
                    entry.kind.name(),
                    entry.label
                );
                return Err(fail(reason));
            }
            if entry.id == next_id {
                w.next_collective += 1;
            }
            let bytes = chunks.iter().map(Payload::wire_bytes).collect();
            let entry = w.collectives.get_mut(&key).unwrap();
            entry.deposits.insert(
                self.rank,
                Deposit {
                    chunks: chunks
                        .into_iter()
                        .map(|c| Some((Box::new(c) as Box<dyn Any>, type_name::<P>())))
                        .collect(),
                    bytes,
                },
            );
            w.progress += 1;
            if w.collectives[&key].deposits.len() == group.len() {
                self.settle(&mut w, &key)?;
            }
            key
        };
        poll_fn(|_| {
            let mut w = self.world.borrow_mut();
            let c = w
                .collectives
                .get_mut(&key)
                .expect("collective alive until all members took their chunks");
            if !c.done {
                let missing = group.iter().copied().filter(|r| !c.deposits.contains_key(r)).collect();
                let label = c.label.clone();
                w.waits[self.rank] = Some(Wait::Collective { label, missing });
                return Poll::Pending;
            }
            let mut out = Vec::with_capacity(group.len());
            for src in group {
                let (boxed, got) = c.deposits.get_mut(src).unwrap().chunks[me].take().unwrap();
                match boxed.downcast::<P>() {
                    Ok(p) => out.push(*p),
                    Err(_) => {
                        return Poll::Ready(Err(FabricError::PayloadMismatch {
                            rank: self.rank,
                            src: *src,
                            tag: label.to_string(),
                            expected: type_name::<P>(),
                            got,
                        }))
                    }
                }
            }
            c.taken.insert(self.rank);
            if c.taken.len() == group.len() {
                w.collectives.remove(&key);
            }
            w.waits[self.rank] = None;
            w.progress += 1;
            Poll::Ready(Ok(out))
        })
        .await
    }

    /// All members have deposited: check sizes, log one event per pair and
    /// charge every member the slowest pairwise transfer.
    fn settle(&self, w: &mut World, key: &(Vec<usize>, u64)) -> Result<(), FabricError> {
        let group = &key.0;
        let c = &w.collectives[key];
        let sizes: Vec<u64> = group.iter().flat_map(|r| c.deposits[r].bytes.iter().copied()).collect();
        if sizes.windows(2).any(|p| p[0] != p[1]) {
            return Err(FabricError::Ragged {
                label: c.label.clone(),
                sizes,
            });
        }
        let (kind, label, id) = (c.kind, c.label.clone(), c.id);
        let chunk = sizes.first().copied().unwrap_or(0);
        let mut slowest: f64 = 0.0;
        let mut pending = Vec::new();
        for &src in group {
            for &dst in group {
                if src == dst {
                    continue;
                }
                let t = w.topo.link_time(src, dst, chunk);
                slowest = slowest.max(t);
                pending.push((src, dst, t));
            }
        }
        for (src, dst, t) in pending {
            let seq = w.events.len() as u64;
            let stage = w.stage[src];
            w.log(CommEvent {
                seq,
                stage,
                kind,
                src,
                dst,
                bytes: chunk,
                label: label.clone(),
                collective: Some(id),
                stream: Stream::Main,
                blocking: true,
                modeled_time: t,
                exposed: true,
            });
        }
        if group.len() > 1 {
            for &r in group {
                let stage = w.stage[r];
                w.ledger.add_blocking(r, stage, slowest);
            }
        }
        w.collectives.get_mut(key).unwrap().done = true;
        Ok(())
    }
}

/// Everything a finished world produced.
#[derive(Debug, Clone)]
pub struct WorldRun<R> {
    pub results: Vec<R>,
    pub log: CommLog,
    pub timeline: StageTimeline,
}

fn panic_message(p: Box<dyn Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".into()
    }
}

/// Runs `program` once per rank until every rank finishes.
///
/// The first rank to return an error aborts the world with that error.
pub fn spawn_world<R, E, F, Fut>(topology: &Topology, program: F) -> Result<WorldRun<R>, E>
where
    E: From<FabricError>,
    F: Fn(RankCtx) -> Fut,
    Fut: Future<Output = Result<R, E>>,
{
    topology.validate()?;
    let n = topology.world_size;
    let world = Rc::new(RefCell::new(World {
        topo: topology.clone(),
        mailboxes: BTreeMap::new(),
        consumed: BTreeSet::new(),
        next_ack: 0,
        collectives: BTreeMap::new(),
        coll_seq: BTreeMap::new(),
        next_collective: 0,
        stage: vec![0; n],
        waits: vec![None; n],
        progress: 0,
        events: Vec::new(),
        ledger: Ledger::default(),
    }));
    let mut tasks: Vec<Option<std::pin::Pin<Box<Fut>>>> = (0..n)
        .map(|rank| {
            Some(Box::pin(program(RankCtx {
                rank,
                world: Rc::clone(&world),
            })))
        })
        .collect();
    let mut results: Vec<Option<R>> = (0..n).map(|_| None).collect();
    let mut cx = Context::from_waker(Waker::noop());
    loop {
        let before = world.borrow().progress;
        let mut running = false;
        let mut finished = false;
        for rank in 0..n {
            let Some(task) = tasks[rank].as_mut() else { continue };
            match catch_unwind(AssertUnwindSafe(|| task.as_mut().poll(&mut cx))) {
                Err(p) => {
                    return Err(FabricError::RankPanic {
                        rank,
                        message: panic_message(p),
                    }
                    .into())
                }
                Ok(Poll::Ready(Err(e))) => return Err(e),
                Ok(Poll::Ready(Ok(r))) => {
                    results[rank] = Some(r);
                    tasks[rank] = None;
                    world.borrow_mut().waits[rank] = None;
                    finished = true;
                }
                Ok(Poll::Pending) => running = true,
            }
        }
        if !running {
            break;
        }
        let w = world.borrow();
        if !finished && w.progress == before {
            let waits = (0..n).filter_map(|r| w.waits[r].clone().map(|x| (r, x))).collect();
            return Err(FabricError::Deadlock(WaitGraph { waits }).into());
        }
    }
    drop(tasks);
    let mut w = Rc::try_unwrap(world).ok().expect("all rank handles dropped").into_inner();
    if let Some(((src, dst, tag), q)) = w.mailboxes.iter().next() {
        return Err(FabricError::Undelivered {
            src: *src,
            dst: *dst,
            tag: tag.clone(),
            count: q.len(),
        }
        .into());
    }
    let timeline = w.ledger.finish(&mut w.events);
    Ok(WorldRun {
        results: results.into_iter().map(|r| r.expect("finished rank has a result")).collect(),
        log: CommLog { events: w.events },
        timeline,
    })
}
