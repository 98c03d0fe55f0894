use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommKind {
    P2p,
    AllToAll,
    AllGather,
}

impl CommKind {
    pub fn name(self) -> &'static str {
        match self {
            CommKind::P2p => "p2p",
            CommKind::AllToAll => "all_to_all",
            CommKind::AllGather => "all_gather",
        }
    }
}

/// Logical stream an asynchronous transfer is issued on. Streams overlap
/// with compute and with each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    #[default]
    Main,
    Prefetch,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::Main => "main",
            Stream::Prefetch => "prefetch",
        }
    }
}

/// One wire transfer. Collectives log one event per `(src, dst)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommEvent {
    pub seq: u64,
    pub stage: u32,
    pub kind: CommKind,
    pub src: usize,
    pub dst: usize,
    pub bytes: u64,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collective: Option<u64>,
    pub stream: Stream,
    /// Blocking transfers (rendezvous sends and collectives) cannot overlap.
    pub blocking: bool,
    pub modeled_time: f64,
    pub exposed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommLog {
    pub events: Vec<CommEvent>,
}

impl CommLog {
    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn total_bytes(&self) -> u64 {
        self.events.iter().map(|e| e.bytes).sum()
    }

    pub fn sent_by(&self, rank: usize) -> u64 {
        self.events.iter().filter(|e| e.src == rank).map(|e| e.bytes).sum()
    }

    pub fn received_by(&self, rank: usize) -> u64 {
        self.events.iter().filter(|e| e.dst == rank).map(|e| e.bytes).sum()
    }

    /// Bytes per `(src, dst)` pair.
    pub fn pair_bytes(&self) -> BTreeMap<(usize, usize), u64> {
        let mut out = BTreeMap::new();
        for e in &self.events {
            *out.entry((e.src, e.dst)).or_insert(0) += e.bytes;
        }
        out
    }

    pub fn filter<'a>(&'a self, pred: impl Fn(&CommEvent) -> bool + 'a) -> impl Iterator<Item = &'a CommEvent> + 'a {
        self.events.iter().filter(move |e| pred(e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comm log serialises")
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "seq",
            "stage",
            "kind",
            "src",
            "dst",
            "bytes",
            "label",
            "collective",
            "stream",
            "blocking",
            "modeled_time",
            "exposed",
        ])
        .unwrap();
        for e in &self.events {
            w.write_record([
                e.seq.to_string(),
                e.stage.to_string(),
                e.kind.name().to_string(),
                e.src.to_string(),
                e.dst.to_string(),
                e.bytes.to_string(),
                e.label.clone(),
                e.collective.map(|c| c.to_string()).unwrap_or_default(),
                e.stream.name().to_string(),
                e.blocking.to_string(),
                e.modeled_time.to_string(),
                e.exposed.to_string(),
            ])
            .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub rank: usize,
    pub stage: u32,
    pub compute_time: f64,
    /// Blocking communication, added serially.
    pub exposed_comm: f64,
    /// Asynchronous communication: the busiest stream's total.
    pub async_comm: f64,
    /// Asynchronous traffic was fully hidden behind compute.
    pub overlapped: bool,
    pub time: f64,
}

/// Per-rank, per-stage cost breakdown. A stage costs
/// `exposed + max(compute, async)` on each rank; the run costs the sum over
/// stages of the slowest rank.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimeline {
    pub records: Vec<StageRecord>,
    pub stage_times: Vec<(u32, f64)>,
    pub total: f64,
}

impl StageTimeline {
    pub fn rank_records(&self, rank: usize) -> impl Iterator<Item = &StageRecord> {
        self.records.iter().filter(move |r| r.rank == rank)
    }

    pub fn total_compute(&self, rank: usize) -> f64 {
        self.rank_records(rank).map(|r| r.compute_time).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("timeline serialises")
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["rank", "stage", "compute_time", "exposed_comm", "async_comm", "overlapped", "time"])
            .unwrap();
        for r in &self.records {
            w.write_record([
                r.rank.to_string(),
                r.stage.to_string(),
                r.compute_time.to_string(),
                r.exposed_comm.to_string(),
                r.async_comm.to_string(),
                r.overlapped.to_string(),
                r.time.to_string(),
            ])
            .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }
}

/// Raw per-rank accounting gathered while the world runs.
#[derive(Debug, Default)]
pub(crate) struct Ledger {
    pub compute: BTreeMap<(usize, u32), f64>,
    /// Blocking charges per `(rank, stage)`, one per rendezvous send or
    /// collective participation.
    pub blocking: BTreeMap<(usize, u32), f64>,
    pub asynchronous: BTreeMap<(usize, u32, Stream), f64>,
    pub touched: BTreeSet<(usize, u32)>,
}

impl Ledger {
    pub fn add_compute(&mut self, rank: usize, stage: u32, t: f64) {
        *self.compute.entry((rank, stage)).or_insert(0.0) += t;
        self.touched.insert((rank, stage));
    }

    pub fn add_blocking(&mut self, rank: usize, stage: u32, t: f64) {
        *self.blocking.entry((rank, stage)).or_insert(0.0) += t;
        self.touched.insert((rank, stage));
    }

    pub fn add_async(&mut self, rank: usize, stage: u32, stream: Stream, t: f64) {
        *self.asynchronous.entry((rank, stage, stream)).or_insert(0.0) += t;
        self.touched.insert((rank, stage));
    }

    fn async_at(&self, rank: usize, stage: u32) -> f64 {
        [Stream::Main, Stream::Prefetch]
            .iter()
            .map(|&s| self.asynchronous.get(&(rank, stage, s)).copied().unwrap_or(0.0))
            .fold(0.0, f64::max)
    }

    /// Fills in `exposed` flags and builds the timeline.
    pub fn finish(self, events: &mut [CommEvent]) -> StageTimeline {
        let compute_at = |rank, stage| self.compute.get(&(rank, stage)).copied().unwrap_or(0.0);
        for e in events.iter_mut() {
            e.exposed =
                e.blocking || self.asynchronous.get(&(e.src, e.stage, e.stream)).copied().unwrap_or(0.0) > compute_at(e.src, e.stage);
        }
        let mut records = Vec::new();
        let mut per_stage: BTreeMap<u32, f64> = BTreeMap::new();
        for &(rank, stage) in &self.touched {
            let compute_time = compute_at(rank, stage);
            let exposed_comm = self.blocking.get(&(rank, stage)).copied().unwrap_or(0.0);
            let async_comm = self.async_at(rank, stage);
            let time = exposed_comm + compute_time.max(async_comm);
            let slot = per_stage.entry(stage).or_insert(0.0);
            *slot = slot.max(time);
            records.push(StageRecord {
                rank,
                stage,
                compute_time,
                exposed_comm,
                async_comm,
                overlapped: async_comm > 0.0 && async_comm <= compute_time,
                time,
            });
        }
        let stage_times: Vec<(u32, f64)> = per_stage.into_iter().collect();
        let total = stage_times.iter().map(|&(_, t)| t).sum();
        StageTimeline {
            records,
            stage_times,
            total,
        }
    }
}
