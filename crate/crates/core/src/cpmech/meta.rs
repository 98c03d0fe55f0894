use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::plan::{ProcessGrid, ShardPlan};
use super::CpError;
use crate::masks::{AttnMask, MaskPattern, MaskSpec};
use crate::workload::{batch_to_mask, MaskParams, PackedBatch};

/// Patterns the context-parallel mechanisms accept.
pub const CP_PATTERNS: [MaskPattern; 4] = [
    MaskPattern::Full,
    MaskPattern::Causal,
    MaskPattern::FullDocument,
    MaskPattern::CausalDocument,
];

pub fn check_cp_pattern(p: MaskPattern) -> Result<(), CpError> {
    if CP_PATTERNS.contains(&p) {
        Ok(())
    } else {
        Err(CpError::Capability(format!(
            "{p} is not supported by context-parallel mechanisms (full, causal, full_document, causal_document only)"
        )))
    }
}

/// Rectangle of global `(query, key)` positions that are all visible, or
/// visible on and below the diagonal when `causal`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskBlock {
    pub q: Range<usize>,
    pub k: Range<usize>,
    pub causal: bool,
}

fn tri(n: usize) -> u64 {
    let n = n as u64;
    n * (n + 1) / 2
}

impl MaskBlock {
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.q.contains(&i) && self.k.contains(&j) && (!self.causal || j <= i)
    }

    pub fn pairs(&self) -> u64 {
        if !self.causal {
            return (self.q.len() * self.k.len()) as u64;
        }
        causal_rect_pairs(&self.q, &self.k)
    }
}

/// Number of `(i, j)` in `q × k` with `j <= i`.
pub fn causal_rect_pairs(q: &Range<usize>, k: &Range<usize>) -> u64 {
    if q.is_empty() || k.is_empty() {
        return 0;
    }
    // row i sees min(max(i + 1 - k.start, 0), |k|) keys
    let ramp_lo = q.start.max(k.start);
    let ramp_hi = q.end.min(k.end);
    let mut total = 0;
    if ramp_lo < ramp_hi {
        total += tri(ramp_hi - k.start) - tri(ramp_lo - k.start);
    }
    let flat_lo = q.start.max(k.end);
    if flat_lo < q.end {
        total += ((q.end - flat_lo) * k.len()) as u64;
    }
    total
}

/// The part of `spec` inside `q_ranges × k_ranges`, as blocks. Padding lies
/// outside every document, so it never appears.
pub fn restrict(spec: &MaskSpec, q_ranges: &[Range<usize>], k_ranges: &[Range<usize>]) -> Result<Vec<MaskBlock>, CpError> {
    check_cp_pattern(spec.pattern())?;
    let causal = matches!(spec.pattern(), MaskPattern::Causal | MaskPattern::CausalDocument);
    let bounds = spec.doc_bounds();
    let mut out = Vec::new();
    for doc in bounds.windows(2) {
        let (ds, de) = (doc[0], doc[1]);
        for qr in q_ranges {
            let (qa, qb) = (qr.start.max(ds), qr.end.min(de));
            if qa >= qb {
                continue;
            }
            for kr in k_ranges {
                let (ka, kb) = (kr.start.max(ds), kr.end.min(de));
                if ka >= kb || (causal && ka > qb - 1) {
                    continue;
                }
                out.push(MaskBlock {
                    q: qa..qb,
                    k: ka..kb,
                    causal: causal && kb - 1 > qa,
                });
            }
        }
    }
    Ok(out)
}

/// Local-row view of a set of global ranges.
#[derive(Debug, Clone)]
pub(crate) struct RowMap<'a> {
    ranges: &'a [Range<usize>],
    starts: Vec<usize>,
}

impl<'a> RowMap<'a> {
    pub fn new(ranges: &'a [Range<usize>]) -> Self {
        let mut starts = Vec::with_capacity(ranges.len());
        let mut at = 0;
        for r in ranges {
            starts.push(at);
            at += r.len();
        }
        Self { ranges, starts }
    }

    fn len(&self) -> usize {
        self.ranges.iter().map(|r| r.len()).sum()
    }

    fn global(&self, local: usize) -> usize {
        let t = self.starts.partition_point(|&s| s <= local) - 1;
        self.ranges[t].start + (local - self.starts[t])
    }
}

/// Mask over local rows/columns answered purely from precomputed blocks.
pub(crate) struct BlockMask<'a> {
    pub blocks: &'a [MaskBlock],
    pub q: RowMap<'a>,
    pub k: RowMap<'a>,
}

impl AttnMask for BlockMask<'_> {
    fn allows(&self, i: usize, j: usize) -> bool {
        let (gi, gj) = (self.q.global(i), self.k.global(j));
        self.blocks.iter().any(|b| b.allows(gi, gj))
    }

    fn key_len(&self) -> Option<usize> {
        Some(self.k.len())
    }
}

/// Precomputed mask intersections between every query shard and every
/// key/value shard of a plan, plus the forward ring schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarlenMeta {
    pattern: MaskPattern,
    shards: Vec<Vec<Range<usize>>>,
    blocks: Vec<Vec<Vec<MaskBlock>>>,
    pairs: Vec<Vec<u64>>,
    schedule: Vec<Vec<usize>>,
}

/// One `(rank, stage)` entry of the schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageMeta<'a> {
    pub kv_owner: usize,
    pub blocks: &'a [MaskBlock],
    pub pairs: u64,
}

impl VarlenMeta {
    /// Meta for a plain ring over the plan's shards.
    pub fn build(plan: &ShardPlan, spec: &MaskSpec) -> Result<Self, CpError> {
        Self::with_grid(plan, spec, &ProcessGrid::new(1, plan.world_size()))
    }

    /// Meta whose schedule follows `grid`'s (possibly double) ring.
    pub fn with_grid(plan: &ShardPlan, spec: &MaskSpec, grid: &ProcessGrid) -> Result<Self, CpError> {
        if spec.seq_len() != plan.seq_len() {
            return Err(CpError::Plan(format!(
                "plan covers {} tokens, mask {}",
                plan.seq_len(),
                spec.seq_len()
            )));
        }
        let n = plan.world_size();
        if grid.ring != n {
            return Err(CpError::Plan(format!("ring of {} for a {n}-shard plan", grid.ring)));
        }
        let shards: Vec<Vec<Range<usize>>> = (0..n).map(|r| plan.ranges(r).to_vec()).collect();
        let mut blocks = Vec::with_capacity(n);
        let mut pairs = Vec::with_capacity(n);
        for q in &shards {
            let row: Vec<Vec<MaskBlock>> = shards.iter().map(|k| restrict(spec, q, k)).collect::<Result<_, _>>()?;
            pairs.push(row.iter().map(|b| b.iter().map(MaskBlock::pairs).sum()).collect());
            blocks.push(row);
        }
        let schedule = (0..n)
            .map(|g| {
                (0..grid.outer())
                    .flat_map(|o| (0..grid.inner()).map(move |s| (o, s)))
                    .map(|(o, s)| grid.resident(g, o, s))
                    .collect()
            })
            .collect();
        Ok(Self {
            pattern: spec.pattern(),
            shards,
            blocks,
            pairs,
            schedule,
        })
    }

    pub fn pattern(&self) -> MaskPattern {
        self.pattern
    }

    pub fn num_shards(&self) -> usize {
        self.shards.len()
    }

    pub fn shard_ranges(&self, shard: usize) -> &[Range<usize>] {
        &self.shards[shard]
    }

    pub fn blocks(&self, q_shard: usize, kv_shard: usize) -> &[MaskBlock] {
        &self.blocks[q_shard][kv_shard]
    }

    pub fn pairs(&self, q_shard: usize, kv_shard: usize) -> u64 {
        self.pairs[q_shard][kv_shard]
    }

    /// Pairs shard `q_shard` computes over a full pass.
    pub fn shard_pairs(&self, q_shard: usize) -> u64 {
        self.pairs[q_shard].iter().sum()
    }

    pub fn num_stages(&self) -> usize {
        self.schedule.first().map_or(0, Vec::len)
    }

    pub fn stage(&self, shard: usize, stage: usize) -> StageMeta<'_> {
        let kv_owner = self.schedule[shard][stage];
        StageMeta {
            kv_owner,
            blocks: &self.blocks[shard][kv_owner],
            pairs: self.pairs[shard][kv_owner],
        }
    }

    pub(crate) fn mask(&self, q_shard: usize, kv_shard: usize) -> BlockMask<'_> {
        BlockMask {
            blocks: &self.blocks[q_shard][kv_shard],
            q: RowMap::new(&self.shards[q_shard]),
            k: RowMap::new(&self.shards[kv_shard]),
        }
    }
}

/// One-time meta for a packed batch sharded by `plan`.
pub fn precompute_varlen_meta(plan: &ShardPlan, batch: &PackedBatch, pattern: MaskPattern) -> Result<VarlenMeta, CpError> {
    check_cp_pattern(pattern)?;
    let spec = batch_to_mask(batch, pattern, &MaskParams::default()).map_err(|e| CpError::Plan(e.to_string()))?;
    VarlenMeta::build(plan, &spec)
}
