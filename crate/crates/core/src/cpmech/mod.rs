//! Context-parallel attention mechanisms on the simulated fabric.
//!
//! Every mechanism takes per-rank shards (rank `r` holds the rows listed by
//! [`CpSetup::rank_plan`]) and returns per-rank outputs in the same layout,
//! plus the communication log and stage timeline of the run.

mod block;
mod engine;
mod meta;
mod plan;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use block::{Block, Part, Phantom};
pub use meta::{causal_rect_pairs, check_cp_pattern, precompute_varlen_meta, restrict, MaskBlock, StageMeta, VarlenMeta, CP_PATTERNS};
pub use plan::{plan, plan_contiguous, plan_zigzag, ProcessGrid, ShardPlan, ShardScheme};

use crate::attnref::AttnError;
use crate::fabric::{spawn_world, CommLog, FabricError, StageTimeline, Topology};
use crate::masks::{MaskError, MaskSpec};
use crate::numcore::{HeadLayout, Real, ShapeError, Tensor3};

#[derive(Debug, Error)]
pub enum CpError {
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Attn(#[from] AttnError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("unsupported configuration: {0}")]
    Capability(String),
    #[error("{0}")]
    Divisibility(String),
    #[error("invalid shard plan: {0}")]
    Plan(String),
    #[error("backward pass needs {0} from the forward pass")]
    MissingState(&'static str),
    #[error("gathered KV needs {needed} bytes per rank, cap is {cap}")]
    MemoryCap { needed: u64, cap: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Ulysses,
    RingP2p,
    #[serde(rename = "ring_allgather")]
    RingAllGather,
    Usp,
    #[serde(rename = "loongtrain")]
    LoongTrain,
}

impl Mechanism {
    pub const ALL: [Mechanism; 5] = [
        Mechanism::Ulysses,
        Mechanism::RingP2p,
        Mechanism::RingAllGather,
        Mechanism::Usp,
        Mechanism::LoongTrain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Ulysses => "ulysses",
            Mechanism::RingP2p => "ring_p2p",
            Mechanism::RingAllGather => "ring_allgather",
            Mechanism::Usp => "usp",
            Mechanism::LoongTrain => "loongtrain",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mechanism {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        Mechanism::ALL
            .into_iter()
            .find(|m| m.name() == key || (key == "loong_train" && *m == Mechanism::LoongTrain))
            .ok_or_else(|| format!("unknown mechanism {s:?}"))
    }
}

fn largest_divisor_at_most(n: usize, cap: usize) -> usize {
    (1..=cap.min(n)).rev().find(|d| n.is_multiple_of(*d)).unwrap_or(1)
}

/// Mechanism plus the knobs that shape its schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpConfig {
    pub mechanism: Mechanism,
    pub world_size: usize,
    /// USP and LoongTrain grid; derived when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<ProcessGrid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<ShardScheme>,
    /// Per-rank byte budget for the gathered KV of Ring all-gather.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gather_cap_bytes: Option<u64>,
}

impl CpConfig {
    pub fn new(mechanism: Mechanism, world_size: usize) -> Self {
        Self {
            mechanism,
            world_size,
            grid: None,
            scheme: None,
            gather_cap_bytes: None,
        }
    }

    pub fn with_grid(mut self, grid: ProcessGrid) -> Self {
        self.grid = Some(grid);
        self
    }

    pub fn with_scheme(mut self, scheme: ShardScheme) -> Self {
        self.scheme = Some(scheme);
        self
    }

    pub fn resolved_grid(&self) -> Result<ProcessGrid, CpError> {
        let n = self.world_size;
        if n == 0 {
            return Err(CpError::Divisibility("world size must be >= 1".into()));
        }
        let grid = match (self.mechanism, self.grid) {
            (Mechanism::Ulysses, None) => ProcessGrid::new(n, 1),
            (Mechanism::RingP2p | Mechanism::RingAllGather, None) => ProcessGrid::new(1, n),
            (Mechanism::Usp, None) => {
                let u = largest_divisor_at_most(n, 8);
                ProcessGrid::new(u, n / u)
            }
            (Mechanism::LoongTrain, None) => {
                let inner = (1..=n).filter(|d| n.is_multiple_of(*d) && d * d <= n).max().unwrap_or(1);
                ProcessGrid::double_ring(1, inner, n / inner)
            }
            (Mechanism::Usp | Mechanism::LoongTrain, Some(g)) => g,
            (m, Some(g)) => {
                let want = if m == Mechanism::Ulysses {
                    ProcessGrid::new(n, 1)
                } else {
                    ProcessGrid::new(1, n)
                };
                if (g.ulysses, g.ring, g.outer()) != (want.ulysses, want.ring, 1) {
                    return Err(CpError::Capability(format!("{m} runs on a {}x{} grid", want.ulysses, want.ring)));
                }
                want
            }
        };
        grid.validate()?;
        if grid.world_size() != n {
            return Err(CpError::Divisibility(format!(
                "grid {}x{} has {} ranks, world has {n}",
                grid.ulysses,
                grid.ring,
                grid.world_size()
            )));
        }
        if self.mechanism == Mechanism::Usp && grid.outer() != 1 {
            return Err(CpError::Capability("usp uses a single ring; use loongtrain for windows".into()));
        }
        Ok(grid)
    }

    pub fn resolved_scheme(&self) -> ShardScheme {
        self.scheme.unwrap_or(match self.mechanism {
            Mechanism::Ulysses => ShardScheme::Contiguous,
            _ => ShardScheme::Zigzag,
        })
    }

    /// Sequence lengths must be a multiple of this.
    pub fn seq_multiple(&self) -> Result<usize, CpError> {
        let g = self.resolved_grid()?;
        let ring = match self.mechanism {
            Mechanism::RingAllGather => g.world_size(),
            _ => g.ring,
        };
        let per = if self.resolved_scheme() == ShardScheme::Zigzag && ring > 1 {
            2 * ring
        } else {
            ring
        };
        Ok(match self.mechanism {
            Mechanism::RingAllGather => per,
            _ => per * g.ulysses,
        })
    }
}

/// Everything precomputed before a run: grid, shard plans and mask metadata.
#[derive(Debug, Clone)]
pub struct CpSetup {
    pub config: CpConfig,
    pub grid: ProcessGrid,
    pub layout: HeadLayout,
    pub spec: MaskSpec,
    /// Shards of the ring positions.
    pub group_plan: ShardPlan,
    /// Rows each rank holds on entry and exit.
    pub rank_plan: ShardPlan,
    pub meta: VarlenMeta,
    /// KV heads after replication so every Ulysses member gets whole heads.
    pub kv_heads_rep: usize,
    gather_blocks: Vec<Vec<MaskBlock>>,
    gather_pairs: Vec<u64>,
    gather_order: Vec<Range<usize>>,
    full_range: Vec<Range<usize>>,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl CpSetup {
    pub fn new(config: &CpConfig, layout: HeadLayout, spec: &MaskSpec) -> Result<Self, CpError> {
        layout.validate()?;
        check_cp_pattern(spec.pattern())?;
        let grid = config.resolved_grid()?;
        let seq = spec.seq_len();
        let multiple = config.seq_multiple()?;
        if !seq.is_multiple_of(multiple) {
            return Err(CpError::Divisibility(format!(
                "{} with {} ranks needs S to be a multiple of {multiple}, got {seq}; pad the sequence",
                config.mechanism, config.world_size
            )));
        }
        let scheme = config.resolved_scheme();
        let u = grid.ulysses;
        let kv_heads_rep = layout.kv_heads / gcd(layout.kv_heads, u) * u;
        if !layout.q_heads.is_multiple_of(kv_heads_rep) || !layout.q_heads.is_multiple_of(u) {
            return Err(CpError::Capability(format!(
                "{} query heads and {} KV heads do not split across {u} head-parallel ranks",
                layout.q_heads, layout.kv_heads
            )));
        }
        let all_gather = config.mechanism == Mechanism::RingAllGather;
        let group_plan = plan(seq, if all_gather { config.world_size } else { grid.ring }, scheme)?;
        let rank_plan = group_plan.subdivide(u)?;
        let meta = VarlenMeta::with_grid(&group_plan, spec, &grid)?;
        let full_range = vec![0..seq];
        let (mut gather_blocks, mut gather_pairs, mut gather_order) = (Vec::new(), Vec::new(), Vec::new());
        if all_gather {
            for r in 0..rank_plan.world_size() {
                let b = restrict(spec, rank_plan.ranges(r), &full_range)?;
                gather_pairs.push(b.iter().map(MaskBlock::pairs).sum());
                gather_blocks.push(b);
            }
            // local offset of every global range after concatenating shards in rank order
            let mut located = Vec::new();
            let mut off = 0;
            for r in 0..rank_plan.world_size() {
                for g in rank_plan.ranges(r) {
                    located.push((g.start, off..off + g.len()));
                    off += g.len();
                }
            }
            located.sort_by_key(|(start, _)| *start);
            gather_order = located.into_iter().map(|(_, l)| l).collect();
        }
        Ok(Self {
            config: config.clone(),
            grid,
            layout,
            spec: spec.clone(),
            group_plan,
            rank_plan,
            meta,
            kv_heads_rep,
            gather_blocks,
            gather_pairs,
            gather_order,
            full_range,
        })
    }

    pub fn world_size(&self) -> usize {
        self.grid.world_size()
    }

    /// Unmasked `(query, key)` pairs each rank computes in one direction.
    pub fn rank_pairs(&self, rank: usize) -> u64 {
        if self.config.mechanism == Mechanism::RingAllGather {
            self.gather_pairs[rank]
        } else {
            // every member of a Ulysses group sees all the group's pairs for its heads
            self.meta.shard_pairs(rank / self.grid.ulysses)
        }
    }

    fn check_shards<B: Block>(&self, name: &str, xs: &[B], heads: usize) -> Result<(), CpError> {
        if xs.len() != self.world_size() {
            return Err(CpError::Divisibility(format!(
                "{} {name} shards for {} ranks",
                xs.len(),
                self.world_size()
            )));
        }
        for (r, x) in xs.iter().enumerate() {
            let want = (heads, self.rank_plan.rows(r), self.layout.head_dim);
            if x.dims() != want {
                return Err(ShapeError::Layout(format!("{name} shard {r} is {:?}, expected {want:?}", x.dims())).into());
            }
        }
        Ok(())
    }
}

/// What a rank keeps from forward for backward.
#[derive(Debug, Clone)]
pub struct RankState<B> {
    pub q: B,
    /// Forward result in the layout the rank attended in.
    pub out: Part<B>,
    pub final_kv: Option<(B, B)>,
    pub initial_kv: Option<(B, B)>,
    pub local_kv: Option<(B, B)>,
}

#[derive(Debug, Clone)]
pub struct ForwardRun<B> {
    pub setup: CpSetup,
    pub outputs: Vec<Part<B>>,
    pub states: Vec<RankState<B>>,
    pub log: CommLog,
    pub timeline: StageTimeline,
}

#[derive(Debug, Clone)]
pub struct BackwardRun<B> {
    /// `(dq, dk, dv)` per rank, sequence-sharded like the inputs.
    pub grads: Vec<(B, B, B)>,
    pub log: CommLog,
    pub timeline: StageTimeline,
}

pub fn run_forward<B: Block>(setup: &CpSetup, topology: &Topology, q: &[B], k: &[B], v: &[B]) -> Result<ForwardRun<B>, CpError> {
    let l = &setup.layout;
    setup.check_shards("q", q, l.q_heads)?;
    setup.check_shards("k", k, l.kv_heads)?;
    setup.check_shards("v", v, l.kv_heads)?;
    let topo = Topology {
        world_size: setup.world_size(),
        ..topology.clone()
    };
    let run = spawn_world(&topo, |ctx| {
        let r = ctx.rank();
        let (q, k, v) = (q[r].clone(), k[r].clone(), v[r].clone());
        async move {
            match setup.config.mechanism {
                Mechanism::RingAllGather => engine::allgather_forward(ctx, setup, q, k, v).await,
                _ => engine::hybrid_forward(ctx, setup, q, k, v).await,
            }
        }
    })?;
    let (outputs, states) = run.results.into_iter().unzip();
    Ok(ForwardRun {
        setup: setup.clone(),
        outputs,
        states,
        log: run.log,
        timeline: run.timeline,
    })
}

pub fn run_backward<B: Block>(fwd: &ForwardRun<B>, topology: &Topology, d_out: &[B]) -> Result<BackwardRun<B>, CpError> {
    let setup = &fwd.setup;
    setup.check_shards("d_out", d_out, setup.layout.q_heads)?;
    let topo = Topology {
        world_size: setup.world_size(),
        ..topology.clone()
    };
    let run = spawn_world(&topo, |ctx| {
        let r = ctx.rank();
        let (state, d) = (&fwd.states[r], d_out[r].clone());
        async move {
            match setup.config.mechanism {
                Mechanism::RingAllGather => engine::allgather_backward(ctx, setup, state, d).await,
                _ => engine::hybrid_backward(ctx, setup, state, d).await,
            }
        }
    })?;
    Ok(BackwardRun {
        grads: run.results,
        log: run.log,
        timeline: run.timeline,
    })
}

fn forward_with<B: Block>(
    config: CpConfig,
    topology: &Topology,
    q: &[B],
    k: &[B],
    v: &[B],
    layout: HeadLayout,
    spec: &MaskSpec,
) -> Result<ForwardRun<B>, CpError> {
    let setup = CpSetup::new(&config, layout, spec)?;
    run_forward(&setup, topology, q, k, v)
}

pub fn ulysses_forward<B: Block>(
    topology: &Topology,
    q: &[B],
    k: &[B],
    v: &[B],
    layout: HeadLayout,
    spec: &MaskSpec,
) -> Result<ForwardRun<B>, CpError> {
    forward_with(CpConfig::new(Mechanism::Ulysses, q.len()), topology, q, k, v, layout, spec)
}

pub fn ring_p2p_forward<B: Block>(
    topology: &Topology,
    q: &[B],
    k: &[B],
    v: &[B],
    layout: HeadLayout,
    spec: &MaskSpec,
) -> Result<ForwardRun<B>, CpError> {
    forward_with(CpConfig::new(Mechanism::RingP2p, q.len()), topology, q, k, v, layout, spec)
}

pub fn ring_allgather_forward<B: Block>(
    topology: &Topology,
    q: &[B],
    k: &[B],
    v: &[B],
    layout: HeadLayout,
    spec: &MaskSpec,
) -> Result<ForwardRun<B>, CpError> {
    forward_with(CpConfig::new(Mechanism::RingAllGather, q.len()), topology, q, k, v, layout, spec)
}

#[allow(clippy::too_many_arguments)]
pub fn usp_forward<B: Block>(
    topology: &Topology,
    grid: ProcessGrid,
    q: &[B],
    k: &[B],
    v: &[B],
    layout: HeadLayout,
    spec: &MaskSpec,
) -> Result<ForwardRun<B>, CpError> {
    forward_with(
        CpConfig::new(Mechanism::Usp, q.len()).with_grid(grid),
        topology,
        q,
        k,
        v,
        layout,
        spec,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn loongtrain_forward<B: Block>(
    topology: &Topology,
    grid: ProcessGrid,
    q: &[B],
    k: &[B],
    v: &[B],
    layout: HeadLayout,
    spec: &MaskSpec,
) -> Result<ForwardRun<B>, CpError> {
    forward_with(
        CpConfig::new(Mechanism::LoongTrain, q.len()).with_grid(grid),
        topology,
        q,
        k,
        v,
        layout,
        spec,
    )
}

/// Splits a full `(heads, S, d)` tensor into per-rank shards.
pub fn shard<T: Real>(x: &Tensor3<T>, plan: &ShardPlan) -> Vec<Tensor3<T>> {
    (0..plan.world_size()).map(|r| x.gather_rows(&plan.row_indices(r))).collect()
}

/// Inverse of [`shard`].
pub fn unshard<T: Real>(parts: &[Tensor3<T>], plan: &ShardPlan) -> Result<Tensor3<T>, CpError> {
    let joined = Tensor3::concat_rows(parts)?;
    let mut pos = vec![0; plan.seq_len()];
    let mut at = 0;
    for r in 0..plan.world_size() {
        for g in plan.row_indices(r) {
            pos[g] = at;
            at += 1;
        }
    }
    Ok(joined.gather_rows(&pos))
}

/// Unsharded result of a mechanism run on real tensors.
#[derive(Debug, Clone)]
pub struct ExactRun<T: Real> {
    pub out: Tensor3<T>,
    pub lse: Vec<T>,
    /// `(dq, dk, dv)` when an output gradient was supplied.
    pub grads: Option<(Tensor3<T>, Tensor3<T>, Tensor3<T>)>,
    pub forward_log: CommLog,
    pub forward_timeline: StageTimeline,
    pub backward_log: Option<CommLog>,
    pub backward_timeline: Option<StageTimeline>,
    /// Tokens of padding appended to reach a supported length.
    pub padded: usize,
}

fn pad_to<T: Real>(x: &Tensor3<T>, extra: usize) -> Tensor3<T> {
    if extra == 0 {
        x.clone()
    } else {
        x.pad_rows(extra)
    }
}

/// Shards full tensors, runs forward (and backward when `d_out` is given),
/// and reassembles the results. Pads the sequence to the mechanism's
/// required multiple and truncates the padding away afterwards.
#[allow(clippy::too_many_arguments)]
pub fn run_exact<T: Real>(
    config: &CpConfig,
    topology: &Topology,
    q: &Tensor3<T>,
    k: &Tensor3<T>,
    v: &Tensor3<T>,
    d_out: Option<&Tensor3<T>>,
    layout: HeadLayout,
    spec: &MaskSpec,
) -> Result<ExactRun<T>, CpError> {
    let s = spec.seq_len();
    let multiple = config.seq_multiple()?;
    let extra = s.div_ceil(multiple) * multiple - s;
    let spec = spec.with_padding(extra);
    let setup = CpSetup::new(config, layout, &spec)?;
    let plan = &setup.rank_plan;
    let fwd = run_forward(
        &setup,
        topology,
        &shard(&pad_to(q, extra), plan),
        &shard(&pad_to(k, extra), plan),
        &shard(&pad_to(v, extra), plan),
    )?;
    let keep: Vec<usize> = (0..s).collect();
    let (outs, lses): (Vec<_>, Vec<_>) = fwd.outputs.iter().map(|p| (p.out.clone(), p.lse.clone())).unzip();
    let out = unshard(&outs, plan)?.gather_rows(&keep);
    let lse = unshard(&lses, plan)?.gather_rows(&keep).into_data();
    let mut run = ExactRun {
        out,
        lse,
        grads: None,
        forward_log: fwd.log.clone(),
        forward_timeline: fwd.timeline.clone(),
        backward_log: None,
        backward_timeline: None,
        padded: extra,
    };
    if let Some(d) = d_out {
        let bwd = run_backward(&fwd, topology, &shard(&pad_to(d, extra), plan))?;
        let pick = |i: usize| -> Result<Tensor3<T>, CpError> {
            let parts: Vec<_> = bwd
                .grads
                .iter()
                .map(|g| match i {
                    0 => g.0.clone(),
                    1 => g.1.clone(),
                    _ => g.2.clone(),
                })
                .collect();
            Ok(unshard(&parts, plan)?.gather_rows(&keep))
        };
        run.grads = Some((pick(0)?, pick(1)?, pick(2)?));
        run.backward_log = Some(bwd.log);
        run.backward_timeline = Some(bwd.timeline);
    }
    Ok(run)
}

#[cfg(test)]
mod tests;
