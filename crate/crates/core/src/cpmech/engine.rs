//! Per-rank programs.
//!
//! Ulysses, Ring P2P, USP and LoongTrain all run the same hybrid program on
//! a `ulysses × ring` grid: an all-to-all inside each Ulysses group turns the
//! sequence shards into head shards over the group's tokens, the ring rotates
//! group-level KV blocks, and a second all-to-all restores sequence sharding.
//! Ulysses is the `ring = 1` case, Ring P2P the `ulysses = 1` case.
//!
//! Backward rotations differ by mechanism. The plain ring runs in reverse
//! from the KV block left resident by the forward pass, with each block's
//! gradient accumulator trailing it by one stage. The double ring re-runs the
//! forward rotation from each rank's own KV block, passing accumulators along
//! the inner ring and handing them to the next window with an extra transfer
//! at the end of every window.

use std::ops::Range;

use super::block::{Block, Part};
use super::meta::{BlockMask, RowMap};
use super::{CpError, CpSetup, Mechanism, RankState};
use crate::fabric::{RankCtx, Stream};
use crate::masks::{pair_flops, Direction};
use crate::numcore::HeadLayout;

/// Rows of `chunks[m]` are member `m`'s slices of `ranges`; returns the rows
/// in range order.
fn gather_group<B: Block>(chunks: &[B], ranges: &[Range<usize>]) -> Result<B, CpError> {
    let u = chunks.len();
    let mut pieces = Vec::with_capacity(u * ranges.len());
    let mut off = 0;
    for r in ranges {
        let sub = r.len() / u;
        for c in chunks {
            pieces.push(c.select_rows(&[off..off + sub]));
        }
        off += sub;
    }
    Ok(B::concat_rows(&pieces)?)
}

/// Inverse of [`gather_group`].
fn scatter_group<B: Block>(x: &B, ranges: &[Range<usize>], u: usize) -> Vec<B> {
    (0..u)
        .map(|m| {
            let mut base = 0;
            let sel: Vec<Range<usize>> = ranges
                .iter()
                .map(|r| {
                    let sub = r.len() / u;
                    let s = base + m * sub;
                    base += r.len();
                    s..s + sub
                })
                .collect();
            x.select_rows(&sel)
        })
        .collect()
}

async fn to_heads<B: Block>(
    ctx: &RankCtx,
    members: &[usize],
    ranges: &[Range<usize>],
    x: B,
    per: usize,
    label: &str,
) -> Result<B, CpError> {
    if members.len() == 1 {
        return Ok(x);
    }
    let chunks = (0..members.len()).map(|m| x.slice_heads(m * per, (m + 1) * per)).collect();
    let got = ctx.all_to_all(members, chunks, label).await?;
    gather_group(&got, ranges)
}

async fn to_seq<B: Block>(ctx: &RankCtx, members: &[usize], ranges: &[Range<usize>], x: B, label: &str) -> Result<B, CpError> {
    if members.len() == 1 {
        return Ok(x);
    }
    let got = ctx.all_to_all(members, scatter_group(&x, ranges, members.len()), label).await?;
    Ok(B::concat_heads(&got)?)
}

async fn part_to_seq<B: Block>(
    ctx: &RankCtx,
    members: &[usize],
    ranges: &[Range<usize>],
    x: Part<B>,
    label: &str,
) -> Result<Part<B>, CpError> {
    let u = members.len();
    if u == 1 {
        return Ok(x);
    }
    let chunks: Vec<Part<B>> = scatter_group(&x.out, ranges, u)
        .into_iter()
        .zip(scatter_group(&x.lse, ranges, u))
        .map(|(out, lse)| Part { out, lse })
        .collect();
    let got = ctx.all_to_all(members, chunks, label).await?;
    let (outs, lses): (Vec<B>, Vec<B>) = got.into_iter().map(|p| (p.out, p.lse)).unzip();
    Ok(Part {
        out: B::concat_heads(&outs)?,
        lse: B::concat_heads(&lses)?,
    })
}

fn add_pair<B: Block>(acc: Option<(B, B)>, dk: B, dv: B) -> Result<(B, B), CpError> {
    Ok(match acc {
        None => (dk, dv),
        Some((k, v)) => (k.add(&dk)?, v.add(&dv)?),
    })
}

/// Where a hybrid rank sits.
struct Place {
    group: usize,
    member: usize,
    members: Vec<usize>,
    window: isize,
    inner: isize,
    local: HeadLayout,
}

impl Place {
    fn new(s: &CpSetup, rank: usize) -> Result<Self, CpError> {
        let g = &s.grid;
        let (group, member) = (rank / g.ulysses, rank % g.ulysses);
        let local = HeadLayout::new(s.layout.q_heads / g.ulysses, s.kv_heads_rep / g.ulysses, s.layout.head_dim)?;
        Ok(Self {
            group,
            member,
            members: (0..g.ulysses).map(|m| g.rank_of(group, m)).collect(),
            window: (group / g.inner()) as isize,
            inner: (group % g.inner()) as isize,
            local,
        })
    }

    fn peer(&self, s: &CpSetup, dw: isize, di: isize) -> usize {
        s.grid.rank_of(s.grid.position(self.window + dw, self.inner + di), self.member)
    }
}

pub(crate) async fn hybrid_forward<B: Block>(ctx: RankCtx, s: &CpSetup, q: B, k: B, v: B) -> Result<(Part<B>, RankState<B>), CpError> {
    let p = Place::new(s, ctx.rank())?;
    let grid = &s.grid;
    let ranges = s.group_plan.ranges(p.group);
    let (k, v) = match s.kv_heads_rep / s.layout.kv_heads {
        1 => (k, v),
        f => (k.repeat_heads(f), v.repeat_heads(f)),
    };

    ctx.begin_stage(0)?;
    let q = to_heads(&ctx, &p.members, ranges, q, p.local.q_heads, "a2a_q").await?;
    let k = to_heads(&ctx, &p.members, ranges, k, p.local.kv_heads, "a2a_k").await?;
    let v = to_heads(&ctx, &p.members, ranges, v, p.local.kv_heads, "a2a_v").await?;

    let (inner, outer) = (grid.inner(), grid.outer());
    let (inner_next, inner_prev) = (p.peer(s, 0, 1), p.peer(s, 0, -1));
    let (outer_next, outer_prev) = (p.peer(s, 1, 0), p.peer(s, -1, 0));
    let mut resident = (k.clone(), v.clone());
    let mut acc: Option<Part<B>> = None;
    for o in 0..outer {
        let mut prefetched = None;
        for st in 0..inner {
            let t = o * inner + st;
            ctx.begin_stage(1 + t as u32)?;
            if st + 1 < inner {
                ctx.isend(inner_next, "kv", resident.clone(), Stream::Main)?.wait().await;
            }
            if st == 0 && o + 1 < outer {
                ctx.isend(outer_next, "kv_prefetch", resident.clone(), Stream::Prefetch)?
                    .wait()
                    .await;
                prefetched = Some(ctx.recv::<(B, B)>(outer_prev, "kv_prefetch").await?);
            }
            let meta = s.meta.stage(p.group, t);
            ctx.compute(pair_flops(meta.pairs, p.local.q_heads, p.local.head_dim, Direction::Forward));
            let part = B::attend(&q, &resident.0, &resident.1, &p.local, &s.meta.mask(p.group, meta.kv_owner))?;
            acc = Some(match acc {
                None => part,
                Some(a) => B::merge(&a, &part)?,
            });
            if st + 1 < inner {
                resident = ctx.recv(inner_prev, "kv").await?;
            }
        }
        if let Some(next) = prefetched {
            resident = next;
        }
    }

    ctx.begin_stage(1 + grid.ring as u32)?;
    let out = acc.expect("ring has at least one stage");
    let seq_out = part_to_seq(&ctx, &p.members, ranges, out.clone(), "a2a_out").await?;
    let double = s.config.mechanism == Mechanism::LoongTrain;
    let state = RankState {
        q,
        out,
        final_kv: (!double).then_some(resident),
        initial_kv: double.then_some((k, v)),
        local_kv: None,
    };
    Ok((seq_out, state))
}

pub(crate) async fn hybrid_backward<B: Block>(ctx: RankCtx, s: &CpSetup, state: &RankState<B>, d_out: B) -> Result<(B, B, B), CpError> {
    let p = Place::new(s, ctx.rank())?;
    let ranges = s.group_plan.ranges(p.group);
    ctx.begin_stage(0)?;
    let d_out = to_heads(&ctx, &p.members, ranges, d_out, p.local.q_heads, "a2a_dout").await?;
    let (dq, (dk, dv), last) = if s.config.mechanism == Mechanism::LoongTrain {
        double_ring_backward(&ctx, s, &p, state, &d_out).await?
    } else {
        reverse_ring_backward(&ctx, s, &p, state, &d_out).await?
    };
    ctx.begin_stage(last + 1)?;
    let dq = to_seq(&ctx, &p.members, ranges, dq, "a2a_dq").await?;
    let dk = to_seq(&ctx, &p.members, ranges, dk, "a2a_dk").await?;
    let dv = to_seq(&ctx, &p.members, ranges, dv, "a2a_dv").await?;
    Ok(match s.kv_heads_rep / s.layout.kv_heads {
        1 => (dq, dk, dv),
        f => (dq, dk.fold_heads(f), dv.fold_heads(f)),
    })
}

type Grads<B> = (B, (B, B), u32);

#[allow(clippy::too_many_arguments)]
fn local_backward<B: Block>(
    ctx: &RankCtx,
    s: &CpSetup,
    p: &Place,
    state: &RankState<B>,
    d_out: &B,
    kv: &(B, B),
    owner: usize,
) -> Result<(B, B, B), CpError> {
    ctx.compute(pair_flops(
        s.meta.pairs(p.group, owner),
        p.local.q_heads,
        p.local.head_dim,
        Direction::Backward,
    ));
    B::backward(&state.q, &kv.0, &kv.1, &state.out, d_out, &p.local, &s.meta.mask(p.group, owner))
}

async fn reverse_ring_backward<B: Block>(
    ctx: &RankCtx,
    s: &CpSetup,
    p: &Place,
    state: &RankState<B>,
    d_out: &B,
) -> Result<Grads<B>, CpError> {
    let k = s.grid.ring;
    let mut resident = state.final_kv.clone().ok_or(CpError::MissingState("the forward-final KV block"))?;
    let (next, prev) = (p.peer(s, 0, 1), p.peer(s, 0, -1));
    let mut dq: Option<B> = None;
    let mut pending: Option<(B, B)> = None;
    for t in 0..k {
        ctx.begin_stage(1 + t as u32)?;
        if t + 1 < k {
            ctx.isend(prev, "kv_bwd", resident.clone(), Stream::Main)?.wait().await;
        }
        if let Some(acc) = pending.take() {
            ctx.isend(prev, "dkv", acc, Stream::Main)?.wait().await;
        }
        let owner = (p.group + 1 + t) % k;
        let (dqc, dkc, dvc) = local_backward(ctx, s, p, state, d_out, &resident, owner)?;
        dq = Some(match dq {
            None => dqc,
            Some(a) => a.add(&dqc)?,
        });
        let incoming = if t > 0 {
            Some(ctx.recv::<(B, B)>(next, "dkv").await?)
        } else {
            None
        };
        let total = add_pair(incoming, dkc, dvc)?;
        if t + 1 < k {
            pending = Some(total);
            resident = ctx.recv(next, "kv_bwd").await?;
        } else {
            return Ok((dq.unwrap(), total, k as u32));
        }
    }
    unreachable!("ring has at least one stage")
}

async fn double_ring_backward<B: Block>(
    ctx: &RankCtx,
    s: &CpSetup,
    p: &Place,
    state: &RankState<B>,
    d_out: &B,
) -> Result<Grads<B>, CpError> {
    let grid = &s.grid;
    let (inner, outer) = (grid.inner(), grid.outer());
    let mut resident = state.initial_kv.clone().ok_or(CpError::MissingState("the initial KV block"))?;
    let (inner_next, inner_prev) = (p.peer(s, 0, 1), p.peer(s, 0, -1));
    let (outer_next, outer_prev) = (p.peer(s, 1, 0), p.peer(s, -1, 0));
    let (sync_to, sync_from) = (p.peer(s, 1, 1), p.peer(s, -1, -1));
    let mut dq: Option<B> = None;
    let mut carried: Option<(B, B)> = None;
    let mut stage = 0;
    for o in 0..outer {
        let mut prefetched = None;
        let mut pending: Option<(B, B)> = None;
        let mut window_total = None;
        for st in 0..inner {
            stage = 1 + (o * (inner + 1) + st) as u32;
            ctx.begin_stage(stage)?;
            if st + 1 < inner {
                ctx.isend(inner_next, "kv_bwd", resident.clone(), Stream::Main)?.wait().await;
            }
            if st == 0 && o + 1 < outer {
                ctx.isend(outer_next, "kv_bwd_prefetch", resident.clone(), Stream::Prefetch)?
                    .wait()
                    .await;
                prefetched = Some(ctx.recv::<(B, B)>(outer_prev, "kv_bwd_prefetch").await?);
            }
            if let Some(acc) = pending.take() {
                ctx.isend(inner_next, "dkv", acc, Stream::Main)?.wait().await;
            }
            let owner = grid.resident(p.group, o, st);
            let (dqc, dkc, dvc) = local_backward(ctx, s, p, state, d_out, &resident, owner)?;
            dq = Some(match dq {
                None => dqc,
                Some(a) => a.add(&dqc)?,
            });
            let incoming = if st == 0 {
                carried.take()
            } else {
                Some(ctx.recv::<(B, B)>(inner_prev, "dkv").await?)
            };
            let total = add_pair(incoming, dkc, dvc)?;
            if st + 1 < inner {
                pending = Some(total);
                resident = ctx.recv(inner_prev, "kv_bwd").await?;
            } else {
                window_total = Some(total);
            }
        }
        if let Some(next) = prefetched {
            resident = next;
        }
        // window hand-off: the accumulator moves to the rank that holds the
        // same KV block at the start of the next window
        stage += 1;
        ctx.begin_stage(stage)?;
        let total = window_total.expect("window has at least one stage");
        carried = Some(if sync_to == ctx.rank() {
            total
        } else {
            ctx.isend(sync_to, "dkv_sync", total, Stream::Main)?.wait().await;
            ctx.recv(sync_from, "dkv_sync").await?
        });
    }
    Ok((dq.unwrap(), carried.unwrap(), stage))
}

/// Gathers every rank's KV shard and reorders the rows to global order.
async fn gather_kv<B: Block>(ctx: &RankCtx, s: &CpSetup, kv: &(B, B), label: &str) -> Result<(B, B), CpError> {
    let n = s.grid.world_size();
    if let Some(cap) = s.config.gather_cap_bytes {
        let needed = (kv.0.wire_bytes() + kv.1.wire_bytes()) * n as u64;
        if needed > cap {
            return Err(CpError::MemoryCap { needed, cap });
        }
    }
    let all: Vec<usize> = (0..n).collect();
    let got = ctx.all_gather(&all, kv.clone(), label).await?;
    let (ks, vs): (Vec<B>, Vec<B>) = got.into_iter().unzip();
    let (k, v) = (B::concat_rows(&ks)?, B::concat_rows(&vs)?);
    Ok((k.select_rows(&s.gather_order), v.select_rows(&s.gather_order)))
}

fn gather_mask<'a>(s: &'a CpSetup, rank: usize) -> BlockMask<'a> {
    BlockMask {
        blocks: &s.gather_blocks[rank],
        q: RowMap::new(s.rank_plan.ranges(rank)),
        k: RowMap::new(&s.full_range),
    }
}

pub(crate) async fn allgather_forward<B: Block>(ctx: RankCtx, s: &CpSetup, q: B, k: B, v: B) -> Result<(Part<B>, RankState<B>), CpError> {
    let r = ctx.rank();
    ctx.begin_stage(0)?;
    let local_kv = (k, v);
    let (kf, vf) = gather_kv(&ctx, s, &local_kv, "gather_kv").await?;
    ctx.begin_stage(1)?;
    ctx.compute(pair_flops(
        s.gather_pairs[r],
        s.layout.q_heads,
        s.layout.head_dim,
        Direction::Forward,
    ));
    let out = B::attend(&q, &kf, &vf, &s.layout, &gather_mask(s, r))?;
    let state = RankState {
        q,
        out: out.clone(),
        final_kv: None,
        initial_kv: None,
        local_kv: Some(local_kv),
    };
    Ok((out, state))
}

pub(crate) async fn allgather_backward<B: Block>(ctx: RankCtx, s: &CpSetup, state: &RankState<B>, d_out: B) -> Result<(B, B, B), CpError> {
    let r = ctx.rank();
    let local_kv = state.local_kv.as_ref().ok_or(CpError::MissingState("the local KV shard"))?;
    ctx.begin_stage(0)?;
    let (kf, vf) = gather_kv(&ctx, s, local_kv, "gather_kv_bwd").await?;
    ctx.begin_stage(1)?;
    ctx.compute(pair_flops(
        s.gather_pairs[r],
        s.layout.q_heads,
        s.layout.head_dim,
        Direction::Backward,
    ));
    let (dq, dkf, dvf) = B::backward(&state.q, &kf, &vf, &state.out, &d_out, &s.layout, &gather_mask(s, r))?;
    ctx.begin_stage(2)?;
    let n = s.grid.world_size();
    let chunks: Vec<(B, B)> = (0..n)
        .map(|dst| {
            let rows = s.rank_plan.ranges(dst);
            (dkf.select_rows(rows), dvf.select_rows(rows))
        })
        .collect();
    let all: Vec<usize> = (0..n).collect();
    let got = ctx.all_to_all(&all, chunks, "reduce_scatter_dkv").await?;
    let mut acc = None;
    for (dk, dv) in got {
        acc = Some(add_pair(acc, dk, dv)?);
    }
    let (dk, dv) = acc.expect("group is non-empty");
    Ok((dq, dk, dv))
}
