use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::CpError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShardScheme {
    Contiguous,
    /// Head-to-tail: `2N` chunks, rank `r` owns chunks `r` and `2N-1-r`.
    Zigzag,
}

/// Which global token ranges each rank owns, in the order the rank stores them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardPlan {
    seq_len: usize,
    scheme: ShardScheme,
    ranges: Vec<Vec<Range<usize>>>,
}

impl ShardPlan {
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn scheme(&self) -> ShardScheme {
        self.scheme
    }

    pub fn world_size(&self) -> usize {
        self.ranges.len()
    }

    pub fn ranges(&self, rank: usize) -> &[Range<usize>] {
        &self.ranges[rank]
    }

    pub fn rows(&self, rank: usize) -> usize {
        self.ranges[rank].iter().map(|r| r.len()).sum()
    }

    /// Global token index of every local row of `rank`.
    pub fn row_indices(&self, rank: usize) -> Vec<usize> {
        self.ranges[rank].iter().flat_map(|r| r.clone()).collect()
    }

    /// Ranges are disjoint and cover `[0, seq_len)`.
    pub fn validate(&self) -> Result<(), CpError> {
        let mut all: Vec<&Range<usize>> = self.ranges.iter().flatten().collect();
        all.sort_by_key(|r| r.start);
        let mut at = 0;
        for r in all {
            if r.start != at || r.end <= r.start {
                return Err(CpError::Plan(format!("ranges do not tile [0, {}) at {}", self.seq_len, at)));
            }
            at = r.end;
        }
        if at != self.seq_len {
            return Err(CpError::Plan(format!("ranges stop at {at}, sequence has {}", self.seq_len)));
        }
        Ok(())
    }

    /// Splits every range of every shard into `u` equal sub-ranges; member
    /// `m` of shard `g` becomes rank `g * u + m` and takes sub-range `m` of
    /// each of the shard's ranges.
    pub fn subdivide(&self, u: usize) -> Result<ShardPlan, CpError> {
        let mut ranges = Vec::with_capacity(self.world_size() * u);
        for shard in &self.ranges {
            if let Some(r) = shard.iter().find(|r| r.len() % u != 0) {
                return Err(CpError::Divisibility(format!(
                    "range {r:?} of length {} does not split across {u} ranks; pad the sequence",
                    r.len()
                )));
            }
            for m in 0..u {
                ranges.push(
                    shard
                        .iter()
                        .map(|r| {
                            let sub = r.len() / u;
                            r.start + m * sub..r.start + (m + 1) * sub
                        })
                        .collect(),
                );
            }
        }
        Ok(ShardPlan {
            seq_len: self.seq_len,
            scheme: self.scheme,
            ranges,
        })
    }
}

pub fn plan_contiguous(seq_len: usize, world: usize) -> Result<ShardPlan, CpError> {
    if world == 0 || !seq_len.is_multiple_of(world) || seq_len == 0 {
        return Err(CpError::Divisibility(format!(
            "sequence of {seq_len} tokens does not split into {world} equal shards; pad to a multiple of {world}"
        )));
    }
    let c = seq_len / world;
    Ok(ShardPlan {
        seq_len,
        scheme: ShardScheme::Contiguous,
        ranges: (0..world).map(|r| vec![r * c..(r + 1) * c]).collect(),
    })
}

pub fn plan_zigzag(seq_len: usize, world: usize) -> Result<ShardPlan, CpError> {
    if world == 0 || seq_len == 0 || !seq_len.is_multiple_of(2 * world) {
        return Err(CpError::Divisibility(format!(
            "zigzag needs 2N | S, got S={seq_len}, N={world}; pad the sequence to a multiple of {}",
            2 * world
        )));
    }
    if world == 1 {
        return Ok(ShardPlan {
            seq_len,
            scheme: ShardScheme::Zigzag,
            ranges: vec![vec![0..seq_len]],
        });
    }
    let c = seq_len / (2 * world);
    let ranges = (0..world)
        .map(|r| vec![r * c..(r + 1) * c, (2 * world - 1 - r) * c..(2 * world - r) * c])
        .collect();
    Ok(ShardPlan {
        seq_len,
        scheme: ShardScheme::Zigzag,
        ranges,
    })
}

pub fn plan(seq_len: usize, world: usize, scheme: ShardScheme) -> Result<ShardPlan, CpError> {
    match scheme {
        ShardScheme::Contiguous => plan_contiguous(seq_len, world),
        ShardScheme::Zigzag => plan_zigzag(seq_len, world),
    }
}

/// Two-level rank arrangement: `ulysses` ranks share a head-parallel group,
/// `ring` groups form the KV ring. A double ring further splits the ring into
/// `ring / inner_window` windows of `inner_window` positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessGrid {
    pub ulysses: usize,
    pub ring: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_window: Option<usize>,
}

impl ProcessGrid {
    pub fn new(ulysses: usize, ring: usize) -> Self {
        Self {
            ulysses,
            ring,
            inner_window: None,
        }
    }

    pub fn double_ring(ulysses: usize, inner: usize, outer: usize) -> Self {
        Self {
            ulysses,
            ring: inner * outer,
            inner_window: Some(inner),
        }
    }

    pub fn world_size(&self) -> usize {
        self.ulysses * self.ring
    }

    pub fn inner(&self) -> usize {
        self.inner_window.unwrap_or(self.ring)
    }

    pub fn outer(&self) -> usize {
        self.ring / self.inner()
    }

    pub fn validate(&self) -> Result<(), CpError> {
        if self.ulysses == 0 || self.ring == 0 {
            return Err(CpError::Divisibility("grid sizes must be >= 1".into()));
        }
        let w = self.inner();
        if w == 0 || !self.ring.is_multiple_of(w) {
            return Err(CpError::Divisibility(format!(
                "inner window {w} does not divide ring size {}",
                self.ring
            )));
        }
        Ok(())
    }

    /// Rank of ring position `group` within Ulysses slot `member`.
    pub fn rank_of(&self, group: usize, member: usize) -> usize {
        group * self.ulysses + member
    }

    /// Ring position of window `w`, inner index `i`, both taken cyclically.
    pub fn position(&self, w: isize, i: isize) -> usize {
        let (wi, wo) = (self.inner() as isize, self.outer() as isize);
        (w.rem_euclid(wo) * wi + i.rem_euclid(wi)) as usize
    }

    /// Ring position whose KV is resident at `group` during stage `o * inner
    /// + s` of the forward rotation.
    pub fn resident(&self, group: usize, round: usize, step: usize) -> usize {
        let (w, i) = ((group / self.inner()) as isize, (group % self.inner()) as isize);
        self.position(w - round as isize, i - step as isize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zigzag_examples() {
        let p = plan_zigzag(8, 4).unwrap();
        assert_eq!(p.ranges(0), &[0..1, 7..8]);
        assert_eq!(p.ranges(3), &[3..4, 4..5]);
        p.validate().unwrap();
        assert_eq!(plan_zigzag(10, 1).unwrap().ranges(0), &[0..10]);
        let err = plan_zigzag(12, 4).unwrap_err().to_string();
        assert!(err.contains("pad"), "{err}");
    }

    #[test]
    fn contiguous_and_subdivide() {
        let p = plan_contiguous(12, 3).unwrap();
        assert_eq!(p.ranges(2), &[8..12]);
        assert!(plan_contiguous(10, 3).is_err());
        let z = plan_zigzag(16, 2).unwrap().subdivide(2).unwrap();
        assert_eq!(z.world_size(), 4);
        assert_eq!(z.ranges(0), &[0..2, 12..14]);
        assert_eq!(z.ranges(1), &[2..4, 14..16]);
        assert_eq!(z.ranges(3), &[6..8, 10..12]);
        z.validate().unwrap();
        assert!(plan_zigzag(12, 2).unwrap().subdivide(2).is_err());
    }

    #[test]
    fn grid_positions() {
        let g = ProcessGrid::double_ring(1, 2, 2);
        assert_eq!((g.inner(), g.outer()), (2, 2));
        // group 3 = window 1, inner 1
        assert_eq!(g.resident(3, 0, 0), 3);
        assert_eq!(g.resident(3, 0, 1), 2);
        assert_eq!(g.resident(3, 1, 0), 1);
        assert_eq!(g.resident(3, 1, 1), 0);
        let ring = ProcessGrid::new(1, 4);
        for t in 0..4 {
            assert_eq!(ring.resident(1, 0, t), (1 + 4 - t) % 4);
        }
        assert!(ProcessGrid::double_ring(1, 3, 2).validate().is_ok());
        let bad = ProcessGrid {
            ulysses: 1,
            ring: 4,
            inner_window: Some(3),
        };
        assert!(bad.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn plans_tile_the_sequence(n in 1usize..9, c in 1usize..6, zig in any::<bool>()) {
                let s = 2 * n * c;
                let p = if zig { plan_zigzag(s, n) } else { plan_contiguous(s, n) }.unwrap();
                p.validate().unwrap();
                let total: usize = (0..n).map(|r| p.rows(r)).sum();
                prop_assert_eq!(total, s);
                for r in 0..n {
                    prop_assert_eq!(p.rows(r), s / n);
                }
            }
        }
    }
}
