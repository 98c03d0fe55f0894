//! Block-sparse mask sampling.
//!
//! The attention map is cut into a grid of query blocks × key blocks. Every
//! kv-head group draws one uniform score per key block for each query block
//! and keeps the top-k key blocks, where k follows from the sparsity ratio.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masks::{pair_flops, DenseMask, Direction, DEFAULT_DENSE_CAP};
use crate::numcore::HeadLayout;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparseError {
    #[error("invalid block grid: {0}")]
    Grid(String),
    #[error("sparsity ratio {0} outside (0, 1]")]
    Ratio(f64),
    #[error("group count must be >= 1")]
    Groups,
    #[error("group {group} out of range for {groups} groups")]
    GroupIndex { group: usize, groups: usize },
    #[error("q_heads {q_heads} not divisible by {groups} mask groups")]
    HeadGroups { q_heads: usize, groups: usize },
    #[error("dense expansion of {seq_len} tokens exceeds cap {cap}")]
    DenseCap { seq_len: usize, cap: usize },
}

/// Block partition of the attention map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGrid {
    q_block_sizes: Vec<usize>,
    k_block_sizes: Vec<usize>,
}

impl BlockGrid {
    pub fn new(q_block_sizes: Vec<usize>, k_block_sizes: Vec<usize>) -> Result<Self, SparseError> {
        if q_block_sizes.is_empty() || k_block_sizes.is_empty() {
            return Err(SparseError::Grid("empty block list".into()));
        }
        if q_block_sizes.iter().chain(&k_block_sizes).any(|&b| b == 0) {
            return Err(SparseError::Grid("block sizes must be >= 1".into()));
        }
        let sq: usize = q_block_sizes.iter().sum();
        let sk: usize = k_block_sizes.iter().sum();
        if sq != sk {
            return Err(SparseError::Grid(format!("query blocks cover {sq} tokens, key blocks {sk}")));
        }
        Ok(Self {
            q_block_sizes,
            k_block_sizes,
        })
    }

    /// Equal blocks of `block` tokens; a shorter tail block absorbs the rest.
    pub fn uniform(seq_len: usize, block: usize) -> Result<Self, SparseError> {
        if block == 0 || seq_len == 0 {
            return Err(SparseError::Grid("seq_len and block must be >= 1".into()));
        }
        let mut sizes = vec![block; seq_len / block];
        if !seq_len.is_multiple_of(block) {
            sizes.push(seq_len % block);
        }
        Self::new(sizes.clone(), sizes)
    }

    pub fn seq_len(&self) -> usize {
        self.q_block_sizes.iter().sum()
    }

    pub fn q_block_sizes(&self) -> &[usize] {
        &self.q_block_sizes
    }

    pub fn k_block_sizes(&self) -> &[usize] {
        &self.k_block_sizes
    }

    pub fn num_q_blocks(&self) -> usize {
        self.q_block_sizes.len()
    }

    pub fn num_k_blocks(&self) -> usize {
        self.k_block_sizes.len()
    }

    fn starts(sizes: &[usize]) -> Vec<usize> {
        let mut acc = 0;
        sizes
            .iter()
            .map(|&s| {
                let start = acc;
                acc += s;
                start
            })
            .collect()
    }

    pub fn is_uniform(&self) -> bool {
        let first = self.q_block_sizes[0];
        self.q_block_sizes[..self.q_block_sizes.len() - 1]
            .iter()
            .chain(&self.k_block_sizes[..self.k_block_sizes.len() - 1])
            .all(|&b| b == first)
    }
}

/// Converts a sparsity ratio into the number of selected key blocks.
pub fn sparsity_to_topk(ratio: f64, num_k_blocks: usize) -> Result<usize, SparseError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(SparseError::Ratio(ratio));
    }
    if num_k_blocks == 0 {
        return Err(SparseError::Grid("no key blocks".into()));
    }
    // f64::round rounds half away from zero
    Ok(((ratio * num_k_blocks as f64).round() as usize).clamp(1, num_k_blocks))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMask {
    grid: BlockGrid,
    groups: usize,
    top_k: usize,
    seed: u64,
    /// `selected[group][q_block]` holds ascending key-block indices.
    selected: Vec<Vec<Vec<usize>>>,
}

/// One uniform score per key block for `(seed, group, q_block)`.
///
/// ChaCha is counter based: the seed fixes the key and `(group, q_block)`
/// picks the stream, so any cell can be drawn independently of the others.
pub fn block_scores(seed: u64, group: usize, q_block: usize, num_k_blocks: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((group as u64) << 32) | q_block as u64);
    (0..num_k_blocks).map(|_| rng.random::<f64>()).collect()
}

/// Indices of the `k` largest scores, ties to the lower index, ascending.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked = order[..k.min(scores.len())].to_vec();
    picked.sort_unstable();
    picked
}

pub fn sample_block_mask(grid: &BlockGrid, ratio: f64, groups: usize, seed: u64) -> Result<BlockMask, SparseError> {
    if groups == 0 {
        return Err(SparseError::Groups);
    }
    let nk = grid.num_k_blocks();
    let top_k = sparsity_to_topk(ratio, nk)?;
    let selected = (0..groups)
        .map(|g| {
            (0..grid.num_q_blocks())
                .map(|qb| top_k_indices(&block_scores(seed, g, qb, nk), top_k))
                .collect()
        })
        .collect();
    Ok(BlockMask {
        grid: grid.clone(),
        groups,
        top_k,
        seed,
        selected,
    })
}

impl BlockMask {
    pub fn grid(&self) -> &BlockGrid {
        &self.grid
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn selected(&self, group: usize, q_block: usize) -> &[usize] {
        &self.selected[group][q_block]
    }

    pub fn selected_blocks(&self, group: usize) -> usize {
        self.selected[group].iter().map(Vec::len).sum()
    }

    /// Selected fraction of the grid for one group.
    pub fn achieved_sparsity(&self, group: usize) -> f64 {
        self.selected_blocks(group) as f64 / (self.grid.num_q_blocks() * self.grid.num_k_blocks()) as f64
    }

    /// Σ of selected block areas in tokens² for one group.
    pub fn selected_area(&self, group: usize) -> u64 {
        let q = &self.grid.q_block_sizes;
        let k = &self.grid.k_block_sizes;
        self.selected[group]
            .iter()
            .enumerate()
            .map(|(qb, ks)| ks.iter().map(|&kb| (q[qb] * k[kb]) as u64).sum::<u64>())
            .sum()
    }

    pub fn to_dense(&self, group: usize) -> Result<DenseMask, SparseError> {
        self.to_dense_capped(group, DEFAULT_DENSE_CAP)
    }

    pub fn to_dense_capped(&self, group: usize, cap: usize) -> Result<DenseMask, SparseError> {
        if group >= self.groups {
            return Err(SparseError::GroupIndex {
                group,
                groups: self.groups,
            });
        }
        let s = self.grid.seq_len();
        if s > cap {
            return Err(SparseError::DenseCap { seq_len: s, cap });
        }
        let qs = BlockGrid::starts(&self.grid.q_block_sizes);
        let ks = BlockGrid::starts(&self.grid.k_block_sizes);
        let mut d = DenseMask::new(s, s);
        for (qb, sel) in self.selected[group].iter().enumerate() {
            for &kb in sel {
                for i in qs[qb]..qs[qb] + self.grid.q_block_sizes[qb] {
                    for j in ks[kb]..ks[kb] + self.grid.k_block_sizes[kb] {
                        d.set(i, j, true);
                    }
                }
            }
        }
        Ok(d)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("block mask serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SparseError> {
        let mask: BlockMask = serde_json::from_str(text).map_err(|e| SparseError::Grid(e.to_string()))?;
        mask.validate()?;
        Ok(mask)
    }

    fn validate(&self) -> Result<(), SparseError> {
        BlockGrid::new(self.grid.q_block_sizes.clone(), self.grid.k_block_sizes.clone())?;
        if self.groups == 0 || self.selected.len() != self.groups {
            return Err(SparseError::Groups);
        }
        let nk = self.grid.num_k_blocks();
        for per_group in &self.selected {
            if per_group.len() != self.grid.num_q_blocks() {
                return Err(SparseError::Grid("selection count differs from query blocks".into()));
            }
            for sel in per_group {
                let ascending = sel.windows(2).all(|w| w[0] < w[1]);
                if sel.len() != self.top_k || !ascending || sel.iter().any(|&k| k >= nk) {
                    return Err(SparseError::Grid(format!("bad selection {sel:?}")));
                }
            }
        }
        Ok(())
    }
}

/// FLOPs over the selected blocks; each group serves `q_heads / groups`
/// query heads.
pub fn sparse_flops(mask: &BlockMask, layout: &HeadLayout, direction: Direction) -> Result<u64, SparseError> {
    if !layout.q_heads.is_multiple_of(mask.groups) {
        return Err(SparseError::HeadGroups {
            q_heads: layout.q_heads,
            groups: mask.groups,
        });
    }
    let heads_per_group = layout.q_heads / mask.groups;
    Ok((0..mask.groups)
        .map(|g| pair_flops(mask.selected_area(g), heads_per_group, layout.head_dim, direction))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MaskSupport {
    UniformOnly,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PassSupport {
    Both,
    ForwardOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BlockSizeSupport {
    Only(usize),
    Arbitrary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Level {
    Low,
    Medium,
    High,
}

/// One column of the sparse-kernel characteristics table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SparseKernelTraits {
    pub name: &'static str,
    pub masks: MaskSupport,
    pub passes: PassSupport,
    pub block_size: BlockSizeSupport,
    pub gqa: bool,
    /// Minimum SM architecture, e.g. 90 for Hopper.
    pub min_sm: u32,
    pub performance: Level,
    pub memory_overhead: Level,
}

impl SparseKernelTraits {
    pub fn accepts_block(&self, block: usize) -> bool {
        match self.block_size {
            BlockSizeSupport::Only(b) => b == block,
            BlockSizeSupport::Arbitrary => true,
        }
    }
}

pub fn sparse_kernel_capabilities() -> Vec<SparseKernelTraits> {
    use BlockSizeSupport::*;
    use Level::*;
    let row = |name, masks, passes, block_size, gqa, min_sm, performance, memory_overhead| SparseKernelTraits {
        name,
        masks,
        passes,
        block_size,
        gqa,
        min_sm,
        performance,
        memory_overhead,
    };
    vec![
        row("VSA", MaskSupport::UniformOnly, PassSupport::Both, Only(64), false, 90, High, Low),
        row(
            "Triton VSA",
            MaskSupport::UniformOnly,
            PassSupport::Both,
            Only(64),
            false,
            80,
            Medium,
            Low,
        ),
        row(
            "FA2 Sparse",
            MaskSupport::UniformOnly,
            PassSupport::ForwardOnly,
            Only(128),
            true,
            80,
            Medium,
            Low,
        ),
        row(
            "FlexAttention",
            MaskSupport::Both,
            PassSupport::Both,
            Arbitrary,
            true,
            80,
            Low,
            High,
        ),
        row(
            "FlashInfer",
            MaskSupport::Both,
            PassSupport::ForwardOnly,
            Arbitrary,
            true,
            80,
            Medium,
            Medium,
        ),
    ]
}

/// Characteristics as CSV, one row per characteristic, one column per kernel.
pub fn sparse_capabilities_csv() -> String {
    type Cell = Box<dyn Fn(&SparseKernelTraits) -> String>;
    let kernels = sparse_kernel_capabilities();
    let mut out = String::from("characteristic");
    for k in &kernels {
        out.push(',');
        out.push_str(k.name);
    }
    out.push('\n');
    let level = |l: Level| match l {
        Level::Low => "Low",
        Level::Medium => "Medium",
        Level::High => "High",
    };
    let rows: [(&str, Cell); 7] = [
        (
            "Uniform/Variable Masks",
            Box::new(|k| match k.masks {
                MaskSupport::UniformOnly => "Uniform only".into(),
                MaskSupport::Both => "Both".into(),
            }),
        ),
        (
            "Forward/Backward",
            Box::new(|k| match k.passes {
                PassSupport::Both => "Both".into(),
                PassSupport::ForwardOnly => "Forward only".into(),
            }),
        ),
        (
            "Block Size",
            Box::new(|k| match k.block_size {
                BlockSizeSupport::Only(b) => format!("{b} only"),
                BlockSizeSupport::Arbitrary => "Arbitrary".into(),
            }),
        ),
        ("GQA Support", Box::new(|k| if k.gqa { "Y".into() } else { "N".into() })),
        ("GPU Support", Box::new(|k| format!(">= sm{}", k.min_sm))),
        ("Performance", Box::new(move |k| level(k.performance).into())),
        ("Memory Overhead", Box::new(move |k| level(k.memory_overhead).into())),
    ];
    for (name, f) in rows.iter() {
        out.push_str(name);
        for k in &kernels {
            out.push(',');
            out.push_str(&f(k));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{attention_flops, MaskSpec};

    #[test]
    fn topk_conversion() {
        assert_eq!(sparsity_to_topk(0.5, 2).unwrap(), 1);
        assert_eq!(sparsity_to_topk(1.0, 7).unwrap(), 7);
        assert_eq!(sparsity_to_topk(0.2, 3).unwrap(), 1);
        assert_eq!(sparsity_to_topk(0.25, 2).unwrap(), 1);
        assert_eq!(sparsity_to_topk(0.75, 2).unwrap(), 2);
        assert!(sparsity_to_topk(0.0, 4).is_err());
        assert!(sparsity_to_topk(1.5, 4).is_err());
    }

    #[test]
    fn dense_limit_selects_everything() {
        let grid = BlockGrid::uniform(256, 64).unwrap();
        for seed in 0..5 {
            let m = sample_block_mask(&grid, 1.0, 2, seed).unwrap();
            assert_eq!(m.to_dense(1).unwrap().popcount(), 256 * 256);
        }
    }

    #[test]
    fn half_ratio_on_two_by_two() {
        let grid = BlockGrid::uniform(128, 64).unwrap();
        assert_eq!((grid.num_q_blocks(), grid.num_k_blocks()), (2, 2));
        let m = sample_block_mask(&grid, 0.5, 1, 11).unwrap();
        assert_eq!(m.selected(0, 0).len(), 1);
        assert_eq!(m.selected(0, 1).len(), 1);
        assert_eq!(m.selected_blocks(0), 2);
    }

    #[test]
    fn deterministic_and_group_independent() {
        let grid = BlockGrid::uniform(64 * 16, 64).unwrap();
        let a = sample_block_mask(&grid, 0.5, 4, 3).unwrap();
        let b = sample_block_mask(&grid, 0.5, 4, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.selected[0], a.selected[1]);
    }

    #[test]
    fn single_block_dense() {
        let grid = BlockGrid::new(vec![2, 2], vec![2, 2]).unwrap();
        let m = BlockMask {
            grid,
            groups: 1,
            top_k: 1,
            seed: 0,
            selected: vec![vec![vec![0], vec![]]],
        };
        assert_eq!(m.to_dense(0).unwrap().to_ascii(), "##..\n##..\n....\n....\n");
    }

    #[test]
    fn ties_go_to_lower_index() {
        assert_eq!(top_k_indices(&[0.5, 0.9, 0.5, 0.5], 2), vec![0, 1]);
        assert_eq!(top_k_indices(&[0.1, 0.1, 0.1], 2), vec![0, 1]);
    }

    #[test]
    fn flops_examples() {
        let layout = HeadLayout::new(8, 2, 32).unwrap();
        let grid = BlockGrid::uniform(256, 64).unwrap();
        let dense = sample_block_mask(&grid, 1.0, 2, 0).unwrap();
        assert_eq!(
            sparse_flops(&dense, &layout, Direction::Forward).unwrap(),
            attention_flops(&MaskSpec::full(256), &layout, Direction::Forward)
        );
        let half = sample_block_mask(&grid, 0.5, 2, 9).unwrap();
        assert_eq!(
            2 * sparse_flops(&half, &layout, Direction::Forward).unwrap(),
            attention_flops(&MaskSpec::full(256), &layout, Direction::Forward)
        );

        let var = BlockGrid::new(vec![64, 192], vec![64, 192]).unwrap();
        let only = BlockMask {
            grid: var,
            groups: 1,
            top_k: 1,
            seed: 0,
            selected: vec![vec![vec![1], vec![1]]],
        };
        let one_block = BlockMask {
            selected: vec![vec![vec![], vec![1]]],
            ..only.clone()
        };
        let l = HeadLayout::mha(4, 16);
        assert_eq!(sparse_flops(&one_block, &l, Direction::Forward).unwrap(), 4 * 16 * 4 * 192 * 192);
        assert!(sparse_flops(&only, &HeadLayout::mha(3, 16), Direction::Forward).is_ok());
        assert!(matches!(
            sparse_flops(&half, &HeadLayout::mha(3, 16), Direction::Forward),
            Err(SparseError::HeadGroups { .. })
        ));
    }

    #[test]
    fn json_round_trip() {
        let grid = BlockGrid::new(vec![64, 192], vec![128, 128]).unwrap();
        let m = sample_block_mask(&grid, 0.5, 2, 5).unwrap();
        assert_eq!(BlockMask::from_json(&m.to_json()).unwrap(), m);
        assert!(BlockMask::from_json(
            r#"{"grid":{"q_block_sizes":[1],"k_block_sizes":[2]},"groups":1,"top_k":1,"seed":0,"selected":[[[0]]]}"#
        )
        .is_err());
    }

    #[test]
    fn kernel_table_examples() {
        let caps = sparse_kernel_capabilities();
        let by = |n: &str| caps.iter().find(|k| k.name == n).unwrap().clone();
        assert_eq!(by("VSA").block_size, BlockSizeSupport::Only(64));
        assert!(by("VSA").accepts_block(64) && !by("VSA").accepts_block(128));
        assert_eq!(by("FlashInfer").passes, PassSupport::ForwardOnly);
        assert_eq!(by("FlexAttention").masks, MaskSupport::Both);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn achieved_fraction_and_area(
                sizes in proptest::collection::vec(1usize..40, 1..9),
                ratio in 0.01f64..1.0,
                seed in any::<u64>(),
                groups in 1usize..4,
            ) {
                let grid = BlockGrid::new(sizes.clone(), sizes.iter().rev().cloned().collect()).unwrap();
                let m = sample_block_mask(&grid, ratio, groups, seed).unwrap();
                let k = sparsity_to_topk(ratio, grid.num_k_blocks()).unwrap();
                for g in 0..groups {
                    prop_assert_eq!(m.achieved_sparsity(g), k as f64 / grid.num_k_blocks() as f64);
                    let d = m.to_dense(g).unwrap();
                    prop_assert_eq!(d.popcount(), m.selected_area(g));
                    // every query row keeps at least the narrowest selected block
                    for i in 0..grid.seq_len() {
                        prop_assert!((0..grid.seq_len()).any(|j| d.get(i, j)));
                    }
                }
            }

            #[test]
            fn top_k_matches_sort_oracle(scores in proptest::collection::vec(0u8..4, 1..12), k in 1usize..12) {
                // coarse scores force ties
                let s: Vec<f64> = scores.iter().map(|&x| x as f64).collect();
                let k = k.min(s.len());
                let picked = top_k_indices(&s, k);
                let mut expect: Vec<usize> = (0..s.len()).collect();
                expect.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
                let mut expect = expect[..k].to_vec();
                expect.sort();
                prop_assert_eq!(picked, expect);
            }

            #[test]
            fn scores_independent_of_draw_order(
                seed in any::<u64>(),
                order in Just((0..12usize).collect::<Vec<_>>()).prop_shuffle(),
            ) {
                let in_order: Vec<Vec<f64>> = (0..12).map(|c| block_scores(seed, c / 4, c % 4, 9)).collect();
                for &c in &order {
                    let s = block_scores(seed, c / 4, c % 4, 9);
                    prop_assert_eq!(&s, &in_order[c]);
                }
            }
        }
    }
}
