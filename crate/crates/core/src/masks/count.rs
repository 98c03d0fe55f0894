use serde::{Deserialize, Serialize};

use super::{MaskPattern, MaskSpec};
use crate::numcore::HeadLayout;

/// Backward cost relative to forward (recompute-inclusive convention).
pub const BACKWARD_FLOP_MULTIPLIER: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

fn tri(n: u64) -> u64 {
    n * (n + 1) / 2
}

/// Pairs with `|i - j| < w` in an `n × n` square.
fn band_full(n: u64, w: u64) -> u64 {
    if n == 0 {
        return 0;
    }
    let m = (w - 1).min(n - 1);
    n + 2 * (m * n - tri(m))
}

/// Pairs with `0 <= i - j < w` in an `n × n` square.
fn band_causal(n: u64, w: u64) -> u64 {
    if n == 0 {
        return 0;
    }
    let m = (w - 1).min(n - 1);
    n + m * n - tri(m)
}

pub(super) fn count_analytic(spec: &MaskSpec) -> u64 {
    let real = spec.real_len() as u64;
    let lens: Vec<u64> = spec.doc_lens().into_iter().map(|l| l as u64).collect();
    match spec.pattern() {
        MaskPattern::Full => real * real,
        MaskPattern::Causal => tri(real),
        MaskPattern::FullSlidingWindow => band_full(real, spec.window().unwrap() as u64),
        MaskPattern::CausalSlidingWindow => band_causal(real, spec.window().unwrap() as u64),
        MaskPattern::FullDocument => lens.iter().map(|l| l * l).sum(),
        MaskPattern::CausalDocument => lens.iter().map(|&l| tri(l)).sum(),
        MaskPattern::ShareQuestion => {
            let first = lens[0];
            first * first + (real - first) * first + lens[1..].iter().map(|&l| tri(l)).sum::<u64>()
        }
        MaskPattern::CausalBlockwise => {
            let last_start = real - lens[lens.len() - 1];
            let earlier: u64 = lens[..lens.len() - 1].iter().map(|&l| tri(l)).sum();
            earlier + tri(real) - tri(last_start)
        }
        MaskPattern::GlobalSliding => {
            let global = (spec.global_len().unwrap() as u64).min(real);
            let rest = real - global;
            real * real - (rest * rest - band_full(rest, spec.window().unwrap() as u64))
        }
        MaskPattern::PrefixLmCausal => {
            let p = spec.prefix_lens().unwrap()[0] as u64;
            p * p + tri(real) - tri(p)
        }
        MaskPattern::PrefixLmDocument => lens
            .iter()
            .zip(spec.prefix_lens().unwrap())
            .map(|(&l, &p)| {
                let p = p as u64;
                p * p + tri(l) - tri(p)
            })
            .sum(),
        MaskPattern::BlockCausalDocument => {
            let b = spec.block_size().unwrap() as u64;
            lens.iter()
                .map(|&l| {
                    let blocks = l.div_ceil(b);
                    (0..blocks)
                        .map(|blk| {
                            let rows = b.min(l - blk * b);
                            rows * ((blk + 1) * b).min(l)
                        })
                        .sum::<u64>()
                })
                .sum()
        }
    }
}

/// Pair count by direct enumeration of the predicate.
pub fn count_unmasked_brute(spec: &MaskSpec) -> u64 {
    let s = spec.seq_len();
    let mut n = 0;
    for i in 0..s {
        for j in 0..s {
            if spec.is_allowed(i, j) {
                n += 1;
            }
        }
    }
    n
}

/// Attention FLOPs: `4 · head_dim` per allowed pair per query head forward,
/// 2.5× that backward.
pub fn attention_flops(spec: &MaskSpec, layout: &HeadLayout, direction: Direction) -> u64 {
    pair_flops(spec.count_unmasked(), layout.q_heads, layout.head_dim, direction)
}

pub(crate) fn pair_flops(pairs: u64, q_heads: usize, head_dim: usize, direction: Direction) -> u64 {
    let forward = 4 * head_dim as u64 * q_heads as u64 * pairs;
    match direction {
        Direction::Forward => forward,
        // forward is a multiple of 4, so the 2.5x product is exact
        Direction::Backward => forward / 2 * 5,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::MaskSpecBuilder;
    use proptest::prelude::*;

    #[test]
    fn small_counts() {
        assert_eq!(MaskSpec::full(4).count_unmasked(), 16);
        assert_eq!(MaskSpec::causal(4).count_unmasked(), 10);
        let csw = MaskSpec::builder(MaskPattern::CausalSlidingWindow, 4).window(2).build().unwrap();
        assert_eq!(count_unmasked_brute(&csw), 7);
        assert_eq!(csw.count_unmasked(), 7);
    }

    #[test]
    fn flops_examples() {
        let layout = HeadLayout::mha(8, 128);
        assert_eq!(attention_flops(&MaskSpec::full(1024), &layout, Direction::Forward), 4_294_967_296);
        let l = HeadLayout::new(6, 2, 32).unwrap();
        assert_eq!(attention_flops(&MaskSpec::causal(1), &l, Direction::Forward), 4 * 32 * 6);
        let spec = MaskSpec::causal(37);
        let f = attention_flops(&spec, &l, Direction::Forward) as f64;
        let b = attention_flops(&spec, &l, Direction::Backward) as f64;
        assert_eq!(b / f, BACKWARD_FLOP_MULTIPLIER);
    }

    #[test]
    fn sliding_window_monotone_and_saturates() {
        let s = 40;
        let mut prev = 0;
        for w in 1..=s + 5 {
            let c = MaskSpec::builder(MaskPattern::CausalSlidingWindow, s)
                .window(w)
                .build()
                .unwrap()
                .count_unmasked();
            assert!(c >= prev);
            prev = c;
            if w >= s {
                assert_eq!(c, MaskSpec::causal(s).count_unmasked());
            }
        }
    }

    fn random_spec() -> impl Strategy<Value = MaskSpec> {
        let pattern = proptest::sample::select(MaskPattern::ALL.to_vec());
        let lens = proptest::collection::vec(1usize..40, 1..6);
        (pattern, lens, 1usize..50, 0usize..4, any::<u64>()).prop_map(|(p, lens, w, pad, salt)| {
            let real: usize = lens.iter().sum();
            let mut b: MaskSpecBuilder = MaskSpec::builder(p, real + pad).pad_len(pad);
            if p.needs_documents() {
                b = b.doc_lens(&lens);
            }
            if p.needs_window() {
                b = b.window(w);
            }
            match p {
                MaskPattern::PrefixLmCausal => b = b.prefix_lens(vec![(salt as usize) % (real + 1)]),
                MaskPattern::PrefixLmDocument => {
                    b = b.prefix_lens(lens.iter().enumerate().map(|(i, &l)| (salt as usize >> i) % (l + 1)).collect())
                }
                MaskPattern::BlockCausalDocument => b = b.block_size(1 + (salt as usize) % 9),
                MaskPattern::GlobalSliding => b = b.global_len((salt as usize) % (real + pad + 1)),
                _ => {}
            }
            b.build().unwrap()
        })
    }

    proptest! {
        #[test]
        fn analytic_matches_brute(spec in random_spec()) {
            prop_assert_eq!(spec.count_unmasked(), count_unmasked_brute(&spec));
        }
    }
}
