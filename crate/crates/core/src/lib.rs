//! Attention mask library, reference attention, block-sparse sampling and a
//! simulated fabric for context-parallel attention mechanisms.

// `!(x > 0.0)` rejects NaN on purpose; shard range lists often hold one range
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::single_range_in_vec_init)]

pub mod attnref;
pub mod cpmech;
pub mod fabric;
pub mod masks;
pub mod numcore;
pub mod report;
pub mod sparse;
pub mod workload;

pub use attnref::{attention_backward, attention_forward, AttentionPartial};
pub use cpmech::{run_exact, CpConfig, Mechanism, ProcessGrid};
pub use fabric::Topology;
pub use masks::{MaskPattern, MaskSpec};
pub use numcore::{HeadLayout, Precision, Tensor3};
