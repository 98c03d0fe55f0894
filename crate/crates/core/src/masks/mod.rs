//! Static attention mask patterns over a packed sequence.
//!
//! A [`MaskSpec`] is a declarative, pointwise-queryable description of one of
//! the twelve static patterns. Tokens past `seq_len - pad_len` are padding:
//! they never attend and are never attended, whatever the pattern.

mod capability;
mod column;
mod count;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use capability::{KernelCapabilityMatrix, DENSE_KERNELS};
pub use column::ColumnRangeMask;
pub(crate) use count::pair_flops;
pub use count::{attention_flops, count_unmasked_brute, Direction, BACKWARD_FLOP_MULTIPLIER};

/// Default upper bound on `seq_len` for O(S²) dense expansion.
pub const DEFAULT_DENSE_CAP: usize = 8192;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("invalid mask spec: {0}")]
    Invalid(String),
    #[error("dense expansion of {seq_len} tokens exceeds cap {cap}")]
    DenseCap { seq_len: usize, cap: usize },
    #[error("column {column} has {intervals} allowed row intervals; at most 2 are representable")]
    Unrepresentable { column: usize, intervals: usize },
    #[error("unknown kernel `{0}`")]
    UnknownKernel(String),
    #[error("unknown mask pattern `{0}`")]
    UnknownPattern(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPattern {
    Full,
    Causal,
    FullSlidingWindow,
    CausalSlidingWindow,
    FullDocument,
    CausalDocument,
    ShareQuestion,
    CausalBlockwise,
    GlobalSliding,
    PrefixLmCausal,
    PrefixLmDocument,
    BlockCausalDocument,
}

impl MaskPattern {
    pub const ALL: [MaskPattern; 12] = [
        MaskPattern::Full,
        MaskPattern::Causal,
        MaskPattern::FullSlidingWindow,
        MaskPattern::CausalSlidingWindow,
        MaskPattern::FullDocument,
        MaskPattern::CausalDocument,
        MaskPattern::ShareQuestion,
        MaskPattern::CausalBlockwise,
        MaskPattern::GlobalSliding,
        MaskPattern::PrefixLmCausal,
        MaskPattern::PrefixLmDocument,
        MaskPattern::BlockCausalDocument,
    ];

    /// Patterns whose tokens are grouped into documents by `doc_offsets`.
    pub fn needs_documents(self) -> bool {
        matches!(
            self,
            MaskPattern::FullDocument
                | MaskPattern::CausalDocument
                | MaskPattern::ShareQuestion
                | MaskPattern::CausalBlockwise
                | MaskPattern::PrefixLmDocument
                | MaskPattern::BlockCausalDocument
        )
    }

    pub fn needs_window(self) -> bool {
        matches!(
            self,
            MaskPattern::FullSlidingWindow | MaskPattern::CausalSlidingWindow | MaskPattern::GlobalSliding
        )
    }

    pub fn snake_name(self) -> &'static str {
        match self {
            MaskPattern::Full => "full",
            MaskPattern::Causal => "causal",
            MaskPattern::FullSlidingWindow => "full_sliding_window",
            MaskPattern::CausalSlidingWindow => "causal_sliding_window",
            MaskPattern::FullDocument => "full_document",
            MaskPattern::CausalDocument => "causal_document",
            MaskPattern::ShareQuestion => "share_question",
            MaskPattern::CausalBlockwise => "causal_blockwise",
            MaskPattern::GlobalSliding => "global_sliding",
            MaskPattern::PrefixLmCausal => "prefix_lm_causal",
            MaskPattern::PrefixLmDocument => "prefix_lm_document",
            MaskPattern::BlockCausalDocument => "block_causal_document",
        }
    }

    /// Upper-case display name, e.g. `SHARE QUESTION`.
    pub fn title(self) -> &'static str {
        match self {
            MaskPattern::Full => "FULL",
            MaskPattern::Causal => "CAUSAL",
            MaskPattern::FullSlidingWindow => "FULL SLIDING WINDOW",
            MaskPattern::CausalSlidingWindow => "CAUSAL SLIDING WINDOW",
            MaskPattern::FullDocument => "FULL DOCUMENT",
            MaskPattern::CausalDocument => "CAUSAL DOCUMENT",
            MaskPattern::ShareQuestion => "SHARE QUESTION",
            MaskPattern::CausalBlockwise => "CAUSAL BLOCKWISE",
            MaskPattern::GlobalSliding => "GLOBAL SLIDING",
            MaskPattern::PrefixLmCausal => "PREFIX LM CAUSAL",
            MaskPattern::PrefixLmDocument => "PREFIX LM DOCUMENT",
            MaskPattern::BlockCausalDocument => "BLOCK CAUSAL DOCUMENT",
        }
    }
}

impl fmt::Display for MaskPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.snake_name())
    }
}

impl FromStr for MaskPattern {
    type Err = MaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        MaskPattern::ALL
            .into_iter()
            .find(|p| p.snake_name() == norm)
            .ok_or_else(|| MaskError::UnknownPattern(s.to_string()))
    }
}

/// Anything that can answer "may query row `i` attend key column `j`".
pub trait AttnMask {
    fn allows(&self, i: usize, j: usize) -> bool;

    /// Number of key columns the mask is defined over, when known.
    fn key_len(&self) -> Option<usize> {
        None
    }
}

impl<F: Fn(usize, usize) -> bool> AttnMask for F {
    fn allows(&self, i: usize, j: usize) -> bool {
        self(i, j)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawMaskSpec", into = "RawMaskSpec")]
pub struct MaskSpec {
    pattern: MaskPattern,
    seq_len: usize,
    doc_offsets: Option<Vec<usize>>,
    window: Option<usize>,
    prefix_lens: Option<Vec<usize>>,
    block_size: Option<usize>,
    global_len: Option<usize>,
    pad_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawMaskSpec {
    pattern: MaskPattern,
    seq_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    doc_offsets: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prefix_lens: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    block_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    global_len: Option<usize>,
    #[serde(default)]
    pad_len: usize,
}

impl TryFrom<RawMaskSpec> for MaskSpec {
    type Error = MaskError;

    fn try_from(raw: RawMaskSpec) -> Result<Self, Self::Error> {
        let spec = MaskSpec {
            pattern: raw.pattern,
            seq_len: raw.seq_len,
            doc_offsets: raw.doc_offsets,
            window: raw.window,
            prefix_lens: raw.prefix_lens,
            block_size: raw.block_size,
            global_len: raw.global_len,
            pad_len: raw.pad_len,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<MaskSpec> for RawMaskSpec {
    fn from(s: MaskSpec) -> Self {
        RawMaskSpec {
            pattern: s.pattern,
            seq_len: s.seq_len,
            doc_offsets: s.doc_offsets,
            window: s.window,
            prefix_lens: s.prefix_lens,
            block_size: s.block_size,
            global_len: s.global_len,
            pad_len: s.pad_len,
        }
    }
}

/// Builder for [`MaskSpec`]; `build` validates.
#[derive(Debug, Clone)]
pub struct MaskSpecBuilder {
    raw: RawMaskSpec,
}

impl MaskSpecBuilder {
    pub fn doc_offsets(mut self, offsets: Vec<usize>) -> Self {
        self.raw.doc_offsets = Some(offsets);
        self
    }

    /// Document offsets from a list of document lengths.
    pub fn doc_lens(self, lens: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(lens.len() + 1);
        offsets.push(0);
        let mut acc = 0;
        for &l in lens {
            acc += l;
            offsets.push(acc);
        }
        self.doc_offsets(offsets)
    }

    pub fn window(mut self, window: usize) -> Self {
        self.raw.window = Some(window);
        self
    }

    pub fn prefix_lens(mut self, prefix: Vec<usize>) -> Self {
        self.raw.prefix_lens = Some(prefix);
        self
    }

    pub fn block_size(mut self, block: usize) -> Self {
        self.raw.block_size = Some(block);
        self
    }

    pub fn global_len(mut self, global: usize) -> Self {
        self.raw.global_len = Some(global);
        self
    }

    pub fn pad_len(mut self, pad: usize) -> Self {
        self.raw.pad_len = pad;
        self
    }

    pub fn build(self) -> Result<MaskSpec, MaskError> {
        MaskSpec::try_from(self.raw)
    }
}

impl MaskSpec {
    pub fn builder(pattern: MaskPattern, seq_len: usize) -> MaskSpecBuilder {
        MaskSpecBuilder {
            raw: RawMaskSpec {
                pattern,
                seq_len,
                doc_offsets: None,
                window: None,
                prefix_lens: None,
                block_size: None,
                global_len: None,
                pad_len: 0,
            },
        }
    }

    pub fn full(seq_len: usize) -> Self {
        Self::builder(MaskPattern::Full, seq_len).build().expect("valid full mask")
    }

    pub fn causal(seq_len: usize) -> Self {
        Self::builder(MaskPattern::Causal, seq_len).build().expect("valid causal mask")
    }

    pub fn from_json(text: &str) -> Result<Self, MaskError> {
        serde_json::from_str(text).map_err(|e| MaskError::Invalid(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("mask spec serializes")
    }

    fn validate(&self) -> Result<(), MaskError> {
        let bad = |m: String| Err(MaskError::Invalid(m));
        if self.seq_len == 0 {
            return bad("seq_len must be >= 1".into());
        }
        if self.pad_len >= self.seq_len {
            return bad(format!("pad_len {} leaves no real tokens in {}", self.pad_len, self.seq_len));
        }
        let real = self.real_len();
        let p = self.pattern;

        match (&self.doc_offsets, p.needs_documents()) {
            (None, true) => return bad(format!("{p} requires doc_offsets")),
            (Some(_), false) => return bad(format!("{p} does not take doc_offsets")),
            (Some(off), true) => {
                if off.len() < 2 || off[0] != 0 {
                    return bad("doc_offsets must start at 0 and hold at least one document".into());
                }
                if off.windows(2).any(|w| w[0] >= w[1]) {
                    return bad("doc_offsets must be strictly increasing".into());
                }
                if *off.last().unwrap() != real {
                    return bad(format!(
                        "doc_offsets end at {} but there are {real} real tokens",
                        off.last().unwrap()
                    ));
                }
            }
            (None, false) => {}
        }

        if p.needs_window() {
            match self.window {
                Some(w) if w >= 1 => {}
                _ => return bad(format!("{p} requires window >= 1")),
            }
        } else if self.window.is_some() {
            return bad(format!("{p} does not take a window"));
        }

        match p {
            MaskPattern::PrefixLmCausal => match self.prefix_lens.as_deref() {
                Some([pre]) if *pre <= real => {}
                _ => return bad("prefix_lm_causal needs exactly one prefix length <= real length".into()),
            },
            MaskPattern::PrefixLmDocument => {
                let lens = self.doc_lens();
                match self.prefix_lens.as_deref() {
                    Some(pre) if pre.len() == lens.len() => {
                        if let Some(i) = (0..pre.len()).find(|&i| pre[i] > lens[i]) {
                            return bad(format!("prefix {} exceeds document {i} length {}", pre[i], lens[i]));
                        }
                    }
                    _ => return bad("prefix_lm_document needs one prefix length per document".into()),
                }
            }
            _ if self.prefix_lens.is_some() => return bad(format!("{p} does not take prefix_lens")),
            _ => {}
        }

        if p == MaskPattern::BlockCausalDocument {
            match self.block_size {
                Some(b) if b >= 1 => {}
                _ => return bad("block_causal_document requires block_size >= 1".into()),
            }
        } else if self.block_size.is_some() {
            return bad(format!("{p} does not take block_size"));
        }

        if p == MaskPattern::GlobalSliding {
            match self.global_len {
                Some(g) if g <= self.seq_len => {}
                _ => return bad("global_sliding requires global_len <= seq_len".into()),
            }
        } else if self.global_len.is_some() {
            return bad(format!("{p} does not take global_len"));
        }
        Ok(())
    }

    pub fn pattern(&self) -> MaskPattern {
        self.pattern
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn pad_len(&self) -> usize {
        self.pad_len
    }

    /// Tokens before the padding tail.
    pub fn real_len(&self) -> usize {
        self.seq_len - self.pad_len
    }

    pub fn doc_offsets(&self) -> Option<&[usize]> {
        self.doc_offsets.as_deref()
    }

    pub fn window(&self) -> Option<usize> {
        self.window
    }

    pub fn prefix_lens(&self) -> Option<&[usize]> {
        self.prefix_lens.as_deref()
    }

    pub fn block_size(&self) -> Option<usize> {
        self.block_size
    }

    pub fn global_len(&self) -> Option<usize> {
        self.global_len
    }

    /// Document boundaries; patterns without documents see one document
    /// spanning all real tokens.
    pub fn doc_bounds(&self) -> Vec<usize> {
        match &self.doc_offsets {
            Some(off) => off.clone(),
            None => vec![0, self.real_len()],
        }
    }

    pub fn doc_lens(&self) -> Vec<usize> {
        self.doc_bounds().windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Same mask with `extra` more padding tokens at the tail.
    pub fn with_padding(&self, extra: usize) -> Self {
        let mut out = self.clone();
        out.seq_len += extra;
        out.pad_len += extra;
        out
    }

    #[inline]
    fn doc_of(off: &[usize], t: usize) -> usize {
        off.partition_point(|&o| o <= t) - 1
    }

    /// Pointwise predicate: may query token `i` attend key token `j`.
    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        let real = self.real_len();
        if i >= real || j >= real {
            return false;
        }
        let causal = j <= i;
        match self.pattern {
            MaskPattern::Full => true,
            MaskPattern::Causal => causal,
            MaskPattern::FullSlidingWindow => i.abs_diff(j) < self.window.unwrap(),
            MaskPattern::CausalSlidingWindow => causal && i - j < self.window.unwrap(),
            MaskPattern::GlobalSliding => {
                let g = self.global_len.unwrap();
                i < g || j < g || i.abs_diff(j) < self.window.unwrap()
            }
            MaskPattern::PrefixLmCausal => j < self.prefix_lens.as_ref().unwrap()[0] || causal,
            _ => {
                let off = self.doc_offsets.as_deref().unwrap();
                let di = Self::doc_of(off, i);
                let dj = Self::doc_of(off, j);
                let same = di == dj;
                match self.pattern {
                    MaskPattern::FullDocument => same,
                    MaskPattern::CausalDocument => same && causal,
                    MaskPattern::ShareQuestion => dj == 0 || (same && causal),
                    MaskPattern::CausalBlockwise => causal && (same || di == off.len() - 2),
                    MaskPattern::PrefixLmDocument => same && (j - off[dj] < self.prefix_lens.as_ref().unwrap()[dj] || causal),
                    MaskPattern::BlockCausalDocument => {
                        let b = self.block_size.unwrap();
                        same && (j - off[dj]) / b <= (i - off[di]) / b
                    }
                    _ => unreachable!(),
                }
            }
        }
    }

    /// Number of allowed `(i, j)` pairs, from closed forms.
    pub fn count_unmasked(&self) -> u64 {
        count::count_analytic(self)
    }

    pub fn to_dense(&self) -> Result<DenseMask, MaskError> {
        self.to_dense_capped(DEFAULT_DENSE_CAP)
    }

    pub fn to_dense_capped(&self, cap: usize) -> Result<DenseMask, MaskError> {
        if self.seq_len > cap {
            return Err(MaskError::DenseCap {
                seq_len: self.seq_len,
                cap,
            });
        }
        Ok(DenseMask::from_fn(self.seq_len, self.seq_len, |i, j| self.is_allowed(i, j)))
    }

    pub fn to_column_ranges(&self) -> Result<ColumnRangeMask, MaskError> {
        ColumnRangeMask::from_dense(&self.to_dense()?)
    }
}

impl AttnMask for MaskSpec {
    fn allows(&self, i: usize, j: usize) -> bool {
        self.is_allowed(i, j)
    }

    fn key_len(&self) -> Option<usize> {
        Some(self.seq_len)
    }
}

/// Row-major boolean matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl DenseMask {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                bits.push(f(i, j));
            }
        }
        Self { rows, cols, bits }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.bits[i * self.cols + j] = value;
    }

    pub fn popcount(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    /// `#` for allowed, `.` for masked, one line per query row.
    pub fn to_ascii(&self) -> String {
        let mut s = String::with_capacity(self.rows * (self.cols + 1));
        for i in 0..self.rows {
            for j in 0..self.cols {
                s.push(if self.get(i, j) { '#' } else { '.' });
            }
            s.push('\n');
        }
        s
    }
}

impl AttnMask for DenseMask {
    fn allows(&self, i: usize, j: usize) -> bool {
        self.get(i, j)
    }

    fn key_len(&self) -> Option<usize> {
        Some(self.cols)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs(pattern: MaskPattern, lens: &[usize]) -> MaskSpecBuilder {
        MaskSpec::builder(pattern, lens.iter().sum()).doc_lens(lens)
    }

    #[test]
    fn causal_predicate() {
        let m = MaskSpec::causal(4);
        assert!(!m.is_allowed(2, 3));
        assert!(m.is_allowed(3, 3));
    }

    #[test]
    fn causal_document_crosses_boundary() {
        let m = docs(MaskPattern::CausalDocument, &[2, 2]).build().unwrap();
        assert!(!m.is_allowed(2, 1));
        assert!(m.is_allowed(3, 2));
    }

    #[test]
    fn share_question_first_doc_shared() {
        let m = docs(MaskPattern::ShareQuestion, &[2, 2]).build().unwrap();
        assert!(m.is_allowed(3, 0));
        assert!(m.is_allowed(0, 1));
        assert!(!m.is_allowed(2, 3));
    }

    #[test]
    fn causal_blockwise_last_doc_sees_everything_before() {
        let m = docs(MaskPattern::CausalBlockwise, &[2, 2, 2]).build().unwrap();
        assert!(m.is_allowed(5, 0));
        assert!(m.is_allowed(4, 3));
        assert!(!m.is_allowed(3, 1));
        assert!(!m.is_allowed(4, 5));
    }

    #[test]
    fn global_sliding_global_rows_and_columns() {
        let m = MaskSpec::builder(MaskPattern::GlobalSliding, 8)
            .window(2)
            .global_len(1)
            .build()
            .unwrap();
        assert!(m.is_allowed(0, 7));
        assert!(m.is_allowed(7, 0));
        assert!(m.is_allowed(5, 6));
        assert!(!m.is_allowed(5, 7));
    }

    #[test]
    fn block_causal_document_is_blockwise() {
        let m = docs(MaskPattern::BlockCausalDocument, &[4, 3]).block_size(2).build().unwrap();
        assert!(m.is_allowed(0, 1));
        assert!(!m.is_allowed(1, 2));
        assert!(m.is_allowed(4, 5));
        assert!(!m.is_allowed(4, 6));
        assert!(!m.is_allowed(4, 3));
    }

    #[test]
    fn padding_is_fully_masked() {
        let m = MaskSpec::full(4).with_padding(2);
        assert_eq!(m.seq_len(), 6);
        assert!(m.is_allowed(3, 0));
        assert!(!m.is_allowed(4, 0));
        assert!(!m.is_allowed(0, 5));
    }

    #[test]
    fn validation_errors() {
        assert!(MaskSpec::builder(MaskPattern::FullDocument, 4).build().is_err());
        assert!(MaskSpec::builder(MaskPattern::Causal, 4).doc_lens(&[4]).build().is_err());
        assert!(MaskSpec::builder(MaskPattern::FullDocument, 4)
            .doc_offsets(vec![0, 2, 2, 4])
            .build()
            .is_err());
        assert!(MaskSpec::builder(MaskPattern::FullDocument, 4).doc_lens(&[2, 1]).build().is_err());
        assert!(MaskSpec::builder(MaskPattern::CausalSlidingWindow, 4).window(0).build().is_err());
        assert!(docs(MaskPattern::PrefixLmDocument, &[2, 2])
            .prefix_lens(vec![3, 1])
            .build()
            .is_err());
        assert!(MaskSpec::builder(MaskPattern::GlobalSliding, 4)
            .window(1)
            .global_len(5)
            .build()
            .is_err());
        assert!(MaskSpec::builder(MaskPattern::Full, 0).build().is_err());
    }

    #[test]
    fn dense_examples() {
        let d = MaskSpec::causal(3).to_dense().unwrap();
        assert_eq!(d.to_ascii(), "#..\n##.\n###\n");

        let d = docs(MaskPattern::FullDocument, &[2, 1]).build().unwrap().to_dense().unwrap();
        assert_eq!(d.to_ascii(), "##.\n##.\n..#\n");

        let d = MaskSpec::builder(MaskPattern::PrefixLmCausal, 4)
            .prefix_lens(vec![2])
            .build()
            .unwrap()
            .to_dense()
            .unwrap();
        assert_eq!(d.to_ascii(), "##..\n##..\n###.\n####\n");
    }

    #[test]
    fn dense_cap() {
        let m = MaskSpec::full(10);
        assert_eq!(m.to_dense_capped(9), Err(MaskError::DenseCap { seq_len: 10, cap: 9 }));
    }

    #[test]
    fn json_round_trip_and_validation() {
        let m = docs(MaskPattern::PrefixLmDocument, &[3, 2])
            .prefix_lens(vec![1, 2])
            .build()
            .unwrap();
        let text = m.to_json();
        assert_eq!(MaskSpec::from_json(&text).unwrap(), m);
        assert!(MaskSpec::from_json(r#"{"pattern":"causal_document","seq_len":4}"#).is_err());
        let parsed = MaskSpec::from_json(r#"{"pattern":"causal_sliding_window","seq_len":16,"window":4}"#).unwrap();
        assert_eq!(parsed.window(), Some(4));
    }

    #[test]
    fn pattern_names_parse() {
        for p in MaskPattern::ALL {
            assert_eq!(p.snake_name().parse::<MaskPattern>().unwrap(), p);
            assert_eq!(p.title().parse::<MaskPattern>().unwrap(), p);
        }
        assert!("nope".parse::<MaskPattern>().is_err());
    }
}
