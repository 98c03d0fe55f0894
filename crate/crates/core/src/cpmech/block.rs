use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::CpError;
use crate::attnref::{attention_backward, attention_forward, merge_partials, AttentionPartial};
use crate::fabric::Payload;
use crate::masks::AttnMask;
use crate::numcore::{HeadLayout, Real, ShapeError, Tensor3};

/// Attention partial in block form: `lse` is a `(heads, rows, 1)` block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Part<B> {
    pub out: B,
    pub lse: B,
}

impl<B: Payload> Payload for Part<B> {
    fn wire_bytes(&self) -> u64 {
        self.out.wire_bytes() + self.lse.wire_bytes()
    }
}

impl<T: Real> From<AttentionPartial<T>> for Part<Tensor3<T>> {
    fn from(p: AttentionPartial<T>) -> Self {
        let (h, r, _) = p.out.dims();
        Part {
            out: p.out,
            lse: Tensor3::from_vec_unchecked(h, r, 1, p.lse),
        }
    }
}

impl<T: Real> From<Part<Tensor3<T>>> for AttentionPartial<T> {
    fn from(p: Part<Tensor3<T>>) -> Self {
        AttentionPartial {
            out: p.out,
            lse: p.lse.into_data(),
        }
    }
}

/// The tensor operations a mechanism needs. Implemented by real tensors and
/// by [`Phantom`], which carries only shapes so schedules can be costed at
/// sizes that would never fit in memory.
pub trait Block: Payload + Clone + Sized {
    fn dims(&self) -> (usize, usize, usize);
    fn slice_heads(&self, start: usize, end: usize) -> Self;
    fn concat_heads(parts: &[Self]) -> Result<Self, ShapeError>;
    /// Local rows taken from `ranges`, in order.
    fn select_rows(&self, ranges: &[Range<usize>]) -> Self;
    fn concat_rows(parts: &[Self]) -> Result<Self, ShapeError>;
    fn repeat_heads(&self, factor: usize) -> Self;
    fn fold_heads(&self, factor: usize) -> Self;
    fn add(&self, other: &Self) -> Result<Self, ShapeError>;

    fn attend(q: &Self, k: &Self, v: &Self, layout: &HeadLayout, mask: &dyn AttnMask) -> Result<Part<Self>, CpError>;
    fn merge(a: &Part<Self>, b: &Part<Self>) -> Result<Part<Self>, CpError>;
    /// `(dq, dk, dv)` for one key block given the full-key forward result.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        q: &Self,
        k: &Self,
        v: &Self,
        fwd: &Part<Self>,
        d_out: &Self,
        layout: &HeadLayout,
        mask: &dyn AttnMask,
    ) -> Result<(Self, Self, Self), CpError>;
}

fn indices(ranges: &[Range<usize>]) -> Vec<usize> {
    ranges.iter().flat_map(|r| r.clone()).collect()
}

impl<T: Real> Block for Tensor3<T> {
    fn dims(&self) -> (usize, usize, usize) {
        Tensor3::dims(self)
    }

    fn slice_heads(&self, start: usize, end: usize) -> Self {
        Tensor3::slice_heads(self, start, end)
    }

    fn concat_heads(parts: &[Self]) -> Result<Self, ShapeError> {
        Tensor3::concat_heads(parts)
    }

    fn select_rows(&self, ranges: &[Range<usize>]) -> Self {
        self.gather_rows(&indices(ranges))
    }

    fn concat_rows(parts: &[Self]) -> Result<Self, ShapeError> {
        Tensor3::concat_rows(parts)
    }

    fn repeat_heads(&self, factor: usize) -> Self {
        Tensor3::repeat_heads(self, factor)
    }

    fn fold_heads(&self, factor: usize) -> Self {
        Tensor3::fold_heads(self, factor)
    }

    fn add(&self, other: &Self) -> Result<Self, ShapeError> {
        Tensor3::add(self, other)
    }

    fn attend(q: &Self, k: &Self, v: &Self, layout: &HeadLayout, mask: &dyn AttnMask) -> Result<Part<Self>, CpError> {
        Ok(attention_forward(q, k, v, layout, mask)?.into())
    }

    fn merge(a: &Part<Self>, b: &Part<Self>) -> Result<Part<Self>, CpError> {
        let (a, b): (AttentionPartial<T>, AttentionPartial<T>) = (a.clone().into(), b.clone().into());
        Ok(merge_partials(&a, &b)?.into())
    }

    fn backward(
        q: &Self,
        k: &Self,
        v: &Self,
        fwd: &Part<Self>,
        d_out: &Self,
        layout: &HeadLayout,
        mask: &dyn AttnMask,
    ) -> Result<(Self, Self, Self), CpError> {
        let fwd: AttentionPartial<T> = fwd.clone().into();
        let g = attention_backward(q, k, v, &fwd, d_out, layout, mask)?;
        Ok((g.dq, g.dk, g.dv))
    }
}

/// Shape-only stand-in for a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phantom {
    pub heads: usize,
    pub rows: usize,
    pub cols: usize,
    pub elem_bytes: usize,
}

impl Phantom {
    pub fn new(heads: usize, rows: usize, cols: usize, elem_bytes: usize) -> Self {
        Self {
            heads,
            rows,
            cols,
            elem_bytes,
        }
    }

    fn like(&self, heads: usize, rows: usize, cols: usize) -> Self {
        Self::new(heads, rows, cols, self.elem_bytes)
    }

    fn mismatch(op: &'static str, a: &Self, b: &Self) -> ShapeError {
        ShapeError::Mismatch {
            op,
            lhs: a.dims(),
            rhs: b.dims(),
        }
    }
}

impl Payload for Phantom {
    fn wire_bytes(&self) -> u64 {
        (self.heads * self.rows * self.cols * self.elem_bytes) as u64
    }
}

impl Block for Phantom {
    fn dims(&self) -> (usize, usize, usize) {
        (self.heads, self.rows, self.cols)
    }

    fn slice_heads(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.heads, "head slice {start}..{end} of {}", self.heads);
        self.like(end - start, self.rows, self.cols)
    }

    fn concat_heads(parts: &[Self]) -> Result<Self, ShapeError> {
        let first = parts.first().ok_or(ShapeError::Layout("concat of nothing".into()))?;
        if let Some(p) = parts.iter().find(|p| (p.rows, p.cols) != (first.rows, first.cols)) {
            return Err(Self::mismatch("concat_heads", first, p));
        }
        Ok(first.like(parts.iter().map(|p| p.heads).sum(), first.rows, first.cols))
    }

    fn select_rows(&self, ranges: &[Range<usize>]) -> Self {
        assert!(ranges.iter().all(|r| r.end <= self.rows), "row selection past {} rows", self.rows);
        self.like(self.heads, ranges.iter().map(|r| r.len()).sum(), self.cols)
    }

    fn concat_rows(parts: &[Self]) -> Result<Self, ShapeError> {
        let first = parts.first().ok_or(ShapeError::Layout("concat of nothing".into()))?;
        if let Some(p) = parts.iter().find(|p| (p.heads, p.cols) != (first.heads, first.cols)) {
            return Err(Self::mismatch("concat_rows", first, p));
        }
        Ok(first.like(first.heads, parts.iter().map(|p| p.rows).sum(), first.cols))
    }

    fn repeat_heads(&self, factor: usize) -> Self {
        self.like(self.heads * factor, self.rows, self.cols)
    }

    fn fold_heads(&self, factor: usize) -> Self {
        assert!(self.heads.is_multiple_of(factor), "{} heads do not fold by {factor}", self.heads);
        self.like(self.heads / factor, self.rows, self.cols)
    }

    fn add(&self, other: &Self) -> Result<Self, ShapeError> {
        if self.dims() != other.dims() {
            return Err(Self::mismatch("add", self, other));
        }
        Ok(*self)
    }

    fn attend(q: &Self, k: &Self, v: &Self, layout: &HeadLayout, _mask: &dyn AttnMask) -> Result<Part<Self>, CpError> {
        let want_kv = (layout.kv_heads, k.rows, layout.head_dim);
        if q.dims() != (layout.q_heads, q.rows, layout.head_dim) || k.dims() != want_kv || v.dims() != want_kv {
            return Err(Self::mismatch("phantom attend", q, k).into());
        }
        Ok(Part {
            out: *q,
            lse: q.like(q.heads, q.rows, 1),
        })
    }

    fn merge(a: &Part<Self>, b: &Part<Self>) -> Result<Part<Self>, CpError> {
        if a != b {
            return Err(Self::mismatch("phantom merge", &a.out, &b.out).into());
        }
        Ok(*a)
    }

    fn backward(
        q: &Self,
        k: &Self,
        v: &Self,
        fwd: &Part<Self>,
        d_out: &Self,
        _layout: &HeadLayout,
        _mask: &dyn AttnMask,
    ) -> Result<(Self, Self, Self), CpError> {
        if fwd.out != *q || d_out != q {
            return Err(Self::mismatch("phantom backward", q, d_out).into());
        }
        Ok((*q, *k, *v))
    }
}

impl<B: Clone> Part<B> {
    pub fn map(&self, f: impl Fn(&B) -> B) -> Self {
        Part {
            out: f(&self.out),
            lse: f(&self.lse),
        }
    }
}

impl Copy for Part<Phantom> {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_tracks_shapes_and_bytes() {
        let p = Phantom::new(8, 16, 4, 4);
        assert_eq!(p.wire_bytes(), 8 * 16 * 4 * 4);
        assert_eq!(p.slice_heads(2, 4).dims(), (2, 16, 4));
        assert_eq!(p.select_rows(&[0..3, 10..12]).dims(), (8, 5, 4));
        assert_eq!(Phantom::concat_rows(&[p, p]).unwrap().dims(), (8, 32, 4));
        assert!(Phantom::concat_heads(&[p, p.select_rows(&[0..1])]).is_err());
        assert_eq!(p.repeat_heads(2).fold_heads(4).heads, 4);
    }

    #[test]
    fn tensor_part_round_trip() {
        let out = Tensor3::new(1, 2, 1, vec![1.0, 0.0]).unwrap();
        let ap = AttentionPartial::new(out, vec![0.5, f64::NEG_INFINITY]).unwrap();
        let part: Part<Tensor3<f64>> = ap.clone().into();
        assert_eq!(part.lse.dims(), (1, 2, 1));
        assert_eq!(part.wire_bytes(), 32);
        assert_eq!(AttentionPartial::from(part), ap);
    }
}
