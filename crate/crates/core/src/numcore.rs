//! Dense numeric layer shared by every other module.
//!
//! Tensors are `(heads, rows, cols)` row-major buffers. All reductions walk
//! the contraction axis in ascending index order and never reassociate, so a
//! result depends only on its inputs, never on how the work was scheduled.

use std::fmt::{Debug, Display};

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("buffer holds {got} values but dims {dims:?} need {expected}")]
    Length {
        dims: (usize, usize, usize),
        expected: usize,
        got: usize,
    },
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Mismatch {
        op: &'static str,
        lhs: (usize, usize, usize),
        rhs: (usize, usize, usize),
    },
    #[error("invalid head layout: {0}")]
    Layout(String),
}

/// Floating point element type. Only `f64` and `f32` are provided.
pub trait Real: Float + Default + Debug + Display + Send + Sync + 'static {
    const BYTES: usize;
    const NAME: &'static str;

    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f64 {
    const BYTES: usize = 8;
    const NAME: &'static str = "f64";

    fn of_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    const BYTES: usize = 4;
    const NAME: &'static str = "f32";

    fn of_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

/// Numeric precision selector used by configs and bindings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        }
    }
}

/// Query/key-value head counts and the per-head dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HeadLayout {
    pub q_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl HeadLayout {
    pub fn new(q_heads: usize, kv_heads: usize, head_dim: usize) -> Result<Self, ShapeError> {
        let layout = Self {
            q_heads,
            kv_heads,
            head_dim,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn mha(heads: usize, head_dim: usize) -> Self {
        Self {
            q_heads: heads,
            kv_heads: heads,
            head_dim,
        }
    }

    pub fn validate(&self) -> Result<(), ShapeError> {
        if self.q_heads == 0 || self.kv_heads == 0 || self.head_dim == 0 {
            return Err(ShapeError::Layout(format!("zero dimension in {self:?}")));
        }
        if !self.q_heads.is_multiple_of(self.kv_heads) {
            return Err(ShapeError::Layout(format!(
                "q_heads {} not a multiple of kv_heads {}",
                self.q_heads, self.kv_heads
            )));
        }
        Ok(())
    }

    /// Query heads sharing one key/value head.
    pub fn group_size(&self) -> usize {
        self.q_heads / self.kv_heads
    }

    pub fn kv_head_of(&self, q_head: usize) -> usize {
        q_head / self.group_size()
    }

    pub fn scale<T: Real>(&self) -> T {
        T::one() / T::of_f64(self.head_dim as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3<T> {
    heads: usize,
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor3<T> {
    pub fn new(heads: usize, rows: usize, cols: usize, data: Vec<T>) -> Result<Self, ShapeError> {
        let expected = heads * rows * cols;
        if data.len() != expected {
            return Err(ShapeError::Length {
                dims: (heads, rows, cols),
                expected,
                got: data.len(),
            });
        }
        if let Some((index, value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(ShapeError::NonFinite {
                index,
                value: value.as_f64(),
            });
        }
        Ok(Self { heads, rows, cols, data })
    }

    pub fn zeros(heads: usize, rows: usize, cols: usize) -> Self {
        Self {
            heads,
            rows,
            cols,
            data: vec![T::zero(); heads * rows * cols],
        }
    }

    pub fn from_fn(heads: usize, rows: usize, cols: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Result<Self, ShapeError> {
        let mut data = Vec::with_capacity(heads * rows * cols);
        for h in 0..heads {
            for i in 0..rows {
                for j in 0..cols {
                    data.push(f(h, i, j));
                }
            }
        }
        Self::new(heads, rows, cols, data)
    }

    /// Builds from kernel output. Unlike [`Tensor3::new`] this admits `-inf`,
    /// which log-sum-exp blocks use for rows with no visible key.
    pub(crate) fn from_vec_unchecked(heads: usize, rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), heads * rows * cols);
        debug_assert!(data.iter().all(|v| !v.is_nan() && *v != T::infinity()));
        Self { heads, rows, cols, data }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.heads, self.rows, self.cols)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, h: usize, i: usize, j: usize) -> usize {
        (h * self.rows + i) * self.cols + j
    }

    #[inline]
    pub fn get(&self, h: usize, i: usize, j: usize) -> T {
        self.data[self.index(h, i, j)]
    }

    /// Overwrites one entry. Non-finite values are rejected.
    pub fn set(&mut self, h: usize, i: usize, j: usize, value: T) -> Result<(), ShapeError> {
        let index = self.index(h, i, j);
        if !value.is_finite() {
            return Err(ShapeError::NonFinite {
                index,
                value: value.as_f64(),
            });
        }
        self.data[index] = value;
        Ok(())
    }

    #[inline]
    pub fn row(&self, h: usize, i: usize) -> &[T] {
        let start = self.index(h, i, 0);
        &self.data[start..start + self.cols]
    }

    #[inline]
    pub(crate) fn row_mut(&mut self, h: usize, i: usize) -> &mut [T] {
        let start = self.index(h, i, 0);
        &mut self.data[start..start + self.cols]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self, ShapeError> {
        Self::new(self.heads, self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Real>(&self) -> Result<Tensor3<U>, ShapeError> {
        Tensor3::new(
            self.heads,
            self.rows,
            self.cols,
            self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        )
    }

    /// Largest absolute elementwise difference, accumulated in f64.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64, ShapeError> {
        if self.dims() != other.dims() {
            return Err(ShapeError::Mismatch {
                op: "max_abs_diff",
                lhs: self.dims(),
                rhs: other.dims(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn add(&self, other: &Self) -> Result<Self, ShapeError> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<(), ShapeError> {
        if self.dims() != other.dims() {
            return Err(ShapeError::Mismatch {
                op: "add",
                lhs: self.dims(),
                rhs: other.dims(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    /// Heads `[start, end)` as a new tensor.
    pub fn slice_heads(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.heads, "head range out of bounds");
        let per_head = self.rows * self.cols;
        Self::from_vec_unchecked(
            end - start,
            self.rows,
            self.cols,
            self.data[start * per_head..end * per_head].to_vec(),
        )
    }

    /// Rows picked by index, in the given order, for every head.
    pub fn gather_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.heads * rows.len() * self.cols);
        for h in 0..self.heads {
            for &i in rows {
                data.extend_from_slice(self.row(h, i));
            }
        }
        Self::from_vec_unchecked(self.heads, rows.len(), self.cols, data)
    }

    pub fn concat_heads(parts: &[Self]) -> Result<Self, ShapeError> {
        let first = parts.first().ok_or(ShapeError::Layout("empty concat".into()))?;
        let mut data = Vec::new();
        let mut heads = 0;
        for p in parts {
            if p.rows != first.rows || p.cols != first.cols {
                return Err(ShapeError::Mismatch {
                    op: "concat_heads",
                    lhs: first.dims(),
                    rhs: p.dims(),
                });
            }
            heads += p.heads;
            data.extend_from_slice(&p.data);
        }
        Ok(Self::from_vec_unchecked(heads, first.rows, first.cols, data))
    }

    pub fn concat_rows(parts: &[Self]) -> Result<Self, ShapeError> {
        let first = parts.first().ok_or(ShapeError::Layout("empty concat".into()))?;
        for p in parts {
            if p.heads != first.heads || p.cols != first.cols {
                return Err(ShapeError::Mismatch {
                    op: "concat_rows",
                    lhs: first.dims(),
                    rhs: p.dims(),
                });
            }
        }
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(first.heads * rows * first.cols);
        for h in 0..first.heads {
            for p in parts {
                for i in 0..p.rows {
                    data.extend_from_slice(p.row(h, i));
                }
            }
        }
        Ok(Self::from_vec_unchecked(first.heads, rows, first.cols, data))
    }

    /// Appends `extra` zero rows to every head.
    pub fn pad_rows(&self, extra: usize) -> Self {
        let mut data = Vec::with_capacity(self.heads * (self.rows + extra) * self.cols);
        for h in 0..self.heads {
            for i in 0..self.rows {
                data.extend_from_slice(self.row(h, i));
            }
            data.extend(std::iter::repeat_n(T::zero(), extra * self.cols));
        }
        Self::from_vec_unchecked(self.heads, self.rows + extra, self.cols, data)
    }

    /// Repeats each head `factor` times in place (`h0,h0,h1,h1,...`).
    pub fn repeat_heads(&self, factor: usize) -> Self {
        let per_head = self.rows * self.cols;
        let mut data = Vec::with_capacity(self.data.len() * factor);
        for h in 0..self.heads {
            for _ in 0..factor {
                data.extend_from_slice(&self.data[h * per_head..(h + 1) * per_head]);
            }
        }
        Self::from_vec_unchecked(self.heads * factor, self.rows, self.cols, data)
    }

    /// Inverse of [`repeat_heads`](Self::repeat_heads) for gradients: sums
    /// each run of `factor` consecutive heads in ascending order.
    pub fn fold_heads(&self, factor: usize) -> Self {
        assert!(factor > 0 && self.heads.is_multiple_of(factor), "fold factor must divide heads");
        let per_head = self.rows * self.cols;
        let heads = self.heads / factor;
        let mut data = vec![T::zero(); heads * per_head];
        for h in 0..self.heads {
            let dst = h / factor;
            for (d, &s) in data[dst * per_head..(dst + 1) * per_head]
                .iter_mut()
                .zip(&self.data[h * per_head..(h + 1) * per_head])
            {
                *d = *d + s;
            }
        }
        Self::from_vec_unchecked(heads, self.rows, self.cols, data)
    }
}

/// Dot product in ascending index order.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

/// Per-head matrix product. With `transpose_b`, `b` is read as `(heads, n, k)`.
pub fn matmul<T: Real>(a: &Tensor3<T>, b: &Tensor3<T>, transpose_b: bool) -> Result<Tensor3<T>, ShapeError> {
    let (ha, m, ka) = a.dims();
    let (hb, b_rows, b_cols) = b.dims();
    let (kb, n) = if transpose_b { (b_cols, b_rows) } else { (b_rows, b_cols) };
    if ha != hb || ka != kb {
        return Err(ShapeError::Mismatch {
            op: "matmul",
            lhs: a.dims(),
            rhs: b.dims(),
        });
    }
    let mut data = Vec::with_capacity(ha * m * n);
    for h in 0..ha {
        for i in 0..m {
            let a_row = a.row(h, i);
            for j in 0..n {
                let mut acc = T::zero();
                for (kk, &av) in a_row.iter().enumerate() {
                    let bv = if transpose_b { b.get(h, j, kk) } else { b.get(h, kk, j) };
                    acc = acc + av * bv;
                }
                data.push(acc);
            }
        }
    }
    Tensor3::new(ha, m, n, data)
}

/// Row softmax restricted to entries where `allow(head, row, col)` holds.
///
/// Disallowed entries come out exactly zero. A row with no allowed entry
/// yields an all-zero probability row and an `lse` of negative infinity.
/// `lse` is laid out `head * rows + row`.
pub fn masked_row_softmax<T: Real>(scores: &Tensor3<T>, allow: impl Fn(usize, usize, usize) -> bool) -> (Tensor3<T>, Vec<T>) {
    let (heads, rows, cols) = scores.dims();
    let mut probs = Tensor3::zeros(heads, rows, cols);
    let mut lse = Vec::with_capacity(heads * rows);
    for h in 0..heads {
        for i in 0..rows {
            let row = scores.row(h, i);
            let mut max = T::neg_infinity();
            for (j, &s) in row.iter().enumerate() {
                if allow(h, i, j) && s > max {
                    max = s;
                }
            }
            if max == T::neg_infinity() {
                lse.push(T::neg_infinity());
                continue;
            }
            let mut sum = T::zero();
            for (j, &s) in row.iter().enumerate() {
                if allow(h, i, j) {
                    sum = sum + (s - max).exp();
                }
            }
            let out = probs.row_mut(h, i);
            for (j, &s) in row.iter().enumerate() {
                if allow(h, i, j) {
                    out[j] = (s - max).exp() / sum;
                }
            }
            lse.push(max + sum.ln());
        }
    }
    (probs, lse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor3<f64> {
        Tensor3::new(1, rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn rejects_bad_length_and_nan() {
        assert!(matches!(Tensor3::<f64>::new(1, 2, 2, vec![0.0; 3]), Err(ShapeError::Length { .. })));
        assert!(matches!(
            Tensor3::new(1, 1, 2, vec![0.0, f64::NAN]),
            Err(ShapeError::NonFinite { index: 1, .. })
        ));
        assert!(Tensor3::new(1, 1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn layout_requires_integral_groups() {
        assert!(HeadLayout::new(8, 3, 16).is_err());
        let l = HeadLayout::new(8, 2, 16).unwrap();
        assert_eq!(l.group_size(), 4);
        assert_eq!(l.kv_head_of(5), 1);
    }

    #[test]
    fn matmul_identity_and_hand_example() {
        let id = t(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let m = t(2, 2, &[3.0, -1.0, 2.5, 7.0]);
        assert_eq!(matmul(&id, &m, false).unwrap(), m);

        let a = t(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(matmul(&a, &b, false).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
        // a · bᵀ
        assert_eq!(matmul(&a, &b, true).unwrap().data(), &[17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor3::from_fn(2, 8, 8, |_, _, _| rng.random_range(-1.0..1.0)).unwrap();
        let b = Tensor3::from_fn(2, 8, 8, |_, _, _| rng.random_range(-1.0..1.0)).unwrap();
        let got = matmul(&a, &b, false).unwrap();
        let mut expect = vec![0.0f64; 2 * 64];
        for h in 0..2 {
            for i in 0..8 {
                for j in 0..8 {
                    let mut s = 0.0;
                    for k in 0..8 {
                        s += a.data()[h * 64 + i * 8 + k] * b.data()[h * 64 + k * 8 + j];
                    }
                    expect[h * 64 + i * 8 + j] = s;
                }
            }
        }
        assert_eq!(got.data(), expect.as_slice());
    }

    #[test]
    fn matmul_shape_error() {
        let a = Tensor3::<f64>::zeros(1, 2, 3);
        let b = Tensor3::<f64>::zeros(1, 2, 3);
        assert!(matmul(&a, &b, false).is_err());
        assert!(matmul(&a, &b, true).is_ok());
        assert!(matmul(&a, &Tensor3::zeros(2, 3, 3), false).is_err());
    }

    #[test]
    fn softmax_examples() {
        let (p, lse) = masked_row_softmax(&t(1, 2, &[0.0, 0.0]), |_, _, _| true);
        assert_eq!(p.data(), &[0.5, 0.5]);
        assert!((lse[0] - 2f64.ln()).abs() < 1e-15);

        let (p, lse) = masked_row_softmax(&t(1, 2, &[5.0, 123.0]), |_, _, j| j == 0);
        assert_eq!(p.data(), &[1.0, 0.0]);
        assert_eq!(lse[0], 5.0);

        let (p, lse) = masked_row_softmax(&t(1, 3, &[1.0, 2.0, 3.0]), |_, _, _| true);
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
        for (j, x) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((p.data()[j] - x.exp() / z).abs() < 1e-15);
        }
        let expect = 3.0 + ((-2f64).exp() + (-1f64).exp() + 1.0).ln();
        assert!((lse[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn softmax_fully_masked_row() {
        let (p, lse) = masked_row_softmax(&t(1, 3, &[1.0, 2.0, 3.0]), |_, _, _| false);
        assert_eq!(p.data(), &[0.0, 0.0, 0.0]);
        assert_eq!(lse[0], f64::NEG_INFINITY);
    }

    #[test]
    fn repeat_fold_heads() {
        let x = Tensor3::from_fn(2, 1, 2, |h, _, j| (h * 2 + j) as f64).unwrap();
        let r = x.repeat_heads(2);
        assert_eq!(r.data(), &[0.0, 1.0, 0.0, 1.0, 2.0, 3.0, 2.0, 3.0]);
        assert_eq!(r.fold_heads(2).data(), &[0.0, 2.0, 4.0, 6.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_normalize(
                vals in proptest::collection::vec(-50.0f64..50.0, 1..24),
                mask_bits in proptest::collection::vec(any::<bool>(), 24),
            ) {
                let n = vals.len();
                let s = Tensor3::new(1, 1, n, vals.clone()).unwrap();
                let allow = |_: usize, _: usize, j: usize| mask_bits[j] || j == 0;
                let (p, lse) = masked_row_softmax(&s, allow);
                let total: f64 = p.data().iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                let direct: f64 = (0..n).filter(|&j| allow(0, 0, j)).map(|j| vals[j].exp()).sum();
                prop_assert!((lse[0].exp() - direct).abs() <= 1e-12 * direct);
                for j in 0..n {
                    if !allow(0, 0, j) {
                        prop_assert_eq!(p.data()[j], 0.0);
                    }
                }
            }
        }
    }
}
