//! Reference attention: exact masked forward, online-softmax streaming over
//! key/value chunks, partial merging, and the analytic backward.
//!
//! Shapes: `q` is `(q_heads, q_rows, d)`, `k`/`v` are `(kv_heads, k_rows, d)`.
//! Query head `h` reads key/value head `layout.kv_head_of(h)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masks::AttnMask;
use crate::numcore::{dot, HeadLayout, Real, ShapeError, Tensor3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttnError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("key chunks cover {got} rows but the mask spans {expected}")]
    ChunkCoverage { got: usize, expected: usize },
    #[error("invalid partial: {0}")]
    Partial(String),
}

/// Attention output over some key subset together with the per-row
/// log-sum-exp of the scaled scores over that subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionPartial<T> {
    pub out: Tensor3<T>,
    /// `head * rows + row`; negative infinity where no key was visible.
    pub lse: Vec<T>,
}

impl<T: Real> AttentionPartial<T> {
    pub fn new(out: Tensor3<T>, lse: Vec<T>) -> Result<Self, AttnError> {
        let (h, r, _) = out.dims();
        if lse.len() != h * r {
            return Err(AttnError::Partial(format!("lse holds {} values, expected {}", lse.len(), h * r)));
        }
        for (idx, &x) in lse.iter().enumerate() {
            if x.is_nan() || x == T::infinity() {
                return Err(AttnError::Partial(format!("lse[{idx}] = {x}")));
            }
            if x == T::neg_infinity() && out.row(idx / r, idx % r).iter().any(|&o| o != T::zero()) {
                return Err(AttnError::Partial(format!("row {idx} has lse -inf but nonzero output")));
            }
        }
        Ok(Self { out, lse })
    }

    /// The merge identity: zero output, `lse = -inf` everywhere.
    pub fn empty(heads: usize, rows: usize, head_dim: usize) -> Self {
        Self {
            out: Tensor3::zeros(heads, rows, head_dim),
            lse: vec![T::neg_infinity(); heads * rows],
        }
    }

    pub fn heads(&self) -> usize {
        self.out.heads()
    }

    pub fn rows(&self) -> usize {
        self.out.rows()
    }

    pub fn lse_at(&self, h: usize, i: usize) -> T {
        self.lse[h * self.rows() + i]
    }
}

/// Gradients of a scalar loss with respect to `q`, `k` and `v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionGrads<T> {
    pub dq: Tensor3<T>,
    pub dk: Tensor3<T>,
    pub dv: Tensor3<T>,
}

fn check_qkv<T: Real>(q: &Tensor3<T>, k: &Tensor3<T>, v: &Tensor3<T>, layout: &HeadLayout) -> Result<(), ShapeError> {
    layout.validate()?;
    let want_q = (layout.q_heads, q.rows(), layout.head_dim);
    if q.dims() != want_q {
        return Err(ShapeError::Mismatch {
            op: "attention q",
            lhs: q.dims(),
            rhs: want_q,
        });
    }
    let want_kv = (layout.kv_heads, k.rows(), layout.head_dim);
    if k.dims() != want_kv || v.dims() != want_kv {
        return Err(ShapeError::Mismatch {
            op: "attention k/v",
            lhs: k.dims(),
            rhs: v.dims(),
        });
    }
    Ok(())
}

/// Running `(max, sum, unnormalised output)` per query row.
struct Running<T> {
    rows: usize,
    d: usize,
    max: Vec<T>,
    sum: Vec<T>,
    acc: Vec<T>,
}

impl<T: Real> Running<T> {
    fn new(heads: usize, rows: usize, d: usize) -> Self {
        Self {
            rows,
            d,
            max: vec![T::neg_infinity(); heads * rows],
            sum: vec![T::zero(); heads * rows],
            acc: vec![T::zero(); heads * rows * d],
        }
    }

    /// Fold one chunk of visible `(key row, score)` pairs into row `(h, i)`.
    fn absorb(&mut self, h: usize, i: usize, scored: &[(usize, T)], v: &Tensor3<T>, kv_head: usize) {
        let mut chunk_max = T::neg_infinity();
        for &(_, s) in scored {
            if s > chunk_max {
                chunk_max = s;
            }
        }
        if chunk_max == T::neg_infinity() {
            return;
        }
        let r = h * self.rows + i;
        let old = self.max[r];
        let new = if chunk_max > old { chunk_max } else { old };
        let alpha = (old - new).exp();
        let acc = &mut self.acc[r * self.d..(r + 1) * self.d];
        let mut sum = self.sum[r] * alpha;
        for a in acc.iter_mut() {
            *a = *a * alpha;
        }
        for &(j, s) in scored {
            let p = (s - new).exp();
            sum = sum + p;
            for (a, &x) in acc.iter_mut().zip(v.row(kv_head, j)) {
                *a = *a + p * x;
            }
        }
        self.sum[r] = sum;
        self.max[r] = new;
    }

    fn finish(self, heads: usize) -> AttentionPartial<T> {
        let mut out = Tensor3::zeros(heads, self.rows, self.d);
        let mut lse = Vec::with_capacity(heads * self.rows);
        for h in 0..heads {
            for i in 0..self.rows {
                let r = h * self.rows + i;
                if self.max[r] == T::neg_infinity() {
                    lse.push(T::neg_infinity());
                    continue;
                }
                let sum = self.sum[r];
                for (o, &a) in out.row_mut(h, i).iter_mut().zip(&self.acc[r * self.d..(r + 1) * self.d]) {
                    *o = a / sum;
                }
                lse.push(self.max[r] + sum.ln());
            }
        }
        AttentionPartial { out, lse }
    }
}

/// Exact masked attention. Evaluated as a single streaming chunk, so it is
/// bitwise equal to [`streaming_forward`] with one chunk.
pub fn attention_forward<T: Real>(
    q: &Tensor3<T>,
    k: &Tensor3<T>,
    v: &Tensor3<T>,
    layout: &HeadLayout,
    mask: &dyn AttnMask,
) -> Result<AttentionPartial<T>, AttnError> {
    streaming_forward(q, &[(k, v)], layout, mask)
}

/// Online-softmax attention over key/value chunks taken in order. Mask
/// columns are global key indices: chunk `c` starts after all earlier chunks.
pub fn streaming_forward<T: Real>(
    q: &Tensor3<T>,
    chunks: &[(&Tensor3<T>, &Tensor3<T>)],
    layout: &HeadLayout,
    mask: &dyn AttnMask,
) -> Result<AttentionPartial<T>, AttnError> {
    let mut total = 0;
    for (k, v) in chunks {
        check_qkv(q, k, v, layout)?;
        total += k.rows();
    }
    if let Some(expected) = mask.key_len() {
        if expected != total {
            return Err(AttnError::ChunkCoverage { got: total, expected });
        }
    }
    let scale: T = layout.scale();
    let (heads, rows, d) = q.dims();
    let mut run = Running::new(heads, rows, d);
    let mut scored = Vec::new();
    let mut offset = 0;
    for (k, v) in chunks {
        for h in 0..heads {
            let kvh = layout.kv_head_of(h);
            for i in 0..rows {
                scored.clear();
                let qi = q.row(h, i);
                for j in 0..k.rows() {
                    if mask.allows(i, offset + j) {
                        scored.push((j, dot(qi, k.row(kvh, j)) * scale));
                    }
                }
                run.absorb(h, i, &scored, v, kvh);
            }
        }
        offset += k.rows();
    }
    Ok(run.finish(heads))
}

/// Softmax-weighted sum of `v` for caller-supplied scaled scores
/// `(q_heads, rows, keys)`. Lets tests inject scores directly.
pub fn attend_scores<T: Real>(
    scores: &Tensor3<T>,
    v: &Tensor3<T>,
    layout: &HeadLayout,
    mask: &dyn AttnMask,
) -> Result<AttentionPartial<T>, AttnError> {
    let (heads, rows, keys) = scores.dims();
    if heads != layout.q_heads || v.dims() != (layout.kv_heads, keys, layout.head_dim) {
        return Err(ShapeError::Mismatch {
            op: "attend_scores",
            lhs: scores.dims(),
            rhs: v.dims(),
        }
        .into());
    }
    let mut run = Running::new(heads, rows, layout.head_dim);
    let mut scored = Vec::new();
    for h in 0..heads {
        let kvh = layout.kv_head_of(h);
        for i in 0..rows {
            scored.clear();
            scored.extend((0..keys).filter(|&j| mask.allows(i, j)).map(|j| (j, scores.get(h, i, j))));
            run.absorb(h, i, &scored, v, kvh);
        }
    }
    Ok(run.finish(heads))
}

/// Combines partials over disjoint key sets for the same queries.
pub fn merge_partials<T: Real>(a: &AttentionPartial<T>, b: &AttentionPartial<T>) -> Result<AttentionPartial<T>, AttnError> {
    if a.out.dims() != b.out.dims() || a.lse.len() != b.lse.len() {
        return Err(ShapeError::Mismatch {
            op: "merge_partials",
            lhs: a.out.dims(),
            rhs: b.out.dims(),
        }
        .into());
    }
    let (heads, rows, d) = a.out.dims();
    let mut out = Tensor3::zeros(heads, rows, d);
    let mut lse = Vec::with_capacity(heads * rows);
    for h in 0..heads {
        for i in 0..rows {
            let r = h * rows + i;
            let (la, lb) = (a.lse[r], b.lse[r]);
            if lb == T::neg_infinity() {
                out.row_mut(h, i).copy_from_slice(a.out.row(h, i));
                lse.push(la);
                continue;
            }
            if la == T::neg_infinity() {
                out.row_mut(h, i).copy_from_slice(b.out.row(h, i));
                lse.push(lb);
                continue;
            }
            let m = if la > lb { la } else { lb };
            let l = m + ((la - m).exp() + (lb - m).exp()).ln();
            let (wa, wb) = ((la - l).exp(), (lb - l).exp());
            for ((o, &x), &y) in out.row_mut(h, i).iter_mut().zip(a.out.row(h, i)).zip(b.out.row(h, i)) {
                *o = x * wa + y * wb;
            }
            lse.push(l);
        }
    }
    Ok(AttentionPartial { out, lse })
}

/// Analytic backward.
///
/// With `S = q·kᵀ/√d` and `P = exp(S − lse)` recomputed from the forward
/// statistics:
///
/// ```text
/// dV = Pᵀ·dO
/// dP = dO·Vᵀ
/// dS = P ⊙ (dP − D),  D_i = Σ_j dP_ij·P_ij = dO_i · O_i
/// dQ = dS·K/√d,  dK = dSᵀ·Q/√d
/// ```
///
/// `D` is taken from `dO ⊙ O` so that a partial key range (a ring stage)
/// sees the same row term as the full computation. `fwd` must be the
/// full-key forward result for these queries, so the same function serves
/// key-chunked backward passes.
pub fn attention_backward<T: Real>(
    q: &Tensor3<T>,
    k: &Tensor3<T>,
    v: &Tensor3<T>,
    fwd: &AttentionPartial<T>,
    d_out: &Tensor3<T>,
    layout: &HeadLayout,
    mask: &dyn AttnMask,
) -> Result<AttentionGrads<T>, AttnError> {
    check_qkv(q, k, v, layout)?;
    if fwd.out.dims() != q.dims() || d_out.dims() != q.dims() || fwd.lse.len() != q.heads() * q.rows() {
        return Err(ShapeError::Mismatch {
            op: "attention_backward",
            lhs: q.dims(),
            rhs: d_out.dims(),
        }
        .into());
    }
    let scale: T = layout.scale();
    let (heads, rows, d) = q.dims();
    let mut dq = Tensor3::zeros(heads, rows, d);
    let mut dk = Tensor3::zeros(k.heads(), k.rows(), d);
    let mut dv = Tensor3::zeros(k.heads(), k.rows(), d);
    for h in 0..heads {
        let kvh = layout.kv_head_of(h);
        for i in 0..rows {
            let lse = fwd.lse_at(h, i);
            if lse == T::neg_infinity() {
                continue;
            }
            let (qi, doi) = (q.row(h, i), d_out.row(h, i));
            let delta = dot(doi, fwd.out.row(h, i));
            let mut dqi = vec![T::zero(); d];
            for j in 0..k.rows() {
                if !mask.allows(i, j) {
                    continue;
                }
                let kj = k.row(kvh, j);
                let p = (dot(qi, kj) * scale - lse).exp();
                let ds = p * (dot(doi, v.row(kvh, j)) - delta) * scale;
                for (g, &x) in dv.row_mut(kvh, j).iter_mut().zip(doi) {
                    *g = *g + p * x;
                }
                for (g, &x) in dk.row_mut(kvh, j).iter_mut().zip(qi) {
                    *g = *g + ds * x;
                }
                for (g, &x) in dqi.iter_mut().zip(kj) {
                    *g = *g + ds * x;
                }
            }
            dq.row_mut(h, i).copy_from_slice(&dqi);
        }
    }
    Ok(AttentionGrads { dq, dk, dv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{MaskPattern, MaskSpec};
    use crate::numcore::{masked_row_softmax, matmul};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, h: usize, r: usize, c: usize) -> Tensor3<f64> {
        Tensor3::from_fn(h, r, c, |_, _, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    /// Materialised-P oracle: scores, masked softmax, then P·V.
    fn dense_oracle(
        q: &Tensor3<f64>,
        k: &Tensor3<f64>,
        v: &Tensor3<f64>,
        layout: &HeadLayout,
        mask: &dyn AttnMask,
    ) -> (Tensor3<f64>, Vec<f64>) {
        let g = layout.group_size();
        let kr = k.repeat_heads(g);
        let vr = v.repeat_heads(g);
        let s = matmul(q, &kr, true).unwrap().map(|x| x * layout.scale::<f64>()).unwrap();
        let (p, lse) = masked_row_softmax(&s, |_, i, j| mask.allows(i, j));
        (matmul(&p, &vr, false).unwrap(), lse)
    }

    #[test]
    fn single_token() {
        let l = HeadLayout::mha(1, 3);
        let q = Tensor3::new(1, 1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let k = Tensor3::new(1, 1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        let v = Tensor3::new(1, 1, 3, vec![7.0, 8.0, 9.0]).unwrap();
        let p = attention_forward(&q, &k, &v, &l, &MaskSpec::full(1)).unwrap();
        assert_eq!(p.out.data(), v.data());
        assert!((p.lse[0] - 1.5 / 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn identical_keys_average_values() {
        let l = HeadLayout::mha(1, 2);
        let q = Tensor3::new(1, 1, 2, vec![0.3, 0.7]).unwrap();
        let k = Tensor3::new(1, 3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        let v = Tensor3::new(1, 3, 2, vec![1.0, 0.0, 2.0, 3.0, 6.0, 0.0]).unwrap();
        let full = |_: usize, _: usize| true;
        let p: AttentionPartial<f64> = attention_forward(&q, &k, &v, &l, &full).unwrap();
        assert!((p.out.get(0, 0, 0) - 3.0).abs() < 1e-14);
        assert!((p.out.get(0, 0, 1) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = HeadLayout::mha(2, 8);
        let (q, k, v) = (rand_t(&mut rng, 2, 16, 8), rand_t(&mut rng, 2, 16, 8), rand_t(&mut rng, 2, 16, 8));
        for mask in [MaskSpec::full(16), MaskSpec::causal(16)] {
            let got = attention_forward(&q, &k, &v, &l, &mask).unwrap();
            let (out, lse) = dense_oracle(&q, &k, &v, &l, &mask);
            assert!(got.out.max_abs_diff(&out).unwrap() <= 1e-12);
            for (a, b) in got.lse.iter().zip(&lse) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn gqa_matches_replicated_mha() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gqa = HeadLayout::new(4, 2, 4).unwrap();
        let mha = HeadLayout::mha(4, 4);
        let (q, k, v) = (rand_t(&mut rng, 4, 6, 4), rand_t(&mut rng, 2, 6, 4), rand_t(&mut rng, 2, 6, 4));
        let m = MaskSpec::causal(6);
        let a = attention_forward(&q, &k, &v, &gqa, &m).unwrap();
        let b = attention_forward(&q, &k.repeat_heads(2), &v.repeat_heads(2), &mha, &m).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fully_masked_rows_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = HeadLayout::mha(1, 4);
        let (q, k, v) = (rand_t(&mut rng, 1, 6, 4), rand_t(&mut rng, 1, 6, 4), rand_t(&mut rng, 1, 6, 4));
        let m = MaskSpec::builder(MaskPattern::Causal, 6).pad_len(2).build().unwrap();
        let p = attention_forward(&q, &k, &v, &l, &m).unwrap();
        for i in 4..6 {
            assert_eq!(p.lse_at(0, i), f64::NEG_INFINITY);
            assert!(p.out.row(0, i).iter().all(|&x| x == 0.0));
        }
        let g = attention_backward(&q, &k, &v, &p, &rand_t(&mut rng, 1, 6, 4), &l, &m).unwrap();
        for i in 4..6 {
            assert!(g.dq.row(0, i).iter().all(|&x| x == 0.0));
            assert!(g.dk.row(0, i).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn one_chunk_is_bitwise_and_duplicate_chunk_adds_ln2() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = HeadLayout::mha(2, 4);
        let (q, k, v) = (rand_t(&mut rng, 2, 5, 4), rand_t(&mut rng, 2, 5, 4), rand_t(&mut rng, 2, 5, 4));
        let full = |_: usize, _: usize| true;
        let one = attention_forward(&q, &k, &v, &l, &full).unwrap();
        assert_eq!(streaming_forward(&q, &[(&k, &v)], &l, &full).unwrap(), one);
        let two = streaming_forward(&q, &[(&k, &v), (&k, &v)], &l, &full).unwrap();
        assert!(two.out.max_abs_diff(&one.out).unwrap() < 1e-14);
        for (a, b) in two.lse.iter().zip(&one.lse) {
            assert!((a - b - std::f64::consts::LN_2).abs() < 1e-14);
        }
    }

    #[test]
    fn chunk_coverage_checked() {
        let l = HeadLayout::mha(1, 2);
        let t = Tensor3::<f64>::zeros(1, 4, 2);
        let k = Tensor3::<f64>::zeros(1, 3, 2);
        assert_eq!(
            streaming_forward(&t, &[(&k, &k)], &l, &MaskSpec::full(4)),
            Err(AttnError::ChunkCoverage { got: 3, expected: 4 })
        );
    }

    #[test]
    fn merge_identity_and_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = HeadLayout::mha(2, 3);
        let (q, k, v) = (rand_t(&mut rng, 2, 4, 3), rand_t(&mut rng, 2, 4, 3), rand_t(&mut rng, 2, 4, 3));
        let a = attention_forward(&q, &k, &v, &l, &MaskSpec::causal(4)).unwrap();
        let e = AttentionPartial::empty(2, 4, 3);
        assert_eq!(merge_partials(&a, &e).unwrap(), a);
        assert_eq!(merge_partials(&e, &a).unwrap(), a);
        let aa = merge_partials(&a, &a).unwrap();
        assert!(aa.out.max_abs_diff(&a.out).unwrap() < 1e-15);
        for (x, y) in aa.lse.iter().zip(&a.lse) {
            assert!((x - y - std::f64::consts::LN_2).abs() < 1e-14);
        }
    }

    #[test]
    fn partial_validation() {
        let out = Tensor3::new(1, 1, 1, vec![1.0]).unwrap();
        assert!(AttentionPartial::new(out.clone(), vec![f64::NEG_INFINITY]).is_err());
        assert!(AttentionPartial::new(out.clone(), vec![0.0, 1.0]).is_err());
        assert!(AttentionPartial::new(out, vec![0.3]).is_ok());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let l = HeadLayout::new(2, 1, 4).unwrap();
        let (q, k, v) = (rand_t(&mut rng, 2, 5, 4), rand_t(&mut rng, 1, 5, 4), rand_t(&mut rng, 1, 5, 4));
        let m = MaskSpec::causal(5);
        let f = attention_forward(&q, &k, &v, &l, &m).unwrap();
        let g = attention_backward(&q, &k, &v, &f, &Tensor3::zeros(2, 5, 4), &l, &m).unwrap();
        for t in [&g.dq, &g.dk, &g.dv] {
            assert!(t.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn backward_matches_materialised_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let l = HeadLayout::mha(2, 4);
        let (q, k, v) = (rand_t(&mut rng, 2, 7, 4), rand_t(&mut rng, 2, 7, 4), rand_t(&mut rng, 2, 7, 4));
        let d_o = rand_t(&mut rng, 2, 7, 4);
        let m = MaskSpec::causal(7);
        let f = attention_forward(&q, &k, &v, &l, &m).unwrap();
        let g = attention_backward(&q, &k, &v, &f, &d_o, &l, &m).unwrap();

        let sc = l.scale::<f64>();
        let s = matmul(&q, &k, true).unwrap().map(|x| x * sc).unwrap();
        let (p, _) = masked_row_softmax(&s, |_, i, j| m.is_allowed(i, j));
        let dp = matmul(&d_o, &v, true).unwrap();
        let ds = Tensor3::from_fn(2, 7, 7, |h, i, j| {
            let rowsum: f64 = (0..7).map(|c| dp.get(h, i, c) * p.get(h, i, c)).sum();
            p.get(h, i, j) * (dp.get(h, i, j) - rowsum)
        })
        .unwrap();
        let transpose = |t: &Tensor3<f64>| Tensor3::from_fn(t.heads(), t.cols(), t.rows(), |h, i, j| t.get(h, j, i)).unwrap();
        let dv = matmul(&transpose(&p), &d_o, false).unwrap();
        let dq = matmul(&ds, &k, false).unwrap().map(|x| x * sc).unwrap();
        let dk = matmul(&transpose(&ds), &q, false).unwrap().map(|x| x * sc).unwrap();
        assert!(g.dv.max_abs_diff(&dv).unwrap() < 1e-12);
        assert!(g.dq.max_abs_diff(&dq).unwrap() < 1e-12);
        assert!(g.dk.max_abs_diff(&dk).unwrap() < 1e-12);
    }

    #[test]
    fn gqa_grads_sum_over_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gqa = HeadLayout::new(4, 1, 3).unwrap();
        let mha = HeadLayout::mha(4, 3);
        let (q, k, v) = (rand_t(&mut rng, 4, 5, 3), rand_t(&mut rng, 1, 5, 3), rand_t(&mut rng, 1, 5, 3));
        let d_o = rand_t(&mut rng, 4, 5, 3);
        let m = MaskSpec::causal(5);
        let f = attention_forward(&q, &k, &v, &gqa, &m).unwrap();
        let g = attention_backward(&q, &k, &v, &f, &d_o, &gqa, &m).unwrap();
        let (kr, vr) = (k.repeat_heads(4), v.repeat_heads(4));
        let fm = attention_forward(&q, &kr, &vr, &mha, &m).unwrap();
        let gm = attention_backward(&q, &kr, &vr, &fm, &d_o, &mha, &m).unwrap();
        assert!(g.dk.max_abs_diff(&gm.dk.fold_heads(4)).unwrap() < 1e-14);
        assert!(g.dv.max_abs_diff(&gm.dv.fold_heads(4)).unwrap() < 1e-14);
        assert!(g.dq.max_abs_diff(&gm.dq).unwrap() < 1e-14);
    }

    #[test]
    fn row_shift_moves_lse_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let l = HeadLayout::mha(1, 3);
        let s = rand_t(&mut rng, 1, 4, 6);
        let v = rand_t(&mut rng, 1, 6, 3);
        let m = |i: usize, j: usize| j <= i + 2;
        let base = attend_scores(&s, &v, &l, &m).unwrap();
        let c = 3.25;
        let shifted = Tensor3::from_fn(1, 4, 6, |h, i, j| s.get(h, i, j) + if i == 2 { c } else { 0.0 }).unwrap();
        let moved = attend_scores(&shifted, &v, &l, &m).unwrap();
        assert!(moved.out.max_abs_diff(&base.out).unwrap() < 1e-14);
        for i in 0..4 {
            let want = base.lse_at(0, i) + if i == 2 { c } else { 0.0 };
            assert!((moved.lse_at(0, i) - want).abs() < 1e-14);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn streaming_equals_exact(seed in any::<u64>(), cuts in proptest::collection::btree_set(1usize..20, 0..6), causal in any::<bool>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let l = HeadLayout::new(2, 1, 4).unwrap();
                let (q, k, v) = (rand_t(&mut rng, 2, 20, 4), rand_t(&mut rng, 1, 20, 4), rand_t(&mut rng, 1, 20, 4));
                let m = if causal { MaskSpec::causal(20) } else { MaskSpec::full(20) };
                let mut bounds: Vec<usize> = vec![0];
                bounds.extend(cuts);
                bounds.push(20);
                let ks: Vec<_> = bounds.windows(2).map(|w| k.gather_rows(&(w[0]..w[1]).collect::<Vec<_>>())).collect();
                let vs: Vec<_> = bounds.windows(2).map(|w| v.gather_rows(&(w[0]..w[1]).collect::<Vec<_>>())).collect();
                let chunks: Vec<_> = ks.iter().zip(&vs).collect();
                let s = streaming_forward(&q, &chunks, &l, &m).unwrap();
                let e = attention_forward(&q, &k, &v, &l, &m).unwrap();
                prop_assert!(s.out.max_abs_diff(&e.out).unwrap() <= 1e-12);
                for (a, b) in s.lse.iter().zip(&e.lse) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
            }

            #[test]
            fn merge_commutes_and_associates(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let l = HeadLayout::mha(2, 3);
                let q = rand_t(&mut rng, 2, 5, 3);
                let parts: Vec<_> = (0..3).map(|_| {
                    let (k, v) = (rand_t(&mut rng, 2, 4, 3), rand_t(&mut rng, 2, 4, 3));
                    attention_forward(&q, &k, &v, &l, &|i: usize, j: usize| !(i + j).is_multiple_of(3)).unwrap()
                }).collect();
                let (a, b, c) = (&parts[0], &parts[1], &parts[2]);
                prop_assert_eq!(merge_partials(a, b).unwrap(), merge_partials(b, a).unwrap());
                let left = merge_partials(&merge_partials(a, b).unwrap(), c).unwrap();
                let right = merge_partials(a, &merge_partials(b, c).unwrap()).unwrap();
                prop_assert!(left.out.max_abs_diff(&right.out).unwrap() <= 1e-12);
                for (x, y) in left.lse.iter().zip(&right.lse) {
                    prop_assert!((x - y).abs() <= 1e-12);
                }
            }
        }
    }
}
