//! Fused multi-head scaled dot-product attention.
//!
//! Queries `(B, N, d)` attend over keys and values `(B, M, d)`, split into
//! `h` heads of width `d/h`. Each head computes `softmax(Q·Kᵀ/√d_h)·V`.
//! Score matrices are never stored; backward recomputes them.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::{gemm, MatLayout, Scalar};
use crate::tensor::Tensor;

use super::activation::{softmax_rows, softmax_rows_backward};

/// Upper bound on score entries materialized at once in inference.
const SCORE_CHUNK: usize = 1 << 22;

#[derive(Clone, Copy)]
struct Dims {
    batch: usize,
    n: usize,
    m: usize,
    d: usize,
    heads: usize,
}

impl Dims {
    fn dh(&self) -> usize {
        self.d / self.heads
    }

    /// Head `e` of token rows `[r0, r0 + rows)` inside a `(rows_total, d)` block.
    fn head_view(&self, rows: usize) -> MatLayout {
        MatLayout { rows, cols: self.dh(), row_stride: self.d, col_stride: 1 }
    }

    fn head_view_t(&self, rows: usize) -> MatLayout {
        MatLayout { rows: self.dh(), cols: rows, row_stride: 1, col_stride: self.d }
    }
}

/// Scaled, softmaxed scores of query rows `[r0, r0 + rows)` for one head.
fn probabilities<T: Scalar>(q: &[T], k: &[T], dims: &Dims, head: usize, r0: usize, rows: usize, scale: T) -> Vec<T> {
    let (d, m, dh) = (dims.d, dims.m, dims.dh());
    let mut p = vec![T::zero(); rows * m];
    gemm(&q[r0 * d + head * dh..], dims.head_view(rows), &k[head * dh..], dims.head_view_t(m), T::zero(), &mut p, MatLayout::row_major(rows, m));
    p.iter_mut().for_each(|v| *v *= scale);
    softmax_rows(&mut p, m);
    p
}

pub(crate) fn attention_scale<T: Scalar>(dh: usize) -> T {
    T::one() / T::from_usize(dh).unwrap().sqrt()
}

impl<T: Scalar> Tape<T> {
    /// Multi-head attention of `q` over `k`, `v`. Heads occupy consecutive
    /// column blocks of the embedding axis.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(Error::ShapeMismatch { op: "attention", lhs: sq, rhs: sk });
        }
        if heads == 0 || sq[2] % heads != 0 {
            return Err(Error::invalid(format!("attention: width {} not divisible into {heads} heads", sq[2])));
        }
        let dims = Dims { batch: sq[0], n: sq[1], m: sk[1], d: sq[2], heads };
        let (dh, d, n, m) = (dims.dh(), dims.d, dims.n, dims.m);
        let scale = attention_scale::<T>(dh);
        let (vq, vk, vv) = (self.value_rc(q), self.value_rc(k), self.value_rc(v));
        let mut out = vec![T::zero(); dims.batch * n * d];
        let chunk_rows = (SCORE_CHUNK / m.max(1)).max(1);
        for bi in 0..dims.batch {
            let qb = &vq.data()[bi * n * d..(bi + 1) * n * d];
            let kb = &vk.data()[bi * m * d..(bi + 1) * m * d];
            let vb = &vv.data()[bi * m * d..(bi + 1) * m * d];
            let ob = &mut out[bi * n * d..(bi + 1) * n * d];
            for e in 0..heads {
                let mut r0 = 0;
                while r0 < n {
                    let rows = chunk_rows.min(n - r0);
                    let p = probabilities(qb, kb, &dims, e, r0, rows, scale);
                    gemm(&p, MatLayout::row_major(rows, m), &vb[e * dh..], dims.head_view(m), T::zero(), &mut ob[r0 * d + e * dh..], dims.head_view(rows));
                    r0 += rows;
                }
            }
        }
        self.count_scores((dims.batch * heads) as u64, (dims.batch * heads * n * m) as u64);
        let out = Tensor::from_vec(sq.clone(), out)?;
        Ok(self.push_op(out, &[q, k, v], move |g| {
            let mut gq = vec![T::zero(); vq.numel()];
            let mut gk = vec![T::zero(); vk.numel()];
            let mut gv = vec![T::zero(); vv.numel()];
            let mut dp = vec![T::zero(); n * m];
            let mut ds = vec![T::zero(); n * m];
            for bi in 0..dims.batch {
                let (qo, ko) = (bi * n * d, bi * m * d);
                let qb = &vq.data()[qo..qo + n * d];
                let kb = &vk.data()[ko..ko + m * d];
                let vb = &vv.data()[ko..ko + m * d];
                let gb = &g.data()[qo..qo + n * d];
                for e in 0..heads {
                    let c = e * dh;
                    let p = probabilities(qb, kb, &dims, e, 0, n, scale);
                    // dV = Pᵀ · dO
                    gemm(&p, MatLayout::transposed(m, n), &gb[c..], dims.head_view(n), T::zero(), &mut gv[ko + c..], dims.head_view(m));
                    // dP = dO · Vᵀ
                    gemm(&gb[c..], dims.head_view(n), &vb[c..], dims.head_view_t(m), T::zero(), &mut dp, MatLayout::row_major(n, m));
                    softmax_rows_backward(&p, &dp, &mut ds, m);
                    ds.iter_mut().for_each(|v| *v *= scale);
                    // dQ = dS · K, dK = dSᵀ · Q
                    gemm(&ds, MatLayout::row_major(n, m), &kb[c..], dims.head_view(m), T::zero(), &mut gq[qo + c..], dims.head_view(n));
                    gemm(&ds, MatLayout::transposed(m, n), &qb[c..], dims.head_view(n), T::zero(), &mut gk[ko + c..], dims.head_view(m));
                }
            }
            Ok(vec![
                Some(Tensor::from_vec(sq.clone(), gq)?),
                Some(Tensor::from_vec(sk.clone(), gk)?),
                Some(Tensor::from_vec(sv.clone(), gv)?),
            ])
        }))
    }

    /// `(B, N, h·d_h)` → `(B, h, N, d_h)`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(Error::InvalidShape { op: "split_heads", shape: s, reason: format!("width not divisible into {heads} heads") });
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let permute = move |src: &[T], forward: bool| {
            let mut dst = vec![T::zero(); src.len()];
            for bi in 0..b {
                for t in 0..n {
                    for e in 0..heads {
                        for j in 0..dh {
                            let tok = ((bi * n + t) * heads + e) * dh + j;
                            let head = ((bi * heads + e) * n + t) * dh + j;
                            if forward {
                                dst[head] = src[tok];
                            } else {
                                dst[tok] = src[head];
                            }
                        }
                    }
                }
            }
            dst
        };
        let out = Tensor::from_vec([b, heads, n, dh], permute(self.value(x).data(), true))?;
        Ok(self.push_op(out, &[x], move |g| Ok(vec![Some(Tensor::from_vec(s.clone(), permute(g.data(), false))?)])))
    }

    /// `(B, h, N, d_h)` → `(B, N, h·d_h)`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::InvalidShape { op: "merge_heads", shape: s, reason: "expected (B, h, N, d_h)".into() });
        }
        let (b, heads, n, dh) = (s[0], s[1], s[2], s[3]);
        let mut out = vec![T::zero(); self.value(x).numel()];
        let src = self.value(x).data();
        for bi in 0..b {
            for e in 0..heads {
                for t in 0..n {
                    let from = ((bi * heads + e) * n + t) * dh;
                    let to = ((bi * n + t) * heads + e) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let out = Tensor::from_vec([b, n, heads * dh], out)?;
        Ok(self.push_op(out, &[x], move |g| {
            let mut gx = vec![T::zero(); g.numel()];
            for bi in 0..b {
                for e in 0..heads {
                    for t in 0..n {
                        let from = ((bi * n + t) * heads + e) * dh;
                        let to = ((bi * heads + e) * n + t) * dh;
                        gx[to..to + dh].copy_from_slice(&g.data()[from..from + dh]);
                    }
                }
            }
            Ok(vec![Some(Tensor::from_vec(s.clone(), gx)?)])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_token_hand_case() {
        // Q = K = [[0], [ln 3]], V = [[0], [1]], d_h = 1.
        let l3 = 3.0f64.ln();
        let mut t = Tape::<f64>::new();
        let q = t.leaf(Tensor::from_f64([1, 2, 1], &[0.0, l3]).unwrap());
        let k = t.leaf(Tensor::from_f64([1, 2, 1], &[0.0, l3]).unwrap());
        let v = t.leaf(Tensor::from_f64([1, 2, 1], &[0.0, 1.0]).unwrap());
        let o = t.attention(q, k, v, 1).unwrap();
        let o = t.value(o).data();
        assert!((o[0] - 0.5).abs() < 1e-15);
        // row 1: softmax([0, (ln 3)²]) · [0, 1]
        let e = (l3 * l3).exp();
        assert!((o[1] - e / (1.0 + e)).abs() < 1e-14);
    }

    #[test]
    fn counts_scores() {
        let mut t = Tape::<f64>::inference();
        let q = t.constant(Tensor::zeros([2, 6, 4]));
        let k = t.constant(Tensor::zeros([2, 3, 4]));
        t.attention(q, k, k, 2).unwrap();
        let s = t.attention_stats();
        assert_eq!(s.score_matrices, 4);
        assert_eq!(s.score_entries, 4 * 18);
    }

    #[test]
    fn split_merge_inverse() {
        let mut t = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 4).map(|v| v as f64).collect();
        let x = t.leaf(Tensor::from_f64([2, 3, 4], &data).unwrap());
        let s = t.split_heads(x, 2).unwrap();
        assert_eq!(t.shape(s), &[2, 2, 3, 2]);
        assert_eq!(&t.value(s).data()[..4], &[0., 1., 4., 5.]);
        let m = t.merge_heads(s).unwrap();
        assert_eq!(t.value(m).data(), &data[..]);
    }
}
