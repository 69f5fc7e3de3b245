//! Channel concatenation, map/token layout changes and the token-wise affine map.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::{gemm, MatLayout, Scalar};
use crate::tensor::Tensor;

/// `(B, C, H, W)` → `(B, H·W, C)`.
fn map_to_tokens<T: Scalar>(x: &[T], b: usize, c: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let src = &x[(bi * c + ch) * n..][..n];
            for (i, &v) in src.iter().enumerate() {
                out[(bi * n + i) * c + ch] = v;
            }
        }
    }
    out
}

/// `(B, N, C)` → `(B, C, N)`.
fn tokens_to_map<T: Scalar>(t: &[T], b: usize, c: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); t.len()];
    for bi in 0..b {
        for i in 0..n {
            let src = &t[(bi * n + i) * c..][..c];
            for (ch, &v) in src.iter().enumerate() {
                out[(bi * c + ch) * n + i] = v;
            }
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    /// Stack along channels; `a`'s channels come first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::ShapeMismatch { op: "concat_channels", lhs: sa, rhs: sb });
        }
        let (batch, ca, cb, plane) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for bi in 0..batch {
            out.extend_from_slice(&va[bi * ca * plane..(bi + 1) * ca * plane]);
            out.extend_from_slice(&vb[bi * cb * plane..(bi + 1) * cb * plane]);
        }
        let out = Tensor::from_vec([batch, ca + cb, sa[2], sa[3]], out)?;
        Ok(self.push_op(out, &[a, b], move |g| {
            let mut ga = Vec::with_capacity(batch * ca * plane);
            let mut gb = Vec::with_capacity(batch * cb * plane);
            for chunk in g.data().chunks((ca + cb) * plane) {
                ga.extend_from_slice(&chunk[..ca * plane]);
                gb.extend_from_slice(&chunk[ca * plane..]);
            }
            Ok(vec![Some(Tensor::from_vec(sa.clone(), ga)?), Some(Tensor::from_vec(sb.clone(), gb)?)])
        }))
    }

    /// Flatten every spatial site of `(B, C, H, W)` into one token:
    /// `(B, H·W, C)`, sites in row-major order.
    pub fn flatten_to_tokens(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::InvalidShape { op: "flatten_to_tokens", shape: s, reason: "expected (B, C, H, W)".into() });
        }
        let (b, c, n) = (s[0], s[1], s[2] * s[3]);
        let out = Tensor::from_vec([b, n, c], map_to_tokens(self.value(x).data(), b, c, n))?;
        Ok(self.push_op(out, &[x], move |g| Ok(vec![Some(Tensor::from_vec(s.clone(), tokens_to_map(g.data(), b, c, n))?)])))
    }

    /// Inverse of [`Tape::flatten_to_tokens`]: `(B, H·W, C)` → `(B, C, H, W)`.
    pub fn tokens_to_map(&mut self, t: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(t).to_vec();
        if s.len() != 3 || s[1] != h * w {
            return Err(Error::InvalidShape { op: "tokens_to_map", shape: s, reason: format!("expected (B, {}, C) for a {h}x{w} map", h * w) });
        }
        let (b, n, c) = (s[0], s[1], s[2]);
        let out = Tensor::from_vec([b, c, h, w], tokens_to_map(self.value(t).data(), b, c, n))?;
        Ok(self.push_op(out, &[t], move |g| Ok(vec![Some(Tensor::from_vec(s.clone(), map_to_tokens(g.data(), b, c, n))?)])))
    }

    /// Token-wise affine map `t·W + bias` with `W` of shape `(d_in, d_out)`.
    pub fn linear(&mut self, t: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (vt, vw) = (self.value_rc(t), self.value_rc(w));
        let d_in = *vt.shape().last().unwrap_or(&0);
        if vw.rank() != 2 || vw.shape()[0] != d_in || vt.rank() == 0 {
            return Err(Error::ShapeMismatch { op: "linear", lhs: vt.shape().to_vec(), rhs: vw.shape().to_vec() });
        }
        let d_out = vw.shape()[1];
        if let Some(b) = bias {
            if self.shape(b) != [d_out] {
                return Err(Error::ShapeMismatch { op: "linear", lhs: self.shape(b).to_vec(), rhs: vec![d_out] });
            }
        }
        let rows = vt.numel() / d_in.max(1);
        let mut out = vec![T::zero(); rows * d_out];
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bd);
            }
        }
        gemm(vt.data(), MatLayout::row_major(rows, d_in), vw.data(), MatLayout::row_major(d_in, d_out), T::one(), &mut out, MatLayout::row_major(rows, d_out));
        let mut shape = vt.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        let out = Tensor::from_vec(shape, out)?;
        let mut parents = vec![t, w];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.push_op(out, &parents, move |g| {
            let mut gt = vec![T::zero(); vt.numel()];
            let mut gw = vec![T::zero(); vw.numel()];
            gemm(g.data(), MatLayout::row_major(rows, d_out), vw.data(), MatLayout::transposed(d_out, d_in), T::zero(), &mut gt, MatLayout::row_major(rows, d_in));
            gemm(vt.data(), MatLayout::transposed(d_in, rows), g.data(), MatLayout::row_major(rows, d_out), T::zero(), &mut gw, MatLayout::row_major(d_in, d_out));
            let mut grads = vec![Some(Tensor::from_vec(vt.shape().to_vec(), gt)?), Some(Tensor::from_vec(vw.shape().to_vec(), gw)?)];
            if has_bias {
                let mut gb = vec![T::zero(); d_out];
                for row in g.data().chunks(d_out) {
                    for (a, &v) in gb.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                grads.push(Some(Tensor::from_vec([d_out], gb)?));
            }
            Ok(grads)
        }))
    }
}
