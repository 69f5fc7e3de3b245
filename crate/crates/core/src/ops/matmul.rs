//! Batched matrix product with broadcast batch axes.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::{gemm, MatLayout, Scalar};
use crate::tensor::Tensor;

/// Batch-axis pairing for a broadcast matmul.
struct BatchPlan {
    out_batch: Vec<usize>,
    /// (batch index into a, batch index into b) per output batch item.
    pairs: Vec<(usize, usize)>,
    a_count: usize,
    b_count: usize,
}

fn broadcast_batches(a: &[usize], b: &[usize]) -> Option<BatchPlan> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        out.push(match (x, y) {
            _ if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        });
    }
    let total: usize = out.iter().product();
    let mut pairs = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let (mut ia, mut ib) = (0, 0);
        for d in 0..rank {
            ia = ia * pa[d] + if pa[d] == 1 { 0 } else { idx[d] };
            ib = ib * pb[d] + if pb[d] == 1 { 0 } else { idx[d] };
        }
        pairs.push((ia, ib));
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Some(BatchPlan { out_batch: out, pairs, a_count: pa.iter().product(), b_count: pb.iter().product() })
}

/// Forward product of two tensors `[.., m, k] · [.., k, n]`.
pub fn matmul_tensors<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mismatch = || Error::ShapeMismatch { op: "matmul", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() };
    if a.rank() < 2 || b.rank() < 2 {
        return Err(mismatch());
    }
    let (ra, rb) = (a.rank(), b.rank());
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (k2, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let plan = broadcast_batches(&a.shape()[..ra - 2], &b.shape()[..rb - 2]).ok_or_else(mismatch)?;
    let mut out = vec![T::zero(); plan.pairs.len() * m * n];
    for (o, &(ia, ib)) in plan.pairs.iter().enumerate() {
        gemm(
            &a.data()[ia * m * k..(ia + 1) * m * k],
            MatLayout::row_major(m, k),
            &b.data()[ib * k * n..(ib + 1) * k * n],
            MatLayout::row_major(k, n),
            T::zero(),
            &mut out[o * m * n..(o + 1) * m * n],
            MatLayout::row_major(m, n),
        );
    }
    let mut shape = plan.out_batch;
    shape.extend([m, n]);
    Tensor::from_vec(shape, out)
}

impl<T: Scalar> Tape<T> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value_rc(a), self.value_rc(b));
        let out = matmul_tensors(&va, &vb)?;
        Ok(self.push_op(out, &[a, b], move |g| {
            let (ra, rb) = (va.rank(), vb.rank());
            let (m, k, n) = (va.shape()[ra - 2], va.shape()[ra - 1], vb.shape()[rb - 1]);
            let plan = broadcast_batches(&va.shape()[..ra - 2], &vb.shape()[..rb - 2]).expect("validated in forward");
            let mut ga = vec![T::zero(); plan.a_count * m * k];
            let mut gb = vec![T::zero(); plan.b_count * k * n];
            for (o, &(ia, ib)) in plan.pairs.iter().enumerate() {
                let go = &g.data()[o * m * n..(o + 1) * m * n];
                // dA += dC · Bᵀ
                gemm(
                    go,
                    MatLayout::row_major(m, n),
                    &vb.data()[ib * k * n..(ib + 1) * k * n],
                    MatLayout::transposed(n, k),
                    T::one(),
                    &mut ga[ia * m * k..(ia + 1) * m * k],
                    MatLayout::row_major(m, k),
                );
                // dB += Aᵀ · dC
                gemm(
                    &va.data()[ia * m * k..(ia + 1) * m * k],
                    MatLayout::transposed(k, m),
                    go,
                    MatLayout::row_major(m, n),
                    T::one(),
                    &mut gb[ib * k * n..(ib + 1) * k * n],
                    MatLayout::row_major(k, n),
                );
            }
            Ok(vec![
                Some(Tensor::from_vec(va.shape().to_vec(), ga)?),
                Some(Tensor::from_vec(vb.shape().to_vec(), gb)?),
            ])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn identity_product() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(matmul_tensors(&Tensor::eye(2), &a).unwrap(), a);
    }

    #[test]
    fn hand_products() {
        let c = matmul_tensors(&t(&[2, 2], &[1., 2., 3., 4.]), &t(&[2, 2], &[5., 6., 7., 8.])).unwrap();
        assert_eq!(c.data(), &[19., 22., 43., 50.]);
        let c = matmul_tensors(&Tensor::<f64>::ones([1, 3]), &Tensor::ones([3, 1])).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.item(), 3.0);
    }

    #[test]
    fn shape_error_names_both_shapes() {
        let err = matmul_tensors(&Tensor::<f64>::zeros([2, 3]), &Tensor::zeros([2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn broadcast_batch_against_matrix() {
        let a = t(&[2, 1, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 1], &[1., 1.]);
        let c = matmul_tensors(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 1]);
        assert_eq!(c.data(), &[3., 7.]);
    }

    #[test]
    fn broadcast_gradient_sums_over_batch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[3, 1, 2], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.leaf(t(&[2, 1], &[1., 1.]));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(b).unwrap().data(), &[9., 12.]);
        assert_eq!(g.wrt(a).unwrap().data(), &[1.0; 6]);
    }
}
