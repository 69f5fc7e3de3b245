//! Elementwise arithmetic, reductions and reshapes.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
#[cfg(test)]
use crate::error::Error;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<T: Scalar> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push_op(out, &[a, b], |g| Ok(vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push_op(out, &[a, b], |g| Ok(vec![Some(g.clone()), Some(g.scale(-T::one()))])))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value_rc(a), self.value_rc(b));
        let out = va.zip_map(&vb, |x, y| x * y)?;
        Ok(self.push_op(out, &[a, b], move |g| {
            Ok(vec![Some(g.zip_map(&vb, |g, y| g * y)?), Some(g.zip_map(&va, |g, x| g * x)?)])
        }))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).scale(factor);
        self.push_op(out, &[a], move |g| Ok(vec![Some(g.scale(factor))]))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let out = Tensor::scalar(self.value(a).sum());
        self.push_op(out, &[a], move |g| Ok(vec![Some(Tensor::full(shape.clone(), g.item()))]))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).numel().max(1)).unwrap();
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// `sum(a ⊙ weights)` for a constant weight tensor; reduces any output
    /// to a scalar for gradient checks.
    pub fn weighted_sum(&mut self, a: Var, weights: &Tensor<T>) -> Result<Var> {
        let w = weights.clone();
        let out = Tensor::scalar(self.value(a).dot(&w)?);
        Ok(self.push_op(out, &[a], move |g| Ok(vec![Some(w.scale(g.item()))])))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(a).to_vec();
        let out = self.value(a).reshape(shape.to_vec())?;
        Ok(self.push_op(out, &[a], move |g| Ok(vec![Some(g.reshape(src.clone())?)])))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose_last2()?;
        Ok(self.push_op(out, &[a], |g| Ok(vec![Some(g.transpose_last2()?)])))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_backward_is_all_ones() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_f64([2, 3], &[1., -2., 3., 0.5, 7., -1.]).unwrap());
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn product_rule() {
        let mut t = Tape::<f64>::new();
        let x0 = t.leaf(Tensor::scalar(3.0));
        let x1 = t.leaf(Tensor::scalar(-5.0));
        let y = t.mul(x0, x1).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x0).unwrap().item(), -5.0);
        assert_eq!(g.wrt(x1).unwrap().item(), 3.0);
    }

    #[test]
    fn fan_out_is_additive() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_f64([3], &[0.3, -1.2, 2.0]).unwrap());
        let y = t.mul(x, x).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.6, -2.4, 4.0]);
    }

    #[test]
    fn non_scalar_loss_and_empty_tape_rejected() {
        let mut t = Tape::<f64>::new();
        assert!(matches!(t.backward(Var(0)), Err(Error::EmptyTape)));
        let x = t.leaf(Tensor::zeros([2]));
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::<f64>::new();
        let c = t.constant(Tensor::ones([2]));
        let x = t.leaf(Tensor::ones([2]));
        let y = t.add(c, x).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert!(g.wrt(c).is_none());
        assert!(g.wrt(x).is_some());
    }
}
