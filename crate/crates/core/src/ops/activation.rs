//! Elementwise activations and the last-axis softmax.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Exact form `x·Φ(x)`.
    Gelu,
    Sigmoid,
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn half<T: Scalar>() -> T {
    T::from_f64_lossy(0.5)
}

/// Standard normal CDF.
pub fn normal_cdf<T: Scalar>(x: T) -> T {
    half::<T>() * (T::one() + Scalar::erf(x / T::from_f64_lossy(std::f64::consts::SQRT_2)))
}

fn normal_pdf<T: Scalar>(x: T) -> T {
    let inv_sqrt_2pi = T::from_f64_lossy(0.398_942_280_401_432_7);
    inv_sqrt_2pi * (-half::<T>() * x * x).exp()
}

pub fn gelu<T: Scalar>(x: T) -> T {
    x * normal_cdf(x)
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Gelu => gelu(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative at input `x` with forward output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => normal_cdf(x) + x * normal_pdf(x),
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

/// Row-wise softmax over the last axis with max subtraction.
pub fn softmax_rows<T: Scalar>(data: &mut [T], width: usize) {
    if width == 0 {
        return;
    }
    for row in data.chunks_mut(width) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let inv = T::one() / total;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Backward of [`softmax_rows`]: `dx = y ⊙ (g − ⟨g, y⟩)` per row.
pub fn softmax_rows_backward<T: Scalar>(y: &[T], g: &[T], out: &mut [T], width: usize) {
    if width == 0 {
        return;
    }
    for ((yr, gr), or) in y.chunks(width).zip(g.chunks(width)).zip(out.chunks_mut(width)) {
        let mut dot = T::zero();
        for (&a, &b) in yr.iter().zip(gr) {
            dot += a * b;
        }
        for ((o, &a), &b) in or.iter_mut().zip(yr).zip(gr) {
            *o = a * (b - dot);
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let vx = self.value_rc(x);
        let out = vx.map(|v| kind.apply(v));
        let y = std::rc::Rc::new(out.clone());
        self.push_op(out, &[x], move |g| {
            let data = vx.data().iter().zip(y.data()).zip(g.data()).map(|((&x, &y), &g)| g * kind.derivative(x, y)).collect();
            Ok(vec![Some(Tensor::from_vec(vx.shape().to_vec(), data)?)])
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let width = *vx.shape().last().unwrap_or(&1);
        let mut data = vx.data().to_vec();
        softmax_rows(&mut data, width);
        let out = Tensor::from_vec(vx.shape().to_vec(), data)?;
        let y = std::rc::Rc::new(out.clone());
        Ok(self.push_op(out, &[x], move |g| {
            let mut gx = vec![T::zero(); g.numel()];
            softmax_rows_backward(y.data(), g.data(), &mut gx, width);
            Ok(vec![Some(Tensor::from_vec(y.shape().to_vec(), gx)?)])
        }))
    }
}
