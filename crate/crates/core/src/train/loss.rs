//! Binary cross-entropy on logits.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::sigmoid;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-element loss `max(z, 0) − z·y + ln(1 + e^{−|z|})`, which equals
/// `−[y ln σ(z) + (1 − y) ln(1 − σ(z))]` without overflow.
fn bce_term<T: Scalar>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
}

fn check_target<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    logits.expect_same_shape(target, "bce_loss")?;
    if target.data().iter().any(|&y| y != T::zero() && y != T::one()) {
        return Err(Error::invalid("bce_loss: targets must be 0 or 1"));
    }
    if target.numel() == 0 {
        return Err(Error::invalid("bce_loss: empty input"));
    }
    Ok(())
}

/// Mean BCE of `logits` against a binary `target`, without a tape.
pub fn bce_value<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    check_target(logits, target)?;
    let mut acc = T::zero();
    for (&z, &y) in logits.data().iter().zip(target.data()) {
        acc += bce_term(z, y);
    }
    Ok(acc / T::from_usize(target.numel()).expect("count fits"))
}

impl<T: Scalar> Tape<T> {
    /// Mean binary cross-entropy of sigmoid(`logits`) against `target`.
    pub fn bce_loss(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let z = self.value_rc(logits);
        let loss = bce_value(&z, target)?;
        let y = target.clone();
        Ok(self.push_op(Tensor::scalar(loss), &[logits], move |g| {
            let scale = g.item() / T::from_usize(y.numel()).expect("count fits");
            Ok(vec![Some(z.zip_map(&y, |z, y| (sigmoid(z) - y) * scale)?)])
        }))
    }
}
