//! Batch normalization over feature maps and layer normalization over tokens.

use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Train mode uses batch statistics; eval mode uses running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPSILON: f64 = 1e-5;

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: Tensor::zeros([channels]), var: Tensor::ones([channels]) }
    }

    /// Exponential update toward the batch statistics (unbiased variance).
    pub fn update(&mut self, batch_mean: &[T], batch_var_unbiased: &[T], momentum: T) {
        let keep = T::one() - momentum;
        for (r, &m) in self.mean.data_mut().iter_mut().zip(batch_mean) {
            *r = keep * *r + momentum * m;
        }
        for (r, &v) in self.var.data_mut().iter_mut().zip(batch_var_unbiased) {
            *r = keep * *r + momentum * v;
        }
    }
}

/// Batch statistics produced by a train-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

fn check_affine<T: Scalar>(t: &Tensor<T>, n: usize, op: &'static str) -> Result<()> {
    if t.shape() != [n] {
        return Err(Error::ShapeMismatch { op, lhs: t.shape().to_vec(), rhs: vec![n] });
    }
    Ok(())
}

/// Backward of `y = γ·x̂ + β` where `x̂ = (x − μ)·inv_std` over groups of
/// elements sharing statistics. `batch_stats` selects whether μ and inv_std
/// depend on x.
struct NormBackward<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> Tape<T> {
    /// Per-channel normalization of `(B, C, H, W)`.
    ///
    /// Returns the output and, in train mode, the batch statistics the
    /// caller should fold into its running statistics.
    pub fn batchnorm2d(&mut self, x: Var, gamma: Var, beta: Var, running: &RunningStats<T>, mode: Mode) -> Result<(Var, Option<BatchStats<T>>)> {
        let vx = self.value_rc(x);
        if vx.rank() != 4 {
            return Err(Error::InvalidShape { op: "batchnorm2d", shape: vx.shape().to_vec(), reason: "expected (B, C, H, W)".into() });
        }
        let (b, c, plane) = (vx.shape()[0], vx.shape()[1], vx.shape()[2] * vx.shape()[3]);
        let vg = self.value_rc(gamma);
        check_affine(&vg, c, "batchnorm2d")?;
        check_affine(self.value(beta), c, "batchnorm2d")?;
        check_affine(&running.mean, c, "batchnorm2d")?;
        let count = b * plane;
        let eps = T::from_f64_lossy(BN_EPSILON);
        let (mean, var, stats) = match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(Error::InvalidShape {
                        op: "batchnorm2d",
                        shape: vx.shape().to_vec(),
                        reason: "train mode needs at least 2 values per channel".into(),
                    });
                }
                let n = T::from_usize(count).unwrap();
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for bi in 0..b {
                        for &v in &vx.data()[(bi * c + ch) * plane..][..plane] {
                            acc += v;
                        }
                    }
                    mean[ch] = acc / n;
                    let mut sq = T::zero();
                    for bi in 0..b {
                        for &v in &vx.data()[(bi * c + ch) * plane..][..plane] {
                            let d = v - mean[ch];
                            sq += d * d;
                        }
                    }
                    var[ch] = sq / n;
                }
                let unbiased = var.iter().map(|&v| v * n / (n - T::one())).collect();
                let stats = BatchStats { mean: mean.clone(), var_unbiased: unbiased };
                (mean, var, Some(stats))
            }
            Mode::Eval => (running.mean.data().to_vec(), running.var.data().to_vec(), None),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let vb = self.value(beta);
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut out = vec![T::zero(); vx.numel()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                let (g, bb, m, s) = (vg.data()[ch], vb.data()[ch], mean[ch], inv_std[ch]);
                for i in off..off + plane {
                    let h = (vx.data()[i] - m) * s;
                    xhat[i] = h;
                    out[i] = g * h + bb;
                }
            }
        }
        let out = Tensor::from_vec(vx.shape().to_vec(), out)?;
        let saved = NormBackward { xhat, inv_std };
        let shape = vx.shape().to_vec();
        let var = self.push_op(out, &[x, gamma, beta], move |g| {
            let gd = g.data();
            let mut gx = vec![T::zero(); gd.len()];
            let mut ggamma = vec![T::zero(); c];
            let mut gbeta = vec![T::zero(); c];
            for ch in 0..c {
                let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
                for bi in 0..b {
                    let off = (bi * c + ch) * plane;
                    for (&gi, &xh) in gd[off..off + plane].iter().zip(&saved.xhat[off..off + plane]) {
                        sum_g += gi;
                        sum_gx += gi * xh;
                    }
                }
                ggamma[ch] = sum_gx;
                gbeta[ch] = sum_g;
                let gam = vg.data()[ch];
                let s = saved.inv_std[ch];
                match mode {
                    Mode::Train => {
                        let n = T::from_usize(count).unwrap();
                        let (mg, mgx) = (sum_g / n, sum_gx / n);
                        for bi in 0..b {
                            let off = (bi * c + ch) * plane;
                            for i in off..off + plane {
                                gx[i] = gam * s * (gd[i] - mg - saved.xhat[i] * mgx);
                            }
                        }
                    }
                    Mode::Eval => {
                        for bi in 0..b {
                            let off = (bi * c + ch) * plane;
                            for i in off..off + plane {
                                gx[i] = gam * s * gd[i];
                            }
                        }
                    }
                }
            }
            Ok(vec![
                Some(Tensor::from_vec(shape.clone(), gx)?),
                Some(Tensor::from_vec([c], ggamma)?),
                Some(Tensor::from_vec([c], gbeta)?),
            ])
        });
        Ok((var, stats))
    }

    /// Normalize each token over its last axis, then apply `γ`, `β`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value_rc(x);
        let d = *vx.shape().last().ok_or_else(|| Error::InvalidShape { op: "layernorm", shape: vec![], reason: "scalar input".into() })?;
        let vg = self.value_rc(gamma);
        check_affine(&vg, d, "layernorm")?;
        let vb = self.value(beta);
        check_affine(vb, d, "layernorm")?;
        let eps = T::from_f64_lossy(LN_EPSILON);
        let n = T::from_usize(d).unwrap();
        let rows = vx.numel() / d.max(1);
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            let s = T::one() / (var + eps).sqrt();
            inv_std[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = vg.data()[j] * h + vb.data()[j];
            }
        }
        let out = Tensor::from_vec(vx.shape().to_vec(), out)?;
        let saved = Rc::new(NormBackward { xhat, inv_std });
        let shape = vx.shape().to_vec();
        Ok(self.push_op(out, &[x, gamma, beta], move |g| {
            let gd = g.data();
            let mut gx = vec![T::zero(); gd.len()];
            let mut ggamma = vec![T::zero(); d];
            let mut gbeta = vec![T::zero(); d];
            for r in 0..rows {
                let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
                for j in 0..d {
                    let i = r * d + j;
                    let gh = gd[i] * vg.data()[j];
                    sum_g += gh;
                    sum_gx += gh * saved.xhat[i];
                    ggamma[j] += gd[i] * saved.xhat[i];
                    gbeta[j] += gd[i];
                }
                let (mg, mgx) = (sum_g / n, sum_gx / n);
                let s = saved.inv_std[r];
                for j in 0..d {
                    let i = r * d + j;
                    gx[i] = s * (gd[i] * vg.data()[j] - mg - saved.xhat[i] * mgx);
                }
            }
            Ok(vec![
                Some(Tensor::from_vec(shape.clone(), gx)?),
                Some(Tensor::from_vec([d], ggamma)?),
                Some(Tensor::from_vec([d], gbeta)?),
            ])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine(tape: &mut Tape<f64>, c: usize) -> (Var, Var) {
        (tape.leaf(Tensor::ones([c])), tape.leaf(Tensor::zeros([c])))
    }

    #[test]
    fn train_mode_standardizes_each_channel() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 4).map(|i| ((i * 7) % 11) as f64 * 0.3 - 1.0).collect();
        let x = tape.leaf(Tensor::from_f64([2, 3, 2, 2], &data).unwrap());
        let (g, b) = affine(&mut tape, 3);
        let (y, stats) = tape.batchnorm2d(x, g, b, &RunningStats::new(3), Mode::Train).unwrap();
        assert!(stats.is_some());
        let y = tape.value(y);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|bi| y.data()[(bi * 3 + ch) * 4..][..4].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / 8.0;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3, "variance {v}");
        }
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([2, 1, 2, 2], 3.0));
        let (g, b) = affine(&mut tape, 1);
        let (y, _) = tape.batchnorm2d(x, g, b, &RunningStats::new(1), Mode::Train).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([1, 1, 1, 1], 4.0));
        let (g, b) = affine(&mut tape, 1);
        let running = RunningStats { mean: Tensor::full([1], 2.0), var: Tensor::full([1], 4.0) };
        let (y, stats) = tape.batchnorm2d(x, g, b, &running, Mode::Eval).unwrap();
        assert!(stats.is_none());
        assert!((tape.value(y).item() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn single_sample_train_mode_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros([1, 2, 1, 1]));
        let (g, b) = affine(&mut tape, 2);
        assert!(tape.batchnorm2d(x, g, b, &RunningStats::new(2), Mode::Train).is_err());
    }

    #[test]
    fn running_stats_momentum_update() {
        let mut r = RunningStats::<f64>::new(1);
        r.update(&[1.0], &[3.0], 0.1);
        assert!((r.mean.item() - 0.1).abs() < 1e-15);
        assert!((r.var.item() - 1.2).abs() < 1e-15);
    }

    #[test]
    fn layernorm_hand_case() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64([1, 2], &[1., 3.]).unwrap());
        let (g, b) = affine(&mut tape, 2);
        let y = tape.layernorm(x, g, b).unwrap();
        let y = tape.value(y).data();
        assert!((y[0] + 1.0).abs() < 1e-5 && (y[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layernorm_constant_token_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([3, 4], 7.0));
        let (g, b) = affine(&mut tape, 4);
        let y = tape.layernorm(x, g, b).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }
}
