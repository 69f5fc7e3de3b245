//! Bilinear resampling with half-pixel centers and edge clamping.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Interpolation taps for one output coordinate: `(lo, hi, weight_hi)`.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Resize one `h×w` plane to `oh×ow`.
pub fn resize_plane<T: Scalar>(src: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let (ty, tx) = (taps(h, oh), taps(w, ow));
    let mut out = Vec::with_capacity(oh * ow);
    for &(y0, y1, fy) in &ty {
        let fy = T::from_f64_lossy(fy);
        for &(x0, x1, fx) in &tx {
            let fx = T::from_f64_lossy(fx);
            let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
            out.push(top * (T::one() - fy) + bottom * fy);
        }
    }
    out
}

/// Adjoint of [`resize_plane`]: scatter `g` (`oh×ow`) back onto `h×w`.
fn resize_plane_adjoint<T: Scalar>(g: &[T], h: usize, w: usize, oh: usize, ow: usize, out: &mut [T]) {
    let (ty, tx) = (taps(h, oh), taps(w, ow));
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        let fy = T::from_f64_lossy(fy);
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let fx = T::from_f64_lossy(fx);
            let v = g[oy * ow + ox];
            let (top, bottom) = (v * (T::one() - fy), v * fy);
            out[y0 * w + x0] += top * (T::one() - fx);
            out[y0 * w + x1] += top * fx;
            out[y1 * w + x0] += bottom * (T::one() - fx);
            out[y1 * w + x1] += bottom * fx;
        }
    }
}

/// Resize every plane of a `(B, C, H, W)` tensor.
pub fn resize_tensor<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    if x.rank() != 4 || x.shape()[2] == 0 || x.shape()[3] == 0 || oh == 0 || ow == 0 {
        return Err(Error::InvalidShape { op: "bilinear_resize", shape: x.shape().to_vec(), reason: format!("cannot resize to {oh}x{ow}") });
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        out.extend(resize_plane(plane, h, w, oh, ow));
    }
    Tensor::from_vec([b, c, oh, ow], out)
}

impl<T: Scalar> Tape<T> {
    /// Upscale `(B, C, H, W)` by an integer factor.
    pub fn bilinear_resize(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::invalid("bilinear_resize: factor must be positive"));
        }
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::InvalidShape { op: "bilinear_resize", shape: s, reason: "expected (B, C, H, W)".into() });
        }
        self.bilinear_resize_to(x, s[2] * factor, s[3] * factor)
    }

    pub fn bilinear_resize_to(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let out = resize_tensor(self.value(x), oh, ow)?;
        let shape = self.shape(x).to_vec();
        Ok(self.push_op(out, &[x], move |g| {
            let (h, w) = (shape[2], shape[3]);
            let mut gx = vec![T::zero(); shape.iter().product()];
            for (gp, xp) in g.data().chunks(oh * ow).zip(gx.chunks_mut(h * w)) {
                resize_plane_adjoint(gp, h, w, oh, ow, xp);
            }
            Ok(vec![Some(Tensor::from_vec(shape.clone(), gx)?)])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_upsample_hand_values() {
        let out = resize_plane(&[0.0f64, 1.0], 1, 2, 1, 4);
        assert_eq!(out, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn constant_map_stays_constant() {
        let x = Tensor::<f64>::full([1, 2, 3, 5], 0.7);
        let y = resize_tensor(&x, 12, 20).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn factor_four_restores_resolution() {
        let mut tape = Tape::<f32>::inference();
        let x = tape.constant(Tensor::zeros([1, 1, 64, 64]));
        let y = tape.bilinear_resize(x, 4).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 256, 256]);
    }

    #[test]
    fn zero_factor_rejected() {
        let mut tape = Tape::<f32>::inference();
        let x = tape.constant(Tensor::zeros([1, 1, 2, 2]));
        assert!(tape.bilinear_resize(x, 0).is_err());
    }

    #[test]
    fn downsample_same_size_is_identity() {
        let data: Vec<f64> = (0..12).map(|v| v as f64).collect();
        assert_eq!(resize_plane(&data, 3, 4, 3, 4), data);
    }
}
