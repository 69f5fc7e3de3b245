use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<T: Scalar> Tape<T> {
    /// 2×2 max pooling with stride 2. Gradients route to the first maximum
    /// of each window in row-major order.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 4 || !vx.shape()[2].is_multiple_of(2) || !vx.shape()[3].is_multiple_of(2) {
            return Err(Error::InvalidShape { op: "maxpool2d", shape: vx.shape().to_vec(), reason: "expected (B, C, even H, even W)".into() });
        }
        let (b, c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        let data = vx.data();
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let in_shape = vx.shape().to_vec();
        let numel = vx.numel();
        let out = Tensor::from_vec([b, c, oh, ow], out)?;
        Ok(self.push_op(out, &[x], move |g| {
            let mut gx = vec![T::zero(); numel];
            for (&idx, &gv) in argmax.iter().zip(g.data()) {
                gx[idx] += gv;
            }
            Ok(vec![Some(Tensor::from_vec(in_shape.clone(), gx)?)])
        }))
    }
}
