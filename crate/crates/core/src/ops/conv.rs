//! 2-D convolution (cross-correlation) and its transpose, via im2col + GEMM.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::{gemm, MatLayout, Scalar};
use crate::tensor::Tensor;

/// Geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec { in_channels, out_channels, kernel, stride, padding, has_bias: true }
    }

    pub fn without_bias(mut self) -> Self {
        self.has_bias = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid(format!("degenerate convolution {self:?}")));
        }
        Ok(())
    }

    /// `floor((extent − E + 2P) / S) + 1`, or `None` if the kernel does not
    /// fit the padded input.
    pub fn output_extent(&self, extent: usize) -> Option<usize> {
        let padded = extent + 2 * self.padding;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// `(extent − 1)·S − 2P + E` for the transposed direction.
    pub fn transposed_extent(&self, extent: usize) -> Option<usize> {
        ((extent.checked_sub(1)?) * self.stride + self.kernel).checked_sub(2 * self.padding).filter(|&v| v > 0)
    }

    /// Weight shape for [`Tape::conv2d`]: `(C_out, C_in, E, E)`.
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    /// Weight shape for [`Tape::conv_transpose2d`]: `(C_in, C_out, E, E)`.
    pub fn transposed_weight_shape(&self) -> [usize; 4] {
        [self.in_channels, self.out_channels, self.kernel, self.kernel]
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Spatial geometry shared by im2col and col2im: an `h×w` map sampled on an
/// `oh×ow` grid.
#[derive(Clone, Copy)]
struct Geometry {
    channels: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
    s: usize,
    p: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Valid output index range for kernel offset `ki` along an axis of
    /// extent `len` and grid size `out`.
    fn valid(&self, ki: usize, len: usize, out: usize) -> (usize, usize) {
        // in = o·s + ki − p must lie in [0, len)
        let lo = if ki >= self.p { 0 } else { (self.p - ki).div_ceil(self.s) };
        let hi = if len + self.p > ki { (len + self.p - ki - 1) / self.s + 1 } else { 0 };
        (lo.min(out), hi.min(out).max(lo.min(out)))
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let n = self.cols();
        for c in 0..self.channels {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                let (ylo, yhi) = self.valid(ki, self.h, self.oh);
                for kj in 0..self.k {
                    let (xlo, xhi) = self.valid(kj, self.w, self.ow);
                    let row = &mut cols[((c * self.k + ki) * self.k + kj) * n..][..n];
                    row.iter_mut().for_each(|v| *v = T::zero());
                    for oy in ylo..yhi {
                        let iy = oy * self.s + ki - self.p;
                        let src = &plane[iy * self.w..(iy + 1) * self.w];
                        let dst = &mut row[oy * self.ow..(oy + 1) * self.ow];
                        if self.s == 1 {
                            let ix0 = xlo + kj - self.p;
                            dst[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                        } else {
                            for ox in xlo..xhi {
                                dst[ox] = src[ox * self.s + kj - self.p];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add columns back onto the map (adjoint of im2col).
    fn col2im<T: Scalar>(&self, cols: &[T], x: &mut [T]) {
        let n = self.cols();
        for c in 0..self.channels {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                let (ylo, yhi) = self.valid(ki, self.h, self.oh);
                for kj in 0..self.k {
                    let (xlo, xhi) = self.valid(kj, self.w, self.ow);
                    let row = &cols[((c * self.k + ki) * self.k + kj) * n..][..n];
                    for oy in ylo..yhi {
                        let iy = oy * self.s + ki - self.p;
                        let src = &row[oy * self.ow..(oy + 1) * self.ow];
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        for ox in xlo..xhi {
                            dst[ox * self.s + kj - self.p] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_input<T: Scalar>(x: &Tensor<T>, channels: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if x.rank() != 4 || x.shape()[1] != channels {
        return Err(Error::InvalidShape { op, shape: x.shape().to_vec(), reason: format!("expected (B, {channels}, H, W)") });
    }
    Ok((x.shape()[0], x.shape()[2], x.shape()[3]))
}

fn check_weight<T: Scalar>(w: &Tensor<T>, expected: [usize; 4], op: &'static str) -> Result<()> {
    if w.shape() != expected {
        return Err(Error::ShapeMismatch { op, lhs: w.shape().to_vec(), rhs: expected.to_vec() });
    }
    Ok(())
}

fn check_bias<T: Scalar>(b: Option<&Tensor<T>>, spec: &ConvSpec, op: &'static str) -> Result<()> {
    match (b, spec.has_bias) {
        (Some(b), true) if b.shape() == [spec.out_channels] => Ok(()),
        (Some(b), true) => Err(Error::ShapeMismatch { op, lhs: b.shape().to_vec(), rhs: vec![spec.out_channels] }),
        (None, false) => Ok(()),
        _ => Err(Error::invalid(format!("{op}: bias presence does not match spec"))),
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (c, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[c % bias.len()];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<T: Scalar>(g: &Tensor<T>, channels: usize) -> Tensor<T> {
    let plane = g.shape()[2] * g.shape()[3];
    let mut gb = vec![T::zero(); channels];
    for (i, chunk) in g.data().chunks(plane).enumerate() {
        let mut acc = T::zero();
        for &v in chunk {
            acc += v;
        }
        gb[i % channels] += acc;
    }
    Tensor::from_vec([channels], gb).expect("bias shape")
}

/// Forward convolution on plain tensors.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, spec: &ConvSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    let (batch, h, wd) = check_input(x, spec.in_channels, "conv2d")?;
    check_weight(w, spec.weight_shape(), "conv2d")?;
    check_bias(b, spec, "conv2d")?;
    let too_big = || Error::InvalidShape {
        op: "conv2d",
        shape: x.shape().to_vec(),
        reason: format!("kernel {} larger than padded input", spec.kernel),
    };
    let oh = spec.output_extent(h).ok_or_else(too_big)?;
    let ow = spec.output_extent(wd).ok_or_else(too_big)?;
    let geo = Geometry { channels: spec.in_channels, h, w: wd, oh, ow, k: spec.kernel, s: spec.stride, p: spec.padding };
    let (rows, n) = (geo.rows(), geo.cols());
    let cout = spec.out_channels;
    let mut out = vec![T::zero(); batch * cout * n];
    let mut cols = if spec.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * n] };
    for bi in 0..batch {
        let xb = &x.data()[bi * spec.in_channels * h * wd..(bi + 1) * spec.in_channels * h * wd];
        let colsb: &[T] = if spec.is_pointwise() {
            xb
        } else {
            geo.im2col(xb, &mut cols);
            &cols
        };
        gemm(
            w.data(),
            MatLayout::row_major(cout, rows),
            colsb,
            MatLayout::row_major(rows, n),
            T::zero(),
            &mut out[bi * cout * n..(bi + 1) * cout * n],
            MatLayout::row_major(cout, n),
        );
    }
    if let Some(b) = b {
        add_bias(&mut out, b.data(), n);
    }
    Tensor::from_vec([batch, cout, oh, ow], out)
}

/// Forward transposed convolution on plain tensors.
pub fn conv_transpose2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, spec: &ConvSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    let (batch, h, wd) = check_input(x, spec.in_channels, "conv_transpose2d")?;
    check_weight(w, spec.transposed_weight_shape(), "conv_transpose2d")?;
    check_bias(b, spec, "conv_transpose2d")?;
    let bad = || Error::InvalidShape {
        op: "conv_transpose2d",
        shape: x.shape().to_vec(),
        reason: format!("padding {} consumes the whole output", spec.padding),
    };
    let oh = spec.transposed_extent(h).ok_or_else(bad)?;
    let ow = spec.transposed_extent(wd).ok_or_else(bad)?;
    let geo = Geometry { channels: spec.out_channels, h: oh, w: ow, oh: h, ow: wd, k: spec.kernel, s: spec.stride, p: spec.padding };
    let (rows, n) = (geo.rows(), geo.cols());
    let cin = spec.in_channels;
    let mut out = vec![T::zero(); batch * spec.out_channels * oh * ow];
    let mut cols = vec![T::zero(); rows * n];
    for bi in 0..batch {
        // cols = Wᵀ · x_b, W viewed as (C_in, C_out·E·E)
        gemm(
            w.data(),
            MatLayout::transposed(rows, cin),
            &x.data()[bi * cin * n..(bi + 1) * cin * n],
            MatLayout::row_major(cin, n),
            T::zero(),
            &mut cols,
            MatLayout::row_major(rows, n),
        );
        geo.col2im(&cols, &mut out[bi * spec.out_channels * oh * ow..(bi + 1) * spec.out_channels * oh * ow]);
    }
    if let Some(b) = b {
        add_bias(&mut out, b.data(), oh * ow);
    }
    Tensor::from_vec([batch, spec.out_channels, oh, ow], out)
}

impl<T: Scalar> Tape<T> {
    /// Cross-correlation with zero padding. `w` is `(C_out, C_in, E, E)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let (vx, vw) = (self.value_rc(x), self.value_rc(w));
        let out = conv2d_forward(&vx, &vw, b.map(|b| self.value(b)), spec)?;
        let spec = *spec;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push_op(out, &parents, move |g| {
            let (batch, h, wd) = (vx.shape()[0], vx.shape()[2], vx.shape()[3]);
            let (oh, ow) = (g.shape()[2], g.shape()[3]);
            let geo = Geometry { channels: spec.in_channels, h, w: wd, oh, ow, k: spec.kernel, s: spec.stride, p: spec.padding };
            let (rows, n) = (geo.rows(), geo.cols());
            let (cin, cout) = (spec.in_channels, spec.out_channels);
            let mut gx = vec![T::zero(); vx.numel()];
            let mut gw = vec![T::zero(); vw.numel()];
            let mut cols = vec![T::zero(); rows * n];
            let mut dcols = vec![T::zero(); rows * n];
            for bi in 0..batch {
                let xb = &vx.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                let gb = &g.data()[bi * cout * n..(bi + 1) * cout * n];
                let colsb: &[T] = if spec.is_pointwise() {
                    xb
                } else {
                    geo.im2col(xb, &mut cols);
                    &cols
                };
                // dW += g_b · colsᵀ
                gemm(gb, MatLayout::row_major(cout, n), colsb, MatLayout::transposed(n, rows), T::one(), &mut gw, MatLayout::row_major(cout, rows));
                let gxb = &mut gx[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                if spec.is_pointwise() {
                    gemm(vw.data(), MatLayout::transposed(rows, cout), gb, MatLayout::row_major(cout, n), T::zero(), gxb, MatLayout::row_major(rows, n));
                } else {
                    gemm(vw.data(), MatLayout::transposed(rows, cout), gb, MatLayout::row_major(cout, n), T::zero(), &mut dcols, MatLayout::row_major(rows, n));
                    geo.col2im(&dcols, gxb);
                }
            }
            let mut grads = vec![Some(Tensor::from_vec(vx.shape().to_vec(), gx)?), Some(Tensor::from_vec(vw.shape().to_vec(), gw)?)];
            if spec.has_bias {
                grads.push(Some(bias_grad(g, cout)));
            }
            Ok(grads)
        }))
    }

    /// Adjoint of [`Tape::conv2d`]. `w` is `(C_in, C_out, E, E)`; output
    /// extent is `(H − 1)·S − 2P + E`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let (vx, vw) = (self.value_rc(x), self.value_rc(w));
        let out = conv_transpose2d_forward(&vx, &vw, b.map(|b| self.value(b)), spec)?;
        let spec = *spec;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push_op(out, &parents, move |g| {
            let (batch, h, wd) = (vx.shape()[0], vx.shape()[2], vx.shape()[3]);
            let (oh, ow) = (g.shape()[2], g.shape()[3]);
            let geo = Geometry { channels: spec.out_channels, h: oh, w: ow, oh: h, ow: wd, k: spec.kernel, s: spec.stride, p: spec.padding };
            let (rows, n) = (geo.rows(), geo.cols());
            let (cin, cout) = (spec.in_channels, spec.out_channels);
            let mut gx = vec![T::zero(); vx.numel()];
            let mut gw = vec![T::zero(); vw.numel()];
            let mut cols = vec![T::zero(); rows * n];
            for bi in 0..batch {
                geo.im2col(&g.data()[bi * cout * oh * ow..(bi + 1) * cout * oh * ow], &mut cols);
                let xb = &vx.data()[bi * cin * n..(bi + 1) * cin * n];
                // dx_b = W · cols, W viewed as (C_in, C_out·E·E)
                gemm(vw.data(), MatLayout::row_major(cin, rows), &cols, MatLayout::row_major(rows, n), T::zero(), &mut gx[bi * cin * n..(bi + 1) * cin * n], MatLayout::row_major(cin, n));
                // dW += x_b · colsᵀ
                gemm(xb, MatLayout::row_major(cin, n), &cols, MatLayout::transposed(n, rows), T::one(), &mut gw, MatLayout::row_major(cin, rows));
            }
            let mut grads = vec![Some(Tensor::from_vec(vx.shape().to_vec(), gx)?), Some(Tensor::from_vec(vw.shape().to_vec(), gw)?)];
            if spec.has_bias {
                grads.push(Some(bias_grad(g, cout)));
            }
            Ok(grads)
        }))
    }
}
