//! Grouped 2-D cross-correlation via im2col + GEMM.
//!
//! Weights are laid out `(out_c, in_c / groups, kh, kw)`. For every sample and
//! group the input slice is unrolled into a `K x P` column matrix
//! (`K = in_c/groups * kh * kw`, `P = out_h * out_w`) and multiplied by the
//! group's `cout_g x K` weight block. 1x1 stride-1 unpadded convolutions skip
//! the unroll and use the input slice directly.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Static description of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub input: Shape,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    /// Validate `x`/`w` against the hyper-parameters.
    pub fn new(
        input: Shape,
        weight: Shape,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 {
            return Err(Error::invalid("groups must be >= 1"));
        }
        if stride == 0 {
            return Err(Error::invalid("stride must be >= 1"));
        }
        if input.c % groups != 0 {
            return Err(Error::invalid(format!(
                "input channels {} not divisible by groups {groups}",
                input.c
            )));
        }
        if weight.n % groups != 0 {
            return Err(Error::invalid(format!(
                "output channels {} not divisible by groups {groups}",
                weight.n
            )));
        }
        if weight.c != input.c / groups {
            return Err(Error::invalid(format!(
                "weight in-channels {} != input channels {} / groups {groups}",
                weight.c, input.c
            )));
        }
        if input.h + 2 * padding < weight.h || input.w + 2 * padding < weight.w {
            return Err(Error::invalid(format!(
                "kernel {}x{} larger than padded input height/width {}x{}",
                weight.h,
                weight.w,
                input.h + 2 * padding,
                input.w + 2 * padding
            )));
        }
        Ok(ConvGeom {
            input,
            out_c: weight.n,
            kh: weight.h,
            kw: weight.w,
            stride,
            padding,
            groups,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.input.h + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.input.w + 2 * self.padding - self.kw) / self.stride + 1
    }

    pub fn output(&self) -> Shape {
        Shape::new(self.input.n, self.out_c, self.out_h(), self.out_w())
    }

    fn cin_g(&self) -> usize {
        self.input.c / self.groups
    }

    fn cout_g(&self) -> usize {
        self.out_c / self.groups
    }

    fn col_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Groups with a single output channel (depthwise and pairwise fusion)
    /// run as shifted multiply-adds instead of tiny matrix products.
    fn is_direct(&self) -> bool {
        self.groups > 1 && self.cout_g() == 1
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    /// Multiply-accumulates for one forward pass over the whole batch.
    pub fn macs(&self) -> u64 {
        (self.output().numel() * self.col_rows()) as u64
    }
}

/// Output columns `lo..hi` whose input column `ox * stride + k - pad` lies
/// inside `0..len`.
fn valid_range(out: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // ox * stride + k >= pad  and  ox * stride + k < len + pad
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    let hi = if len + pad > k {
        ((len + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unroll `cin_g` channels of one sample into `col` (`K x P`, row-major).
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let (h, w) = (g.input.h, g.input.w);
    let (oh, ow) = (g.out_h(), g.out_w());
    let s = g.stride;
    let mut row = 0;
    for c in 0..g.cin_g() {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..g.kh {
            let (ylo, yhi) = valid_range(oh, h, ky, s, g.padding);
            for kx in 0..g.kw {
                let (xlo, xhi) = valid_range(ow, w, kx, s, g.padding);
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                dst[..ylo * ow].fill(T::zero());
                dst[yhi * ow..].fill(T::zero());
                for oy in ylo..yhi {
                    let iy = oy * s + ky - g.padding;
                    let src = &plane[iy * w..(iy + 1) * w];
                    let seg = &mut dst[oy * ow..(oy + 1) * ow];
                    seg[..xlo].fill(T::zero());
                    seg[xhi..].fill(T::zero());
                    if xlo < xhi {
                        let ix0 = xlo * s + kx - g.padding;
                        if s == 1 {
                            seg[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                        } else {
                            for (v, &u) in
                                seg[xlo..xhi].iter_mut().zip(src[ix0..].iter().step_by(s))
                            {
                                *v = u;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add the column matrix back onto one sample's channel slice.
fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let (h, w) = (g.input.h, g.input.w);
    let (oh, ow) = (g.out_h(), g.out_w());
    let s = g.stride;
    let mut row = 0;
    for c in 0..g.cin_g() {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..g.kh {
            let (ylo, yhi) = valid_range(oh, h, ky, s, g.padding);
            for kx in 0..g.kw {
                let (xlo, xhi) = valid_range(ow, w, kx, s, g.padding);
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                if xlo < xhi {
                    let ix0 = xlo * s + kx - g.padding;
                    for oy in ylo..yhi {
                        let iy = oy * s + ky - g.padding;
                        let d = &mut plane[iy * w..(iy + 1) * w];
                        let seg = &src[oy * ow + xlo..oy * ow + xhi];
                        if s == 1 {
                            for (a, &b) in d[ix0..ix0 + seg.len()].iter_mut().zip(seg) {
                                *a += b;
                            }
                        } else {
                            for (a, &b) in d[ix0..].iter_mut().step_by(s).zip(seg) {
                                *a += b;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Visit the rows of one plane pair touched by kernel tap `(ky, kx)`:
/// `f(x_row, y_range)` where `x_row` starts at the first valid input column
/// and `y_range` indexes the matching output columns.
fn tap_rows(g: &ConvGeom, ky: usize, kx: usize, mut f: impl FnMut(usize, std::ops::Range<usize>)) {
    let w = g.input.w;
    let (oh, ow) = (g.out_h(), g.out_w());
    let s = g.stride;
    let (ylo, yhi) = valid_range(oh, g.input.h, ky, s, g.padding);
    let (xlo, xhi) = valid_range(ow, w, kx, s, g.padding);
    if xlo >= xhi {
        return;
    }
    let ix0 = xlo * s + kx - g.padding;
    for oy in ylo..yhi {
        let iy = oy * s + ky - g.padding;
        f(iy * w + ix0, oy * ow + xlo..oy * ow + xhi);
    }
}

/// Grouped convolution with one output channel per group, as shifted
/// multiply-adds over whole rows.
fn direct_forward<T: Scalar>(g: &ConvGeom, xd: &[T], wd: &[T], yd: &mut [T]) {
    let (cin_g, in_plane, p, s) = (g.cin_g(), g.input.plane(), g.col_cols(), g.stride);
    for n in 0..g.input.n {
        for o in 0..g.out_c {
            let ys = &mut yd[(n * g.out_c + o) * p..][..p];
            for ci in 0..cin_g {
                let xs = &xd[(n * g.input.c + o * cin_g + ci) * in_plane..][..in_plane];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = wd[((o * cin_g + ci) * g.kh + ky) * g.kw + kx];
                        tap_rows(g, ky, kx, |xi, yr| {
                            for (a, &b) in ys[yr].iter_mut().zip(xs[xi..].iter().step_by(s)) {
                                *a += wv * b;
                            }
                        });
                    }
                }
            }
        }
    }
}

fn direct_backward<T: Scalar>(
    g: &ConvGeom,
    xd: &[T],
    wd: &[T],
    dyd: &[T],
    dx: &mut [T],
    dw: &mut [T],
) {
    let (cin_g, in_plane, p, s) = (g.cin_g(), g.input.plane(), g.col_cols(), g.stride);
    for n in 0..g.input.n {
        for o in 0..g.out_c {
            let dys = &dyd[(n * g.out_c + o) * p..][..p];
            for ci in 0..cin_g {
                let xoff = (n * g.input.c + o * cin_g + ci) * in_plane;
                let xs = &xd[xoff..xoff + in_plane];
                let dxs = &mut dx[xoff..xoff + in_plane];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wi = ((o * cin_g + ci) * g.kh + ky) * g.kw + kx;
                        let wv = wd[wi];
                        let mut acc = T::zero();
                        tap_rows(g, ky, kx, |xi, yr| {
                            let d = &dys[yr];
                            for (a, &dv) in dxs[xi..].iter_mut().step_by(s).zip(d) {
                                *a += wv * dv;
                            }
                            acc += d
                                .iter()
                                .zip(xs[xi..].iter().step_by(s))
                                .fold(T::zero(), |t, (&dv, &v)| t + dv * v);
                        });
                        dw[wi] += acc;
                    }
                }
            }
        }
    }
}

/// Row-major GEMM on slices: `c = alpha * op(a) * op(b) + beta * c` where
/// `op` is a transpose when the flag is set. `a` is `m x k` after `op`.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: bounds asserted above; c is a unique borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Forward convolution.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, padding, groups)?;
    if let Some(b) = bias {
        if b.len() != g.out_c {
            return Err(Error::invalid(format!(
                "bias length {} != output channels {}",
                b.len(),
                g.out_c
            )));
        }
    }
    let out = g.output();
    let mut y = Tensor::zeros(out);
    let (k, p) = (g.col_rows(), g.col_cols());
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let in_plane = g.input.plane();
    let mut col = if g.is_pointwise() || g.is_direct() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    let xd = x.data();
    let wd = w.data();
    let yd = y.data_mut();
    if g.is_direct() {
        direct_forward(&g, xd, wd, yd);
    }
    for n in 0..out.n {
        if g.is_direct() {
            break;
        }
        for grp in 0..groups {
            let xs = &xd[(n * g.input.c + grp * cin_g) * in_plane..][..cin_g * in_plane];
            let cols: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(&g, xs, &mut col);
                &col
            };
            let wg = &wd[grp * cout_g * k..(grp + 1) * cout_g * k];
            let ys = &mut yd[(n * out.c + grp * cout_g) * p..][..cout_g * p];
            gemm(cout_g, k, p, wg, false, cols, false, T::zero(), ys);
        }
    }
    if let Some(b) = bias {
        let bd = b.data();
        for plane in 0..out.n * out.c {
            let bv = bd[plane % out.c];
            yd[plane * p..(plane + 1) * p]
                .iter_mut()
                .for_each(|v| *v += bv);
        }
    }
    Ok(y)
}

/// Gradients of a convolution with respect to input, weight and bias.
pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    has_bias: bool,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, padding, groups)?;
    let out = g.output();
    if dy.shape() != out {
        return Err(Error::invalid(format!(
            "upstream gradient shape {} != conv output {}",
            dy.shape(),
            out
        )));
    }
    let (k, p) = (g.col_rows(), g.col_cols());
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let in_plane = g.input.plane();
    let mut dx = Tensor::zeros(g.input);
    let mut dw = Tensor::zeros(w.shape());
    let pointwise = g.is_pointwise();
    let scratch = if pointwise || g.is_direct() { 0 } else { k * p };
    let mut col = vec![T::zero(); scratch];
    let mut dcol = vec![T::zero(); scratch];
    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();
    if g.is_direct() {
        direct_backward(&g, xd, wd, dyd, dx.data_mut(), dw.data_mut());
    }
    for n in 0..out.n {
        if g.is_direct() {
            break;
        }
        for grp in 0..groups {
            let xoff = (n * g.input.c + grp * cin_g) * in_plane;
            let xs = &xd[xoff..xoff + cin_g * in_plane];
            let dys = &dyd[(n * out.c + grp * cout_g) * p..][..cout_g * p];
            let wg = &wd[grp * cout_g * k..(grp + 1) * cout_g * k];
            let dwg = &mut dw.data_mut()[grp * cout_g * k..(grp + 1) * cout_g * k];
            if pointwise {
                // dW += dY * X^T ; dX = W^T * dY
                gemm(cout_g, p, k, dys, false, xs, true, T::one(), dwg);
                let dxs = &mut dx.data_mut()[xoff..xoff + cin_g * in_plane];
                gemm(k, cout_g, p, wg, true, dys, false, T::zero(), dxs);
            } else {
                im2col(&g, xs, &mut col);
                gemm(cout_g, p, k, dys, false, &col, true, T::one(), dwg);
                gemm(k, cout_g, p, wg, true, dys, false, T::zero(), &mut dcol);
                let dxs = &mut dx.data_mut()[xoff..xoff + cin_g * in_plane];
                col2im(&g, &dcol, dxs);
            }
        }
    }
    let db = has_bias.then(|| {
        let mut db = Tensor::zeros(Shape::vector(out.c));
        let dbd = db.data_mut();
        for plane in 0..out.n * out.c {
            let s: T = dyd[plane * p..(plane + 1) * p].iter().copied().sum();
            dbd[plane % out.c] += s;
        }
        db
    });
    Ok(ConvGrads { dx, dw, db })
}
