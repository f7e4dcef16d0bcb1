//! Stride-1 2-D convolution through im2col + GEMM, plus the two modulated
//! variants (deformable v2 and pixel-adaptive) that share the column layout.
//!
//! Column matrices are laid out `[(c * k * k + kk), p]` with `p` the flattened
//! output pixel, so every variant differs only in how columns are built and
//! how column gradients are scattered back.

use crate::scalar::{gemm, Mat, Scalar};

/// Geometry of a square-kernel, stride-1 convolution over one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kernel
    }

    pub fn out_w(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kernel
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.taps()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.pad == 0
    }

    /// Source pixel of output `(oy, ox)` under tap `kk`, if inside the image.
    #[inline(always)]
    pub fn source(&self, oy: usize, ox: usize, kk: usize) -> Option<usize> {
        let ky = kk / self.kernel;
        let kx = kk % self.kernel;
        let sy = (oy + ky) as isize - self.pad as isize;
        let sx = (ox + kx) as isize - self.pad as isize;
        if sy < 0 || sx < 0 || sy >= self.height as isize || sx >= self.width as isize {
            None
        } else {
            Some(sy as usize * self.width + sx as usize)
        }
    }
}

/// Fills `col` (`col_rows × out_pixels`) from one image `x` (`C × H × W`).
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p_total = oh * ow;
    let hw = g.height * g.width;
    for c in 0..g.channels {
        let xc = &x[c * hw..(c + 1) * hw];
        for kk in 0..g.taps() {
            let ky = kk / g.kernel;
            let kx = kk % g.kernel;
            let row = &mut col[(c * g.taps() + kk) * p_total..(c * g.taps() + kk + 1) * p_total];
            for oy in 0..oh {
                let sy = (oy + ky) as isize - g.pad as isize;
                let dst = &mut row[oy * ow..(oy + 1) * ow];
                if sy < 0 || sy >= g.height as isize {
                    dst.fill(T::zero());
                    continue;
                }
                let src_row = &xc[sy as usize * g.width..(sy as usize + 1) * g.width];
                // valid ox range: 0 <= ox + kx - pad < width
                let lo = g.pad.saturating_sub(kx);
                let hi = (g.width + g.pad).saturating_sub(kx).min(ow);
                dst[..lo.min(ow)].fill(T::zero());
                if hi > lo {
                    let s0 = lo + kx - g.pad;
                    dst[lo..hi].copy_from_slice(&src_row[s0..s0 + (hi - lo)]);
                }
                if hi < ow {
                    dst[hi.max(lo)..].fill(T::zero());
                }
            }
        }
    }
}

/// Accumulates a column gradient back into the image gradient `dx`.
pub fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p_total = oh * ow;
    let hw = g.height * g.width;
    for c in 0..g.channels {
        let dxc = &mut dx[c * hw..(c + 1) * hw];
        for kk in 0..g.taps() {
            let ky = kk / g.kernel;
            let kx = kk % g.kernel;
            let row = &col[(c * g.taps() + kk) * p_total..(c * g.taps() + kk + 1) * p_total];
            for oy in 0..oh {
                let sy = (oy + ky) as isize - g.pad as isize;
                if sy < 0 || sy >= g.height as isize {
                    continue;
                }
                let lo = g.pad.saturating_sub(kx);
                let hi = (g.width + g.pad).saturating_sub(kx).min(ow);
                if hi <= lo {
                    continue;
                }
                let s0 = lo + kx - g.pad;
                let dst = &mut dxc[sy as usize * g.width + s0..sy as usize * g.width + s0 + (hi - lo)];
                for (d, &v) in dst.iter_mut().zip(&row[oy * ow + lo..oy * ow + hi]) {
                    *d += v;
                }
            }
        }
    }
}

/// How a column matrix is produced for one image of the batch.
pub trait ColumnBuilder<T: Scalar> {
    fn build(&self, b: usize, x: &[T], g: &ConvGeom, col: &mut [T]);
}

/// Plain im2col.
pub struct Standard;

impl<T: Scalar> ColumnBuilder<T> for Standard {
    fn build(&self, _b: usize, x: &[T], g: &ConvGeom, col: &mut [T]) {
        im2col(x, g, col);
    }
}

/// Shared forward: `out[b] = W · col(x[b]) + bias` for a batch of images.
///
/// `x` is `B × C × H × W`, `weight` is `O × (C·k·k)`; returns `B × O × Ho × Wo`.
pub fn conv_forward<T: Scalar, C: ColumnBuilder<T>>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    weight: &[T],
    out_channels: usize,
    bias: Option<&[T]>,
    builder: &C,
    pointwise_shortcut: bool,
) -> Vec<T> {
    let p_total = g.out_pixels();
    let in_len = g.channels * g.height * g.width;
    let mut out = vec![T::zero(); batch * out_channels * p_total];
    let direct = pointwise_shortcut && g.is_pointwise();
    let mut col = if direct {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * p_total]
    };
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let ob = &mut out[b * out_channels * p_total..(b + 1) * out_channels * p_total];
        if let Some(bias) = bias {
            for (o, row) in ob.chunks_exact_mut(p_total).enumerate() {
                row.fill(bias[o]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let cols: &[T] = if direct {
            xb
        } else {
            builder.build(b, xb, g, &mut col);
            &col
        };
        gemm(
            T::one(),
            Mat::new(weight, out_channels, g.col_rows()),
            Mat::new(cols, g.col_rows(), p_total),
            beta,
            ob,
        );
    }
    out
}

/// Gradients of the shared GEMM stage.
///
/// Calls `scatter(b, dcol)` with the column gradient of each image when the
/// caller needs input-side gradients; accumulates the weight gradient when
/// `dweight` is given and the bias gradient when `dbias` is given.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar, C: ColumnBuilder<T>>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    weight: &[T],
    out_channels: usize,
    dout: &[T],
    builder: &C,
    pointwise_shortcut: bool,
    mut dweight: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
    mut scatter: Option<&mut dyn FnMut(usize, &[T])>,
) {
    let p_total = g.out_pixels();
    let in_len = g.channels * g.height * g.width;
    let direct = pointwise_shortcut && g.is_pointwise();
    let mut col = if direct || dweight.is_none() {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * p_total]
    };
    let mut dcol = if scatter.is_some() {
        vec![T::zero(); g.col_rows() * p_total]
    } else {
        Vec::new()
    };
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let db = &dout[b * out_channels * p_total..(b + 1) * out_channels * p_total];
        if let Some(dbias) = dbias.as_deref_mut() {
            for (o, row) in db.chunks_exact(p_total).enumerate() {
                dbias[o] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dweight.as_deref_mut() {
            let cols: &[T] = if direct {
                xb
            } else {
                builder.build(b, xb, g, &mut col);
                &col
            };
            // dW += dout_b · colᵀ
            gemm(
                T::one(),
                Mat::new(db, out_channels, p_total),
                Mat::new(cols, g.col_rows(), p_total).t(),
                T::one(),
                dw,
            );
        }
        if let Some(scatter) = scatter.as_deref_mut() {
            // dcol = Wᵀ · dout_b
            gemm(
                T::one(),
                Mat::new(weight, out_channels, g.col_rows()).t(),
                Mat::new(db, out_channels, p_total),
                T::zero(),
                &mut dcol,
            );
            scatter(b, &dcol);
        }
    }
}

/// Standard convolution, returns `B × O × Ho × Wo`.
pub fn conv2d<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    weight: &[T],
    out_channels: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    conv_forward(x, batch, g, weight, out_channels, bias, &Standard, true)
}

/// Returns `(dx, dweight, dbias)` for a standard convolution.
#[allow(clippy::type_complexity)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    weight: &[T],
    out_channels: usize,
    dout: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let in_len = g.channels * g.height * g.width;
    let mut dx = need_dx.then(|| vec![T::zero(); batch * in_len]);
    let mut dw = need_dw.then(|| vec![T::zero(); weight.len()]);
    let mut dbias = need_db.then(|| vec![T::zero(); out_channels]);
    let pointwise = g.is_pointwise();
    {
        let mut scatter_fn = |b: usize, dcol: &[T]| {
            let dxb = &mut dx.as_mut().expect("dx requested")[b * in_len..(b + 1) * in_len];
            if pointwise {
                for (d, &v) in dxb.iter_mut().zip(dcol) {
                    *d += v;
                }
            } else {
                col2im(dcol, g, dxb);
            }
        };
        let scatter: Option<&mut dyn FnMut(usize, &[T])> = if need_dx {
            Some(&mut scatter_fn)
        } else {
            None
        };
        conv_backward(
            x,
            batch,
            g,
            weight,
            out_channels,
            dout,
            &Standard,
            true,
            dw.as_deref_mut(),
            dbias.as_deref_mut(),
            scatter,
        );
    }
    (dx, dw, dbias)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 7-loop convolution used as the reference.
    pub(crate) fn naive_conv(
        x: &[f64],
        batch: usize,
        g: &ConvGeom,
        w: &[f64],
        o: usize,
        bias: Option<&[f64]>,
    ) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; batch * o * oh * ow];
        for b in 0..batch {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.map_or(0.0, |bb| bb[oc]);
                        for c in 0..g.channels {
                            for kk in 0..g.taps() {
                                if let Some(s) = g.source(oy, ox, kk) {
                                    acc += w[(oc * g.channels + c) * g.taps() + kk]
                                        * x[(b * g.channels + c) * g.height * g.width + s];
                                }
                            }
                        }
                        out[((b * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 7919 % 101) as f64 - 50.0) * scale).collect()
    }

    #[test]
    fn conv_matches_naive_for_3x3_and_1x1() {
        for &(k, pad) in &[(3usize, 1usize), (1, 0), (3, 0)] {
            let g = ConvGeom {
                channels: 3,
                height: 5,
                width: 6,
                kernel: k,
                pad,
            };
            let x = seq(2 * 3 * 5 * 6, 0.01);
            let w = seq(4 * g.col_rows(), 0.02);
            let bias = [0.1, -0.2, 0.3, 0.0];
            let fast = conv2d(&x, 2, &g, &w, 4, Some(&bias));
            let slow = naive_conv(&x, 2, &g, &w, 4, Some(&bias));
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "k={k} pad={pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), dy> == <x, dx(dy)> for the linear map x -> W*x (bias-free)
        let g = ConvGeom {
            channels: 2,
            height: 4,
            width: 5,
            kernel: 3,
            pad: 1,
        };
        let x = seq(2 * 2 * 4 * 5, 0.03);
        let w = seq(3 * g.col_rows(), 0.05);
        let dy = seq(2 * 3 * 4 * 5, 0.07);
        let y = conv2d(&x, 2, &g, &w, 3, None);
        let (dx, dw, _) = conv2d_backward(&x, 2, &g, &w, 3, &dy, true, true, false);
        let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(dx.as_ref().unwrap()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        // <conv_w(x), dy> == <w, dw>
        let rhs_w: f64 = w.iter().zip(dw.as_ref().unwrap()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-10);
    }
}
