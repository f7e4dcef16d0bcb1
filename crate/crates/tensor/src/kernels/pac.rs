//! Pixel-adaptive convolution: every kernel tap is scaled per output pixel by
//! a Gaussian affinity `exp(-½‖g_p − g_q‖²)` of the guidance features at the
//! centre `p` and the tap location `q`.

use super::conv::{conv_backward, conv_forward, ColumnBuilder, ConvGeom};
use crate::scalar::{lit, Scalar};

/// Affinity table `[kk, p]` for image `b`; taps outside the image get 0.
pub fn affinities<T: Scalar>(guide: &[T], guide_channels: usize, b: usize, g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p_total = oh * ow;
    let hw = g.height * g.width;
    let gb = &guide[b * guide_channels * hw..(b + 1) * guide_channels * hw];
    let half: T = lit(0.5);
    let mut out = vec![T::zero(); g.taps() * p_total];
    for kk in 0..g.taps() {
        for oy in 0..oh {
            for ox in 0..ow {
                let p = oy * ow + ox;
                // the centre of the window is the output pixel itself
                let centre = match g.source(oy, ox, g.taps() / 2) {
                    Some(c) => c,
                    None => continue,
                };
                if let Some(q) = g.source(oy, ox, kk) {
                    let mut d2 = T::zero();
                    for c in 0..guide_channels {
                        let d = gb[c * hw + centre] - gb[c * hw + q];
                        d2 += d * d;
                    }
                    out[kk * p_total + p] = (-half * d2).exp();
                }
            }
        }
    }
    out
}

struct PacColumns<'a, T> {
    guide: &'a [T],
    guide_channels: usize,
}

impl<T: Scalar> ColumnBuilder<T> for PacColumns<'_, T> {
    fn build(&self, b: usize, x: &[T], g: &ConvGeom, col: &mut [T]) {
        super::conv::im2col(x, g, col);
        let aff = affinities(self.guide, self.guide_channels, b, g);
        let p_total = g.out_pixels();
        let k2 = g.taps();
        for c in 0..g.channels {
            for kk in 0..k2 {
                let row = &mut col[(c * k2 + kk) * p_total..(c * k2 + kk + 1) * p_total];
                for (v, &a) in row.iter_mut().zip(&aff[kk * p_total..(kk + 1) * p_total]) {
                    *v *= a;
                }
            }
        }
    }
}

/// Requires an odd kernel with "same" padding so the window centre is the output pixel.
#[allow(clippy::too_many_arguments)]
pub fn pac_conv2d<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    guide: &[T],
    guide_channels: usize,
    weight: &[T],
    out_channels: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    debug_assert_eq!(g.out_h(), g.height);
    let builder = PacColumns {
        guide,
        guide_channels,
    };
    conv_forward(x, batch, g, weight, out_channels, bias, &builder, false)
}

#[derive(Default)]
pub struct PacGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dguide: Option<Vec<T>>,
    pub dweight: Option<Vec<T>>,
    pub dbias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn pac_conv2d_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    guide: &[T],
    guide_channels: usize,
    weight: &[T],
    out_channels: usize,
    dout: &[T],
    need: [bool; 4],
) -> PacGrads<T> {
    let [need_dx, need_dg, need_dw, need_db] = need;
    let p_total = g.out_pixels();
    let (oh, ow) = (g.out_h(), g.out_w());
    let k2 = g.taps();
    let hw = g.height * g.width;
    let in_len = g.channels * hw;
    let builder = PacColumns {
        guide,
        guide_channels,
    };
    let mut dx = need_dx.then(|| vec![T::zero(); batch * in_len]);
    let mut dguide = need_dg.then(|| vec![T::zero(); guide.len()]);
    let mut dweight = need_dw.then(|| vec![T::zero(); weight.len()]);
    let mut dbias = need_db.then(|| vec![T::zero(); out_channels]);
    {
        let mut scatter_fn = |b: usize, dcol: &[T]| {
            let aff = affinities(guide, guide_channels, b, g);
            let xb = &x[b * in_len..(b + 1) * in_len];
            // gradient w.r.t. each affinity value
            let mut daff = vec![T::zero(); k2 * p_total];
            for oy in 0..oh {
                for ox in 0..ow {
                    let p = oy * ow + ox;
                    for kk in 0..k2 {
                        let q = match g.source(oy, ox, kk) {
                            Some(q) => q,
                            None => continue,
                        };
                        let a = aff[kk * p_total + p];
                        let mut acc = T::zero();
                        for c in 0..g.channels {
                            let gc = dcol[(c * k2 + kk) * p_total + p];
                            acc += gc * xb[c * hw + q];
                            if let Some(dx) = dx.as_mut() {
                                dx[b * in_len + c * hw + q] += gc * a;
                            }
                        }
                        daff[kk * p_total + p] = acc;
                    }
                }
            }
            if let Some(dg) = dguide.as_mut() {
                let gb = &guide[b * guide_channels * hw..(b + 1) * guide_channels * hw];
                let dgb = &mut dg[b * guide_channels * hw..(b + 1) * guide_channels * hw];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let p = oy * ow + ox;
                        let centre = match g.source(oy, ox, k2 / 2) {
                            Some(c) => c,
                            None => continue,
                        };
                        for kk in 0..k2 {
                            let q = match g.source(oy, ox, kk) {
                                Some(q) => q,
                                None => continue,
                            };
                            // d exp(-½‖d‖²) / d g_centre = -K · d, with d = g_centre - g_q
                            let s = daff[kk * p_total + p] * aff[kk * p_total + p];
                            if s == T::zero() {
                                continue;
                            }
                            for c in 0..guide_channels {
                                let d = gb[c * hw + centre] - gb[c * hw + q];
                                dgb[c * hw + centre] -= s * d;
                                dgb[c * hw + q] += s * d;
                            }
                        }
                    }
                }
            }
        };
        let scatter: Option<&mut dyn FnMut(usize, &[T])> = if need_dx || need_dg {
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
            &builder,
            false,
            dweight.as_deref_mut(),
            dbias.as_deref_mut(),
            scatter,
        );
    }
    PacGrads {
        dx,
        dguide,
        dweight,
        dbias,
    }
}

#[cfg(test)]
mod tests {
    use super::super::conv::conv2d;
    use super::*;

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 7919 % 97) as f64 - 48.0) * scale).collect()
    }

    #[test]
    fn constant_guidance_is_standard_conv() {
        let g = ConvGeom {
            channels: 3,
            height: 5,
            width: 4,
            kernel: 3,
            pad: 1,
        };
        let x = seq(2 * 3 * 20, 0.01);
        let w = seq(2 * g.col_rows(), 0.02);
        let guide = vec![0.7; 2 * 4 * 20];
        let a = pac_conv2d(&x, 2, &g, &guide, 4, &w, 2, Some(&[0.5, -0.5]));
        let b = conv2d(&x, 2, &g, &w, 2, Some(&[0.5, -0.5]));
        let diff = a.iter().zip(&b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn guide_gradient_matches_finite_differences() {
        let g = ConvGeom {
            channels: 2,
            height: 4,
            width: 5,
            kernel: 3,
            pad: 1,
        };
        let x = seq(2 * 20, 0.03);
        let w = seq(3 * g.col_rows(), 0.04);
        let mut guide = seq(3 * 20, 0.02);
        let dy = seq(3 * 20, 0.05);
        let loss = |guide: &[f64]| -> f64 {
            pac_conv2d(&x, 1, &g, guide, 3, &w, 3, None)
                .iter()
                .zip(&dy)
                .map(|(a, b)| a * b)
                .sum()
        };
        let grads = pac_conv2d_backward(&x, 1, &g, &guide, 3, &w, 3, &dy, [true; 4]);
        let h = 1e-6;
        for i in 0..guide.len() {
            let orig = guide[i];
            guide[i] = orig + h;
            let lp = loss(&guide);
            guide[i] = orig - h;
            let lm = loss(&guide);
            guide[i] = orig;
            let num = (lp - lm) / (2.0 * h);
            let ana = grads.dguide.as_ref().unwrap()[i];
            assert!((num - ana).abs() < 1e-7, "guide {i}: {num} vs {ana}");
        }
    }
}
