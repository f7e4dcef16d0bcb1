//! Modulated deformable convolution (v2) sampling.
//!
//! Offsets are `B × 2·k² × Ho × Wo` with channel `2·kk` the vertical and
//! `2·kk + 1` the horizontal displacement of tap `kk`; modulation is
//! `B × k² × Ho × Wo`. Samples outside the feature map read zero.

use super::conv::{conv_backward, conv_forward, ColumnBuilder, ConvGeom};
use crate::scalar::Scalar;

/// Bilinear sampling taps of one (tap, pixel) location.
#[derive(Clone, Copy)]
struct Taps<T> {
    idx: [usize; 4],
    w: [T; 4],
    // d(weight)/d(y) and d(weight)/d(x) of each corner
    dwy: [T; 4],
    dwx: [T; 4],
}

fn taps<T: Scalar>(sy: T, sx: T, height: usize, width: usize) -> Taps<T> {
    let mut t = Taps {
        idx: [0; 4],
        w: [T::zero(); 4],
        dwy: [T::zero(); 4],
        dwx: [T::zero(); 4],
    };
    let y0f = sy.floor();
    let x0f = sx.floor();
    let ly = sy - y0f;
    let lx = sx - x0f;
    let hy = T::one() - ly;
    let hx = T::one() - lx;
    let (y0, x0) = match (y0f.to_isize(), x0f.to_isize()) {
        (Some(a), Some(b)) => (a, b),
        _ => return t,
    };
    let corners = [
        (y0, x0, hy * hx, -hx, -hy),
        (y0, x0 + 1, hy * lx, -lx, hy),
        (y0 + 1, x0, ly * hx, hx, -ly),
        (y0 + 1, x0 + 1, ly * lx, lx, ly),
    ];
    for (i, &(cy, cx, w, dy, dx)) in corners.iter().enumerate() {
        if cy >= 0 && cx >= 0 && (cy as usize) < height && (cx as usize) < width {
            t.idx[i] = cy as usize * width + cx as usize;
            t.w[i] = w;
            t.dwy[i] = dy;
            t.dwx[i] = dx;
        }
    }
    t
}

struct DeformColumns<'a, T> {
    offset: &'a [T],
    mask: &'a [T],
}

impl<T: Scalar> DeformColumns<'_, T> {
    fn tap_table(&self, b: usize, g: &ConvGeom) -> Vec<Taps<T>> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let p_total = oh * ow;
        let k2 = g.taps();
        let off_b = &self.offset[b * 2 * k2 * p_total..(b + 1) * 2 * k2 * p_total];
        let mut table = Vec::with_capacity(k2 * p_total);
        for kk in 0..k2 {
            let ky = (kk / g.kernel) as f64;
            let kx = (kk % g.kernel) as f64;
            for oy in 0..oh {
                for ox in 0..ow {
                    let p = oy * ow + ox;
                    let dy = off_b[(2 * kk) * p_total + p];
                    let dx = off_b[(2 * kk + 1) * p_total + p];
                    let sy = T::from_f64_lossy(oy as f64 + ky - g.pad as f64) + dy;
                    let sx = T::from_f64_lossy(ox as f64 + kx - g.pad as f64) + dx;
                    table.push(taps(sy, sx, g.height, g.width));
                }
            }
        }
        table
    }
}

impl<T: Scalar> ColumnBuilder<T> for DeformColumns<'_, T> {
    fn build(&self, b: usize, x: &[T], g: &ConvGeom, col: &mut [T]) {
        let p_total = g.out_pixels();
        let k2 = g.taps();
        let hw = g.height * g.width;
        let table = self.tap_table(b, g);
        let mask_b = &self.mask[b * k2 * p_total..(b + 1) * k2 * p_total];
        for c in 0..g.channels {
            let xc = &x[c * hw..(c + 1) * hw];
            for kk in 0..k2 {
                let row = &mut col[(c * k2 + kk) * p_total..(c * k2 + kk + 1) * p_total];
                let tab = &table[kk * p_total..(kk + 1) * p_total];
                let m = &mask_b[kk * p_total..(kk + 1) * p_total];
                for ((dst, t), &mv) in row.iter_mut().zip(tab).zip(m) {
                    let v = t.w[0] * xc[t.idx[0]]
                        + t.w[1] * xc[t.idx[1]]
                        + t.w[2] * xc[t.idx[2]]
                        + t.w[3] * xc[t.idx[3]];
                    *dst = mv * v;
                }
            }
        }
    }
}

pub fn deform_conv2d<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    offset: &[T],
    mask: &[T],
    weight: &[T],
    out_channels: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let builder = DeformColumns { offset, mask };
    conv_forward(x, batch, g, weight, out_channels, bias, &builder, false)
}

/// Gradients of a modulated deformable convolution.
#[derive(Default)]
pub struct DeformGrads<T> {
    pub dx: Option<Vec<T>>,
    pub doffset: Option<Vec<T>>,
    pub dmask: Option<Vec<T>>,
    pub dweight: Option<Vec<T>>,
    pub dbias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn deform_conv2d_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    offset: &[T],
    mask: &[T],
    weight: &[T],
    out_channels: usize,
    dout: &[T],
    need: [bool; 5],
) -> DeformGrads<T> {
    let [need_dx, need_doff, need_dmask, need_dw, need_db] = need;
    let p_total = g.out_pixels();
    let k2 = g.taps();
    let hw = g.height * g.width;
    let in_len = g.channels * hw;
    let builder = DeformColumns { offset, mask };
    let mut grads = DeformGrads {
        dx: need_dx.then(|| vec![T::zero(); batch * in_len]),
        doffset: need_doff.then(|| vec![T::zero(); offset.len()]),
        dmask: need_dmask.then(|| vec![T::zero(); mask.len()]),
        dweight: need_dw.then(|| vec![T::zero(); weight.len()]),
        dbias: need_db.then(|| vec![T::zero(); out_channels]),
    };
    let need_scatter = need_dx || need_doff || need_dmask;
    let (mut dx, mut doff, mut dmask) = (
        grads.dx.take(),
        grads.doffset.take(),
        grads.dmask.take(),
    );
    {
        let mut scatter_fn = |b: usize, dcol: &[T]| {
            let table = builder.tap_table(b, g);
            let xb = &x[b * in_len..(b + 1) * in_len];
            let mask_b = &mask[b * k2 * p_total..(b + 1) * k2 * p_total];
            for kk in 0..k2 {
                for p in 0..p_total {
                    let t = &table[kk * p_total + p];
                    let mv = mask_b[kk * p_total + p];
                    let mut acc_val = T::zero();
                    let mut acc_dy = T::zero();
                    let mut acc_dx = T::zero();
                    for c in 0..g.channels {
                        let gcol = dcol[(c * k2 + kk) * p_total + p];
                        if gcol == T::zero() {
                            continue;
                        }
                        let xc = &xb[c * hw..(c + 1) * hw];
                        let v = [xc[t.idx[0]], xc[t.idx[1]], xc[t.idx[2]], xc[t.idx[3]]];
                        let val = t.w[0] * v[0] + t.w[1] * v[1] + t.w[2] * v[2] + t.w[3] * v[3];
                        acc_val += gcol * val;
                        acc_dy += gcol
                            * (t.dwy[0] * v[0] + t.dwy[1] * v[1] + t.dwy[2] * v[2] + t.dwy[3] * v[3]);
                        acc_dx += gcol
                            * (t.dwx[0] * v[0] + t.dwx[1] * v[1] + t.dwx[2] * v[2] + t.dwx[3] * v[3]);
                        if let Some(dx) = dx.as_mut() {
                            let dxc = &mut dx[b * in_len + c * hw..b * in_len + (c + 1) * hw];
                            let s = gcol * mv;
                            for i in 0..4 {
                                dxc[t.idx[i]] += s * t.w[i];
                            }
                        }
                    }
                    if let Some(dm) = dmask.as_mut() {
                        dm[(b * k2 + kk) * p_total + p] += acc_val;
                    }
                    if let Some(doff) = doff.as_mut() {
                        let base = b * 2 * k2 * p_total;
                        doff[base + (2 * kk) * p_total + p] += mv * acc_dy;
                        doff[base + (2 * kk + 1) * p_total + p] += mv * acc_dx;
                    }
                }
            }
        };
        let scatter: Option<&mut dyn FnMut(usize, &[T])> = if need_scatter {
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
            grads.dweight.as_deref_mut(),
            grads.dbias.as_deref_mut(),
            scatter,
        );
    }
    grads.dx = dx;
    grads.doffset = doff;
    grads.dmask = dmask;
    grads
}

#[cfg(test)]
mod tests {
    use super::super::conv::conv2d;
    use super::*;

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 7919 % 103) as f64 - 51.0) * scale).collect()
    }

    fn geom() -> ConvGeom {
        ConvGeom {
            channels: 2,
            height: 6,
            width: 7,
            kernel: 3,
            pad: 1,
        }
    }

    #[test]
    fn zero_offsets_unit_mask_is_standard_conv() {
        let g = geom();
        let p = g.out_pixels();
        let x = seq(2 * 2 * 42, 0.01);
        let w = seq(3 * g.col_rows(), 0.03);
        let off = vec![0.0; 2 * 18 * p];
        let m = vec![1.0; 2 * 9 * p];
        let a = deform_conv2d(&x, 2, &g, &off, &m, &w, 3, Some(&[0.1, 0.2, 0.3]));
        let b = conv2d(&x, 2, &g, &w, 3, Some(&[0.1, 0.2, 0.3]));
        let diff = a.iter().zip(&b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn offset_gradient_matches_finite_differences() {
        let g = geom();
        let p = g.out_pixels();
        let x = seq(2 * 42, 0.02);
        let w = seq(2 * g.col_rows(), 0.05);
        let mut off: Vec<f64> = seq(18 * p, 0.013);
        let m: Vec<f64> = seq(9 * p, 0.004).iter().map(|v| 0.5 + v).collect();
        let dy = seq(2 * p, 0.01);
        let loss = |off: &[f64], m: &[f64], x: &[f64]| -> f64 {
            deform_conv2d(x, 1, &g, off, m, &w, 2, None)
                .iter()
                .zip(&dy)
                .map(|(a, b)| a * b)
                .sum()
        };
        let grads = deform_conv2d_backward(&x, 1, &g, &off, &m, &w, 2, &dy, [true; 5]);
        let h = 1e-6;
        for &i in &[0usize, 5, 17, 40, 100, 200] {
            let orig = off[i];
            off[i] = orig + h;
            let lp = loss(&off, &m, &x);
            off[i] = orig - h;
            let lm = loss(&off, &m, &x);
            off[i] = orig;
            let num = (lp - lm) / (2.0 * h);
            let ana = grads.doffset.as_ref().unwrap()[i];
            assert!((num - ana).abs() < 1e-6, "offset {i}: {num} vs {ana}");
        }
        let mut mm = m.clone();
        for &i in &[0usize, 9, 33, 77] {
            let orig = mm[i];
            mm[i] = orig + h;
            let lp = loss(&off, &mm, &x);
            mm[i] = orig - h;
            let lm = loss(&off, &mm, &x);
            mm[i] = orig;
            let num = (lp - lm) / (2.0 * h);
            assert!((num - grads.dmask.as_ref().unwrap()[i]).abs() < 1e-6);
        }
        let mut xx = x.clone();
        for &i in &[0usize, 13, 50, 83] {
            let orig = xx[i];
            xx[i] = orig + h;
            let lp = loss(&off, &m, &xx);
            xx[i] = orig - h;
            let lm = loss(&off, &m, &xx);
            xx[i] = orig;
            let num = (lp - lm) / (2.0 * h);
            assert!((num - grads.dx.as_ref().unwrap()[i]).abs() < 1e-6);
        }
    }
}
