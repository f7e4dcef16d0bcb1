use crate::graph::{Graph, Var};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;
use crate::{Result, TensorError};

/// Source index pairs and weights for one axis of bilinear resizing with
/// half-pixel centres.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

fn check4(shape: &[usize], op: &str) -> Result<()> {
    if shape.len() != 4 {
        return Err(TensorError::Shape(format!("{op}: expected [B, C, H, W], got {shape:?}")));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape().to_vec();
        check4(&s, "avg_pool2")?;
        if s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(TensorError::Shape(format!("avg_pool2: odd spatial size {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let quarter: T = lit(0.25);
        let mut out = Tensor::zeros(&[s[0], s[1], ho, wo]);
        for p in 0..planes {
            let src = &vx.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out.data_mut()[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * wo + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                }
            }
        }
        Ok(self.record(out, &[x], move || {
            Box::new(move |g, _| {
                let mut dx = Tensor::zeros(&s);
                for p in 0..planes {
                    let gs = &g.data()[p * ho * wo..(p + 1) * ho * wo];
                    let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
                    for y in 0..ho {
                        for xx in 0..wo {
                            let v = gs[y * wo + xx] * quarter;
                            let i = 2 * y * w + 2 * xx;
                            dst[i] = v;
                            dst[i + 1] = v;
                            dst[i + w] = v;
                            dst[i + w + 1] = v;
                        }
                    }
                }
                vec![Some(dx)]
            })
        }))
    }

    /// Bilinear resize to `[out_h, out_w]` with half-pixel centres
    /// (the `align_corners = false` convention).
    pub fn upsample_bilinear(&self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape().to_vec();
        check4(&s, "upsample_bilinear")?;
        if out_h == 0 || out_w == 0 || s[2] == 0 || s[3] == 0 {
            return Err(TensorError::Shape("upsample_bilinear: empty size".into()));
        }
        let (h, w) = (s[2], s[3]);
        let ty: Vec<(usize, usize, T)> = axis_taps(h, out_h).into_iter().map(|(a, b, f)| (a, b, lit(f))).collect();
        let tx: Vec<(usize, usize, T)> = axis_taps(w, out_w).into_iter().map(|(a, b, f)| (a, b, lit(f))).collect();
        let mut out = Tensor::zeros(&[s[0], s[1], out_h, out_w]);
        // separable: resample rows horizontally, then blend row pairs
        let mut tmp = vec![T::zero(); h * out_w];
        for (src, dst) in vx
            .data()
            .chunks_exact(h * w)
            .zip(out.data_mut().chunks_exact_mut(out_h * out_w))
        {
            for (srow, trow) in src.chunks_exact(w).zip(tmp.chunks_exact_mut(out_w)) {
                for (t, &(x0, x1, fx)) in trow.iter_mut().zip(&tx) {
                    *t = srow[x0] + (srow[x1] - srow[x0]) * fx;
                }
            }
            for (drow, &(y0, y1, fy)) in dst.chunks_exact_mut(out_w).zip(&ty) {
                let (r0, r1) = (&tmp[y0 * out_w..(y0 + 1) * out_w], &tmp[y1 * out_w..(y1 + 1) * out_w]);
                for ((d, &a), &b) in drow.iter_mut().zip(r0).zip(r1) {
                    *d = a + (b - a) * fy;
                }
            }
        }
        Ok(self.record(out, &[x], move || {
            Box::new(move |g, _| {
                let mut dx = Tensor::zeros(&s);
                let mut tmp = vec![T::zero(); h * out_w];
                for (gs, dst) in g
                    .data()
                    .chunks_exact(out_h * out_w)
                    .zip(dx.data_mut().chunks_exact_mut(h * w))
                {
                    tmp.fill(T::zero());
                    for (grow, &(y0, y1, fy)) in gs.chunks_exact(out_w).zip(&ty) {
                        let w0 = T::one() - fy;
                        for (t, &d) in tmp[y0 * out_w..(y0 + 1) * out_w].iter_mut().zip(grow) {
                            *t += d * w0;
                        }
                        for (t, &d) in tmp[y1 * out_w..(y1 + 1) * out_w].iter_mut().zip(grow) {
                            *t += d * fy;
                        }
                    }
                    for (trow, drow) in tmp.chunks_exact(out_w).zip(dst.chunks_exact_mut(w)) {
                        for (&t, &(x0, x1, fx)) in trow.iter().zip(&tx) {
                            drow[x0] += t * (T::one() - fx);
                            drow[x1] += t * fx;
                        }
                    }
                }
                vec![Some(dx)]
            })
        }))
    }
}
