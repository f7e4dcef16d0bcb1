use crate::graph::{Graph, Var};
use crate::params::{BufferId, ParamStore};
use crate::scalar::{lane_dot, lane_sq_dev, lane_sum, lit, Scalar};
use crate::tensor::Tensor;
use crate::{Result, TensorError};

/// Running-statistics handles of a batch-normalization layer.
#[derive(Debug, Clone, Copy)]
pub struct BatchNormStats {
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> Graph<T> {
    /// Batch normalization over `[B, C, H, W]`, per channel.
    ///
    /// Training mode normalizes with batch statistics and queues running
    /// statistic updates (see [`Graph::take_buffer_updates`]); eval mode uses
    /// the stored running statistics.
    pub fn batch_norm2d(
        &self,
        store: &ParamStore<T>,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BatchNormStats,
    ) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let s = vx.shape();
        if s.len() != 4 || vg.shape() != [s[1]] || vb.shape() != [s[1]] {
            return Err(TensorError::Shape(format!(
                "batch_norm2d: input {:?}, gamma {:?}",
                s,
                vg.shape()
            )));
        }
        let (batch, ch, hw) = (s[0], s[1], s[2] * s[3]);
        let count = batch * hw;
        let eps: T = lit(stats.eps);
        let (mean, var) = if self.is_train() {
            let mut mean = vec![T::zero(); ch];
            let mut var = vec![T::zero(); ch];
            let inv_n = T::one() / T::from_usize(count).expect("count");
            let plane = |b: usize, c: usize| &vx.data()[(b * ch + c) * hw..(b * ch + c + 1) * hw];
            for c in 0..ch {
                let m = (0..batch).map(|b| lane_sum(plane(b, c))).sum::<T>() * inv_n;
                mean[c] = m;
                var[c] = (0..batch).map(|b| lane_sq_dev(plane(b, c), m)).sum::<T>() * inv_n;
            }
            let mom: T = lit(stats.momentum);
            let unbias = if count > 1 {
                T::from_usize(count).expect("count") / T::from_usize(count - 1).expect("count")
            } else {
                T::one()
            };
            let rm = store.buffer(stats.running_mean);
            let rv = store.buffer(stats.running_var);
            let new_rm: Vec<T> = rm
                .data()
                .iter()
                .zip(&mean)
                .map(|(&r, &m)| (T::one() - mom) * r + mom * m)
                .collect();
            let new_rv: Vec<T> = rv
                .data()
                .iter()
                .zip(&var)
                .map(|(&r, &v)| (T::one() - mom) * r + mom * v * unbias)
                .collect();
            self.push_buffer_update(stats.running_mean, Tensor::from_vec(&[ch], new_rm)?);
            self.push_buffer_update(stats.running_var, Tensor::from_vec(&[ch], new_rv)?);
            (mean, var)
        } else {
            (
                store.buffer(stats.running_mean).data().to_vec(),
                store.buffer(stats.running_var).data().to_vec(),
            )
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut out = Tensor::zeros(s);
        for (p, (o, v)) in out
            .data_mut()
            .chunks_exact_mut(hw)
            .zip(vx.data().chunks_exact(hw))
            .enumerate()
        {
            let c = p % ch;
            let a = vg.data()[c] * inv_std[c];
            let shift = vb.data()[c] - a * mean[c];
            for (o, &v) in o.iter_mut().zip(v) {
                *o = a * v + shift;
            }
        }
        let train = self.is_train();
        Ok(self.record(out, &[x, gamma, beta], move || {
            Box::new(move |g, need| {
                // x̂ = (x - m) · s, so Σ d·x̂ = s (Σ d·x - m Σ d)
                let mut sum_d = vec![T::zero(); ch];
                let mut sum_dx = vec![T::zero(); ch];
                for (p, (d, v)) in g.data().chunks_exact(hw).zip(vx.data().chunks_exact(hw)).enumerate() {
                    let c = p % ch;
                    sum_d[c] += lane_sum(d);
                    sum_dx[c] += lane_dot(d, v);
                }
                let dbeta = sum_d.clone();
                let dgamma: Vec<T> = (0..ch)
                    .map(|c| inv_std[c] * (sum_dx[c] - mean[c] * sum_d[c]))
                    .collect();
                let dx = need[0].then(|| {
                    let mut dx = Tensor::zeros(vx.shape());
                    let n = T::from_usize(count).expect("count");
                    for (p, ((o, d), v)) in dx
                        .data_mut()
                        .chunks_exact_mut(hw)
                        .zip(g.data().chunks_exact(hw))
                        .zip(vx.data().chunks_exact(hw))
                        .enumerate()
                    {
                        let c = p % ch;
                        let scale = vg.data()[c] * inv_std[c];
                        // dx = scale (d - (dβ + x̂ dγ) / n), expanded to A d + B x + C
                        let (ka, kb, kc) = if train {
                            let kb = -scale * dgamma[c] * inv_std[c] / n;
                            (scale, kb, -scale * dbeta[c] / n - kb * mean[c])
                        } else {
                            (scale, T::zero(), T::zero())
                        };
                        for ((o, &d), &v) in o.iter_mut().zip(d).zip(v) {
                            *o = ka * d + kb * v + kc;
                        }
                    }
                    dx
                });
                vec![
                    dx,
                    need[1].then(|| Tensor::from_vec(&[ch], dgamma).expect("dgamma")),
                    need[2].then(|| Tensor::from_vec(&[ch], dbeta).expect("dbeta")),
                ]
            })
        }))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *vx.shape().last().unwrap_or(&0);
        if vg.shape() != [d] || vb.shape() != [d] || d == 0 {
            return Err(TensorError::Shape(format!(
                "layer_norm: input {:?}, gamma {:?}",
                vx.shape(),
                vg.shape()
            )));
        }
        let eps: T = lit(eps);
        let inv_d = T::one() / T::from_usize(d).expect("d");
        let rows = vx.len() / d;
        let mut xhat = Tensor::zeros(vx.shape());
        let mut inv_std = vec![T::zero(); rows];
        let mut out = Tensor::zeros(vx.shape());
        for r in 0..rows {
            let xs = &vx.data()[r * d..(r + 1) * d];
            let m = xs.iter().copied().sum::<T>() * inv_d;
            let v = xs.iter().map(|&a| (a - m) * (a - m)).sum::<T>() * inv_d;
            let is = T::one() / (v + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (xs[j] - m) * is;
                xhat.data_mut()[r * d + j] = xh;
                out.data_mut()[r * d + j] = vg.data()[j] * xh + vb.data()[j];
            }
        }
        Ok(self.record(out, &[x, gamma, beta], move || {
            Box::new(move |g, need| {
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = need[0].then(|| Tensor::zeros(xhat.shape()));
                for r in 0..rows {
                    let gs = &g.data()[r * d..(r + 1) * d];
                    let xh = &xhat.data()[r * d..(r + 1) * d];
                    let mut sum_dy = T::zero();
                    let mut sum_dy_xh = T::zero();
                    for j in 0..d {
                        dgamma[j] += gs[j] * xh[j];
                        dbeta[j] += gs[j];
                        let dyh = gs[j] * vg.data()[j];
                        sum_dy += dyh;
                        sum_dy_xh += dyh * xh[j];
                    }
                    if let Some(dx) = dx.as_mut() {
                        for j in 0..d {
                            let dyh = gs[j] * vg.data()[j];
                            dx.data_mut()[r * d + j] =
                                inv_std[r] * (dyh - (sum_dy + xh[j] * sum_dy_xh) * inv_d);
                        }
                    }
                }
                vec![
                    dx,
                    need[1].then(|| Tensor::from_vec(&[d], dgamma).expect("dgamma")),
                    need[2].then(|| Tensor::from_vec(&[d], dbeta).expect("dbeta")),
                ]
            })
        }))
    }
}
