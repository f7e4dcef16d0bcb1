use rand::Rng;

use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Result, TensorError};

/// Splits `shape` around `axis` into (outer, axis length, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Graph<T> {
    pub fn leaky_relu(&self, x: Var, slope: T) -> Var {
        let vx = self.value(x);
        let out = vx.map(|v| v.max(T::zero()) + slope * v.min(T::zero()));
        self.record(out, &[x], move || {
            Box::new(move |g, _| {
                vec![Some(g.zip_map(&vx, |d, v| {
                    let k = if v > T::zero() { T::one() } else { slope };
                    d * k
                }))]
            })
        })
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.record_out(out, &[x], move |y| {
            Box::new(move |g, _| vec![Some(g.zip_map(&y, |d, s| d * s * (T::one() - s)))])
        })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() {
            return Err(TensorError::Shape(format!(
                "softmax axis {} out of range for {:?}",
                axis,
                vx.shape()
            )));
        }
        let (_, n, inner) = split_axis(vx.shape(), axis);
        let mut y = (*vx).clone();
        if inner == 1 {
            for row in y.data_mut().chunks_exact_mut(n) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                let inv = T::one() / s;
                row.iter_mut().for_each(|v| *v *= inv);
            }
        } else {
            // rows of length `inner` are contiguous; reduce across them
            let mut m = vec![T::zero(); inner];
            let mut s = vec![T::zero(); inner];
            for block in y.data_mut().chunks_exact_mut(n * inner) {
                m.copy_from_slice(&block[..inner]);
                for row in block.chunks_exact(inner).skip(1) {
                    for (a, &v) in m.iter_mut().zip(row) {
                        *a = a.max(v);
                    }
                }
                s.fill(T::zero());
                for row in block.chunks_exact_mut(inner) {
                    for ((v, &a), acc) in row.iter_mut().zip(&m).zip(s.iter_mut()) {
                        *v = (*v - a).exp();
                        *acc += *v;
                    }
                }
                s.iter_mut().for_each(|v| *v = T::one() / *v);
                for row in block.chunks_exact_mut(inner) {
                    for (v, &r) in row.iter_mut().zip(&s) {
                        *v *= r;
                    }
                }
            }
        }
        Ok(self.record_out(y, &[x], move |yc| {
            Box::new(move |g, _| {
                let mut dx = g.clone();
                let yd = yc.data();
                let dd = dx.data_mut();
                let mut dot = vec![T::zero(); inner];
                for (gb, yb) in dd.chunks_exact_mut(n * inner).zip(yd.chunks_exact(n * inner)) {
                    dot.fill(T::zero());
                    for (gr, yr) in gb.chunks_exact(inner).zip(yb.chunks_exact(inner)) {
                        for ((acc, &a), &b) in dot.iter_mut().zip(gr).zip(yr) {
                            *acc += a * b;
                        }
                    }
                    for (gr, yr) in gb.chunks_exact_mut(inner).zip(yb.chunks_exact(inner)) {
                        for ((v, &b), &d) in gr.iter_mut().zip(yr).zip(&dot) {
                            *v = b * (*v - d);
                        }
                    }
                }
                vec![Some(dx)]
            })
        }))
    }

    /// Inverted dropout; identity outside training mode.
    pub fn dropout(&self, x: Var, p: f64) -> Var {
        if !self.is_train() || p <= 0.0 {
            return x;
        }
        let vx = self.value(x);
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> = self.with_rng(|rng| {
            (0..vx.len())
                .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
                .collect()
        });
        let mask = Tensor::from_vec(vx.shape(), mask).expect("mask shape");
        let out = vx.zip_map(&mask, |v, m| v * m);
        self.record(out, &[x], move || {
            Box::new(move |g, _| vec![Some(g.zip_map(&mask, |d, m| d * m))])
        })
    }

    /// Rational activation `P(x) / (1 + |Σ_j b_j x^j|)` with `P(x) = Σ_i a_i x^i`.
    ///
    /// `numerator` holds `a_0..a_m`, `denominator` holds `b_1..b_n`.
    pub fn pade(&self, x: Var, numerator: Var, denominator: Var) -> Result<Var> {
        let (vx, va, vb) = (self.value(x), self.value(numerator), self.value(denominator));
        if va.rank() != 1 || vb.rank() != 1 || va.is_empty() {
            return Err(TensorError::Shape("pade coefficients must be non-empty vectors".into()));
        }
        let out = vx.map(|v| pade_eval(v, va.data(), vb.data()).0);
        Ok(self.record(out, &[x, numerator, denominator], move || {
            Box::new(move |g, need| {
                let (a, b) = (va.data(), vb.data());
                let mut dx = need[0].then(|| Tensor::zeros(vx.shape()));
                let mut da = vec![T::zero(); a.len()];
                let mut db = vec![T::zero(); b.len()];
                for (i, (&v, &d)) in vx.data().iter().zip(g.data()).enumerate() {
                    let e = pade_eval(v, a, b);
                    if let Some(dx) = dx.as_mut() {
                        dx.data_mut()[i] = d * e.1;
                    }
                    if need[1] || need[2] {
                        // powers of x, shared by both coefficient gradients
                        let mut pw = T::one();
                        let q_inv = T::one() / e.2;
                        for (j, daj) in da.iter_mut().enumerate() {
                            if j > 0 {
                                pw *= v;
                            }
                            *daj += d * pw * q_inv;
                        }
                        let mut pw = T::one();
                        let coef = -e.3 * e.4 * q_inv * q_inv;
                        for dbj in db.iter_mut() {
                            pw *= v;
                            *dbj += d * coef * pw;
                        }
                    }
                }
                vec![
                    dx,
                    need[1].then(|| Tensor::from_vec(&[a.len()], da).expect("shape")),
                    need[2].then(|| Tensor::from_vec(&[b.len()], db).expect("shape")),
                ]
            })
        }))
    }
}

/// Returns `(f(x), f'(x), Q(x), P(x), sign(S(x)))` of the rational activation.
pub fn pade_eval<T: Scalar>(x: T, a: &[T], b: &[T]) -> (T, T, T, T, T) {
    // Horner for P and P'
    let mut p = T::zero();
    let mut dp = T::zero();
    for &c in a.iter().rev() {
        dp = dp * x + p;
        p = p * x + c;
    }
    // S(x) = Σ_{j>=1} b_j x^j = x * (b_1 + b_2 x + ...)
    let mut s_inner = T::zero();
    let mut ds_inner = T::zero();
    for &c in b.iter().rev() {
        ds_inner = ds_inner * x + s_inner;
        s_inner = s_inner * x + c;
    }
    let s = x * s_inner;
    let ds = s_inner + x * ds_inner;
    let sign = if s > T::zero() {
        T::one()
    } else if s < T::zero() {
        -T::one()
    } else {
        T::zero()
    };
    let q = T::one() + s.abs();
    let f = p / q;
    let df = dp / q - p * sign * ds / (q * q);
    (f, df, q, p, sign)
}
