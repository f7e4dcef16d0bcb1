use crate::graph::{Graph, Var};
use crate::scalar::{gemm, Mat, Scalar};
use crate::tensor::Tensor;
use crate::{Result, TensorError};

/// Matrix view of batch item `i` of a `[.., r, c]` tensor, optionally transposed.
fn view<T: Scalar>(t: &Tensor<T>, i: usize, transpose: bool) -> Mat<'_, T> {
    let r = t.rank();
    let (rows, cols) = (t.shape()[r - 2], t.shape()[r - 1]);
    let m = Mat::new(&t.data()[i * rows * cols..(i + 1) * rows * cols], rows, cols);
    if transpose {
        m.t()
    } else {
        m
    }
}

impl<T: Scalar> Graph<T> {
    /// Batched matrix product over identical leading dimensions:
    /// `op(a) · op(b)` where `op` optionally transposes the last two axes.
    pub fn matmul(&self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (ra, rb) = (va.rank(), vb.rank());
        if ra < 2 || ra != rb || va.shape()[..ra - 2] != vb.shape()[..rb - 2] {
            return Err(TensorError::Shape(format!(
                "matmul batch mismatch {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let batch: usize = va.shape()[..ra - 2].iter().product();
        let (m, k) = {
            let v = view(&va, 0, trans_a);
            (v.rows, v.cols)
        };
        let (k2, n) = {
            let v = view(&vb, 0, trans_b);
            (v.rows, v.cols)
        };
        if k != k2 {
            return Err(TensorError::Shape(format!(
                "matmul inner mismatch {:?}{} vs {:?}{}",
                va.shape(),
                if trans_a { "ᵀ" } else { "" },
                vb.shape(),
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let mut shape = va.shape()[..ra - 2].to_vec();
        shape.extend([m, n]);
        let mut out = Tensor::zeros(&shape);
        for i in 0..batch {
            gemm(
                T::one(),
                view(&va, i, trans_a),
                view(&vb, i, trans_b),
                T::zero(),
                &mut out.data_mut()[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.record(out, &[a, b], move || {
            Box::new(move |g, need| {
                let gview = |i: usize, t: bool| view(g, i, t);
                // C = op(A) op(B): dop(A) = dC op(B)ᵀ, dop(B) = op(A)ᵀ dC
                let ga = need[0].then(|| {
                    let mut d = Tensor::zeros(va.shape());
                    let (rows, cols) = (va.shape()[ra - 2], va.shape()[ra - 1]);
                    for i in 0..batch {
                        let dst = &mut d.data_mut()[i * rows * cols..(i + 1) * rows * cols];
                        if trans_a {
                            // dA = (dC op(B)ᵀ)ᵀ = op(B) dCᵀ
                            gemm(T::one(), view(&vb, i, trans_b), gview(i, true), T::zero(), dst);
                        } else {
                            gemm(T::one(), gview(i, false), view(&vb, i, !trans_b), T::zero(), dst);
                        }
                    }
                    d
                });
                let gb = need[1].then(|| {
                    let mut d = Tensor::zeros(vb.shape());
                    let (rows, cols) = (vb.shape()[rb - 2], vb.shape()[rb - 1]);
                    for i in 0..batch {
                        let dst = &mut d.data_mut()[i * rows * cols..(i + 1) * rows * cols];
                        if trans_b {
                            // dB = (op(A)ᵀ dC)ᵀ = dCᵀ op(A)
                            gemm(T::one(), gview(i, true), view(&va, i, trans_a), T::zero(), dst);
                        } else {
                            gemm(T::one(), view(&va, i, !trans_a), gview(i, false), T::zero(), dst);
                        }
                    }
                    d
                });
                vec![ga, gb]
            })
        }))
    }

    /// Affine map over the last axis: `x · wᵀ + b` with `w` shaped `[out, in]`.
    pub fn linear(&self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(weight));
        let in_f = *vx.shape().last().unwrap_or(&0);
        if vw.rank() != 2 || vw.shape()[1] != in_f {
            return Err(TensorError::Shape(format!(
                "linear: input {:?} vs weight {:?}",
                vx.shape(),
                vw.shape()
            )));
        }
        let out_f = vw.shape()[0];
        let rows = vx.len() / in_f.max(1);
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = out_f;
        let mut out = Tensor::zeros(&shape);
        let vbias = bias.map(|b| self.value(b));
        if let Some(vb) = &vbias {
            if vb.shape() != [out_f] {
                return Err(TensorError::Shape(format!("linear bias {:?}", vb.shape())));
            }
            for row in out.data_mut().chunks_exact_mut(out_f) {
                row.copy_from_slice(vb.data());
            }
        }
        gemm(
            T::one(),
            Mat::new(vx.data(), rows, in_f),
            Mat::new(vw.data(), out_f, in_f).t(),
            if vbias.is_some() { T::one() } else { T::zero() },
            out.data_mut(),
        );
        let parents: Vec<Var> = [Some(x), Some(weight), bias].into_iter().flatten().collect();
        Ok(self.record(out, &parents, move || {
            Box::new(move |g, need| {
                let gm = Mat::new(g.data(), rows, out_f);
                let dx = need[0].then(|| {
                    let mut d = Tensor::zeros(vx.shape());
                    gemm(T::one(), gm, Mat::new(vw.data(), out_f, in_f), T::zero(), d.data_mut());
                    d
                });
                let dw = need[1].then(|| {
                    let mut d = Tensor::zeros(vw.shape());
                    gemm(T::one(), gm.t(), Mat::new(vx.data(), rows, in_f), T::zero(), d.data_mut());
                    d
                });
                let mut grads = vec![dx, dw];
                if need.len() > 2 {
                    grads.push(need[2].then(|| {
                        let mut d = Tensor::zeros(&[out_f]);
                        for row in g.data().chunks_exact(out_f) {
                            for (o, &v) in d.data_mut().iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        d
                    }));
                }
                grads
            })
        }))
    }
}
