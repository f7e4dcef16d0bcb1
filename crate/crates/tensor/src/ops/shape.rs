use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::{inverse_permutation, numel, Tensor};
use crate::{Result, TensorError};

use super::activation::split_axis;

impl<T: Scalar> Graph<T> {
    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let in_shape = vx.shape().to_vec();
        let out = (*vx).clone().reshape(shape)?;
        Ok(self.record(out, &[x], move || {
            Box::new(move |g, _| vec![Some(g.clone().reshape(&in_shape).expect("reshape back"))])
        }))
    }

    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(perm)?;
        let inv = inverse_permutation(perm);
        Ok(self.record(out, &[x], move || {
            Box::new(move |g, _| vec![Some(g.permute(&inv).expect("inverse permutation"))])
        }))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<_> = xs.iter().map(|&v| self.value(v)).collect();
        let first = vals
            .first()
            .ok_or_else(|| TensorError::Shape("concat of zero tensors".into()))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::Shape(format!("concat axis {} >= rank {}", axis, rank)));
        }
        for v in &vals {
            if v.rank() != rank
                || v.shape()[..axis] != first.shape()[..axis]
                || v.shape()[axis + 1..] != first.shape()[axis + 1..]
            {
                return Err(TensorError::Shape(format!(
                    "concat shape mismatch {:?} vs {:?} on axis {}",
                    v.shape(),
                    first.shape(),
                    axis
                )));
            }
        }
        let sizes: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for (v, &s) in vals.iter().zip(&sizes) {
                data.extend_from_slice(&v.data()[o * s * inner..(o + 1) * s * inner]);
            }
        }
        let out = Tensor::from_vec(&shape, data)?;
        let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
        Ok(self.record(out, xs, move || {
            Box::new(move |g, need| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(sizes.len());
                for (i, &s) in sizes.iter().enumerate() {
                    if need[i] {
                        let mut d = Vec::with_capacity(outer * s * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            d.extend_from_slice(&g.data()[base..base + s * inner]);
                        }
                        grads.push(Some(Tensor::from_vec(&shapes[i], d).expect("concat grad")));
                    } else {
                        grads.push(None);
                    }
                    offset += s;
                }
                grads
            })
        }))
    }

    /// Slice `[start, start + len)` of `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() || start + len > vx.shape()[axis] {
            return Err(TensorError::Shape(format!(
                "narrow [{}, {}) out of range on axis {} of {:?}",
                start,
                start + len,
                axis,
                vx.shape()
            )));
        }
        let full = vx.shape().to_vec();
        let (outer, n, inner) = split_axis(&full, axis);
        let mut shape = full.clone();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&vx.data()[base..base + len * inner]);
        }
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.record(out, &[x], move || {
            Box::new(move |g, _| {
                let mut d = Tensor::zeros(&full);
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    d.data_mut()[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(d)]
            })
        }))
    }
}
