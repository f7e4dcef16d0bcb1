use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Result, TensorError};

impl<T: Scalar> Graph<T> {
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::Shape(format!(
                "add: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let out = va.zip_map(&vb, |x, y| x + y);
        Ok(self.record(out, &[a, b], || {
            Box::new(|g, need| vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())])
        }))
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`.
    pub fn add_broadcast(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::Shape(format!(
                "add_broadcast: {:?} is not a suffix of {:?}",
                sb, sa
            )));
        }
        let inner = vb.len();
        let mut out = (*va).clone();
        for chunk in out.data_mut().chunks_exact_mut(inner.max(1)) {
            for (o, &v) in chunk.iter_mut().zip(vb.data()) {
                *o += v;
            }
        }
        let b_shape = sb.to_vec();
        Ok(self.record(out, &[a, b], move || {
            Box::new(move |g, need| {
                let gb = need[1].then(|| {
                    let mut acc = Tensor::zeros(&b_shape);
                    for chunk in g.data().chunks_exact(inner.max(1)) {
                        for (o, &v) in acc.data_mut().iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    acc
                });
                vec![need[0].then(|| g.clone()), gb]
            })
        }))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::Shape(format!(
                "mul: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let out = va.zip_map(&vb, |x, y| x * y);
        Ok(self.record(out, &[a, b], move || {
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.zip_map(&vb, |d, y| d * y)),
                    need[1].then(|| g.zip_map(&va, |d, x| d * x)),
                ]
            })
        }))
    }

    pub fn scale(&self, a: Var, factor: T) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.record(out, &[a], move || {
            Box::new(move |g, _| vec![Some(g.map(|d| d * factor))])
        })
    }
}
