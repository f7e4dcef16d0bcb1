use crate::graph::{Graph, Var};
use crate::kernels::conv::{conv2d, conv2d_backward, ConvGeom};
use crate::kernels::deform::{deform_conv2d, deform_conv2d_backward};
use crate::kernels::pac::{pac_conv2d, pac_conv2d_backward};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Result, TensorError};

/// Validates `x: [B, C, H, W]` against `w: [O, C, k, k]`.
fn geometry(x: &[usize], w: &[usize], pad: usize) -> Result<(usize, usize, ConvGeom)> {
    if x.len() != 4 || w.len() != 4 || w[2] != w[3] || x[1] != w[1] {
        return Err(TensorError::Shape(format!(
            "conv2d: input {:?} incompatible with weight {:?}",
            x, w
        )));
    }
    let g = ConvGeom {
        channels: x[1],
        height: x[2],
        width: x[3],
        kernel: w[2],
        pad,
    };
    if x[2] + 2 * pad < w[2] || x[3] + 2 * pad < w[2] {
        return Err(TensorError::Shape(format!("conv2d: kernel larger than padded input {:?}", x)));
    }
    Ok((x[0], w[0], g))
}

fn check_bias<T: Scalar>(b: Option<&Tensor<T>>, out: usize) -> Result<()> {
    match b {
        Some(b) if b.shape() != [out] => Err(TensorError::Shape(format!(
            "conv bias {:?} for {} output channels",
            b.shape(),
            out
        ))),
        _ => Ok(()),
    }
}

impl<T: Scalar> Graph<T> {
    /// Stride-1 convolution with symmetric zero padding.
    pub fn conv2d(&self, x: Var, weight: Var, bias: Option<Var>, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(weight));
        let vb = bias.map(|b| self.value(b));
        let (batch, oc, g) = geometry(vx.shape(), vw.shape(), pad)?;
        check_bias(vb.as_deref(), oc)?;
        let out = conv2d(vx.data(), batch, &g, vw.data(), oc, vb.as_ref().map(|b| b.data()));
        let out = Tensor::from_vec(&[batch, oc, g.out_h(), g.out_w()], out)?;
        let parents: Vec<Var> = [Some(x), Some(weight), bias].into_iter().flatten().collect();
        Ok(self.record(out, &parents, move || {
            Box::new(move |gr, need| {
                let need_db = need.get(2).copied().unwrap_or(false);
                let (dx, dw, db) = conv2d_backward(
                    vx.data(),
                    batch,
                    &g,
                    vw.data(),
                    oc,
                    gr.data(),
                    need[0],
                    need[1],
                    need_db,
                );
                let mut grads = vec![
                    dx.map(|d| Tensor::from_vec(vx.shape(), d).expect("dx")),
                    dw.map(|d| Tensor::from_vec(vw.shape(), d).expect("dw")),
                ];
                if need.len() > 2 {
                    grads.push(db.map(|d| Tensor::from_vec(&[oc], d).expect("db")));
                }
                grads
            })
        }))
    }

    /// Modulated deformable convolution.
    ///
    /// `offset` is `[B, 2k², Ho, Wo]` (pairs of vertical/horizontal shifts per
    /// tap), `mask` is `[B, k², Ho, Wo]`.
    pub fn deform_conv2d(
        &self,
        x: Var,
        offset: Var,
        mask: Var,
        weight: Var,
        bias: Option<Var>,
        pad: usize,
    ) -> Result<Var> {
        let (vx, vo, vm, vw) = (self.value(x), self.value(offset), self.value(mask), self.value(weight));
        let vb = bias.map(|b| self.value(b));
        let (batch, oc, g) = geometry(vx.shape(), vw.shape(), pad)?;
        check_bias(vb.as_deref(), oc)?;
        let k2 = g.taps();
        let expect_off = [batch, 2 * k2, g.out_h(), g.out_w()];
        let expect_mask = [batch, k2, g.out_h(), g.out_w()];
        if vo.shape() != expect_off || vm.shape() != expect_mask {
            return Err(TensorError::Shape(format!(
                "deform_conv2d: offset {:?} / mask {:?}, expected {:?} / {:?}",
                vo.shape(),
                vm.shape(),
                expect_off,
                expect_mask
            )));
        }
        let out = deform_conv2d(
            vx.data(),
            batch,
            &g,
            vo.data(),
            vm.data(),
            vw.data(),
            oc,
            vb.as_ref().map(|b| b.data()),
        );
        let out = Tensor::from_vec(&[batch, oc, g.out_h(), g.out_w()], out)?;
        let parents: Vec<Var> = [Some(x), Some(offset), Some(mask), Some(weight), bias]
            .into_iter()
            .flatten()
            .collect();
        Ok(self.record(out, &parents, move || {
            Box::new(move |gr, need| {
                let need_db = need.get(4).copied().unwrap_or(false);
                let gs = deform_conv2d_backward(
                    vx.data(),
                    batch,
                    &g,
                    vo.data(),
                    vm.data(),
                    vw.data(),
                    oc,
                    gr.data(),
                    [need[0], need[1], need[2], need[3], need_db],
                );
                let mut grads = vec![
                    gs.dx.map(|d| Tensor::from_vec(vx.shape(), d).expect("dx")),
                    gs.doffset.map(|d| Tensor::from_vec(vo.shape(), d).expect("doffset")),
                    gs.dmask.map(|d| Tensor::from_vec(vm.shape(), d).expect("dmask")),
                    gs.dweight.map(|d| Tensor::from_vec(vw.shape(), d).expect("dw")),
                ];
                if need.len() > 4 {
                    grads.push(gs.dbias.map(|d| Tensor::from_vec(&[oc], d).expect("db")));
                }
                grads
            })
        }))
    }

    /// Pixel-adaptive convolution of `x` guided by `guide` (`[B, G, H, W]`).
    pub fn pac_conv2d(&self, x: Var, guide: Var, weight: Var, bias: Option<Var>, pad: usize) -> Result<Var> {
        let (vx, vg, vw) = (self.value(x), self.value(guide), self.value(weight));
        let vb = bias.map(|b| self.value(b));
        let (batch, oc, g) = geometry(vx.shape(), vw.shape(), pad)?;
        check_bias(vb.as_deref(), oc)?;
        if g.kernel % 2 == 0 || 2 * pad + 1 != g.kernel {
            return Err(TensorError::Shape(
                "pac_conv2d needs an odd kernel with same padding".into(),
            ));
        }
        let gs = vg.shape();
        if gs.len() != 4 || gs[0] != batch || gs[2] != g.height || gs[3] != g.width {
            return Err(TensorError::Shape(format!(
                "pac_conv2d: guidance {:?} does not match input {:?}",
                gs,
                vx.shape()
            )));
        }
        let gc = gs[1];
        let out = pac_conv2d(
            vx.data(),
            batch,
            &g,
            vg.data(),
            gc,
            vw.data(),
            oc,
            vb.as_ref().map(|b| b.data()),
        );
        let out = Tensor::from_vec(&[batch, oc, g.out_h(), g.out_w()], out)?;
        let parents: Vec<Var> = [Some(x), Some(guide), Some(weight), bias]
            .into_iter()
            .flatten()
            .collect();
        Ok(self.record(out, &parents, move || {
            Box::new(move |gr, need| {
                let need_db = need.get(3).copied().unwrap_or(false);
                let gsr = pac_conv2d_backward(
                    vx.data(),
                    batch,
                    &g,
                    vg.data(),
                    gc,
                    vw.data(),
                    oc,
                    gr.data(),
                    [need[0], need[1], need[2], need_db],
                );
                let mut grads = vec![
                    gsr.dx.map(|d| Tensor::from_vec(vx.shape(), d).expect("dx")),
                    gsr.dguide.map(|d| Tensor::from_vec(vg.shape(), d).expect("dguide")),
                    gsr.dweight.map(|d| Tensor::from_vec(vw.shape(), d).expect("dw")),
                ];
                if need.len() > 3 {
                    grads.push(gsr.dbias.map(|d| Tensor::from_vec(&[oc], d).expect("db")));
                }
                grads
            })
        }))
    }
}
