//! Query-conditioned segmentation: multi-head attention maps between decoded
//! queries and encoder memory, followed by a convolutional decoder with skip
//! connections from the backbone.

use celldetr_tensor::{lit, Graph, ParamStore, Scalar, Var};

use super::layers::{Activation, BatchNorm2d, BlockKind, Builder, Conv2d, Linear, ResBlock};
use crate::config::Variant;
use crate::error::Result;

/// Attention maps `softmax(q kᵀ / √d_h)` over encoder positions, one per
/// query and head.
#[derive(Debug, Clone)]
pub struct SegAttention {
    q: Linear,
    k: Linear,
    heads: usize,
}

impl SegAttention {
    pub(crate) fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, dim: usize, heads: usize) -> Self {
        b.scope(name, |b| SegAttention {
            q: Linear::new(b, "q_proj", dim, dim),
            k: Linear::new(b, "k_proj", dim, dim),
            heads,
        })
    }

    /// `decoded` is `[B, N, D]`, `memory` is `[B, L, D]` with `L = grid²`.
    /// Returns `[B, N·heads, grid, grid]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        s: &ParamStore<T>,
        decoded: Var,
        memory: Var,
        grid: usize,
    ) -> Result<Var> {
        let ds = g.shape(decoded);
        let (batch, n, dim) = (ds[0], ds[1], ds[2]);
        let l = g.shape(memory)[1];
        let dh = dim / self.heads;
        let q = g.reshape(self.q.forward(g, s, decoded)?, &[batch, n, self.heads, dh])?;
        let q = g.permute(q, &[0, 2, 1, 3])?;
        let k = g.reshape(self.k.forward(g, s, memory)?, &[batch, l, self.heads, dh])?;
        let k = g.permute(k, &[0, 2, 1, 3])?;
        let scores = g.scale(g.matmul(q, k, false, true)?, lit(1.0 / (dh as f64).sqrt()));
        let attn = g.permute(g.softmax(scores, 3)?, &[0, 2, 1, 3])?;
        Ok(g.reshape(attn, &[batch, n * self.heads, grid, grid])?)
    }
}

/// How upsampled decoder features are merged with a backbone skip.
#[derive(Debug, Clone)]
pub enum SkipFusion {
    /// Element-wise sum, with a 1×1 projection if the widths differ.
    Add { adapter: Option<Conv2d> },
    /// Pixel-adaptive convolution of the decoder features, guided by a 1×1
    /// projection of the skip features.
    Pac {
        guidance: Conv2d,
        weight: celldetr_tensor::ParamId,
        bias: celldetr_tensor::ParamId,
    },
}

impl SkipFusion {
    fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, channels: usize, skip: usize, guide: usize) -> Self {
        b.scope(name, |b| match b.variant {
            Variant::A => SkipFusion::Add {
                adapter: (skip != channels).then(|| Conv2d::new(b, "adapter", skip, channels, 1, false)),
            },
            Variant::B => {
                let guidance = b.scope("guidance", |b| Conv2d {
                    weight: b.randn("weight", &[guide, skip, 1, 1], 0.01),
                    bias: Some(b.zeros("bias", &[guide])),
                    kernel: 1,
                    offsets: None,
                });
                let fan_in = channels * 9;
                SkipFusion::Pac {
                    guidance,
                    weight: b.randn("weight", &[channels, channels, 3, 3], (1.0 / fan_in as f64).sqrt()),
                    bias: b.zeros("bias", &[channels]),
                }
            }
        })
    }

    fn forward<T: Scalar>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var, skip: Var) -> Result<Var> {
        match self {
            SkipFusion::Add { adapter } => {
                let skip = match adapter {
                    Some(conv) => conv.forward(g, s, skip)?,
                    None => skip,
                };
                Ok(g.add(x, skip)?)
            }
            SkipFusion::Pac { guidance, weight, bias } => {
                let guide = guidance.forward(g, s, skip)?;
                Ok(g.pac_conv2d(x, guide, g.param(s, *weight), Some(g.param(s, *bias)), 1)?)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SegDecoder {
    stages: Vec<(ResBlock, SkipFusion)>,
    final_conv: Conv2d,
    final_bn: BatchNorm2d,
    final_act: Activation,
    out_conv: Conv2d,
}

impl SegDecoder {
    /// `in_c` input channels at the token grid; `widths` are the output
    /// widths of the three upsampling stages and `skips` the matching
    /// backbone skip widths (deepest first).
    pub(crate) fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        in_c: usize,
        widths: [usize; 3],
        skips: [usize; 3],
        guide: usize,
        queries: usize,
    ) -> Self {
        b.scope(name, |b| {
            let mut stages = Vec::new();
            let mut c = in_c;
            for (i, (&w, &sk)) in widths.iter().zip(&skips).enumerate() {
                let kind = if i == 0 { BlockKind::Basic } else { BlockKind::Bottleneck };
                let block = ResBlock::new(b, &format!("block{}", i + 1), kind, c, w);
                let fusion = SkipFusion::new(b, &format!("fusion{}", i + 1), w, sk, guide);
                stages.push((block, fusion));
                c = w;
            }
            let hidden = c / 2;
            SegDecoder {
                stages,
                final_conv: Conv2d::new(b, "final.conv", c, hidden, 3, false),
                final_bn: BatchNorm2d::new(b, "final.bn", hidden),
                final_act: Activation::new(b, "final.act"),
                out_conv: Conv2d::new(b, "final.out", hidden, queries, 1, true),
            }
        })
    }

    /// Returns mask logits `[B, N, out_size, out_size]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        s: &ParamStore<T>,
        x: Var,
        skips: [Var; 3],
        out_size: usize,
    ) -> Result<Var> {
        let mut h = x;
        for ((block, fusion), skip) in self.stages.iter().zip(skips) {
            let sh = g.shape(h);
            h = g.upsample_bilinear(h, sh[2] * 2, sh[3] * 2)?;
            h = block.forward(g, s, h)?;
            h = fusion.forward(g, s, h, skip)?;
        }
        h = self.final_conv.forward(g, s, h)?;
        h = self.final_act.forward(g, s, self.final_bn.forward(g, s, h)?)?;
        h = g.upsample_bilinear(h, out_size, out_size)?;
        self.out_conv.forward(g, s, h)
    }
}
