//! The Cell-DETR network.
//!
//! A residual CNN backbone produces an 8×8 feature grid that a transformer
//! encoder/decoder turns into `N` query embeddings. Each query yields a class
//! distribution, a bounding box and (through attention maps and a CNN decoder
//! with backbone skips) a mask; masks compete through a softmax over queries.

mod layers;
pub mod pade;
mod segmentation;
mod transformer;

use celldetr_tensor::{Graph, Group, ParamStore, Scalar, Tensor, Var};

pub use layers::{Activation, BlockKind};

use layers::{Builder, Conv2d, Linear, ResBlock};
use segmentation::{SegAttention, SegDecoder};
use transformer::{Transformer, TransformerShape};

use crate::boxmatch::BoundingBox;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::losses::PredictionSet;

/// Parameter group of the backbone (smaller learning rate).
pub const BACKBONE_GROUP: Group = Group(0);
/// Parameter group of everything else.
pub const HEAD_GROUP: Group = Group(1);

/// Graph nodes produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `[B, N, K]`, softmax over classes.
    pub class_probs: Var,
    /// `[B, N, 4]` in normalized `(cx, cy, w, h)`.
    pub boxes: Var,
    /// `[B, N, H, W]`.
    pub mask_logits: Var,
    /// `[B, N, H, W]`, softmax over queries.
    pub mask_probs: Var,
    /// Backbone output `[B, C4, g, g]`.
    pub features: Var,
    /// Encoder output `[B, g², D]`.
    pub memory: Var,
    /// Decoder output `[B, N, D]`.
    pub decoded: Var,
    /// Segmentation attention maps `[B, N·heads, g, g]`.
    pub attention: Var,
}

#[derive(Debug, Clone)]
struct Layers {
    backbone: Vec<ResBlock>,
    projection: Conv2d,
    pos_embed: celldetr_tensor::ParamId,
    query_embed: celldetr_tensor::ParamId,
    transformer: Transformer,
    class_head: Linear,
    box_head: Vec<Linear>,
    box_acts: Vec<Activation>,
    seg_attention: SegAttention,
    seg_decoder: SegDecoder,
}

/// Network parameters plus the layer layout needed to run them.
#[derive(Debug, Clone)]
pub struct CellDetr<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    layers: Layers,
}

impl<T: Scalar> CellDetr<T> {
    /// Builds a freshly initialized network.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, seed, c.variant, c.leaky_slope);
        let f = c.backbone_filters;

        b.group = BACKBONE_GROUP;
        let backbone = b.scope("backbone", |b| {
            let mut blocks = Vec::new();
            let mut in_c = c.in_channels;
            for (i, &out_c) in f.iter().enumerate() {
                let kind = if i < 3 { BlockKind::Bottleneck } else { BlockKind::Basic };
                blocks.push(ResBlock::new(b, &format!("block{}", i + 1), kind, in_c, out_c));
                in_c = out_c;
            }
            blocks
        });

        b.group = HEAD_GROUP;
        let d = c.transformer_dim;
        let grid = c.grid_size();
        let projection = Conv2d::new(&mut b, "input_proj", f[3], d, 1, true);
        let pos_embed = b.uniform("pos_embed", &[grid * grid, d], 0.0, 1.0);
        let query_embed = b.randn("query_embed", &[c.num_queries, d], 1.0);
        let transformer = Transformer::new(
            &mut b,
            "transformer",
            &TransformerShape {
                dim: d,
                heads: c.transformer_heads,
                hidden: c.ffnn_hidden,
                encoder_layers: c.encoder_blocks,
                decoder_layers: c.decoder_blocks,
                dropout: c.dropout,
            },
        );
        let class_head = Linear::new(&mut b, "class_head", d, c.num_classes);
        let box_head = vec![
            Linear::new(&mut b, "box_head.0", d, c.ffnn_hidden),
            Linear::new(&mut b, "box_head.1", c.ffnn_hidden, c.ffnn_hidden),
            Linear::new(&mut b, "box_head.2", c.ffnn_hidden, 4),
        ];
        let box_acts = vec![
            Activation::new(&mut b, "box_head.act0"),
            Activation::new(&mut b, "box_head.act1"),
        ];
        let seg_attention = SegAttention::new(&mut b, "seg_attention", d, c.seg_heads);
        let seg_decoder = SegDecoder::new(
            &mut b,
            "seg_decoder",
            d + c.num_queries * c.seg_heads,
            [f[2], f[1], f[0]],
            [f[2], f[1], f[0]],
            c.guidance_channels,
            c.num_queries,
        );
        drop(b);
        Ok(CellDetr {
            config: config.clone(),
            store,
            layers: Layers {
                backbone,
                projection,
                pos_embed,
                query_embed,
                transformer,
                class_head,
                box_head,
                box_acts,
                seg_attention,
                seg_decoder,
            },
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable()
    }

    /// Runs the network on normalized images `[B, C, S, S]`.
    pub fn forward(&self, g: &Graph<T>, images: Var) -> Result<ForwardOutput> {
        let c = &self.config;
        let s = &self.store;
        let l = &self.layers;
        let shape = g.shape(images);
        if shape.len() != 4 || shape[1] != c.in_channels || shape[2] != c.input_size || shape[3] != c.input_size {
            return Err(Error::Shape(format!(
                "expected images [B, {}, {}, {}], got {:?}",
                c.in_channels, c.input_size, c.input_size, shape
            )));
        }
        let batch = shape[0];
        let grid = c.grid_size();
        let d = c.transformer_dim;

        let mut h = images;
        let mut skips = Vec::new();
        for block in &l.backbone {
            h = g.avg_pool2(block.forward(g, s, h)?)?;
            skips.push(h);
        }
        let features = skips.pop().expect("four backbone blocks");

        let proj = l.projection.forward(g, s, features)?;
        let tokens = g.permute(g.reshape(proj, &[batch, d, grid * grid])?, &[0, 2, 1])?;
        let pos = g.param(s, l.pos_embed);
        let queries = g.param(s, l.query_embed);
        let (memory, decoded) = l.transformer.forward(g, s, tokens, pos, queries)?;

        let class_probs = g.softmax(l.class_head.forward(g, s, decoded)?, 2)?;
        let mut bx = decoded;
        for (i, lin) in l.box_head.iter().enumerate() {
            bx = lin.forward(g, s, bx)?;
            if let Some(act) = l.box_acts.get(i) {
                bx = act.forward(g, s, bx)?;
            }
        }
        let boxes = g.sigmoid(bx);

        let attention = l.seg_attention.forward(g, s, decoded, memory, grid)?;
        let seg_in = g.concat(&[proj, attention], 1)?;
        let mask_logits = l
            .seg_decoder
            .forward(g, s, seg_in, [skips[2], skips[1], skips[0]], c.input_size)?;
        let mask_probs = g.softmax(mask_logits, 1)?;
        Ok(ForwardOutput {
            class_probs,
            boxes,
            mask_logits,
            mask_probs,
            features,
            memory,
            decoded,
            attention,
        })
    }

    /// Splits the batched outputs into per-image prediction sets.
    pub fn predictions(&self, g: &Graph<T>, out: &ForwardOutput) -> Vec<PredictionSet<T>> {
        let (cp, bx, mp) = (g.value(out.class_probs), g.value(out.boxes), g.value(out.mask_probs));
        let (n, k) = (self.config.num_queries, self.config.num_classes);
        let size = self.config.input_size;
        let hw = size * size;
        (0..cp.dim(0))
            .map(|b| PredictionSet {
                num_queries: n,
                num_classes: k,
                height: size,
                width: size,
                class_probs: cp.data()[b * n * k..(b + 1) * n * k].to_vec(),
                boxes: bx.data()[b * n * 4..(b + 1) * n * 4]
                    .chunks_exact(4)
                    .map(BoundingBox::from_slice)
                    .collect(),
                mask_probs: mp.data()[b * n * hw..(b + 1) * n * hw].to_vec(),
            })
            .collect()
    }

    /// Inference on a batch of normalized images `[B, C, S, S]`.
    pub fn infer(&self, images: Tensor<T>) -> Result<Vec<PredictionSet<T>>> {
        let g = Graph::inference();
        let x = g.input(images);
        let out = self.forward(&g, x)?;
        Ok(self.predictions(&g, &out))
    }
}

/// Trainable parameter count of a freshly built network.
pub fn count_parameters(config: &ModelConfig) -> Result<usize> {
    Ok(CellDetr::<f32>::new(config, 0)?.num_parameters())
}
