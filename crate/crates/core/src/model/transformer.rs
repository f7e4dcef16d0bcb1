//! Post-norm transformer encoder/decoder with learned positional and query
//! embeddings.

use celldetr_tensor::{lit, Graph, ParamStore, Scalar, Tensor, Var};

use super::layers::{Activation, Builder, LayerNorm, Linear};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    dropout: f64,
}

impl MultiHeadAttention {
    pub(crate) fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, dim: usize, heads: usize, dropout: f64) -> Self {
        b.scope(name, |b| MultiHeadAttention {
            q: Linear::new(b, "q_proj", dim, dim),
            k: Linear::new(b, "k_proj", dim, dim),
            v: Linear::new(b, "v_proj", dim, dim),
            out: Linear::new(b, "out_proj", dim, dim),
            heads,
            dropout,
        })
    }

    /// `query` is `[B, Lq, D]`, `key` and `value` are `[B, Lk, D]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        s: &ParamStore<T>,
        query: Var,
        key: Var,
        value: Var,
    ) -> Result<Var> {
        let qs = g.shape(query);
        let (batch, lq, dim) = (qs[0], qs[1], qs[2]);
        let lk = g.shape(key)[1];
        let dh = dim / self.heads;
        let split = |x: Var, len: usize| -> Result<Var> {
            let x = g.reshape(x, &[batch, len, self.heads, dh])?;
            Ok(g.permute(x, &[0, 2, 1, 3])?)
        };
        let q = split(self.q.forward(g, s, query)?, lq)?;
        let k = split(self.k.forward(g, s, key)?, lk)?;
        let v = split(self.v.forward(g, s, value)?, lk)?;
        let scores = g.scale(g.matmul(q, k, false, true)?, lit(1.0 / (dh as f64).sqrt()));
        let attn = g.dropout(g.softmax(scores, 3)?, self.dropout);
        let ctx = g.permute(g.matmul(attn, v, false, false)?, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[batch, lq, dim])?;
        self.out.forward(g, s, ctx)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    lin1: Linear,
    act: Activation,
    lin2: Linear,
    dropout: f64,
}

impl FeedForward {
    pub(crate) fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, dim: usize, hidden: usize, dropout: f64) -> Self {
        b.scope(name, |b| FeedForward {
            lin1: Linear::new(b, "linear1", dim, hidden),
            act: Activation::new(b, "act"),
            lin2: Linear::new(b, "linear2", hidden, dim),
            dropout,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.act.forward(g, s, self.lin1.forward(g, s, x)?)?;
        self.lin2.forward(g, s, g.dropout(h, self.dropout))
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
    dropout: f64,
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
    norm3: LayerNorm,
    dropout: f64,
}

#[derive(Debug, Clone)]
pub struct Transformer {
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    decoder_norm: LayerNorm,
    dim: usize,
}

pub(crate) struct TransformerShape {
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
}

impl Transformer {
    pub(crate) fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, t: &TransformerShape) -> Self {
        b.scope(name, |b| {
            let encoder = (0..t.encoder_layers)
                .map(|i| {
                    b.scope(&format!("encoder.{i}"), |b| EncoderLayer {
                        attn: MultiHeadAttention::new(b, "self_attn", t.dim, t.heads, t.dropout),
                        norm1: LayerNorm::new(b, "norm1", t.dim),
                        ffn: FeedForward::new(b, "ffn", t.dim, t.hidden, t.dropout),
                        norm2: LayerNorm::new(b, "norm2", t.dim),
                        dropout: t.dropout,
                    })
                })
                .collect();
            let decoder = (0..t.decoder_layers)
                .map(|i| {
                    b.scope(&format!("decoder.{i}"), |b| DecoderLayer {
                        self_attn: MultiHeadAttention::new(b, "self_attn", t.dim, t.heads, t.dropout),
                        norm1: LayerNorm::new(b, "norm1", t.dim),
                        cross_attn: MultiHeadAttention::new(b, "cross_attn", t.dim, t.heads, t.dropout),
                        norm2: LayerNorm::new(b, "norm2", t.dim),
                        ffn: FeedForward::new(b, "ffn", t.dim, t.hidden, t.dropout),
                        norm3: LayerNorm::new(b, "norm3", t.dim),
                        dropout: t.dropout,
                    })
                })
                .collect();
            Transformer {
                encoder,
                decoder,
                decoder_norm: LayerNorm::new(b, "decoder_norm", t.dim),
                dim: t.dim,
            }
        })
    }

    /// Encodes `src` (`[B, L, D]`, positions `pos` `[L, D]`) and decodes the
    /// query embeddings `queries` (`[N, D]`). Returns `(memory, decoded)`.
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        s: &ParamStore<T>,
        src: Var,
        pos: Var,
        queries: Var,
    ) -> Result<(Var, Var)> {
        let batch = g.shape(src)[0];
        let mut memory = src;
        for layer in &self.encoder {
            let qk = g.add_broadcast(memory, pos)?;
            let a = layer.attn.forward(g, s, qk, qk, memory)?;
            memory = layer.norm1.forward(g, s, g.add(memory, g.dropout(a, layer.dropout))?)?;
            let f = layer.ffn.forward(g, s, memory)?;
            memory = layer.norm2.forward(g, s, g.add(memory, g.dropout(f, layer.dropout))?)?;
        }
        let n = g.shape(queries)[0];
        // the target starts from the query embeddings themselves
        let mut tgt = g.add_broadcast(g.input(Tensor::zeros(&[batch, n, self.dim])), queries)?;
        let keys = g.add_broadcast(memory, pos)?;
        for layer in &self.decoder {
            let qk = g.add_broadcast(tgt, queries)?;
            let a = layer.self_attn.forward(g, s, qk, qk, tgt)?;
            tgt = layer.norm1.forward(g, s, g.add(tgt, g.dropout(a, layer.dropout))?)?;
            let q = g.add_broadcast(tgt, queries)?;
            let a = layer.cross_attn.forward(g, s, q, keys, memory)?;
            tgt = layer.norm2.forward(g, s, g.add(tgt, g.dropout(a, layer.dropout))?)?;
            let f = layer.ffn.forward(g, s, tgt)?;
            tgt = layer.norm3.forward(g, s, g.add(tgt, g.dropout(f, layer.dropout))?)?;
        }
        Ok((memory, self.decoder_norm.forward(g, s, tgt)?))
    }
}
