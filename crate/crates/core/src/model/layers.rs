use rand::Rng;

use crate::attention::{cross_attention, xavier, AttentionConfig, AttnMask, SanWeights, SelfAttention};
use crate::error::Result;
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tensor::{Dropout, Graph, NodeId, Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add(format!("{prefix}.weight"), xavier(inputs, outputs, rng)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[outputs])),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, bind: &Bindings, x: NodeId) -> Result<NodeId> {
        let y = g.matmul(x, bind.node(self.weight))?;
        g.add_row(y, bind.node(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{prefix}.gain"), Tensor::full(&[d], F::one())),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, bind: &Bindings, x: NodeId) -> Result<NodeId> {
        g.layer_norm(x, bind.node(self.gain), bind.node(self.bias), F::cast(LAYER_NORM_EPS))
    }
}

/// `relu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForward {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        d_model: usize,
        d_ffn: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w1: store.add(format!("{prefix}.w1"), xavier(d_model, d_ffn, rng)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[d_ffn])),
            w2: store.add(format!("{prefix}.w2"), xavier(d_ffn, d_model, rng)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[d_model])),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, bind: &Bindings, x: NodeId) -> Result<NodeId> {
        let h = g.matmul(x, bind.node(self.w1))?;
        let h = g.add_row(h, bind.node(self.b1))?;
        let h = g.relu(h);
        let y = g.matmul(h, bind.node(self.w2))?;
        g.add_row(y, bind.node(self.b2))
    }
}

/// `x + dropout(sublayer(norm(x)))`.
fn residual<F: Scalar>(
    g: &mut Graph<F>,
    x: NodeId,
    sub_out: NodeId,
    dropout: &mut Dropout,
) -> Result<NodeId> {
    let y = dropout.apply(g, sub_out)?;
    g.add(x, y)
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: SelfAttention,
    pub ffn: FeedForward,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    heads: usize,
}

impl EncoderLayer {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        attn: &AttentionConfig,
        d_ffn: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let d = attn.d_model;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), d),
            attn: SelfAttention::new(store, &format!("{prefix}.attn"), attn, rng)?,
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), d),
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), d, d_ffn, rng),
            heads: attn.heads,
        })
    }

    /// Returns the layer output and its attention weights `[B·h, T, T]`.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bind: &Bindings,
        x: NodeId,
        positions: &[bool],
        mask: &AttnMask,
        dropout: &mut Dropout,
    ) -> Result<(NodeId, NodeId)> {
        let n = self.norm1.forward(g, bind, x)?;
        let (a, attn) = self
            .attn
            .forward(g, bind, n, Some(positions), self.heads, mask, dropout)?;
        let x = residual(g, x, a, dropout)?;
        let n = self.norm2.forward(g, bind, x)?;
        let f = self.ffn.forward(g, bind, n)?;
        Ok((residual(g, x, f, dropout)?, attn))
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: SelfAttention,
    pub cross_attn: SanWeights,
    pub ffn: FeedForward,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub norm3: LayerNorm,
    heads: usize,
}

/// Decoder layer output plus self- and cross-attention weights.
pub struct DecoderLayerOutput {
    pub out: NodeId,
    pub self_attn: NodeId,
    pub cross_attn: NodeId,
}

impl DecoderLayer {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        attn: &AttentionConfig,
        d_ffn: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let d = attn.d_model;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), d),
            self_attn: SelfAttention::new(store, &format!("{prefix}.self_attn"), attn, rng)?,
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), d),
            cross_attn: SanWeights::new(store, &format!("{prefix}.cross_attn"), d, rng),
            norm3: LayerNorm::new(store, &format!("{prefix}.norm3"), d),
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), d, d_ffn, rng),
            heads: attn.heads,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bind: &Bindings,
        x: NodeId,
        memory: NodeId,
        positions: &[bool],
        self_mask: &AttnMask,
        cross_mask: &AttnMask,
        dropout: &mut Dropout,
    ) -> Result<DecoderLayerOutput> {
        let n = self.norm1.forward(g, bind, x)?;
        let (a, self_attn) = self
            .self_attn
            .forward(g, bind, n, Some(positions), self.heads, self_mask, dropout)?;
        let x = residual(g, x, a, dropout)?;
        let n = self.norm2.forward(g, bind, x)?;
        let (c, cross) = cross_attention(
            g,
            n,
            memory,
            self.cross_attn.nodes(bind),
            self.heads,
            cross_mask,
            dropout,
        )?;
        let x = residual(g, x, c, dropout)?;
        let n = self.norm3.forward(g, bind, x)?;
        let f = self.ffn.forward(g, bind, n)?;
        Ok(DecoderLayerOutput {
            out: residual(g, x, f, dropout)?,
            self_attn,
            cross_attn: cross,
        })
    }
}
