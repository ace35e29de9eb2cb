//! Multi-head scaled dot-product attention with two ways of forming Q/K/V.
//!
//! * SAN: `Q = x·Wqᵀ`, `K = x·Wkᵀ`, `V = x·Wvᵀ`, purely position-wise.
//! * SSAN: `Q` and `K` come from two independent FSMN memory blocks over the
//!   full `d_model` vector, and `V = x`.
//!
//! Both variants share the head split (contiguous `d_model / h` chunks), the
//! `1/√d_k` scaling, and the output projection `Wo`. Cross-attention is always
//! SAN.

use rand::Rng;

use crate::error::{Error, Result};
use crate::fsmn::{fsmn_apply, fsmn_param_count, FsmnBlock};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tensor::{Dropout, Graph, NodeId, Scalar, Tensor};

/// Additive bias for disallowed attention logits.
pub const MASK_BIAS: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    San,
    Ssan,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::San => "san",
            Variant::Ssan => "ssan",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "san" => Ok(Variant::San),
            "ssan" => Ok(Variant::Ssan),
            other => Err(Error::Config(format!("unknown attention variant `{other}`"))),
        }
    }
}

/// Look-back (`N1`) and look-ahead (`N2`) orders of an FSMN block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FsmnOrders {
    pub look_back: usize,
    pub look_ahead: usize,
}

impl FsmnOrders {
    pub const fn new(look_back: usize, look_ahead: usize) -> Self {
        Self {
            look_back,
            look_ahead,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
    pub variant: Variant,
    /// Required when `variant == Ssan`.
    pub fsmn: Option<FsmnOrders>,
    pub causal: bool,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible into {} heads",
                self.d_model, self.heads
            )));
        }
        if self.variant == Variant::Ssan {
            let orders = self
                .fsmn
                .ok_or_else(|| Error::Config("SSAN attention needs FSMN orders".into()))?;
            if self.causal && orders.look_ahead != 0 {
                return Err(Error::Config(format!(
                    "causal SSAN attention must have look-ahead 0, got {}",
                    orders.look_ahead
                )));
            }
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Which query/key pairs may attend, per batch element: `[B, Tq, Tk]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    batch: usize,
    tq: usize,
    tk: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn full(batch: usize, tq: usize, tk: usize) -> Self {
        Self {
            batch,
            tq,
            tk,
            allowed: vec![true; batch * tq * tk],
        }
    }

    /// Every query may see the first `key_lengths[b]` keys.
    pub fn key_padding(key_lengths: &[usize], tq: usize, tk: usize) -> Self {
        let mut m = Self::full(key_lengths.len(), tq, tk);
        for (b, &len) in key_lengths.iter().enumerate() {
            for i in 0..tq {
                for j in len.min(tk)..tk {
                    m.allowed[(b * tq + i) * tk + j] = false;
                }
            }
        }
        m
    }

    /// Query `i` may see keys `j <= i` that are also inside the valid length.
    pub fn causal(key_lengths: &[usize], t: usize) -> Self {
        let mut m = Self::key_padding(key_lengths, t, t);
        for b in 0..key_lengths.len() {
            for i in 0..t {
                for j in i + 1..t {
                    m.allowed[(b * t + i) * t + j] = false;
                }
            }
        }
        m
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.batch, self.tq, self.tk)
    }

    pub fn is_allowed(&self, b: usize, i: usize, j: usize) -> bool {
        self.allowed[(b * self.tq + i) * self.tk + j]
    }

    fn check_rows(&self) -> Result<()> {
        for (r, row) in self.allowed.chunks_exact(self.tk).enumerate() {
            if !row.iter().any(|&a| a) {
                return Err(Error::Contract(format!(
                    "attention row {} of batch {} has every key masked",
                    r % self.tq,
                    r / self.tq
                )));
            }
        }
        Ok(())
    }

    fn bias<F: Scalar>(&self, heads: usize) -> Tensor<F> {
        let per = self.tq * self.tk;
        let neg = F::cast(MASK_BIAS);
        let mut data = Vec::with_capacity(self.batch * heads * per);
        for b in 0..self.batch {
            let src = &self.allowed[b * per..(b + 1) * per];
            for _ in 0..heads {
                data.extend(src.iter().map(|&a| if a { F::zero() } else { neg }));
            }
        }
        Tensor::new(&[self.batch * heads, self.tq, self.tk], data).expect("non-empty mask")
    }
}

fn batch_and_len(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [t, d] => Ok((1, t, d)),
        [b, t, d] => Ok((b, t, d)),
        _ => Err(crate::error::dim_err(
            "attention",
            format!("expected [T, d] or [B, T, d], got {shape:?}"),
        )),
    }
}

/// Position-wise projections `Q = x·Wqᵀ`, `K = x·Wkᵀ`, `V = x·Wvᵀ`.
pub fn form_qkv_san<F: Scalar>(
    g: &mut Graph<F>,
    x: NodeId,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
) -> Result<(NodeId, NodeId, NodeId)> {
    let q = g.matmul_bt(x, wq)?;
    let k = g.matmul_bt(x, wk)?;
    let v = g.matmul_bt(x, wv)?;
    Ok((q, k, v))
}

/// `Q = fsmn(x; a, c)`, `K = fsmn(x; b, d)`, `V = x`.
#[allow(clippy::too_many_arguments)]
pub fn form_qkv_ssan<F: Scalar>(
    g: &mut Graph<F>,
    x: NodeId,
    q_back: NodeId,
    q_ahead: Option<NodeId>,
    k_back: NodeId,
    k_ahead: Option<NodeId>,
    mask: Option<&[bool]>,
) -> Result<(NodeId, NodeId, NodeId)> {
    let q = fsmn_apply(g, x, q_back, q_ahead, mask)?;
    let k = fsmn_apply(g, x, k_back, k_ahead, mask)?;
    Ok((q, k, x))
}

/// Scaled dot-product attention over `heads` contiguous feature chunks,
/// followed by the output projection `Wo`.
///
/// Returns `(out, attn)`; `attn` is the post-softmax `[B·h, Tq, Tk]` weight
/// tensor (before attention dropout).
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<F: Scalar>(
    g: &mut Graph<F>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    wo: NodeId,
    heads: usize,
    mask: &AttnMask,
    dropout: &mut Dropout,
) -> Result<(NodeId, NodeId)> {
    let (bq, tq, d) = batch_and_len(g.shape(q))?;
    let (bk, tk, dk_full) = batch_and_len(g.shape(k))?;
    if bq != bk || d != dk_full || g.shape(k) != g.shape(v) {
        return Err(crate::error::dim_err(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", g.shape(q), g.shape(k), g.shape(v)),
        ));
    }
    if mask.dims() != (bq, tq, tk) {
        return Err(crate::error::dim_err(
            "attention",
            format!("mask {:?} vs [{bq}, {tq}, {tk}]", mask.dims()),
        ));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Contract(format!("{heads} heads do not divide {d}")));
    }
    mask.check_rows()?;
    let dk = d / heads;

    let qh = g.split_heads(q, heads)?;
    let kh = g.split_heads(k, heads)?;
    let vh = g.split_heads(v, heads)?;
    let scores = g.matmul_bt(qh, kh)?;
    let scores = g.scale(scores, F::cast(1.0 / (dk as f64).sqrt()));
    let bias = g.constant(mask.bias(heads));
    let scores = g.add(scores, bias)?;
    let attn = g.softmax(scores);
    let attn_d = dropout.apply(g, attn)?;
    let ctx = g.matmul(attn_d, vh)?;
    let ctx = g.merge_heads(ctx, heads)?;
    let ctx = if g.shape(q).len() == 2 {
        g.reshape(ctx, &[tq, d])?
    } else {
        ctx
    };
    let out = g.matmul_bt(ctx, wo)?;
    Ok((out, attn))
}

/// Decoder queries attending over encoder outputs. Always projection-based.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention<F: Scalar>(
    g: &mut Graph<F>,
    decoder_x: NodeId,
    encoder_h: NodeId,
    w: [NodeId; 4],
    heads: usize,
    mask: &AttnMask,
    dropout: &mut Dropout,
) -> Result<(NodeId, NodeId)> {
    let [wq, wk, wv, wo] = w;
    let q = g.matmul_bt(decoder_x, wq)?;
    let k = g.matmul_bt(encoder_h, wk)?;
    let v = g.matmul_bt(encoder_h, wv)?;
    multi_head_attention(g, q, k, v, wo, heads, mask, dropout)
}

/// Parameter count of one attention sublayer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionParamCount {
    /// Counting every FSMN tap the block actually has, `(N1 + 1 + N2)` rows.
    pub with_current_tap: usize,
    /// Counting FSMN blocks as `(N1 + N2)` rows each, omitting the current-frame tap.
    pub without_current_tap: usize,
}

/// SAN: `4·d²` (Wq, Wk, Wv, Wo). SSAN: `d² + 2·(N1 + 1 + N2)·d`.
pub fn attention_param_count(cfg: &AttentionConfig) -> AttentionParamCount {
    let d = cfg.d_model;
    match (cfg.variant, cfg.fsmn) {
        (Variant::Ssan, Some(o)) => AttentionParamCount {
            with_current_tap: d * d + 2 * fsmn_param_count(o.look_back, o.look_ahead, d),
            without_current_tap: d * d + 2 * (o.look_back + o.look_ahead) * d,
        },
        _ => AttentionParamCount {
            with_current_tap: 4 * d * d,
            without_current_tap: 4 * d * d,
        },
    }
}

/// Xavier-uniform `[rows, cols]` matrix.
pub(crate) fn xavier<F: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<F> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(&[rows, cols], |_| F::cast(rng.random_range(-bound..=bound)))
}

/// Projection weights, each `d_model × d_model`, applied as `x·Wᵀ`.
#[derive(Clone, Debug)]
pub struct SanWeights {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl SanWeights {
    pub fn new<F: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<F>, prefix: &str, d: usize, rng: &mut R) -> Self {
        Self {
            wq: store.add(format!("{prefix}.wq"), xavier(d, d, rng)),
            wk: store.add(format!("{prefix}.wk"), xavier(d, d, rng)),
            wv: store.add(format!("{prefix}.wv"), xavier(d, d, rng)),
            wo: store.add(format!("{prefix}.wo"), xavier(d, d, rng)),
        }
    }

    pub fn nodes(&self, bind: &Bindings) -> [NodeId; 4] {
        [
            bind.node(self.wq),
            bind.node(self.wk),
            bind.node(self.wv),
            bind.node(self.wo),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct SsanWeights {
    pub q_coeffs: FsmnBlock,
    pub k_coeffs: FsmnBlock,
    pub wo: ParamId,
}

impl SsanWeights {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        d: usize,
        orders: FsmnOrders,
        rng: &mut R,
    ) -> Self {
        let (n1, n2) = (orders.look_back, orders.look_ahead);
        Self {
            q_coeffs: FsmnBlock::new(store, &format!("{prefix}.q_coeffs"), n1, n2, d, rng),
            k_coeffs: FsmnBlock::new(store, &format!("{prefix}.k_coeffs"), n1, n2, d, rng),
            wo: store.add(format!("{prefix}.wo"), xavier(d, d, rng)),
        }
    }
}

/// A self-attention sublayer of either variant.
#[derive(Clone, Debug)]
pub enum SelfAttention {
    San(SanWeights),
    Ssan(SsanWeights),
}

impl SelfAttention {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        cfg: &AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(match (cfg.variant, cfg.fsmn) {
            (Variant::Ssan, Some(orders)) => {
                SelfAttention::Ssan(SsanWeights::new(store, prefix, cfg.d_model, orders, rng))
            }
            _ => SelfAttention::San(SanWeights::new(store, prefix, cfg.d_model, rng)),
        })
    }

    /// `positions` flags valid (non-padded) positions of `x`, one per `B·T`;
    /// it feeds the FSMN boundary handling of the SSAN variant.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bind: &Bindings,
        x: NodeId,
        positions: Option<&[bool]>,
        heads: usize,
        mask: &AttnMask,
        dropout: &mut Dropout,
    ) -> Result<(NodeId, NodeId)> {
        let (q, k, v, wo) = match self {
            SelfAttention::San(w) => {
                let (q, k, v) = form_qkv_san(g, x, bind.node(w.wq), bind.node(w.wk), bind.node(w.wv))?;
                (q, k, v, w.wo)
            }
            SelfAttention::Ssan(w) => {
                let (q, k, v) = form_qkv_ssan(
                    g,
                    x,
                    bind.node(w.q_coeffs.back_taps),
                    w.q_coeffs.ahead_taps.map(|a| bind.node(a)),
                    bind.node(w.k_coeffs.back_taps),
                    w.k_coeffs.ahead_taps.map(|a| bind.node(a)),
                    positions,
                )?;
                (q, k, v, w.wo)
            }
        };
        multi_head_attention(g, q, k, v, bind.node(wo), heads, mask, dropout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph<f64>, shape: &[usize], v: Vec<f64>) -> NodeId {
        g.leaf(Tensor::new(shape, v).unwrap())
    }

    fn eye(d: usize) -> Vec<f64> {
        (0..d * d).map(|i| if i / d == i % d { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn identity_projections_return_input() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[3, 2], vec![1.0, -2.0, 0.5, 4.0, -3.0, 7.0]);
        let i = leaf(&mut g, &[2, 2], eye(2));
        let (q, k, v) = form_qkv_san(&mut g, x, i, i, i).unwrap();
        for n in [q, k, v] {
            assert_eq!(g.value(n).data(), g.value(x).data());
        }
    }

    #[test]
    fn ssan_value_is_input() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[3, 2], vec![1.0, -2.0, 0.5, 4.0, -3.0, 7.0]);
        let qb = leaf(&mut g, &[2, 2], vec![0.3, -0.1, 0.2, 0.9]);
        let kb = leaf(&mut g, &[2, 2], vec![-0.3, 0.4, 0.5, 0.1]);
        let (_, _, v) = form_qkv_ssan(&mut g, x, qb, None, kb, None, None).unwrap();
        assert_eq!(v, x);
    }

    #[test]
    fn single_key_attention_is_one() {
        let mut g = Graph::new();
        let q = leaf(&mut g, &[1, 4], vec![0.3, 0.1, -0.2, 0.5]);
        let k = leaf(&mut g, &[1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let v = leaf(&mut g, &[1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let wo = leaf(&mut g, &[4, 4], eye(4));
        let mask = AttnMask::full(1, 1, 1);
        let (out, attn) =
            multi_head_attention(&mut g, q, k, v, wo, 2, &mask, &mut Dropout::inactive()).unwrap();
        assert_eq!(g.value(attn).data(), &[1.0, 1.0]);
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn orthogonal_query_gives_uniform_weights() {
        let mut g = Graph::new();
        let q = leaf(&mut g, &[2, 2], vec![0.0; 4]);
        let k = leaf(&mut g, &[3, 2], vec![1.0, 2.0, -1.0, 0.5, 3.0, 3.0]);
        let v = leaf(&mut g, &[3, 2], vec![1.0, 2.0, -1.0, 0.5, 3.0, 3.0]);
        let wo = leaf(&mut g, &[2, 2], eye(2));
        let mask = AttnMask::key_padding(&[2], 2, 3);
        let (_, attn) =
            multi_head_attention(&mut g, q, k, v, wo, 1, &mask, &mut Dropout::inactive()).unwrap();
        let a = g.value(attn).data();
        for row in a.chunks(3) {
            assert!((row[0] - 0.5).abs() < 1e-12 && (row[1] - 0.5).abs() < 1e-12);
            assert_eq!(row[2], 0.0);
        }
    }

    #[test]
    fn causal_mask_zeroes_future() {
        let mut g = Graph::new();
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let q = leaf(&mut g, &[1, 4, 4], x.clone());
        let wo = leaf(&mut g, &[4, 4], eye(4));
        let mask = AttnMask::causal(&[4], 4);
        let (_, attn) =
            multi_head_attention(&mut g, q, q, q, wo, 2, &mask, &mut Dropout::inactive()).unwrap();
        let a = g.value(attn).data();
        for h in 0..2 {
            for t in 0..4 {
                for s in t + 1..4 {
                    assert_eq!(a[(h * 4 + t) * 4 + s], 0.0);
                }
                let sum: f64 = a[(h * 4 + t) * 4..(h * 4 + t) * 4 + 4].iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fully_masked_row_is_contract_error() {
        let mut g = Graph::new();
        let q = leaf(&mut g, &[1, 2, 2], vec![0.0; 4]);
        let wo = leaf(&mut g, &[2, 2], eye(2));
        let mask = AttnMask::key_padding(&[0], 2, 2);
        let r = multi_head_attention(&mut g, q, q, q, wo, 1, &mask, &mut Dropout::inactive());
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn param_counts() {
        let san = AttentionConfig {
            d_model: 512,
            heads: 8,
            variant: Variant::San,
            fsmn: None,
            causal: false,
        };
        assert_eq!(attention_param_count(&san).with_current_tap, 1_048_576);
        let ssan = AttentionConfig {
            variant: Variant::Ssan,
            fsmn: Some(FsmnOrders::new(11, 10)),
            ..san.clone()
        };
        let c = attention_param_count(&ssan);
        assert_eq!(c.with_current_tap, 262_144 + 22_528);
        assert_eq!(c.without_current_tap, 262_144 + 21_504);
        let degenerate = AttentionConfig {
            fsmn: Some(FsmnOrders::new(0, 0)),
            ..ssan
        };
        assert_eq!(attention_param_count(&degenerate).with_current_tap, 512 * 512 + 2 * 512);
    }

    #[test]
    fn config_validation() {
        let mut cfg = AttentionConfig {
            d_model: 16,
            heads: 3,
            variant: Variant::San,
            fsmn: None,
            causal: false,
        };
        assert!(cfg.validate().is_err());
        cfg.heads = 4;
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.d_k(), 4);
        cfg.variant = Variant::Ssan;
        assert!(cfg.validate().is_err());
        cfg.fsmn = Some(FsmnOrders::new(2, 1));
        cfg.causal = true;
        assert!(cfg.validate().is_err());
        cfg.fsmn = Some(FsmnOrders::new(2, 0));
        assert!(cfg.validate().is_ok());
    }
}
