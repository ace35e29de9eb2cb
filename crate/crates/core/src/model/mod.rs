//! Encoder/decoder stacks, embeddings, greedy decoding, parameter audit and
//! checkpoints.

pub mod audit;
pub mod checkpoint;
mod config;
pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::AttnMask;
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tensor::{Dropout, Graph, NodeId, Scalar, Tensor};
use crate::training::batch::{positions_mask, FeatureBatch, TokenBatch, EOS, PAD, SOS};

pub use audit::{count_params, ParamAudit};
pub use config::ModelConfig;
use layers::{DecoderLayer, EncoderLayer, LayerNorm, Linear};

/// Sinusoidal position table `[len, d]`, row-major.
pub fn positional_encoding(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for t in 0..len {
        for i in 0..d {
            let expo = (2 * (i / 2)) as f64 / d as f64;
            let angle = t as f64 / 10000f64.powf(expo);
            pe[t * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// One forward pass: a fresh graph with the parameters bound onto it.
pub struct Session<F: Scalar> {
    pub graph: Graph<F>,
    pub bind: Bindings,
    pub dropout: Dropout,
}

pub struct EncoderOutput {
    /// `[B, T, d_model]` after the final encoder norm.
    pub h: NodeId,
    pub lengths: Vec<usize>,
    /// Per layer, `[B·h, T, T]`.
    pub attns: Vec<NodeId>,
}

pub struct DecoderOutput {
    /// `[B, L, vocab]`.
    pub logits: NodeId,
    /// Per layer, `[B·h, L, L]`.
    pub self_attns: Vec<NodeId>,
    /// Per layer, `[B·h, L, T]`.
    pub cross_attns: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct Model<F: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    input_proj: Linear,
    token_embedding: ParamId,
    encoder: Vec<EncoderLayer>,
    encoder_norm: LayerNorm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: LayerNorm,
    output_proj: Linear,
}

impl<F: Scalar> Model<F> {
    /// Fresh weights drawn from a generator seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let d = c.d_model;
        let input_proj = Linear::new(&mut store, "input_proj", c.input_dim, d, &mut rng);
        let normal = Normal::new(0.0, (d as f64).powf(-0.5)).expect("positive std");
        let table = Tensor::from_fn(&[c.vocab_size, d], |_| F::cast(normal.sample(&mut rng)));
        let token_embedding = store.add("token_embedding", table);
        let enc_attn = c.encoder_attention();
        let encoder = (0..c.encoder_layers)
            .map(|i| EncoderLayer::new(&mut store, &format!("encoder.layer{i}"), &enc_attn, c.d_ffn, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let encoder_norm = LayerNorm::new(&mut store, "encoder.norm", d);
        let dec_attn = c.decoder_attention();
        let decoder = (0..c.decoder_layers)
            .map(|i| DecoderLayer::new(&mut store, &format!("decoder.layer{i}"), &dec_attn, c.d_ffn, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let decoder_norm = LayerNorm::new(&mut store, "decoder.norm", d);
        let output_proj = Linear::new(&mut store, "output_proj", d, c.vocab_size, &mut rng);
        Ok(Self {
            config,
            params: store,
            input_proj,
            token_embedding,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            output_proj,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.element_count()
    }

    pub fn encoder_layers(&self) -> &[EncoderLayer] {
        &self.encoder
    }

    pub fn decoder_layers(&self) -> &[DecoderLayer] {
        &self.decoder
    }

    pub fn session(&self, dropout: Dropout) -> Session<F> {
        let mut graph = Graph::new();
        let bind = self.params.bind(&mut graph);
        Session {
            graph,
            bind,
            dropout,
        }
    }

    /// Inference session (dropout disabled).
    pub fn eval_session(&self) -> Session<F> {
        self.session(Dropout::inactive())
    }

    /// Places a feature batch on the graph as a constant `[B, T, input_dim]`.
    pub fn feature_node(&self, s: &mut Session<F>, batch: &FeatureBatch) -> Result<NodeId> {
        if batch.dim != self.config.input_dim {
            return Err(crate::error::dim_err(
                "encode",
                format!("features have width {}, model expects {}", batch.dim, self.config.input_dim),
            ));
        }
        let data = batch.features.iter().map(|&v| F::cast(v as f64)).collect();
        let t = Tensor::new(&[batch.batch_size(), batch.max_len, batch.dim], data)?;
        Ok(s.graph.constant(t))
    }

    pub fn encode(&self, s: &mut Session<F>, batch: &FeatureBatch) -> Result<EncoderOutput> {
        let x = self.feature_node(s, batch)?;
        self.encode_node(s, x, &batch.lengths)
    }

    /// Encodes an already-placed `[B, T, input_dim]` node.
    pub fn encode_node(&self, s: &mut Session<F>, x: NodeId, lengths: &[usize]) -> Result<EncoderOutput> {
        let shape = s.graph.shape(x).to_vec();
        let (b, t) = match shape[..] {
            [b, t, _] => (b, t),
            _ => return Err(crate::error::dim_err("encode", format!("expected [B, T, dim], got {shape:?}"))),
        };
        if lengths.len() != b || lengths.iter().any(|&l| l == 0 || l > t) {
            return Err(Error::Contract(format!(
                "sequence lengths {lengths:?} invalid for {t} frames (empty sequences are not allowed)"
            )));
        }
        let d = self.config.d_model;
        let g = &mut s.graph;
        let h = self.input_proj.forward(g, &s.bind, x)?;
        let h = add_positions(g, h, b, t, d)?;
        let mut h = s.dropout.apply(g, h)?;
        let positions = positions_mask(lengths, t);
        let mask = AttnMask::key_padding(lengths, t, t);
        let mut attns = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let (out, a) = layer.forward(g, &s.bind, h, &positions, &mask, &mut s.dropout)?;
            h = out;
            attns.push(a);
        }
        let h = self.encoder_norm.forward(g, &s.bind, h)?;
        Ok(EncoderOutput {
            h,
            lengths: lengths.to_vec(),
            attns,
        })
    }

    pub fn decode_teacher_forced(
        &self,
        s: &mut Session<F>,
        tokens: &TokenBatch,
        enc: &EncoderOutput,
    ) -> Result<DecoderOutput> {
        let (b, l) = (tokens.batch_size(), tokens.max_len);
        let enc_shape = s.graph.shape(enc.h).to_vec();
        if enc_shape.len() != 3 || enc_shape[0] != b {
            return Err(crate::error::dim_err(
                "decode",
                format!("{b} token rows vs encoder output {enc_shape:?}"),
            ));
        }
        if l == 0 {
            return Err(Error::Contract("decoder input is empty".into()));
        }
        let t = enc_shape[1];
        let d = self.config.d_model;
        let ids: Vec<usize> = tokens.tokens.iter().map(|&v| v as usize).collect();
        let g = &mut s.graph;
        let e = g.embedding(s.bind.node(self.token_embedding), &ids, &[b, l])?;
        let e = g.scale(e, F::cast((d as f64).sqrt()));
        let e = add_positions(g, e, b, l, d)?;
        let mut x = s.dropout.apply(g, e)?;
        let lengths: Vec<usize> = tokens.lengths.iter().map(|&n| n.max(1)).collect();
        let positions = positions_mask(&lengths, l);
        let self_mask = AttnMask::causal(&lengths, l);
        let cross_mask = AttnMask::key_padding(&enc.lengths, l, t);
        let mut self_attns = Vec::with_capacity(self.decoder.len());
        let mut cross_attns = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let o = layer.forward(g, &s.bind, x, enc.h, &positions, &self_mask, &cross_mask, &mut s.dropout)?;
            x = o.out;
            self_attns.push(o.self_attn);
            cross_attns.push(o.cross_attn);
        }
        let x = self.decoder_norm.forward(g, &s.bind, x)?;
        let logits = self.output_proj.forward(g, &s.bind, x)?;
        Ok(DecoderOutput {
            logits,
            self_attns,
            cross_attns,
        })
    }

    /// Appends the arg-max token (never pad or sos) until eos or `max_len`
    /// generated tokens. Returned sequences exclude sos and eos.
    pub fn greedy_decode(&self, batch: &FeatureBatch, max_len: usize) -> Result<Vec<Vec<u32>>> {
        let mut s = self.eval_session();
        let enc = self.encode(&mut s, batch)?;
        let memory = s.graph.value(enc.h).clone();
        let lengths = enc.lengths;
        drop(s);

        let b = batch.batch_size();
        let vocab = self.config.vocab_size;
        let mut prefixes: Vec<Vec<u32>> = vec![vec![SOS]; b];
        let mut done = vec![false; b];
        for _ in 0..max_len {
            if done.iter().all(|&f| f) {
                break;
            }
            let mut s = self.eval_session();
            let h = s.graph.constant(memory.clone());
            let enc = EncoderOutput {
                h,
                lengths: lengths.clone(),
                attns: Vec::new(),
            };
            let rows: Vec<&[u32]> = prefixes.iter().map(Vec::as_slice).collect();
            let tokens = TokenBatch::from_prefixes(&rows, vocab)?;
            let out = self.decode_teacher_forced(&mut s, &tokens, &enc)?;
            let logits = s.graph.value(out.logits).data();
            let l = tokens.max_len;
            for (i, prefix) in prefixes.iter_mut().enumerate() {
                if done[i] {
                    continue;
                }
                let row = &logits[(i * l + l - 1) * vocab..(i * l + l) * vocab];
                let next = argmax_excluding(row, &[PAD, SOS]);
                prefix.push(next);
                if next == EOS {
                    done[i] = true;
                }
            }
        }
        Ok(prefixes
            .into_iter()
            .map(|p| p.into_iter().skip(1).take_while(|&t| t != EOS).collect())
            .collect())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save_checkpoint(&self.params, path)
    }

    pub fn load(&mut self, path: &std::path::Path) -> Result<()> {
        checkpoint::load_checkpoint(&mut self.params, path)
    }

    /// Same architecture and weights in another element type.
    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            input_proj: self.input_proj.clone(),
            token_embedding: self.token_embedding,
            encoder: self.encoder.clone(),
            encoder_norm: self.encoder_norm.clone(),
            decoder: self.decoder.clone(),
            decoder_norm: self.decoder_norm.clone(),
            output_proj: self.output_proj.clone(),
        }
    }
}

fn add_positions<F: Scalar>(g: &mut Graph<F>, x: NodeId, b: usize, t: usize, d: usize) -> Result<NodeId> {
    let pe = positional_encoding(t, d);
    let tiled = Tensor::from_fn(&[b, t, d], |i| F::cast(pe[i % (t * d)]));
    let c = g.constant(tiled);
    g.add(x, c)
}

/// Index of the largest value, skipping `excluded` ids; ties go to the lower id.
fn argmax_excluding<F: Scalar>(row: &[F], excluded: &[u32]) -> u32 {
    let mut best: Option<(usize, F)> = None;
    for (i, &v) in row.iter().enumerate() {
        if excluded.contains(&(i as u32)) {
            continue;
        }
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i as u32).unwrap_or(EOS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{FsmnOrders, Variant};

    pub(crate) fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            encoder_layers: 2,
            decoder_layers: 1,
            d_model: 16,
            heads: 2,
            d_ffn: 24,
            variant,
            encoder_fsmn: FsmnOrders::new(2, 1),
            decoder_fsmn: FsmnOrders::new(2, 0),
            input_dim: 6,
            vocab_size: 9,
            dropout: 0.0,
        }
    }

    fn features(lengths: &[usize], dim: usize, seed: u64) -> FeatureBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seqs: Vec<Vec<f32>> = lengths
            .iter()
            .map(|&l| (0..l * dim).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect())
            .collect();
        let refs: Vec<&[f32]> = seqs.iter().map(Vec::as_slice).collect();
        FeatureBatch::from_sequences(&refs, dim).unwrap()
    }

    #[test]
    fn positional_encoding_first_rows() {
        let pe = positional_encoding(2, 4);
        assert_eq!(&pe[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe[4] - 1f64.sin()).abs() < 1e-15);
        assert!((pe[6] - (0.01f64).sin()).abs() < 1e-15);
    }

    #[test]
    fn output_shapes() {
        for v in [Variant::San, Variant::Ssan] {
            let m = Model::<f32>::new(tiny(v), 3).unwrap();
            let fb = features(&[5, 3], 6, 1);
            let mut s = m.eval_session();
            let enc = m.encode(&mut s, &fb).unwrap();
            assert_eq!(s.graph.shape(enc.h), &[2, 5, 16]);
            assert_eq!(s.graph.shape(enc.attns[1]), &[4, 5, 5]);
            let tb = TokenBatch::from_prefixes(&[&[SOS, 4, 5], &[SOS]], 9).unwrap();
            let dec = m.decode_teacher_forced(&mut s, &tb, &enc).unwrap();
            assert_eq!(s.graph.shape(dec.logits), &[2, 3, 9]);
            assert_eq!(s.graph.shape(dec.cross_attns[0]), &[4, 3, 5]);
            assert!(s.graph.value(dec.logits).is_finite());
        }
    }

    #[test]
    fn zero_sublayers_reduce_to_normed_input() {
        let mut cfg = tiny(Variant::Ssan);
        cfg.encoder_layers = 1;
        let mut m = Model::<f64>::new(cfg, 5).unwrap();
        for id in m.params.ids().collect::<Vec<_>>() {
            let name = m.params.name(id).to_string();
            if name.starts_with("encoder.layer0") && !name.contains("norm") {
                m.params.get_mut(id).data_mut().fill(0.0);
            }
        }
        let fb = features(&[4], 6, 2);
        let mut s = m.eval_session();
        let enc = m.encode(&mut s, &fb).unwrap();
        let got = s.graph.value(enc.h).data().to_vec();

        let d = 16;
        let w = m.params.get(m.params.find("input_proj.weight").unwrap()).data();
        let pe = positional_encoding(4, d);
        for t in 0..4 {
            let row: Vec<f64> = (0..d)
                .map(|j| (0..6).map(|k| fb.features[t * 6 + k] as f64 * w[k * d + j]).sum::<f64>() + pe[t * d + j])
                .collect();
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            for j in 0..d {
                let want = (row[j] - mean) / (var + layers::LAYER_NORM_EPS).sqrt();
                assert!((got[t * d + j] - want).abs() < 1e-9, "t={t} j={j}");
            }
        }
    }

    #[test]
    fn empty_sequence_is_contract_error() {
        let m = Model::<f32>::new(tiny(Variant::San), 1).unwrap();
        let mut s = m.eval_session();
        let x = s.graph.constant(Tensor::zeros(&[1, 3, 6]));
        assert!(matches!(m.encode_node(&mut s, x, &[0]), Err(Error::Contract(_))));
    }

    #[test]
    fn token_out_of_vocab_is_contract_error() {
        let m = Model::<f32>::new(tiny(Variant::Ssan), 1).unwrap();
        let mut s = m.eval_session();
        let enc = m.encode(&mut s, &features(&[3], 6, 0)).unwrap();
        let tb = TokenBatch {
            tokens: vec![SOS, 40],
            lengths: vec![2],
            max_len: 2,
        };
        assert!(matches!(m.decode_teacher_forced(&mut s, &tb, &enc), Err(Error::Contract(_))));
    }

    #[test]
    fn greedy_decode_is_deterministic_and_clean() {
        let m = Model::<f32>::new(tiny(Variant::Ssan), 11).unwrap();
        let fb = features(&[6, 4, 5], 6, 3);
        let a = m.greedy_decode(&fb, 7).unwrap();
        let b = m.greedy_decode(&fb, 7).unwrap();
        assert_eq!(a, b);
        for h in &a {
            assert!(h.len() <= 7);
            assert!(h.iter().all(|&t| t != PAD && t != SOS && t != EOS));
        }
    }

    #[test]
    fn argmax_skips_excluded() {
        assert_eq!(argmax_excluding(&[9.0f32, 8.0, 1.0, 3.0, 3.0], &[PAD, SOS]), 3);
    }
}
