use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Graph, NodeId, Scalar};
use crate::training::batch::{FeatureBatch, TokenBatch, EOS, PAD, SOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionSource {
    EncoderSelf,
    DecoderSelf,
    Cross,
}

impl AttentionSource {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionSource::EncoderSelf => "encoder-self",
            AttentionSource::DecoderSelf => "decoder-self",
            AttentionSource::Cross => "cross",
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            AttentionSource::EncoderSelf => "encoder_self.csv",
            AttentionSource::DecoderSelf => "decoder_self.csv",
            AttentionSource::Cross => "cross.csv",
        }
    }
}

/// A head-averaged attention matrix `[rows, cols]` with axis labels.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub source: AttentionSource,
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
    pub matrix: Vec<f32>,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
}

/// Averages the heads of batch member `b` of an attention tensor
/// `[B·h, Tq, Tk]`, keeping the leading `rows × cols` block.
pub fn head_average<F: Scalar>(
    g: &Graph<F>,
    attn: NodeId,
    b: usize,
    heads: usize,
    rows: usize,
    cols: usize,
) -> Result<Vec<f32>> {
    let shape = g.shape(attn);
    let [bh, tq, tk] = shape[..] else {
        return Err(crate::error::dim_err("head_average", format!("expected rank 3, got {shape:?}")));
    };
    if heads == 0 || bh % heads != 0 || b >= bh / heads || rows > tq || cols > tk {
        return Err(crate::error::dim_err(
            "head_average",
            format!("member {b}, {heads} heads, block {rows}x{cols} of {shape:?}"),
        ));
    }
    let data = g.value(attn).data();
    let mut out = vec![0.0f64; rows * cols];
    for h in 0..heads {
        let base = (b * heads + h) * tq * tk;
        for i in 0..rows {
            for j in 0..cols {
                out[i * cols + j] += data[base + i * tk + j].as_f64();
            }
        }
    }
    Ok(out.into_iter().map(|v| (v / heads as f64) as f32).collect())
}

impl AttentionRecord {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.cols..(i + 1) * self.cols]
    }

    /// Largest deviation of a row sum from one.
    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.rows)
            .map(|i| (self.row(i).iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Arg-max column of every row (lowest index on ties).
    pub fn row_argmax(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|i| {
                let r = self.row(i);
                (0..self.cols).fold(0, |best, j| if r[j] > r[best] { j } else { best })
            })
            .collect()
    }

    /// Fraction of adjacent row pairs whose arg-max column does not move left.
    pub fn monotonic_fraction(&self) -> f64 {
        let a = self.row_argmax();
        if a.len() < 2 {
            return 1.0;
        }
        let ok = a.windows(2).filter(|w| w[1] >= w[0]).count();
        ok as f64 / (a.len() - 1) as f64
    }

    /// Header `source/layer` followed by column labels, then one line per row:
    /// its label and values with nine significant digits.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{}/{}", self.source.as_str(), self.layer);
        for l in &self.col_labels {
            s.push(',');
            s.push_str(l);
        }
        s.push('\n');
        for i in 0..self.rows {
            s.push_str(&self.row_labels[i]);
            for v in self.row(i) {
                write!(s, ",{v:.8e}").expect("write to string");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Format(format!("attention csv: {m}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let mut head = header.split(',');
        let tag = head.next().unwrap_or_default();
        let (src, layer) = tag.split_once('/').ok_or_else(|| bad(format!("bad tag `{tag}`")))?;
        let source = match src {
            "encoder-self" => AttentionSource::EncoderSelf,
            "decoder-self" => AttentionSource::DecoderSelf,
            "cross" => AttentionSource::Cross,
            other => return Err(bad(format!("unknown source `{other}`"))),
        };
        let layer = layer.parse().map_err(|_| bad(format!("bad layer `{layer}`")))?;
        let col_labels: Vec<String> = head.map(str::to_string).collect();
        let mut row_labels = Vec::new();
        let mut matrix = Vec::new();
        for line in lines {
            let mut cells = line.split(',');
            row_labels.push(cells.next().unwrap_or_default().to_string());
            let before = matrix.len();
            for c in cells {
                matrix.push(c.parse::<f32>().map_err(|_| bad(format!("bad value `{c}`")))?);
            }
            if matrix.len() - before != col_labels.len() {
                return Err(bad(format!("row `{line}` has the wrong width")));
            }
        }
        Ok(Self {
            source,
            layer,
            rows: row_labels.len(),
            cols: col_labels.len(),
            matrix,
            row_labels,
            col_labels,
        })
    }
}

pub fn token_label(id: u32) -> String {
    match id {
        PAD => "<pad>".into(),
        SOS => "<sos>".into(),
        EOS => "<eos>".into(),
        other => format!("t{other}"),
    }
}

/// Last-layer attention maps for one utterance, decoded greedily and then
/// replayed teacher-forced in inference mode. Decoder rows are labelled with
/// the token emitted at that position.
pub fn attention_maps<F: Scalar>(
    model: &Model<F>,
    features: &FeatureBatch,
    max_len: usize,
) -> Result<[AttentionRecord; 3]> {
    if features.batch_size() != 1 {
        return Err(Error::Contract("attention export takes exactly one utterance".into()));
    }
    let hyp = model.greedy_decode(features, max_len)?.remove(0);
    let mut input = vec![SOS];
    input.extend(&hyp);
    let mut emitted = hyp.clone();
    emitted.push(EOS);
    let tokens = TokenBatch::from_prefixes(&[&input], model.config.vocab_size)?;

    let mut s = model.eval_session();
    let enc = model.encode(&mut s, features)?;
    let dec = model.decode_teacher_forced(&mut s, &tokens, &enc)?;
    let heads = model.config.heads;
    let t = features.lengths[0];
    let l = input.len();
    let frames: Vec<String> = (0..t).map(|i| format!("f{i}")).collect();
    let inputs: Vec<String> = input.iter().map(|&id| token_label(id)).collect();
    let outputs: Vec<String> = emitted.iter().map(|&id| token_label(id)).collect();
    let last = |v: &[NodeId]| *v.last().expect("at least one layer");
    let record = |source, layer, node, rows, cols, row_labels: &[String], col_labels: &[String]| -> Result<AttentionRecord> {
        Ok(AttentionRecord {
            source,
            layer,
            rows,
            cols,
            matrix: head_average(&s.graph, node, 0, heads, rows, cols)?,
            row_labels: row_labels.to_vec(),
            col_labels: col_labels.to_vec(),
        })
    };
    Ok([
        record(
            AttentionSource::EncoderSelf,
            enc.attns.len() - 1,
            last(&enc.attns),
            t,
            t,
            &frames,
            &frames,
        )?,
        record(
            AttentionSource::DecoderSelf,
            dec.self_attns.len() - 1,
            last(&dec.self_attns),
            l,
            l,
            &outputs,
            &inputs,
        )?,
        record(
            AttentionSource::Cross,
            dec.cross_attns.len() - 1,
            last(&dec.cross_attns),
            l,
            t,
            &outputs,
            &frames,
        )?,
    ])
}

/// Writes `encoder_self.csv`, `decoder_self.csv` and `cross.csv` into `dir`.
pub fn dump_attention<F: Scalar>(
    model: &Model<F>,
    features: &FeatureBatch,
    max_len: usize,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for rec in attention_maps(model, features, max_len)? {
        let p = dir.join(rec.source.file_name());
        fs::write(&p, rec.to_csv())?;
        paths.push(p);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn rec(rows: usize, cols: usize, m: Vec<f32>) -> AttentionRecord {
        AttentionRecord {
            source: AttentionSource::Cross,
            layer: 2,
            rows,
            cols,
            matrix: m,
            row_labels: (0..rows).map(|i| format!("t{i}")).collect(),
            col_labels: (0..cols).map(|i| format!("f{i}")).collect(),
        }
    }

    #[test]
    fn averaging_keeps_rows_stochastic() {
        let mut g = Graph::<f64>::new();
        // two heads, one member, 2x3
        let a = g.leaf(Tensor::new(&[2, 2, 3], vec![0.2, 0.3, 0.5, 1.0, 0.0, 0.0, 0.6, 0.4, 0.0, 0.1, 0.1, 0.8]).unwrap());
        let m = head_average(&g, a, 0, 2, 2, 3).unwrap();
        assert_eq!(m, vec![0.4, 0.35, 0.25, 0.55, 0.05, 0.4]);
        assert!(rec(2, 3, m).max_row_sum_error() < 1e-6);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let r = rec(2, 2, vec![0.123_456_79, 0.876_543_2, 1.0 / 3.0, 2.0 / 3.0]);
        let text = r.to_csv();
        assert!(text.starts_with("cross/2,f0,f1\nt0,1.23456791e-1,"));
        assert_eq!(AttentionRecord::from_csv(&text).unwrap(), r);
    }

    #[test]
    fn monotonic_fraction_counts_pairs() {
        let r = rec(4, 3, vec![
            0.9, 0.1, 0.0, //
            0.1, 0.8, 0.1, //
            0.7, 0.2, 0.1, //
            0.0, 0.1, 0.9,
        ]);
        assert_eq!(r.row_argmax(), vec![0, 1, 0, 2]);
        assert!((r.monotonic_fraction() - 2.0 / 3.0).abs() < 1e-12);
    }
}
