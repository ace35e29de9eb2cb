use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const SOS: u32 = 1;
pub const EOS: u32 = 2;
/// First id available for ordinary symbols.
pub const FIRST_SYMBOL: u32 = 3;

pub fn is_reserved(id: u32) -> bool {
    id < FIRST_SYMBOL
}

/// Padded real-valued sequences `[B, T, input_dim]` with validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    pub features: Vec<f32>,
    pub lengths: Vec<usize>,
    pub max_len: usize,
    pub dim: usize,
}

impl FeatureBatch {
    /// Pads each `[T_b, dim]` sequence with zero rows up to the longest.
    pub fn from_sequences(seqs: &[&[f32]], dim: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Contract("empty feature batch".into()));
        }
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.is_empty() || s.len() % dim != 0 {
                return Err(Error::Contract(format!(
                    "feature sequence of {} values is not a positive multiple of {dim}",
                    s.len()
                )));
            }
            lengths.push(s.len() / dim);
        }
        let max_len = *lengths.iter().max().expect("non-empty");
        let mut features = vec![0.0; seqs.len() * max_len * dim];
        for (b, s) in seqs.iter().enumerate() {
            features[b * max_len * dim..b * max_len * dim + s.len()].copy_from_slice(s);
        }
        Ok(Self {
            features,
            lengths,
            max_len,
            dim,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    /// `mask[b·T + t] == (t < lengths[b])`.
    pub fn mask(&self) -> Vec<bool> {
        positions_mask(&self.lengths, self.max_len)
    }

    /// Features of one batch member without padding.
    pub fn sequence(&self, b: usize) -> &[f32] {
        let start = b * self.max_len * self.dim;
        &self.features[start..start + self.lengths[b] * self.dim]
    }
}

pub(crate) fn positions_mask(lengths: &[usize], max_len: usize) -> Vec<bool> {
    let mut m = Vec::with_capacity(lengths.len() * max_len);
    for &len in lengths {
        m.extend((0..max_len).map(|t| t < len));
    }
    m
}

/// Padded token sequences `[B, L]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub tokens: Vec<u32>,
    pub lengths: Vec<usize>,
    pub max_len: usize,
}

impl TokenBatch {
    /// Label sequences, each already wrapped as `sos … eos`.
    pub fn from_labels(labels: &[&[u32]], vocab_size: usize) -> Result<Self> {
        for l in labels {
            if l.len() < 2 || l[0] != SOS || l[l.len() - 1] != EOS {
                return Err(Error::Contract(format!("label {l:?} is not sos … eos")));
            }
        }
        Self::from_prefixes(labels, vocab_size)
    }

    /// Arbitrary sequences that start with `sos` (decoder inputs).
    pub fn from_prefixes(seqs: &[&[u32]], vocab_size: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Contract("empty token batch".into()));
        }
        let max_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut tokens = vec![PAD; seqs.len() * max_len];
        let mut lengths = Vec::with_capacity(seqs.len());
        for (b, s) in seqs.iter().enumerate() {
            if s.first() != Some(&SOS) {
                return Err(Error::Contract(format!("token sequence {s:?} must start with sos")));
            }
            if let Some(&bad) = s.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::Contract(format!("token id {bad} >= vocab size {vocab_size}")));
            }
            tokens[b * max_len..b * max_len + s.len()].copy_from_slice(s);
            lengths.push(s.len());
        }
        Ok(Self {
            tokens,
            lengths,
            max_len,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.tokens[b * self.max_len..b * self.max_len + self.lengths[b]]
    }

    /// Teacher-forcing split: inputs drop the final token, targets drop `sos`.
    pub fn shift(&self) -> Result<(TokenBatch, Vec<u32>)> {
        if self.max_len < 2 {
            return Err(Error::Contract("labels need at least sos and eos".into()));
        }
        let l = self.max_len - 1;
        let b = self.batch_size();
        let mut inputs = vec![PAD; b * l];
        let mut targets = vec![PAD; b * l];
        let mut lengths = Vec::with_capacity(b);
        for i in 0..b {
            let row = self.row(i);
            let n = row.len() - 1;
            inputs[i * l..i * l + n].copy_from_slice(&row[..n]);
            targets[i * l..i * l + n].copy_from_slice(&row[1..]);
            lengths.push(n);
        }
        Ok((
            TokenBatch {
                tokens: inputs,
                lengths,
                max_len: l,
            },
            targets,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_mask_and_padding() {
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0f32, 6.0];
        let fb = FeatureBatch::from_sequences(&[&a, &b], 2).unwrap();
        assert_eq!(fb.lengths, vec![2, 1]);
        assert_eq!(fb.mask(), vec![true, true, true, false]);
        assert_eq!(&fb.features[4..], &[5.0, 6.0, 0.0, 0.0]);
        assert_eq!(fb.sequence(1), &b);
    }

    #[test]
    fn shift_builds_inputs_and_targets() {
        let l1 = [SOS, 5, 6, EOS];
        let l2 = [SOS, 7, EOS];
        let tb = TokenBatch::from_labels(&[&l1, &l2], 10).unwrap();
        let (inp, tgt) = tb.shift().unwrap();
        assert_eq!(inp.tokens, vec![SOS, 5, 6, SOS, 7, PAD]);
        assert_eq!(inp.lengths, vec![3, 2]);
        assert_eq!(tgt, vec![5, 6, EOS, 7, EOS, PAD]);
    }

    #[test]
    fn token_contracts() {
        assert!(TokenBatch::from_labels(&[&[SOS, 4]], 10).is_err());
        assert!(TokenBatch::from_prefixes(&[&[SOS, 12]], 10).is_err());
        assert!(TokenBatch::from_prefixes(&[&[4]], 10).is_err());
    }
}
