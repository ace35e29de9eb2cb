//! Synthetic sequence tasks standing in for speech corpora.
//!
//! A latent symbol string is rendered as frames: every symbol owns a fixed
//! random prototype vector, repeated for [`FRAMES_PER_TOKEN`] frames with
//! Gaussian noise added. Stacking and downsampling by the same factor then
//! yields one feature row per symbol. Every utterance ends with
//! [`TRAILING_SILENCE`] symbol slots of noise-only frames.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::training::batch::{EOS, FIRST_SYMBOL, SOS};
use crate::training::features::DOWNSAMPLE;

pub const FRAMES_PER_TOKEN: usize = DOWNSAMPLE;
pub const FRAME_DIM: usize = 80;
pub const TRAILING_SILENCE: usize = 1;
const PROTOTYPE_SEED: u64 = 0x5EED_0F_7A5C;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyKind {
    Copy,
    Reverse,
    MonotonicMap,
}

impl std::str::FromStr for ToyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(ToyKind::Copy),
            "reverse" => Ok(ToyKind::Reverse),
            "monotonic-map" => Ok(ToyKind::MonotonicMap),
            other => Err(Error::Config(format!("unknown toy task `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTaskConfig {
    pub kind: ToyKind,
    pub n: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Includes pad, sos and eos.
    pub vocab_size: usize,
    pub seed: u64,
    /// Standard deviation of the per-frame noise.
    pub noise: f64,
}

impl ToyTaskConfig {
    pub fn copy(n: usize, seed: u64) -> Self {
        Self {
            kind: ToyKind::Copy,
            n,
            min_len: 5,
            max_len: 15,
            vocab_size: 30,
            seed,
            noise: 0.5,
        }
    }
}

/// One utterance: raw frames `[T, frame_dim]` and its `sos … eos` label.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub frames: Vec<f32>,
    pub frame_dim: usize,
    pub label: Vec<u32>,
}

impl Example {
    pub fn num_frames(&self) -> usize {
        self.frames.len() / self.frame_dim
    }

    /// Label without sos and eos.
    pub fn symbols(&self) -> &[u32] {
        &self.label[1..self.label.len() - 1]
    }
}

/// Prototype frame of every symbol id, `[vocab, FRAME_DIM]`.
pub fn prototypes(vocab_size: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(PROTOTYPE_SEED ^ vocab_size as u64);
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    (0..vocab_size * FRAME_DIM).map(|_| normal.sample(&mut rng)).collect()
}

/// The fixed symbol permutation of the monotonic-map task.
pub fn map_symbol(s: u32, vocab_size: usize) -> u32 {
    let n = vocab_size as u32 - FIRST_SYMBOL;
    let k = (1..n).rev().find(|k| gcd(*k, n) == 1 && *k > 1).unwrap_or(1);
    FIRST_SYMBOL + ((s - FIRST_SYMBOL) * k + 1) % n
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn make_toy_task(cfg: &ToyTaskConfig) -> Result<Vec<Example>> {
    if cfg.vocab_size < 5 {
        return Err(Error::Config(format!("toy vocab {} must be at least 5", cfg.vocab_size)));
    }
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::Config(format!(
            "toy lengths {}..={} are invalid",
            cfg.min_len, cfg.max_len
        )));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::Config(format!("toy noise {} is invalid", cfg.noise)));
    }
    let protos = prototypes(cfg.vocab_size);
    let noise = Normal::new(0.0f32, cfg.noise as f32).expect("checked above");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let latent: Vec<u32> = (0..len)
            .map(|_| rng.random_range(FIRST_SYMBOL..cfg.vocab_size as u32))
            .collect();
        let mut frames = Vec::with_capacity((len + TRAILING_SILENCE) * FRAMES_PER_TOKEN * FRAME_DIM);
        for &s in &latent {
            let p = &protos[s as usize * FRAME_DIM..(s as usize + 1) * FRAME_DIM];
            for _ in 0..FRAMES_PER_TOKEN {
                frames.extend(p.iter().map(|&v| v + noise.sample(&mut rng)));
            }
        }
        for _ in 0..TRAILING_SILENCE * FRAMES_PER_TOKEN * FRAME_DIM {
            frames.push(noise.sample(&mut rng));
        }
        let body: Vec<u32> = match cfg.kind {
            ToyKind::Copy => latent,
            ToyKind::Reverse => latent.into_iter().rev().collect(),
            ToyKind::MonotonicMap => latent.into_iter().map(|s| map_symbol(s, cfg.vocab_size)).collect(),
        };
        let mut label = Vec::with_capacity(len + 2);
        label.push(SOS);
        label.extend(body);
        label.push(EOS);
        out.push(Example {
            frames,
            frame_dim: FRAME_DIM,
            label,
        });
    }
    Ok(out)
}
