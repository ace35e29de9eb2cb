//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, keys are dotted paths such as
//! `model.d_model` or `train.spec_augment.time_masks`. Later assignments
//! override earlier ones.

use std::path::Path;
use std::str::FromStr;

use crate::attention::Variant;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::toy::{ToyKind, ToyTaskConfig};
use crate::training::trainer::TrainingConfig;

/// A toy data set description, e.g. `copy:n=200,seed=7,min_len=5,max_len=15`.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub kind: ToyKind,
    pub n: usize,
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
    pub noise: f64,
    /// Selects one example (attention export).
    pub index: Option<usize>,
}

impl DataSpec {
    pub fn task(&self, vocab_size: usize) -> ToyTaskConfig {
        ToyTaskConfig {
            kind: self.kind,
            n: self.n,
            min_len: self.min_len,
            max_len: self.max_len,
            vocab_size,
            seed: self.seed,
            noise: self.noise,
        }
    }
}

impl FromStr for DataSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let base = ToyTaskConfig::copy(0, 0);
        let mut spec = DataSpec {
            kind: kind.trim().parse()?,
            n: 200,
            seed: 0,
            min_len: base.min_len,
            max_len: base.max_len,
            noise: base.noise,
            index: None,
        };
        for part in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("data spec item `{part}` is not key=value")))?;
            match k.trim() {
                "n" => spec.n = value(k, v)?,
                "seed" => spec.seed = value(k, v)?,
                "min_len" => spec.min_len = value(k, v)?,
                "max_len" => spec.max_len = value(k, v)?,
                "noise" => spec.noise = value(k, v)?,
                "index" => spec.index = Some(value(k, v)?),
                other => return Err(Error::Config(format!("unknown data spec key `{other}`"))),
            }
        }
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train: DataSpec,
    pub dev: DataSpec,
    /// Generated-token limit for greedy decoding.
    pub decode_max_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: "copy:n=2000,seed=1".parse().expect("valid spec"),
            dev: "copy:n=200,seed=2".parse().expect("valid spec"),
            decode_max_len: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainingConfig,
    pub data: DataConfig,
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{}` for `{}`", v.trim(), key.trim())))
}

pub const SEED_ENV: &str = "SSAN_SEED";

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies one assignment given as `key=value`.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "model.encoder_layers" => m.encoder_layers = value(key, v)?,
            "model.decoder_layers" => m.decoder_layers = value(key, v)?,
            "model.d_model" => m.d_model = value(key, v)?,
            "model.heads" => m.heads = value(key, v)?,
            "model.d_ffn" => m.d_ffn = value(key, v)?,
            "model.variant" => m.variant = v.parse::<Variant>()?,
            "model.encoder_fsmn.look_back" => m.encoder_fsmn.look_back = value(key, v)?,
            "model.encoder_fsmn.look_ahead" => m.encoder_fsmn.look_ahead = value(key, v)?,
            "model.decoder_fsmn.look_back" => m.decoder_fsmn.look_back = value(key, v)?,
            "model.decoder_fsmn.look_ahead" => m.decoder_fsmn.look_ahead = value(key, v)?,
            "model.input_dim" => m.input_dim = value(key, v)?,
            "model.vocab_size" => m.vocab_size = value(key, v)?,
            "model.dropout" => m.dropout = value(key, v)?,
            "train.warmup_steps" => t.warmup_steps = value(key, v)?,
            "train.lr_scale" => t.lr_scale = value(key, v)?,
            "train.grad_clip_norm" => t.grad_clip_norm = value(key, v)?,
            "train.adam.beta1" => t.adam.beta1 = value(key, v)?,
            "train.adam.beta2" => t.adam.beta2 = value(key, v)?,
            "train.adam.eps" => t.adam.eps = value(key, v)?,
            "train.label_smoothing" => t.label_smoothing = value(key, v)?,
            "train.batch_size" => t.batch_size = value(key, v)?,
            "train.max_steps" => t.max_steps = value(key, v)?,
            "train.seed" => t.seed = value(key, v)?,
            "train.eval_every" => t.eval_every = value(key, v)?,
            "train.patience" => t.patience = value(key, v)?,
            "train.spec_augment.time_masks" => t.spec_augment.time_masks = value(key, v)?,
            "train.spec_augment.max_time_width" => t.spec_augment.max_time_width = value(key, v)?,
            "train.spec_augment.freq_masks" => t.spec_augment.freq_masks = value(key, v)?,
            "train.spec_augment.max_freq_width" => t.spec_augment.max_freq_width = value(key, v)?,
            "data.train" => d.train = v.parse()?,
            "data.dev" => d.dev = v.parse()?,
            "data.decode_max_len" => d.decode_max_len = value(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Seed precedence: explicit flag, then `SSAN_SEED`, then the file.
    pub fn resolve_seed(&mut self, flag: Option<u64>, env: Option<&str>) -> Result<()> {
        if let Some(s) = flag {
            self.train.seed = s;
        } else if let Some(e) = env {
            self.train.seed = e
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{e}` is not an integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.decode_max_len == 0 {
            return Err(Error::Config("data.decode_max_len must be positive".into()));
        }
        Ok(())
    }
}
