//! The training loop, its metrics log and resumable state.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::checkpoint::{self, Record};
use crate::model::Model;
use crate::tensor::{Dropout, Scalar};
use crate::training::batch::{FeatureBatch, TokenBatch, PAD};
use crate::training::features::{spec_augment, stack_and_downsample, SpecAugmentConfig, CONTEXT, DOWNSAMPLE};
use crate::training::loss::label_smoothed_ce;
use crate::training::optim::{clip_global_norm, global_grad_norm, Adam, AdamConfig};
use crate::training::schedule::lr_schedule;
use crate::training::toy::Example;

pub const METRICS_HEADER: &str = "step,loss,lr,grad_norm,dev_loss";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
const OPTIMIZER_FILE: &str = "optimizer.bin";
const STATE_FILE: &str = "train_state.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub warmup_steps: u64,
    pub lr_scale: f64,
    pub grad_clip_norm: f64,
    pub adam: AdamConfig,
    pub label_smoothing: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    /// Dev loss is computed every this many steps and at the last step.
    pub eval_every: u64,
    /// Evaluations without dev improvement before stopping.
    pub patience: usize,
    pub spec_augment: SpecAugmentConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 8000,
            lr_scale: 1.0,
            grad_clip_norm: 5.0,
            adam: AdamConfig::default(),
            label_smoothing: 0.1,
            batch_size: 32,
            max_steps: 3000,
            seed: 0,
            eval_every: 100,
            patience: 10,
            spec_augment: SpecAugmentConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.warmup_steps < 1 {
            return err("warmup_steps must be at least 1".into());
        }
        if !(self.grad_clip_norm > 0.0) {
            return err(format!("grad_clip_norm {} must be positive", self.grad_clip_norm));
        }
        if !(self.lr_scale > 0.0) {
            return err(format!("lr_scale {} must be positive", self.lr_scale));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return err(format!("label_smoothing {} not in [0, 1)", self.label_smoothing));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return err(format!("invalid adam settings {a:?}"));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.patience == 0 {
            return err("batch_size, eval_every and patience must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// After clipping.
    pub grad_norm: f64,
    pub dev_loss: Option<f64>,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let dev = self.dev_loss.map(|d| d.to_string()).unwrap_or_default();
        format!("{},{},{},{},{dev}", self.step, self.loss, self.lr, self.grad_norm)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
}

/// Stacks, downsamples and pads examples into model batches, optionally
/// masking the raw frames first.
pub fn make_batch<R: Rng + ?Sized>(
    examples: &[&Example],
    vocab_size: usize,
    augment: Option<(&SpecAugmentConfig, &mut R)>,
) -> Result<(FeatureBatch, TokenBatch)> {
    let Some(first) = examples.first() else {
        return Err(Error::Contract("empty batch".into()));
    };
    let dim = first.frame_dim;
    let mut aug = augment;
    let stacked: Vec<Vec<f32>> = examples
        .iter()
        .map(|ex| {
            let mut frames = ex.frames.clone();
            if let Some((cfg, rng)) = aug.as_mut() {
                spec_augment(&mut frames, dim, cfg, *rng);
            }
            stack_and_downsample(&frames, dim, CONTEXT, DOWNSAMPLE)
        })
        .collect();
    let refs: Vec<&[f32]> = stacked.iter().map(Vec::as_slice).collect();
    let fb = FeatureBatch::from_sequences(&refs, dim * (CONTEXT.0 + 1 + CONTEXT.1))?;
    let labels: Vec<&[u32]> = examples.iter().map(|e| e.label.as_slice()).collect();
    Ok((fb, TokenBatch::from_labels(&labels, vocab_size)?))
}

/// [`make_batch`] without augmentation.
pub fn make_eval_batch(examples: &[&Example], vocab_size: usize) -> Result<(FeatureBatch, TokenBatch)> {
    make_batch::<ChaCha8Rng>(examples, vocab_size, None)
}

fn mix(seed: u64, salt: u64, k: u64) -> u64 {
    seed ^ salt.rotate_left(17) ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Indices of the training examples used at `step` (1-based): consecutive
/// slices of a per-epoch permutation.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch_size) as u64;
    let epoch = (step - 1) / per_epoch;
    let k = ((step - 1) % per_epoch) as usize;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, 0xE90C, epoch)));
    perm[k * batch_size..((k + 1) * batch_size).min(n)].to_vec()
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model<f32>,
    pub config: TrainingConfig,
    pub adam: Adam<f32>,
    /// Completed updates.
    pub step: u64,
    pub best_dev_loss: Option<f64>,
    pub bad_evals: usize,
    pub stopped: bool,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: u64,
    pub best_dev_loss: Option<f64>,
    pub early_stopped: bool,
    pub rows: Vec<MetricsRow>,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(&model.params, config.adam);
        Ok(Self {
            model,
            config,
            adam,
            step: 0,
            best_dev_loss: None,
            bad_evals: 0,
            stopped: false,
        })
    }

    /// Teacher-forced loss graph for one batch; returns the loss value.
    fn forward_backward(&mut self, fb: &FeatureBatch, tb: &TokenBatch, dropout: Dropout) -> Result<f64> {
        let m = &self.model;
        let mut s = m.session(dropout);
        let enc = m.encode(&mut s, fb)?;
        let (inputs, targets) = tb.shift()?;
        let dec = m.decode_teacher_forced(&mut s, &inputs, &enc)?;
        let loss = label_smoothed_ce(&mut s.graph, dec.logits, &targets, self.config.label_smoothing, PAD)?;
        let value = s.graph.value(loss).item()?.as_f64();
        if !value.is_finite() {
            let culprit = s
                .graph
                .first_non_finite()
                .map(|id| s.graph.describe(id))
                .unwrap_or_else(|| "loss".into());
            return Err(Error::NonFinite(format!(
                "loss is {value} at step {}; first non-finite tensor: {culprit}",
                self.step + 1
            )));
        }
        s.graph.backward(loss)?;
        self.model.params.zero_grad();
        self.model.params.accumulate_grads(&s.graph, &s.bind);
        Ok(value)
    }

    /// One optimisation step on the batch scheduled for the next step.
    pub fn train_step(&mut self, train: &[Example]) -> Result<MetricsRow> {
        if train.is_empty() {
            return Err(Error::Contract("no training examples".into()));
        }
        let step = self.step + 1;
        let cfg = self.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x57E9, step));
        let idx = batch_indices(train.len(), cfg.batch_size, cfg.seed, step);
        let picked: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
        let (fb, tb) = make_batch(&picked, self.model.config.vocab_size, Some((&cfg.spec_augment, &mut rng)))?;
        let dropout = Dropout::training(self.model.config.dropout, rng.random());
        let loss = self.forward_backward(&fb, &tb, dropout)?;
        let pre = clip_global_norm(&mut self.model.params, cfg.grad_clip_norm)?;
        if !pre.is_finite() {
            let culprit = self
                .model
                .params
                .iter()
                .find(|(_, t)| t.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
                .map_or("unknown", |(n, _)| n);
            return Err(Error::NonFinite(format!(
                "gradient norm is {pre} at step {step}; first non-finite gradient: `{culprit}`"
            )));
        }
        let post = global_grad_norm(&self.model.params);
        let lr = lr_schedule(step, self.model.config.d_model, cfg.warmup_steps, cfg.lr_scale);
        self.adam.step(&mut self.model.params, lr)?;
        self.step = step;
        Ok(MetricsRow {
            step,
            loss,
            lr,
            grad_norm: post,
            dev_loss: None,
        })
    }

    /// Token-weighted label-smoothed loss over `dev` without dropout.
    pub fn dev_loss(&self, dev: &[Example]) -> Result<f64> {
        let mut total = 0.0;
        let mut tokens = 0usize;
        for chunk in dev.chunks(self.config.batch_size) {
            let refs: Vec<&Example> = chunk.iter().collect();
            let (fb, tb) = make_eval_batch(&refs, self.model.config.vocab_size)?;
            let m = &self.model;
            let mut s = m.eval_session();
            let enc = m.encode(&mut s, &fb)?;
            let (inputs, targets) = tb.shift()?;
            let dec = m.decode_teacher_forced(&mut s, &inputs, &enc)?;
            let loss = label_smoothed_ce(&mut s.graph, dec.logits, &targets, self.config.label_smoothing, PAD)?;
            let n = targets.iter().filter(|&&t| t != PAD).count();
            total += s.graph.value(loss).item()?.as_f64() * n as f64;
            tokens += n;
        }
        if tokens == 0 {
            return Err(Error::Contract("empty dev set".into()));
        }
        Ok(total / tokens as f64)
    }

    /// Trains until `max_steps` or early stopping. With `out`, appends to the
    /// metrics log there, keeps the best-by-dev checkpoint and writes
    /// resumable state at every evaluation.
    pub fn run(&mut self, data: &Dataset, out: Option<&Path>) -> Result<TrainSummary> {
        let mut log = match out {
            Some(dir) => Some(open_metrics(dir)?),
            None => None,
        };
        let mut rows = Vec::new();
        while self.step < self.config.max_steps && !self.stopped {
            let mut row = self.train_step(&data.train)?;
            if self.step % self.config.eval_every == 0 || self.step == self.config.max_steps {
                let dev = self.dev_loss(&data.dev)?;
                row.dev_loss = Some(dev);
                if self.best_dev_loss.is_none_or(|b| dev < b) {
                    self.best_dev_loss = Some(dev);
                    self.bad_evals = 0;
                    if let Some(dir) = out {
                        self.model.save(&dir.join(BEST_CHECKPOINT))?;
                    }
                } else {
                    self.bad_evals += 1;
                    if self.bad_evals >= self.config.patience {
                        self.stopped = true;
                    }
                }
            }
            if let Some(w) = log.as_mut() {
                writeln!(w, "{}", row.csv_line())?;
            }
            let evaluated = row.dev_loss.is_some();
            rows.push(row);
            if evaluated {
                if let (Some(dir), Some(w)) = (out, log.as_mut()) {
                    w.flush()?;
                    self.save_state(dir)?;
                }
            }
        }
        if let Some(mut w) = log {
            w.flush()?;
        }
        Ok(TrainSummary {
            steps: self.step,
            best_dev_loss: self.best_dev_loss,
            early_stopped: self.stopped,
            rows,
        })
    }

    /// Writes the last checkpoint, optimizer moments and loop counters.
    pub fn save_state(&self, dir: &Path) -> Result<()> {
        self.model.save(&dir.join(LAST_CHECKPOINT))?;
        let mut records = Vec::with_capacity(2 * self.adam.m.len());
        for (which, moments) in [("m", &self.adam.m), ("v", &self.adam.v)] {
            for ((name, t), values) in self.model.params.iter().zip(moments.iter()) {
                records.push(Record {
                    name: format!("{which}.{name}"),
                    shape: t.shape().to_vec(),
                    values: values.clone(),
                });
            }
        }
        let mut w = BufWriter::new(File::create(dir.join(OPTIMIZER_FILE))?);
        checkpoint::write_records(&mut w, &records)?;
        w.flush()?;
        let best = self.best_dev_loss.map(|b| b.to_string()).unwrap_or_default();
        fs::write(
            dir.join(STATE_FILE),
            format!(
                "step={}\nadam_t={}\nbest_dev_loss={best}\nbad_evals={}\nstopped={}\n",
                self.step, self.adam.t, self.bad_evals, self.stopped
            ),
        )?;
        Ok(())
    }

    /// Restores a trainer saved by [`Trainer::save_state`]; `model` supplies
    /// the architecture and is overwritten with the saved weights.
    pub fn resume(mut model: Model<f32>, config: TrainingConfig, dir: &Path) -> Result<Self> {
        model.load(&dir.join(LAST_CHECKPOINT))?;
        let mut t = Trainer::new(model, config)?;
        let records = checkpoint::read_records(&mut BufReader::new(File::open(dir.join(OPTIMIZER_FILE))?))?;
        for (i, (name, tensor)) in t.model.params.iter().enumerate() {
            for (which, dst) in [("m", &mut t.adam.m[i]), ("v", &mut t.adam.v[i])] {
                let key = format!("{which}.{name}");
                let r = records.iter().find(|r| r.name == key).ok_or_else(|| Error::Parameter {
                    name: key.clone(),
                    detail: "missing from optimizer state".into(),
                })?;
                if r.shape != tensor.shape() {
                    return Err(Error::Parameter {
                        name: key,
                        detail: format!("shape {:?} vs {:?}", r.shape, tensor.shape()),
                    });
                }
                dst.copy_from_slice(&r.values);
            }
        }
        let text = fs::read_to_string(dir.join(STATE_FILE))?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad state line `{line}`")))?;
            match k {
                "step" => t.step = parse_state(v, line)?,
                "adam_t" => t.adam.t = parse_state(v, line)?,
                "best_dev_loss" if v.is_empty() => t.best_dev_loss = None,
                "best_dev_loss" => t.best_dev_loss = Some(parse_state(v, line)?),
                "bad_evals" => t.bad_evals = parse_state(v, line)?,
                "stopped" => t.stopped = parse_state(v, line)?,
                other => return Err(Error::Format(format!("unknown state key `{other}`"))),
            }
        }
        Ok(t)
    }
}

fn open_metrics(dir: &Path) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir)?;
    let path = dir.join(METRICS_FILE);
    let fresh = fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true);
    let mut w = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
    if fresh {
        writeln!(w, "{METRICS_HEADER}")?;
    }
    Ok(w)
}

fn parse_state<T: std::str::FromStr>(v: &str, line: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Format(format!("bad value in state line `{line}`")))
}
