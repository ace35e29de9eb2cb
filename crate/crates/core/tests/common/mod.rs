#![allow(dead_code)]

pub mod fsmn;
pub mod ops;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssan_core::attention::{FsmnOrders, Variant};
use ssan_core::model::{Model, ModelConfig, Session};
use ssan_core::params::Bindings;
use ssan_core::tensor::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use ssan_core::tensor::{Dropout, Graph, NodeId, Tensor};
use ssan_core::training::batch::{FeatureBatch, TokenBatch, FIRST_SYMBOL, PAD, SOS};
use ssan_core::training::label_smoothed_ce;
use ssan_core::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `Σ x ⊙ W` with a fixed pseudo-random `W`; makes every output coordinate
/// matter with a distinct weight.
pub fn weighted_sum(g: &mut Graph<f64>, x: NodeId, seed: u64) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    let mut r = rng(seed ^ 0xA11CE);
    let w = g.constant(rand_tensor(&shape, &mut r));
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

/// Small two-encoder / one-decoder model used by the gradient and property suites.
pub fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        encoder_layers: 2,
        decoder_layers: 1,
        d_model: 16,
        heads: 2,
        d_ffn: 32,
        variant,
        encoder_fsmn: FsmnOrders::new(2, 1),
        decoder_fsmn: FsmnOrders::new(2, 0),
        input_dim: 12,
        vocab_size: 11,
        dropout: 0.1,
    }
}

/// Acceptance toy model: enc 2 / dec 1, d_model 64, 4 heads.
pub fn toy_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        encoder_layers: 2,
        decoder_layers: 1,
        d_model: 64,
        heads: 4,
        d_ffn: 256,
        variant,
        encoder_fsmn: FsmnOrders::new(3, 3),
        decoder_fsmn: FsmnOrders::new(3, 0),
        input_dim: 560,
        vocab_size: 30,
        dropout: 0.1,
    }
}

pub fn random_features(lengths: &[usize], dim: usize, r: &mut ChaCha8Rng) -> FeatureBatch {
    let seqs: Vec<Vec<f32>> = lengths
        .iter()
        .map(|&l| (0..l * dim).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let refs: Vec<&[f32]> = seqs.iter().map(Vec::as_slice).collect();
    FeatureBatch::from_sequences(&refs, dim).unwrap()
}

/// Labels `sos, symbols…, eos` with random symbols.
pub fn random_labels(lengths: &[usize], vocab: usize, r: &mut ChaCha8Rng) -> TokenBatch {
    let seqs: Vec<Vec<u32>> = lengths
        .iter()
        .map(|&l| {
            let mut s = vec![1];
            s.extend((0..l).map(|_| r.random_range(FIRST_SYMBOL..vocab as u32)));
            s.push(2);
            s
        })
        .collect();
    let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
    TokenBatch::from_labels(&refs, vocab).unwrap()
}

/// Finite-difference check of the whole encoder/decoder in f64: inputs are
/// the features followed by every parameter tensor; the loss is the
/// label-smoothed cross-entropy of teacher-forced logits. Dropout is off.
pub fn model_gradcheck(variant: Variant, draw: u64, coords_per_input: usize) -> GradCheckReport {
    let mut r = rng(1000 + draw);
    let cfg = tiny_config(variant);
    let model = Model::<f64>::new(cfg.clone(), draw).unwrap();
    let lengths = [r.random_range(2..6usize), r.random_range(2..6usize)];
    let fb = random_features(&lengths, cfg.input_dim, &mut r);
    let labels = random_labels(&[r.random_range(1..4usize), r.random_range(1..4usize)], cfg.vocab_size, &mut r);
    let (dec_in, targets) = labels.shift().unwrap();

    let mut inputs = vec![Tensor::new(
        &[fb.batch_size(), fb.max_len, fb.dim],
        fb.features.iter().map(|&v| v as f64).collect(),
    )
    .unwrap()
    .with_grad()];
    inputs.extend(model.params.iter().map(|(_, t)| t.clone()));

    let build = |g: &mut Graph<f64>, ids: &[NodeId]| -> Result<NodeId> {
        let mut s = Session {
            graph: std::mem::replace(g, Graph::new()),
            bind: Bindings::from_nodes(ids[1..].to_vec()),
            dropout: Dropout::inactive(),
        };
        let out = (|| {
            let enc = model.encode_node(&mut s, ids[0], &fb.lengths)?;
            let dec = model.decode_teacher_forced(&mut s, &dec_in, &enc)?;
            label_smoothed_ce(&mut s.graph, dec.logits, &targets, 0.1, PAD)
        })();
        *g = s.graph;
        out
    };
    let opts = GradCheckOptions {
        step: 1e-5,
        max_coords_per_input: Some(coords_per_input),
        floor: 1e-6,
        seed: draw,
    };
    check_gradients(&inputs, build, &opts).unwrap()
}

/// Teacher-forced logits of `tokens` given `features`, without dropout.
pub fn teacher_forced_logits<F: ssan_core::tensor::Scalar>(
    model: &Model<F>,
    features: &FeatureBatch,
    tokens: &TokenBatch,
) -> Vec<F> {
    let mut s = model.eval_session();
    let enc = model.encode(&mut s, features).unwrap();
    let dec = model.decode_teacher_forced(&mut s, tokens, &enc).unwrap();
    s.graph.value(dec.logits).data().to_vec()
}

/// `sos` followed by `len - 1` random symbols.
pub fn random_prefix(len: usize, vocab: usize, r: &mut ChaCha8Rng) -> Vec<u32> {
    let mut p = vec![SOS];
    p.extend((1..len).map(|_| r.random_range(FIRST_SYMBOL..vocab as u32)));
    p
}

/// Runs `trials` random prefix pairs that agree up to a cut position and
/// differ afterwards; returns how many changed any logit at or before the cut.
pub fn causality_violations(variant: Variant, trials: usize, seed: u64) -> usize {
    let cfg = tiny_config(variant);
    let model = Model::<f32>::new(cfg.clone(), seed).unwrap();
    let mut r = rng(seed ^ 0xCA05);
    let mut bad = 0;
    for _ in 0..trials {
        let fb = random_features(&[r.random_range(1..8)], cfg.input_dim, &mut r);
        let len = r.random_range(2..10);
        let a = random_prefix(len, cfg.vocab_size, &mut r);
        let cut = r.random_range(0..len - 1);
        let mut b = a.clone();
        for tok in &mut b[cut + 1..] {
            *tok = r.random_range(FIRST_SYMBOL..cfg.vocab_size as u32);
        }
        let la = teacher_forced_logits(&model, &fb, &TokenBatch::from_prefixes(&[&a], cfg.vocab_size).unwrap());
        let lb = teacher_forced_logits(&model, &fb, &TokenBatch::from_prefixes(&[&b], cfg.vocab_size).unwrap());
        let keep = (cut + 1) * cfg.vocab_size;
        if la[..keep].iter().zip(&lb[..keep]).any(|(x, y)| x.to_bits() != y.to_bits()) {
            bad += 1;
        }
    }
    bad
}

/// Trains `split` steps, resumes from disk in a fresh trainer and continues
/// to `total`; compares against an uninterrupted run. Returns
/// `(weights identical, metrics logs identical)`. `split` must be a
/// multiple of the evaluation interval (5).
pub fn resume_matches_unbroken(seed: u64, split: u64, total: u64) -> (bool, bool) {
    use ssan_core::training::trainer::METRICS_FILE;
    use ssan_core::training::{make_toy_task, Dataset, SpecAugmentConfig, ToyTaskConfig, Trainer, TrainingConfig};

    let mut train = ToyTaskConfig::copy(64, 1);
    train.max_len = 8;
    let mut dev = ToyTaskConfig::copy(16, 2);
    dev.max_len = 8;
    let data = Dataset {
        train: make_toy_task(&train).unwrap(),
        dev: make_toy_task(&dev).unwrap(),
    };
    let training = |max_steps| TrainingConfig {
        warmup_steps: 20,
        batch_size: 8,
        max_steps,
        seed,
        eval_every: 5,
        spec_augment: SpecAugmentConfig::default(),
        ..TrainingConfig::default()
    };
    let fresh = || Model::<f32>::new(toy_config(Variant::Ssan), seed).unwrap();

    let full_dir = tempfile::tempdir().unwrap();
    let mut full = Trainer::new(fresh(), training(total)).unwrap();
    full.run(&data, Some(full_dir.path())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    Trainer::new(fresh(), training(split))
        .unwrap()
        .run(&data, Some(dir.path()))
        .unwrap();
    let other_init = Model::<f32>::new(toy_config(Variant::Ssan), seed + 1).unwrap();
    let mut resumed = Trainer::resume(other_init, training(total), dir.path()).unwrap();
    assert_eq!(resumed.step, split);
    resumed.run(&data, Some(dir.path())).unwrap();

    let bits = |t: &Trainer| -> Vec<Vec<u32>> {
        t.model
            .params
            .iter()
            .map(|(_, v)| v.data().iter().map(|x| x.to_bits()).collect())
            .collect()
    };
    let log = |d: &tempfile::TempDir| std::fs::read_to_string(d.path().join(METRICS_FILE)).unwrap();
    (
        bits(&full) == bits(&resumed) && full.adam.t == resumed.adam.t,
        log(&full_dir) == log(&dir),
    )
}
