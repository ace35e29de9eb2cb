//! Error-rate scoring and attention-matrix export.

pub mod attention;
pub mod cer;

pub use attention::{attention_maps, dump_attention, AttentionRecord, AttentionSource};
pub use cer::{edit_distance, score_cer, EditCounts, EvalReport, UtteranceScore};

use crate::error::Result;
use crate::model::Model;
use crate::tensor::Scalar;
use crate::training::toy::Example;
use crate::training::trainer::make_eval_batch;

/// Greedy-decodes `examples` in batches and scores them against their labels.
pub fn evaluate<F: Scalar>(
    model: &Model<F>,
    examples: &[Example],
    batch_size: usize,
    max_len: usize,
) -> Result<EvalReport> {
    let mut hyps = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let (fb, _) = make_eval_batch(&refs, model.config.vocab_size)?;
        hyps.extend(model.greedy_decode(&fb, max_len)?);
    }
    let refs: Vec<Vec<u32>> = examples.iter().map(|e| e.label.clone()).collect();
    score_cer(&hyps, &refs)
}
