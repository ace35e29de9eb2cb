/// `scale · d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn lr_schedule(step: u64, d_model: usize, warmup: u64, scale: f64) -> f64 {
    scale * (d_model as f64).powf(-0.5) * decay_branch(step).min(warmup_branch(step, warmup))
}

/// `step^-0.5`.
pub fn decay_branch(step: u64) -> f64 {
    (step.max(1) as f64).powf(-0.5)
}

/// `step · warmup^-1.5`, evaluated as `(step / warmup) · warmup^-0.5` so it
/// equals [`decay_branch`] bit for bit at `step == warmup`.
pub fn warmup_branch(step: u64, warmup: u64) -> f64 {
    let w = warmup.max(1) as f64;
    (step.max(1) as f64 / w) * w.powf(-0.5)
}
