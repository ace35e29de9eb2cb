use rand::Rng;

/// Frames on each side of the centre frame.
pub const CONTEXT: (usize, usize) = (3, 3);
pub const DOWNSAMPLE: usize = 6;

/// Concatenates frames `t-left ..= t+right` (zero rows outside the
/// sequence) and keeps every `rate`-th row starting at `t = 0`.
/// Output is `[ceil(T / rate), (left + 1 + right) · dim]`.
pub fn stack_and_downsample(frames: &[f32], dim: usize, context: (usize, usize), rate: usize) -> Vec<f32> {
    assert!(dim > 0 && rate > 0 && frames.len() % dim == 0);
    let t = frames.len() / dim;
    let (left, right) = context;
    let width = (left + 1 + right) * dim;
    let mut out = Vec::with_capacity(t.div_ceil(rate) * width);
    for centre in (0..t).step_by(rate) {
        for k in 0..left + 1 + right {
            let src = centre as isize + k as isize - left as isize;
            if src >= 0 && (src as usize) < t {
                let s = src as usize;
                out.extend_from_slice(&frames[s * dim..(s + 1) * dim]);
            } else {
                out.extend(std::iter::repeat_n(0.0, dim));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecAugmentConfig {
    pub time_masks: usize,
    pub max_time_width: usize,
    pub freq_masks: usize,
    pub max_freq_width: usize,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self {
            time_masks: 2,
            max_time_width: 10,
            freq_masks: 2,
            max_freq_width: 8,
        }
    }
}

impl SpecAugmentConfig {
    pub fn disabled() -> Self {
        Self {
            time_masks: 0,
            max_time_width: 0,
            freq_masks: 0,
            max_freq_width: 0,
        }
    }
}

/// Zeroes one contiguous band of `width` frames starting at `start`.
pub fn mask_time(frames: &mut [f32], dim: usize, start: usize, width: usize) {
    let t = frames.len() / dim;
    let end = (start + width).min(t);
    frames[start.min(t) * dim..end * dim].fill(0.0);
}

/// Zeroes feature channels `start .. start + width` in every frame.
pub fn mask_freq(frames: &mut [f32], dim: usize, start: usize, width: usize) {
    let end = (start + width).min(dim);
    for row in frames.chunks_exact_mut(dim) {
        row[start.min(dim)..end].fill(0.0);
    }
}

/// Time and frequency masking (no time warping). Widths are drawn uniformly
/// from `0 ..= max` and clamped to the sequence extents.
pub fn spec_augment<R: Rng + ?Sized>(frames: &mut [f32], dim: usize, cfg: &SpecAugmentConfig, rng: &mut R) {
    let t = frames.len() / dim;
    for _ in 0..cfg.time_masks {
        let w = rng.random_range(0..=cfg.max_time_width.min(t));
        let start = rng.random_range(0..=t - w);
        mask_time(frames, dim, start, w);
    }
    for _ in 0..cfg.freq_masks {
        let w = rng.random_range(0..=cfg.max_freq_width.min(dim));
        let start = rng.random_range(0..=dim - w);
        mask_freq(frames, dim, start, w);
    }
}
