use rand::Rng;
use rand_chacha::ChaCha8Rng;
use ssan_core::fsmn::{fsmn_forward, FsmnCoefficients};
use ssan_core::tensor::Tensor;

use super::rng;

/// Direct evaluation with an explicitly zero-padded copy of the input:
/// masked positions are zeroed first, then every tap reads the padded buffer.
pub fn brute_force(
    x: &[f64],
    batch: usize,
    time: usize,
    dim: usize,
    back: &[Vec<f64>],
    ahead: &[Vec<f64>],
    mask: Option<&[bool]>,
) -> Vec<f64> {
    let n1 = back.len() - 1;
    let n2 = ahead.len();
    let width = n1 + time + n2;
    let mut out = vec![0.0; batch * time * dim];
    for b in 0..batch {
        let mut padded = vec![vec![0.0; dim]; width];
        for t in 0..time {
            if mask.is_none_or(|m| m[b * time + t]) {
                padded[n1 + t].copy_from_slice(&x[(b * time + t) * dim..(b * time + t + 1) * dim]);
            }
        }
        for t in 0..time {
            for k in 0..dim {
                let mut acc = x[(b * time + t) * dim + k];
                for (i, tap) in back.iter().enumerate() {
                    acc += tap[k] * padded[n1 + t - i][k];
                }
                for (j, tap) in ahead.iter().enumerate() {
                    acc += tap[k] * padded[n1 + t + j + 1][k];
                }
                out[(b * time + t) * dim + k] = acc;
            }
        }
    }
    out
}

/// A random memory-block problem: T ≤ 12, d ≤ 8, N1 ≤ 4, N2 ≤ 4.
#[derive(Clone, Debug)]
pub struct FsmnCase {
    pub batch: usize,
    pub time: usize,
    pub dim: usize,
    pub x: Vec<f64>,
    pub back: Vec<Vec<f64>>,
    pub ahead: Vec<Vec<f64>>,
    pub mask: Option<Vec<bool>>,
}

fn values(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-2.0..2.0)).collect()
}

impl FsmnCase {
    pub fn draw(seed: u64) -> Self {
        let mut r = rng(seed);
        let batch = r.random_range(1..=3);
        let time = r.random_range(1..=12);
        let dim = r.random_range(1..=8);
        let n1 = r.random_range(0..=4);
        let n2 = r.random_range(0..=4);
        let x = values(&mut r, batch * time * dim);
        let back = (0..=n1).map(|_| values(&mut r, dim)).collect();
        let ahead = (0..n2).map(|_| values(&mut r, dim)).collect();
        let mask = r.random_bool(0.5).then(|| {
            (0..batch)
                .flat_map(|_| {
                    let len = r.random_range(1..=time);
                    (0..time).map(move |t| t < len)
                })
                .collect()
        });
        FsmnCase {
            batch,
            time,
            dim,
            x,
            back,
            ahead,
            mask,
        }
    }

    pub fn zero_taps(mut self) -> Self {
        self.back.iter_mut().for_each(|t| t.fill(0.0));
        self.ahead.iter_mut().for_each(|t| t.fill(0.0));
        self
    }

    /// `(implementation, oracle)` outputs.
    pub fn run(&self) -> (Vec<f64>, Vec<f64>) {
        let shape = if self.batch == 1 {
            vec![self.time, self.dim]
        } else {
            vec![self.batch, self.time, self.dim]
        };
        let x = Tensor::new(&shape, self.x.clone()).unwrap();
        let back = Tensor::new(&[self.back.len(), self.dim], self.back.concat()).unwrap();
        let ahead = (!self.ahead.is_empty()).then(|| Tensor::new(&[self.ahead.len(), self.dim], self.ahead.concat()).unwrap());
        let coeffs = FsmnCoefficients::from_taps(back, ahead).unwrap();
        let got = fsmn_forward(&x, &coeffs, self.mask.as_deref()).unwrap().into_data();
        let want = brute_force(&self.x, self.batch, self.time, self.dim, &self.back, &self.ahead, self.mask.as_deref());
        (got, want)
    }
}
