//! Central finite-difference checks for analytic gradients.
//!
//! `build` must be a pure function of the input tensors: it is re-run on
//! perturbed copies to obtain `(L(x + h) - L(x - h)) / 2h` for each checked
//! coordinate.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many coordinates per input (chosen at random).
    pub max_coords_per_input: Option<usize>,
    /// Magnitudes below this are compared absolutely rather than relatively.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords_per_input: None,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(input index, element index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<B>(build: &B, inputs: &[Tensor<f64>]) -> Result<(Graph<f64>, Vec<NodeId>, NodeId)>
where
    B: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::Contract("gradient check needs a scalar loss".into()));
    }
    Ok((g, ids, loss))
}

/// Compares analytic gradients of every `requires_grad` input against central
/// differences.
pub fn check_gradients<B>(
    inputs: &[Tensor<f64>],
    build: B,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let (mut g, ids, loss) = eval(&build, inputs)?;
    g.backward(loss)?;
    let analytic: Vec<Option<Vec<f64>>> = ids.iter().map(|&i| g.grad(i).map(<[f64]>::to_vec)).collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (idx, grads) in analytic.iter().enumerate() {
        let Some(grads) = grads else { continue };
        let n = grads.len();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = work[idx].data()[c];
            work[idx].data_mut()[c] = orig + opts.step;
            let plus = loss_value(&build, &work)?;
            work[idx].data_mut()[c] = orig - opts.step;
            let minus = loss_value(&build, &work)?;
            work[idx].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(grads[c], numeric, opts.floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((idx, c, grads[c], numeric));
            }
        }
    }
    Ok(report)
}

fn loss_value<B>(build: &B, inputs: &[Tensor<f64>]) -> Result<f64>
where
    B: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let (g, _, loss) = eval(build, inputs)?;
    g.value(loss).item()
}
