use crate::error::{dim_err, Error, Result};
use crate::tensor::{Graph, NodeId, Scalar, Tensor};

/// Cross-entropy of `logits` (`[.., V]`) against smoothed targets: `1 - s` on
/// the target id and `s / (V - 1)` on every other id, averaged over
/// positions whose target is not `pad_id`.
pub fn label_smoothed_ce<F: Scalar>(
    g: &mut Graph<F>,
    logits: NodeId,
    targets: &[u32],
    smoothing: f64,
    pad_id: u32,
) -> Result<NodeId> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Contract(format!("smoothing {smoothing} not in [0, 1)")));
    }
    let shape = g.shape(logits).to_vec();
    let v = *shape.last().unwrap_or(&1);
    let rows = g.value(logits).numel() / v;
    if targets.len() != rows || v < 2 {
        return Err(dim_err(
            "label_smoothed_ce",
            format!("{} targets for logits {shape:?}", targets.len()),
        ));
    }
    let valid = targets.iter().filter(|&&t| t != pad_id).count();
    if valid == 0 {
        return Err(Error::Contract("every target position is padding".into()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= v) {
        return Err(Error::Contract(format!("target id {bad} >= vocab size {v}")));
    }
    let on = F::cast(1.0 - smoothing);
    let off = F::cast(smoothing / (v - 1) as f64);
    let mut w = vec![F::zero(); rows * v];
    for (r, &t) in targets.iter().enumerate() {
        if t == pad_id {
            continue;
        }
        let row = &mut w[r * v..(r + 1) * v];
        row.fill(off);
        row[t as usize] = on;
    }
    let w = g.constant(Tensor::new(&shape, w)?);
    let lsm = g.log_softmax(logits);
    let prod = g.mul(lsm, w)?;
    let total = g.sum(prod);
    Ok(g.scale(total, F::cast(-1.0 / valid as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn oracle(logits: &[f64], v: usize, targets: &[u32], s: f64) -> f64 {
        let mut total = 0.0;
        let mut n = 0;
        for (r, &t) in targets.iter().enumerate() {
            if t == 0 {
                continue;
            }
            let row = &logits[r * v..(r + 1) * v];
            let z: f64 = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            for (j, &x) in row.iter().enumerate() {
                let q = if j == t as usize { 1.0 - s } else { s / (v - 1) as f64 };
                total -= q * (x - z);
            }
            n += 1;
        }
        total / n as f64
    }

    fn loss(logits: Vec<f64>, shape: &[usize], targets: &[u32], s: f64) -> f64 {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(shape, logits).unwrap());
        let l = label_smoothed_ce(&mut g, x, targets, s, 0).unwrap();
        g.value(l).item().unwrap()
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for s in [0.0, 0.1, 0.4] {
            let logits: Vec<f64> = (0..2 * 3 * 7).map(|_| rng.random_range(-4.0..4.0)).collect();
            let t = [3, 5, 0, 1, 6, 0];
            let got = loss(logits.clone(), &[2, 3, 7], &t, s);
            assert!((got - oracle(&logits, 7, &t, s)).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_give_log_v() {
        for s in [0.0, 0.1, 0.3] {
            let got = loss(vec![0.5; 10], &[2, 5], &[3, 4], s);
            assert!((got - 5f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_smoothing_is_cross_entropy() {
        let logits = vec![1.0, 2.0, 0.5, -1.0];
        let got = loss(logits.clone(), &[1, 4], &[1], 0.0);
        let z: f64 = logits.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((got - (z - 2.0)).abs() < 1e-14);
    }

    #[test]
    fn pad_positions_do_not_matter() {
        let a = loss(vec![1.0, 2.0, 3.0, 9.0, -9.0, 4.0], &[2, 3], &[2, 0], 0.1);
        let b = loss(vec![1.0, 2.0, 3.0, -50.0, 7.0, 0.0], &[2, 3], &[2, 0], 0.1);
        assert_eq!(a, b);
    }

    #[test]
    fn all_pad_is_contract_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(label_smoothed_ce(&mut g, x, &[0, 0], 0.1, 0), Err(Error::Contract(_))));
    }
}
