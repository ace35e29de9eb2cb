use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.998,
            eps: 1e-9,
        }
    }
}

/// One bias-corrected Adam update of a flat parameter slice. `t` is the
/// 1-based update count.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<F: Scalar>(
    params: &mut [F],
    grads: &[F],
    m: &mut [F],
    v: &mut [F],
    t: u64,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || m.len() != n || v.len() != n {
        return Err(Error::Contract(format!(
            "adam: params {n}, grads {}, m {}, v {}",
            grads.len(),
            m.len(),
            v.len()
        )));
    }
    let b1 = F::cast(cfg.beta1);
    let b2 = F::cast(cfg.beta2);
    let c1 = F::cast(1.0 - cfg.beta1.powi(t as i32));
    let c2 = F::cast(1.0 - cfg.beta2.powi(t as i32));
    let eps = F::cast(cfg.eps);
    let lr = F::cast(lr);
    let one = F::one();
    for i in 0..n {
        let g = grads[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        params[i] -= lr * mh / (vh.sqrt() + eps);
    }
    Ok(())
}

/// Adam moments for every tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam<F: Scalar> {
    pub config: AdamConfig,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    pub t: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new<G: Scalar>(store: &ParamStore<G>, config: AdamConfig) -> Self {
        let zeros = |(_, t): (&str, &crate::tensor::Tensor<G>)| vec![F::zero(); t.numel()];
        Self {
            config,
            m: store.iter().map(zeros).collect(),
            v: store.iter().map(zeros).collect(),
            t: 0,
        }
    }

    /// Applies the stored gradients of `store` with learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore<F>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.t += 1;
        for (i, t) in store.tensors_mut().iter_mut().enumerate() {
            let Some(grad) = t.grad().map(<[F]>::to_vec) else {
                continue;
            };
            adam_step(t.data_mut(), &grad, &mut self.m[i], &mut self.v[i], self.t, lr, &self.config)?;
        }
        Ok(())
    }
}

/// L2 norm over all gradients of the store.
pub fn global_grad_norm<F: Scalar>(store: &ParamStore<F>) -> f64 {
    store
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients by `max_norm / norm` when the global norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<F: Scalar>(store: &mut ParamStore<F>, max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 || max_norm.is_nan() {
        return Err(Error::Contract(format!("max_norm {max_norm} must be positive")));
    }
    let norm = global_grad_norm(store);
    if norm > max_norm {
        let k = F::cast(max_norm / norm);
        for t in store.tensors_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|x| *x *= k);
            }
        }
    }
    Ok(norm)
}
