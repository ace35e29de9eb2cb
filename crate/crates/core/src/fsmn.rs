//! FSMN memory block: a learnable FIR-like filter over a sequence.
//!
//! For every position `t`
//!
//! ```text
//! out_t = x_t + Σ_{i=0..=N1} a_i ⊙ x_{t-i} + Σ_{j=1..=N2} c_j ⊙ x_{t+j}
//! ```
//!
//! where `a_i` (look-back taps, including the `i = 0` tap) and `c_j`
//! (look-ahead taps) are per-feature vectors. Positions outside the sequence
//! and positions flagged invalid by the mask contribute zero vectors; the
//! unlearned identity term `x_t` is always present.

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tensor::{CustomOp, Graph, NodeId, Scalar, Tensor};

/// Learnable taps of one memory block.
#[derive(Clone, Debug, PartialEq)]
pub struct FsmnCoefficients<F: Scalar> {
    look_back: usize,
    look_ahead: usize,
    dim: usize,
    /// `(N1 + 1) × d`: rows `a_0 … a_N1`.
    pub back_taps: Tensor<F>,
    /// `N2 × d`: rows `c_1 … c_N2`; absent when `N2 == 0`.
    pub ahead_taps: Option<Tensor<F>>,
}

impl<F: Scalar> FsmnCoefficients<F> {
    pub fn zeros(look_back: usize, look_ahead: usize, dim: usize) -> Self {
        Self {
            look_back,
            look_ahead,
            dim,
            back_taps: Tensor::zeros(&[look_back + 1, dim]),
            ahead_taps: (look_ahead > 0).then(|| Tensor::zeros(&[look_ahead, dim])),
        }
    }

    /// Independent uniform draws in `±1/√(N1 + 1 + N2)`.
    pub fn random<R: Rng + ?Sized>(look_back: usize, look_ahead: usize, dim: usize, rng: &mut R) -> Self {
        let mut c = Self::zeros(look_back, look_ahead, dim);
        let bound = init_bound(look_back, look_ahead);
        for v in c.back_taps.data_mut() {
            *v = F::cast(rng.random_range(-bound..=bound));
        }
        if let Some(t) = c.ahead_taps.as_mut() {
            for v in t.data_mut() {
                *v = F::cast(rng.random_range(-bound..=bound));
            }
        }
        c
    }

    /// Builds coefficients from explicit tap matrices.
    pub fn from_taps(back_taps: Tensor<F>, ahead_taps: Option<Tensor<F>>) -> Result<Self> {
        let (look_back, dim) = match *back_taps.shape() {
            [rows, d] => (rows - 1, d),
            ref s => return Err(dim_err("fsmn", format!("back taps must be rank 2, got {s:?}"))),
        };
        let look_ahead = match &ahead_taps {
            None => 0,
            Some(t) => match *t.shape() {
                [rows, d] if d == dim => rows,
                ref s => {
                    return Err(dim_err(
                        "fsmn",
                        format!("ahead taps {s:?} do not match dim {dim}"),
                    ))
                }
            },
        };
        Ok(Self {
            look_back,
            look_ahead,
            dim,
            back_taps,
            ahead_taps,
        })
    }

    pub fn look_back(&self) -> usize {
        self.look_back
    }

    pub fn look_ahead(&self) -> usize {
        self.look_ahead
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Learnable tap count of this block: `(N1 + 1 + N2) · d`.
    pub fn param_count(&self) -> usize {
        fsmn_param_count(self.look_back, self.look_ahead, self.dim)
    }
}

pub fn init_bound(look_back: usize, look_ahead: usize) -> f64 {
    1.0 / ((look_back + 1 + look_ahead) as f64).sqrt()
}

/// `(N1 + 1 + N2) · d`, counting the `i = 0` tap.
pub fn fsmn_param_count(look_back: usize, look_ahead: usize, dim: usize) -> usize {
    (look_back + 1 + look_ahead) * dim
}

/// A memory block whose taps live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct FsmnBlock {
    pub back_taps: ParamId,
    pub ahead_taps: Option<ParamId>,
    pub look_back: usize,
    pub look_ahead: usize,
    pub dim: usize,
}

impl FsmnBlock {
    /// Registers `{prefix}.back_taps` and, when `N2 > 0`, `{prefix}.ahead_taps`.
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        look_back: usize,
        look_ahead: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let c = FsmnCoefficients::<F>::random(look_back, look_ahead, dim, rng);
        let back_taps = store.add(format!("{prefix}.back_taps"), c.back_taps);
        let ahead_taps = c
            .ahead_taps
            .map(|t| store.add(format!("{prefix}.ahead_taps"), t));
        Self {
            back_taps,
            ahead_taps,
            look_back,
            look_ahead,
            dim,
        }
    }

    pub fn apply<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bind: &Bindings,
        x: NodeId,
        mask: Option<&[bool]>,
    ) -> Result<NodeId> {
        fsmn_apply(
            g,
            x,
            bind.node(self.back_taps),
            self.ahead_taps.map(|a| bind.node(a)),
            mask,
        )
    }

    /// Current tap values as standalone coefficients.
    pub fn coefficients<F: Scalar>(&self, store: &ParamStore<F>) -> FsmnCoefficients<F> {
        let strip = |t: &Tensor<F>| Tensor::new(t.shape(), t.data().to_vec()).expect("valid");
        FsmnCoefficients::from_taps(
            strip(store.get(self.back_taps)),
            self.ahead_taps.map(|a| strip(store.get(a))),
        )
        .expect("block shapes are consistent")
    }

    pub fn param_count(&self) -> usize {
        fsmn_param_count(self.look_back, self.look_ahead, self.dim)
    }
}

/// Geometry of one application: `batch` sequences of `time` steps of width `dim`.
#[derive(Clone, Copy, Debug)]
struct Layout {
    batch: usize,
    time: usize,
    dim: usize,
}

fn layout(shape: &[usize]) -> Result<Layout> {
    match *shape {
        [time, dim] => Ok(Layout { batch: 1, time, dim }),
        [batch, time, dim] => Ok(Layout { batch, time, dim }),
        _ => Err(dim_err("fsmn", format!("expected [T, d] or [B, T, d], got {shape:?}"))),
    }
}

#[inline]
fn valid(mask: Option<&[bool]>, idx: usize) -> bool {
    mask.is_none_or(|m| m[idx])
}

fn forward_kernel<F: Scalar>(
    x: &[F],
    back: &[F],
    ahead: Option<&[F]>,
    mask: Option<&[bool]>,
    l: Layout,
) -> Vec<F> {
    let d = l.dim;
    let n1 = back.len() / d - 1;
    let n2 = ahead.map_or(0, |a| a.len() / d);
    let mut out = x.to_vec();
    for b in 0..l.batch {
        for t in 0..l.time {
            let o = (b * l.time + t) * d;
            for i in 0..=n1.min(t) {
                let s = b * l.time + t - i;
                if !valid(mask, s) {
                    continue;
                }
                let tap = &back[i * d..(i + 1) * d];
                let src = &x[s * d..(s + 1) * d];
                for k in 0..d {
                    out[o + k] += tap[k] * src[k];
                }
            }
            if let Some(ahead) = ahead {
                for j in 1..=n2 {
                    if t + j >= l.time {
                        break;
                    }
                    let s = b * l.time + t + j;
                    if !valid(mask, s) {
                        continue;
                    }
                    let tap = &ahead[(j - 1) * d..j * d];
                    let src = &x[s * d..(s + 1) * d];
                    for k in 0..d {
                        out[o + k] += tap[k] * src[k];
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug)]
struct FsmnOp {
    mask: Option<Vec<bool>>,
    layout: Layout,
}

impl<F: Scalar> CustomOp<F> for FsmnOp {
    fn name(&self) -> &'static str {
        "fsmn"
    }

    fn backward(&self, inputs: &[&Tensor<F>], _out: &Tensor<F>, g: &[F]) -> Vec<Option<Vec<F>>> {
        let l = self.layout;
        let d = l.dim;
        let mask = self.mask.as_deref();
        let x = inputs[0].data();
        let back = inputs[1].data();
        let ahead = inputs.get(2).map(|t| t.data());
        let n1 = back.len() / d - 1;
        let n2 = ahead.map_or(0, |a| a.len() / d);

        // identity term
        let mut gx = g.to_vec();
        let mut gback = vec![F::zero(); back.len()];
        let mut gahead = ahead.map(|a| vec![F::zero(); a.len()]);
        for b in 0..l.batch {
            for t in 0..l.time {
                let o = (b * l.time + t) * d;
                let go = &g[o..o + d];
                for i in 0..=n1.min(t) {
                    let s = b * l.time + t - i;
                    if !valid(mask, s) {
                        continue;
                    }
                    for k in 0..d {
                        gx[s * d + k] += back[i * d + k] * go[k];
                        gback[i * d + k] += x[s * d + k] * go[k];
                    }
                }
                if let (Some(ahead), Some(ga)) = (ahead, gahead.as_mut()) {
                    for j in 1..=n2 {
                        if t + j >= l.time {
                            break;
                        }
                        let s = b * l.time + t + j;
                        if !valid(mask, s) {
                            continue;
                        }
                        for k in 0..d {
                            gx[s * d + k] += ahead[(j - 1) * d + k] * go[k];
                            ga[(j - 1) * d + k] += x[s * d + k] * go[k];
                        }
                    }
                }
            }
        }
        let mut grads = vec![Some(gx), Some(gback)];
        if inputs.len() > 2 {
            grads.push(gahead);
        }
        grads
    }
}

fn check_taps(shape: &[usize], dim: usize, what: &str) -> Result<()> {
    match *shape {
        [_, d] if d == dim => Ok(()),
        _ => Err(dim_err(
            "fsmn",
            format!("{what} taps {shape:?} do not match feature dim {dim}"),
        )),
    }
}

/// Records the memory block on `g`.
///
/// `x` is `[T, d]` or `[B, T, d]`; `back` is `[(N1+1), d]`; `ahead` is
/// `[N2, d]` or `None` for `N2 = 0`. `mask`, when given, has one flag per
/// position (`B·T`), `false` marking padding.
pub fn fsmn_apply<F: Scalar>(
    g: &mut Graph<F>,
    x: NodeId,
    back: NodeId,
    ahead: Option<NodeId>,
    mask: Option<&[bool]>,
) -> Result<NodeId> {
    let l = layout(g.shape(x))?;
    if l.time == 0 {
        return Err(dim_err("fsmn", "empty sequence"));
    }
    check_taps(g.shape(back), l.dim, "look-back")?;
    if let Some(a) = ahead {
        check_taps(g.shape(a), l.dim, "look-ahead")?;
    }
    if let Some(m) = mask {
        if m.len() != l.batch * l.time {
            return Err(dim_err(
                "fsmn",
                format!("mask has {} flags for {} positions", m.len(), l.batch * l.time),
            ));
        }
    }
    let out = forward_kernel(
        g.value(x).data(),
        g.value(back).data(),
        ahead.map(|a| g.value(a).data()),
        mask,
        l,
    );
    let value = Tensor::new(g.shape(x), out)?;
    let mut inputs = vec![x, back];
    inputs.extend(ahead);
    Ok(g.custom(
        Box::new(FsmnOp {
            mask: mask.map(<[bool]>::to_vec),
            layout: l,
        }),
        &inputs,
        value,
    ))
}

/// Eager evaluation of the memory block on a plain tensor.
pub fn fsmn_forward<F: Scalar>(
    x: &Tensor<F>,
    coeffs: &FsmnCoefficients<F>,
    mask: Option<&[bool]>,
) -> Result<Tensor<F>> {
    if coeffs.dim != x.last_dim() {
        return Err(dim_err(
            "fsmn",
            format!("coefficients dim {} vs input dim {}", coeffs.dim, x.last_dim()),
        ));
    }
    let mut g = Graph::new();
    let xi = g.constant(x.clone());
    let bi = g.constant(coeffs.back_taps.clone());
    let ai = coeffs.ahead_taps.clone().map(|t| g.constant(t));
    let out = fsmn_apply(&mut g, xi, bi, ai, mask)?;
    Ok(g.value(out).clone())
}
