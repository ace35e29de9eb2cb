use std::fmt::Debug;

use rand::Rng;

use super::kernels::{axpy, mm_nn, mm_nt, mm_tn, softmax_row};
use super::{Scalar, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation implemented outside the engine.
///
/// The caller computes the forward value itself and hands it to
/// [`Graph::custom`]; the engine calls `backward` during the reverse sweep.
pub trait CustomOp<F: Scalar>: Debug {
    fn name(&self) -> &'static str;

    /// Returns one gradient buffer per input (`None` when the input gets no gradient).
    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad_out: &[F],
    ) -> Vec<Option<Vec<F>>>;
}

#[derive(Debug)]
enum Op<F: Scalar> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        transpose_b: bool,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    AddRow {
        x: NodeId,
        bias: NodeId,
    },
    Relu(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normalized: Vec<F>,
        rstd: Vec<F>,
    },
    Sum(NodeId),
    Reshape(NodeId),
    SplitHeads {
        x: NodeId,
        heads: usize,
    },
    MergeHeads {
        x: NodeId,
        heads: usize,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    Custom {
        inputs: Vec<NodeId>,
        op: Box<dyn CustomOp<F>>,
    },
}

impl<F: Scalar> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow { .. } => "add_row",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(_) => "sum",
            Op::Reshape(_) => "reshape",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::Embedding { .. } => "embedding",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

#[derive(Debug)]
struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    label: Option<String>,
}

/// Tape of recorded operations.
///
/// Nodes are appended in creation order; an op's inputs always have smaller
/// indices than the op itself. Confined to one thread.
#[derive(Debug, Default)]
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

/// Matmul geometry after flattening leading axes.
struct MmDims {
    batch: usize,
    shared_b: bool,
    m: usize,
    k: usize,
    n: usize,
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a node, present iff it requires grad.
    pub fn grad(&self, id: NodeId) -> Option<&[F]> {
        self.nodes[id.0].value.grad()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].value.requires_grad()
    }

    /// Human-readable description of a node, used in diagnostics.
    pub fn describe(&self, id: NodeId) -> String {
        let node = &self.nodes[id.0];
        match &node.label {
            Some(l) => format!("#{} {} `{}` {:?}", id.0, node.op.name(), l, node.value.shape()),
            None => format!("#{} {} {:?}", id.0, node.op.name(), node.value.shape()),
        }
    }

    /// First recorded node holding a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<NodeId> {
        self.nodes
            .iter()
            .position(|n| !n.value.is_finite())
            .map(NodeId)
    }

    fn push(&mut self, mut value: Tensor<F>, op: Op<F>, inputs: &[NodeId]) -> NodeId {
        let rg = inputs.iter().any(|&i| self.requires_grad(i));
        value.set_requires_grad(rg);
        self.nodes.push(Node {
            value,
            op,
            label: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Records a leaf. Its `requires_grad` flag is taken from the tensor.
    pub fn leaf(&mut self, value: Tensor<F>) -> NodeId {
        let rg = value.requires_grad();
        let mut value = value;
        value.set_requires_grad(rg);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            label: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A named differentiable leaf.
    pub fn param(&mut self, label: &str, value: Tensor<F>) -> NodeId {
        let mut value = value;
        value.set_requires_grad(true);
        let id = self.leaf(value);
        self.nodes[id.0].label = Some(label.to_string());
        id
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        let mut value = value;
        value.set_requires_grad(false);
        self.leaf(value)
    }

    /// Resets every accumulated gradient to zero.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn mm_dims(&self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<MmDims> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(dim_err("matmul", format!("need rank >= 2, got {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if transpose_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(dim_err("matmul", format!("inner extents differ: {sa:?} x {sb:?}")));
        }
        if sb.len() == 2 {
            let batch = sa[..sa.len() - 2].iter().product();
            return Ok(MmDims {
                batch,
                shared_b: true,
                m,
                k,
                n,
            });
        }
        if sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] {
            return Ok(MmDims {
                batch: sa[0],
                shared_b: false,
                m,
                k,
                n,
            });
        }
        Err(dim_err("matmul", format!("unsupported batching: {sa:?} x {sb:?}")))
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let d = self.mm_dims(a, b, transpose_b)?;
        let mut out_shape = self.shape(a)[..self.shape(a).len() - 1].to_vec();
        out_shape.push(d.n);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut c = vec![F::zero(); d.batch * d.m * d.n];
        if d.shared_b {
            let rows = d.batch * d.m;
            if transpose_b {
                mm_nt(av, bv, &mut c, rows, d.k, d.n);
            } else {
                mm_nn(av, bv, &mut c, rows, d.k, d.n);
            }
        } else {
            let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
            for i in 0..d.batch {
                let (ai, bi) = (&av[i * sa..(i + 1) * sa], &bv[i * sb..(i + 1) * sb]);
                let ci = &mut c[i * sc..(i + 1) * sc];
                if transpose_b {
                    mm_nt(ai, bi, ci, d.m, d.k, d.n);
                } else {
                    mm_nn(ai, bi, ci, d.m, d.k, d.n);
                }
            }
        }
        let value = Tensor::new(&out_shape, c)?;
        Ok(self.push(value, Op::MatMul { a, b, transpose_b }, &[a, b]))
    }

    /// `a · b`. `a` is `[.., m, k]`; `b` is either `[k, n]` (shared across the
    /// leading axes of `a`) or `[B, k, n]` matching a rank-3 `a`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` with the same batching rules as [`Graph::matmul`].
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: NodeId, b: NodeId, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape(), data).expect("shape checked")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: NodeId, factor: F) -> NodeId {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * factor).collect();
        let v = Tensor::new(xv.shape(), data).expect("same shape");
        self.push(v, Op::Scale(x, factor), &[x])
    }

    /// Adds a `[n]` bias to every last-axis slice of `x`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(dim_err(
                "add_row",
                format!("bias {:?} vs last extent {n}", self.shape(bias)),
            ));
        }
        let b = self.value(bias).data();
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, &bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        let v = Tensor::new(xv.shape(), data)?;
        Ok(self.push(v, Op::AddRow { x, bias }, &[x, bias]))
    }

    /// `max(0, x)`; the subgradient at exactly zero is zero. NaN passes through.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| if v < F::zero() { F::zero() } else { v }).collect();
        let v = Tensor::new(xv.shape(), data).expect("same shape");
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut data = vec![F::zero(); xv.numel()];
        for (src, dst) in xv.data().chunks_exact(n).zip(data.chunks_exact_mut(n)) {
            softmax_row(src, dst);
        }
        let v = Tensor::new(xv.shape(), data).expect("same shape");
        self.push(v, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut data = vec![F::zero(); xv.numel()];
        for (src, dst) in xv.data().chunks_exact(n).zip(data.chunks_exact_mut(n)) {
            let max = src.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = src.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s - lse;
            }
        }
        let v = Tensor::new(xv.shape(), data).expect("same shape");
        self.push(v, Op::LogSoftmax(x), &[x])
    }

    /// Normalizes each last-axis slice to zero mean and unit variance, then
    /// applies `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: F) -> Result<NodeId> {
        let n = self.value(x).last_dim();
        for p in [gain, bias] {
            if self.shape(p) != [n] {
                return Err(dim_err(
                    "layer_norm",
                    format!("affine {:?} vs last extent {n}", self.shape(p)),
                ));
            }
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let nf = F::cast(n as f64);
        let rows = xv.numel() / n;
        let mut normalized = vec![F::zero(); xv.numel()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xv.numel()];
        for (r, src) in xv.data().chunks_exact(n).enumerate() {
            let mean = src.iter().copied().sum::<F>() / nf;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (src[j] - mean) * rs;
                normalized[r * n + j] = h;
                out[r * n + j] = g[j] * h + b[j];
            }
        }
        let v = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().copied().sum::<F>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// `[B, T, d]` (or `[T, d]`) → `[B·h, T, d/h]`; head `i` takes the
    /// contiguous feature chunk `i`.
    pub fn split_heads(&mut self, x: NodeId, heads: usize) -> Result<NodeId> {
        let (b, t, d) = self.btd(x, "split_heads")?;
        if heads == 0 || d % heads != 0 {
            return Err(dim_err("split_heads", format!("{heads} heads do not divide {d}")));
        }
        let dk = d / heads;
        let src = self.value(x).data();
        let mut out = vec![F::zero(); src.len()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let s = (bi * t + ti) * d + h * dk;
                    let o = ((bi * heads + h) * t + ti) * dk;
                    out[o..o + dk].copy_from_slice(&src[s..s + dk]);
                }
            }
        }
        let v = Tensor::new(&[b * heads, t, dk], out)?;
        Ok(self.push(v, Op::SplitHeads { x, heads }, &[x]))
    }

    /// Inverse of [`Graph::split_heads`]: `[B·h, T, dk]` → `[B, T, h·dk]`.
    pub fn merge_heads(&mut self, x: NodeId, heads: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 3 || heads == 0 || s[0] % heads != 0 {
            return Err(dim_err("merge_heads", format!("{s:?} with {heads} heads")));
        }
        let (bh, t, dk) = (s[0], s[1], s[2]);
        let b = bh / heads;
        let d = dk * heads;
        let src = self.value(x).data();
        let mut out = vec![F::zero(); src.len()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let o = (bi * t + ti) * d + h * dk;
                    let s = ((bi * heads + h) * t + ti) * dk;
                    out[o..o + dk].copy_from_slice(&src[s..s + dk]);
                }
            }
        }
        let v = Tensor::new(&[b, t, d], out)?;
        Ok(self.push(v, Op::MergeHeads { x, heads }, &[x]))
    }

    fn btd(&self, x: NodeId, op: &'static str) -> Result<(usize, usize, usize)> {
        match *self.shape(x) {
            [t, d] => Ok((1, t, d)),
            [b, t, d] => Ok((b, t, d)),
            ref s => Err(dim_err(op, format!("expected [T, d] or [B, T, d], got {s:?}"))),
        }
    }

    /// Gathers rows of `table` (`[V, d]`); output shape is `prefix ++ [d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize], prefix: &[usize]) -> Result<NodeId> {
        let ts = self.shape(table);
        if ts.len() != 2 {
            return Err(dim_err("embedding", format!("table must be rank 2, got {ts:?}")));
        }
        let (vocab, d) = (ts[0], ts[1]);
        if prefix.iter().product::<usize>() != ids.len() {
            return Err(dim_err(
                "embedding",
                format!("{} ids for prefix {prefix:?}", ids.len()),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Contract(format!("token id {bad} >= vocab size {vocab}")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(
            v,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Inverted dropout: keeps each element with probability `1 - rate` and
    /// rescales survivors by `1 / (1 - rate)`. Identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, rate: f64, rng: &mut R) -> Result<NodeId> {
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(Error::Contract(format!("dropout rate {rate} must be < 1")));
        }
        let keep = F::cast(1.0 / (1.0 - rate));
        let shape = self.shape(x).to_vec();
        let mask = Tensor::from_fn(&shape, |_| {
            if rng.random::<f64>() < rate {
                F::zero()
            } else {
                keep
            }
        });
        let m = self.constant(mask);
        self.mul(x, m)
    }

    /// Records an externally computed op.
    pub fn custom(
        &mut self,
        op: Box<dyn CustomOp<F>>,
        inputs: &[NodeId],
        output: Tensor<F>,
    ) -> NodeId {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// Reverse sweep from a scalar-shaped `loss`.
    ///
    /// Every node that requires grad has `∂loss/∂node` added to its stored
    /// gradient, so repeated calls accumulate until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut tmp: Vec<Option<Vec<F>>> = Vec::new();
        tmp.resize_with(loss.0 + 1, || None);
        tmp[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = tmp[i].take() else { continue };
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            self.propagate(i, &g, &mut tmp);
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn acc_buf<'a>(&self, tmp: &'a mut [Option<Vec<F>>], id: NodeId) -> Option<&'a mut Vec<F>> {
        if !self.requires_grad(id) {
            return None;
        }
        let n = self.value(id).numel();
        Some(tmp[id.0].get_or_insert_with(|| vec![F::zero(); n]))
    }

    fn add_into(&self, tmp: &mut [Option<Vec<F>>], id: NodeId, g: &[F]) {
        if let Some(buf) = self.acc_buf(tmp, id) {
            for (a, &b) in buf.iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    fn propagate(&self, i: usize, g: &[F], tmp: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, transpose_b } => {
                let d = self.mm_dims(a, b, transpose_b).expect("checked in forward");
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if let Some(ga) = self.acc_buf(tmp, a) {
                    let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
                    if d.shared_b {
                        let rows = d.batch * d.m;
                        if transpose_b {
                            mm_nn(g, bv, ga, rows, d.n, d.k);
                        } else {
                            mm_nt(g, bv, ga, rows, d.n, d.k);
                        }
                    } else {
                        for bi in 0..d.batch {
                            let gi = &g[bi * sc..(bi + 1) * sc];
                            let bvi = &bv[bi * sb..(bi + 1) * sb];
                            let gai = &mut ga[bi * sa..(bi + 1) * sa];
                            if transpose_b {
                                mm_nn(gi, bvi, gai, d.m, d.n, d.k);
                            } else {
                                mm_nt(gi, bvi, gai, d.m, d.n, d.k);
                            }
                        }
                    }
                }
                if let Some(gb) = self.acc_buf(tmp, b) {
                    let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
                    if d.shared_b {
                        let rows = d.batch * d.m;
                        if transpose_b {
                            mm_tn(g, av, gb, d.n, rows, d.k);
                        } else {
                            mm_tn(av, g, gb, d.k, rows, d.n);
                        }
                    } else {
                        for bi in 0..d.batch {
                            let gi = &g[bi * sc..(bi + 1) * sc];
                            let ai = &av[bi * sa..(bi + 1) * sa];
                            let gbi = &mut gb[bi * sb..(bi + 1) * sb];
                            if transpose_b {
                                mm_tn(gi, ai, gbi, d.n, d.m, d.k);
                            } else {
                                mm_tn(ai, gi, gbi, d.k, d.m, d.n);
                            }
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                self.add_into(tmp, a, g);
                self.add_into(tmp, b, g);
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if let Some(ga) = self.acc_buf(tmp, a) {
                    for ((d, &gg), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gg * y;
                    }
                }
                if let Some(gb) = self.acc_buf(tmp, b) {
                    for ((d, &gg), &x) in gb.iter_mut().zip(g).zip(av) {
                        *d += gg * x;
                    }
                }
            }
            &Op::Scale(x, f) => {
                if let Some(gx) = self.acc_buf(tmp, x) {
                    axpy(f, g, gx);
                }
            }
            &Op::AddRow { x, bias } => {
                self.add_into(tmp, x, g);
                if let Some(gb) = self.acc_buf(tmp, bias) {
                    let n = gb.len();
                    for row in g.chunks_exact(n) {
                        for (d, &v) in gb.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            &Op::Relu(x) => {
                let xv = self.value(x).data();
                if let Some(gx) = self.acc_buf(tmp, x) {
                    for ((d, &gg), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > F::zero() {
                            *d += gg;
                        }
                    }
                }
            }
            &Op::Softmax(x) => {
                let n = out.last_dim();
                if let Some(gx) = self.acc_buf(tmp, x) {
                    for ((y, gg), d) in out
                        .data()
                        .chunks_exact(n)
                        .zip(g.chunks_exact(n))
                        .zip(gx.chunks_exact_mut(n))
                    {
                        let s: F = y.iter().zip(gg).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            d[j] += y[j] * (gg[j] - s);
                        }
                    }
                }
            }
            &Op::LogSoftmax(x) => {
                let n = out.last_dim();
                if let Some(gx) = self.acc_buf(tmp, x) {
                    for ((y, gg), d) in out
                        .data()
                        .chunks_exact(n)
                        .zip(g.chunks_exact(n))
                        .zip(gx.chunks_exact_mut(n))
                    {
                        let s: F = gg.iter().copied().sum();
                        for j in 0..n {
                            d[j] += gg[j] - y[j].exp() * s;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                rstd,
            } => {
                let n = out.last_dim();
                let nf = F::cast(n as f64);
                let gv = self.value(*gain).data();
                if let Some(gx) = self.acc_buf(tmp, *x) {
                    let mut dh = vec![F::zero(); n];
                    for (r, (gg, d)) in g.chunks_exact(n).zip(gx.chunks_exact_mut(n)).enumerate() {
                        let h = &normalized[r * n..(r + 1) * n];
                        for j in 0..n {
                            dh[j] = gg[j] * gv[j];
                        }
                        let mean_dh = dh.iter().copied().sum::<F>() / nf;
                        let mean_dh_h = dh.iter().zip(h).map(|(&a, &b)| a * b).sum::<F>() / nf;
                        for j in 0..n {
                            d[j] += rstd[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                }
                if let Some(gg) = self.acc_buf(tmp, *gain) {
                    for (row, h) in g.chunks_exact(n).zip(normalized.chunks_exact(n)) {
                        for j in 0..n {
                            gg[j] += row[j] * h[j];
                        }
                    }
                }
                if let Some(gb) = self.acc_buf(tmp, *bias) {
                    for row in g.chunks_exact(n) {
                        for j in 0..n {
                            gb[j] += row[j];
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = self.acc_buf(tmp, x) {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            &Op::Reshape(x) => self.add_into(tmp, x, g),
            &Op::SplitHeads { x, heads } => {
                if let Some(gx) = self.acc_buf(tmp, x) {
                    let s = out.shape();
                    let (bh, t, dk) = (s[0], s[1], s[2]);
                    let d = dk * heads;
                    for bi in 0..bh / heads {
                        for ti in 0..t {
                            for h in 0..heads {
                                let xs = (bi * t + ti) * d + h * dk;
                                let os = ((bi * heads + h) * t + ti) * dk;
                                for j in 0..dk {
                                    gx[xs + j] += g[os + j];
                                }
                            }
                        }
                    }
                }
            }
            &Op::MergeHeads { x, heads } => {
                if let Some(gx) = self.acc_buf(tmp, x) {
                    let s = self.shape(x);
                    let (bh, t, dk) = (s[0], s[1], s[2]);
                    let d = dk * heads;
                    for bi in 0..bh / heads {
                        for ti in 0..t {
                            for h in 0..heads {
                                let os = (bi * t + ti) * d + h * dk;
                                let xs = ((bi * heads + h) * t + ti) * dk;
                                for j in 0..dk {
                                    gx[xs + j] += g[os + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(gt) = self.acc_buf(tmp, *table) {
                    let d = out.last_dim();
                    for (row, &id) in g.chunks_exact(d).zip(ids) {
                        for j in 0..d {
                            gt[id * d + j] += row[j];
                        }
                    }
                }
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<F>> = inputs.iter().map(|&i| self.value(i)).collect();
                let grads = op.backward(&ins, out, g);
                for (&inp, gi) in inputs.iter().zip(grads) {
                    if let Some(gi) = gi {
                        self.add_into(tmp, inp, &gi);
                    }
                }
            }
        }
    }
}
