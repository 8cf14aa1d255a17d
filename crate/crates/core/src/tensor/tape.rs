use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use super::{shape_err, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Names of the differentiable operations, used for diagnostics and the
/// gradient-check suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Leaf,
    Matmul,
    Add,
    Mul,
    Scale,
    Sum,
    Mean,
    Relu,
    Gelu,
    Softmax,
    LayerNorm,
    CausalConv1d,
    MeanAbs,
    Reshape,
    Permute,
    Concat,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Matmul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::CausalConv1d => "causal_dilated_conv1d",
            OpKind::MeanAbs => "mean_abs",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Concat => "concat",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        DIFFERENTIABLE.iter().copied().find(|k| k.name() == name)
    }
}

/// Every operation with a gradient rule.
pub const DIFFERENTIABLE: [OpKind; 15] = [
    OpKind::Matmul,
    OpKind::Add,
    OpKind::Mul,
    OpKind::Scale,
    OpKind::Sum,
    OpKind::Mean,
    OpKind::Relu,
    OpKind::Gelu,
    OpKind::Softmax,
    OpKind::LayerNorm,
    OpKind::CausalConv1d,
    OpKind::MeanAbs,
    OpKind::Reshape,
    OpKind::Permute,
    OpKind::Concat,
];

enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
        dilation: usize,
    },
    MeanAbs(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Matmul(..) => OpKind::Matmul,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Relu(..) => OpKind::Relu,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Conv1d { .. } => OpKind::CausalConv1d,
            Op::MeanAbs(..) => OpKind::MeanAbs,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Permute(..) => OpKind::Permute,
            Op::Concat(..) => OpKind::Concat,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Linear record of a forward pass. Nodes are appended in execution order,
/// so the node list is already topologically sorted.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
    corrupt: Option<OpKind>,
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gaussian_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2))
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    x * gaussian_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    gaussian_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Splits a shape at `axis` into (outer, len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct MatmulPlan {
    batch: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
    /// Element offsets into `a` and `b` for every flattened batch index.
    offsets: Vec<(usize, usize)>,
    /// `b` is a plain matrix shared by all batches.
    shared_rhs: bool,
}

fn broadcast_strides(shape: &[usize], batch: &[usize], mat: usize) -> Vec<usize> {
    // Strides (in elements) of `shape`'s batch dims aligned to `batch`, 0 on
    // broadcast axes.
    let nd = batch.len();
    let mut strides = vec![0usize; nd];
    let mut stride = mat;
    for (i, &d) in shape.iter().rev().enumerate() {
        let ax = nd - 1 - i;
        strides[ax] = if d == 1 { 0 } else { stride };
        stride *= d;
    }
    strides
}

fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(shape_err("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(shape_err("matmul", a, b));
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let nd = ab.len().max(bb.len());
    let mut batch = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < ab.len() { ab[ab.len() - 1 - i] } else { 1 };
        let db = if i < bb.len() { bb[bb.len() - 1 - i] } else { 1 };
        batch[nd - 1 - i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err("matmul", a, b)),
        };
    }
    let sa = broadcast_strides(ab, &batch, m * k);
    let sb = broadcast_strides(bb, &batch, k * n);
    let count: usize = batch.iter().product();
    let mut offsets = Vec::with_capacity(count);
    let mut idx = vec![0usize; nd];
    for _ in 0..count {
        let oa = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
        let ob = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
        offsets.push((oa, ob));
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            if idx[ax] < batch[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Ok(MatmulPlan {
        batch,
        m,
        k,
        n,
        offsets,
        shared_rhs: bb.is_empty(),
    })
}

/// im2col for the causal convolution: rows are (batch, time), columns are
/// (input channel, tap).
fn conv_columns(x: &[f64], bt: usize, cin: usize, t: usize, k: usize, dilation: usize) -> Vec<f64> {
    let width = cin * k;
    let mut col = vec![0.0; bt * t * width];
    for b in 0..bt {
        for ci in 0..cin {
            let xrow = &x[(b * cin + ci) * t..(b * cin + ci + 1) * t];
            for tap in 0..k {
                let lag = dilation * tap;
                for ti in lag..t {
                    col[(b * t + ti) * width + ci * k + tap] = xrow[ti - lag];
                }
            }
        }
    }
    col
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test hook for the gradient-check suite: every gradient rule of `kind`
    /// is deliberately scaled wrong on this tape.
    pub fn corrupt_gradient_rule(&mut self, kind: Option<OpKind>) {
        self.corrupt = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.kind().name().to_string(),
            });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = matmul_plan(self.shape(a), self.shape(b))?;
        let MatmulPlan { m, k, n, .. } = plan;
        let mut shape = plan.batch.clone();
        shape.extend([m, n]);
        let count = plan.offsets.len();
        let mut out = vec![0.0; count * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if plan.shared_rhs && self.shape(a).len() == 2 + plan.batch.len() {
                // One tall product when the rhs is a single matrix and the
                // lhs is dense over the batch.
                gemm(count * m, k, n, av, false, bv, false, &mut out, 0.0);
            } else {
                for (i, &(oa, ob)) in plan.offsets.iter().enumerate() {
                    gemm(
                        m,
                        k,
                        n,
                        &av[oa..oa + m * k],
                        false,
                        &bv[ob..ob + k * n],
                        false,
                        &mut out[i * m * n..(i + 1) * m * n],
                        0.0,
                    );
                }
            }
        }
        let ng = self.any_grad(&[a, b]);
        self.push(Tensor { shape, data: out }, Op::Matmul(a, b), ng)
    }

    /// Elementwise sum; `b` may also be a trailing suffix of `a`'s shape, in
    /// which case it is broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add", sa, sb));
        }
        let bv = self.value(b).data();
        let nb = bv.len();
        let mut value = self.value(a).clone();
        for chunk in value.data.chunks_mut(nb) {
            for (x, y) in chunk.iter_mut().zip(bv) {
                *x += y;
            }
        }
        let ng = self.any_grad(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let bv = self.value(b).data();
        let mut value = self.value(a).clone();
        for (x, y) in value.data.iter_mut().zip(bv) {
            *x *= y;
        }
        let ng = self.any_grad(&[a, b]);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        let ng = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let ng = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let ng = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(0.0));
        let ng = self.any_grad(&[a]);
        self.push(value, Op::Relu(a), ng)
    }

    /// Exact GeLU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(gelu_scalar);
        let ng = self.any_grad(&[a]);
        self.push(value, Op::Gelu(a), ng)
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::config(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    denom += e;
                }
                for j in 0..len {
                    out[at(j)] /= denom;
                }
            }
        }
        let ng = self.any_grad(&[a]);
        self.push(Tensor { shape, data: out }, Op::Softmax(a, axis), ng)
    }

    /// Layer normalization over the last axis (population variance).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(Error::config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| shape_err("layer_norm", &shape, &[]))?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(shape_err("layer_norm", &shape, self.shape(p)));
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bt[j];
            }
        }
        let ng = self.any_grad(&[x, gamma, beta]);
        self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Causal dilated 1-D convolution over the last axis.
    ///
    /// `x` is `(..., c_in, time)`, `kernel` is `(c_out, c_in, taps)` and
    /// `bias` is `(c_out,)`. Tap `k` reads input `t - dilation * k`; positions
    /// before the series start read zero, so output length equals input length.
    pub fn causal_conv1d(&mut self, x: Var, kernel: Var, bias: Var, dilation: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if dilation < 1 {
            return Err(Error::config("convolution dilation must be >= 1"));
        }
        if ks.len() != 3 || xs.len() < 2 || ks[1] != xs[xs.len() - 2] {
            return Err(shape_err("causal_dilated_conv1d", &xs, &ks));
        }
        let (cout, cin, taps) = (ks[0], ks[1], ks[2]);
        if self.shape(bias) != [cout] {
            return Err(shape_err("causal_dilated_conv1d", &ks, self.shape(bias)));
        }
        let t = xs[xs.len() - 1];
        let bt: usize = xs[..xs.len() - 2].iter().product();
        let col = conv_columns(self.value(x).data(), bt, cin, t, taps, dilation);
        let mut rows = vec![0.0; bt * t * cout];
        gemm(
            bt * t,
            cin * taps,
            cout,
            &col,
            false,
            self.value(kernel).data(),
            true,
            &mut rows,
            0.0,
        );
        let bv = self.value(bias).data();
        let mut out = vec![0.0; bt * cout * t];
        for b in 0..bt {
            for ti in 0..t {
                let r = &rows[(b * t + ti) * cout..(b * t + ti + 1) * cout];
                for c in 0..cout {
                    out[(b * cout + c) * t + ti] = r[c] + bv[c];
                }
            }
        }
        let mut shape = xs;
        let nd = shape.len();
        shape[nd - 2] = cout;
        let ng = self.any_grad(&[x, kernel, bias]);
        self.push(
            Tensor { shape, data: out },
            Op::Conv1d {
                x,
                kernel,
                bias,
                dilation,
            },
            ng,
        )
    }

    /// Mean of `|a - b|` over all elements.
    pub fn mean_abs(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mean_abs", self.shape(a), self.shape(b)));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let s = av.iter().zip(bv).map(|(x, y)| (x - y).abs()).sum::<f64>() / av.len() as f64;
        let ng = self.any_grad(&[a, b]);
        self.push(Tensor::scalar(s), Op::MeanAbs(a, b), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let ng = self.any_grad(&[a]);
        self.push(value, Op::Reshape(a), ng)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(a).permute(perm)?;
        let ng = self.any_grad(&[a]);
        self.push(value, Op::Permute(a, perm.to_vec()), ng)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::config("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::config(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = self.any_grad(parts);
        self.push(Tensor { shape, data: out }, Op::Concat(parts.to_vec(), axis), ng)
    }

    /// Reverse pass from a scalar `loss`. Populates gradients for every node
    /// on a path from a grad-requiring leaf to `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        if self.value(loss).numel() != 1 {
            return Err(shape_err("backward", self.shape(loss), &[]));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed_shape = self.shape(loss).to_vec();
        grads[loss.0] = Some(Tensor::full(&seed_shape, 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut contribs = self.node_backward(i, &g)?;
            if self.corrupt == Some(self.nodes[i].op.kind()) {
                for (_, t) in contribs.iter_mut() {
                    for x in t.data.iter_mut() {
                        *x *= 1.5;
                    }
                }
            }
            for (v, t) in contribs {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (x, y) in acc.data.iter_mut().zip(&t.data) {
                            *x += y;
                        }
                    }
                    slot @ None => *slot = Some(t),
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor {
            shape: self.shape(v).to_vec(),
            data,
        }
    }

    fn node_backward(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let gd = g.data();
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Matmul(a, b) => self.matmul_backward(*a, *b, gd)?,
            Op::Add(a, b) => {
                let nb = self.value(*b).numel();
                let mut db = vec![0.0; nb];
                for chunk in gd.chunks(nb) {
                    for (x, y) in db.iter_mut().zip(chunk) {
                        *x += y;
                    }
                }
                vec![(*a, g.clone()), (*b, self.like(*b, db))]
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let da = gd.iter().zip(bv).map(|(g, y)| g * y).collect();
                let db = gd.iter().zip(av).map(|(g, x)| g * x).collect();
                vec![(*a, self.like(*a, da)), (*b, self.like(*b, db))]
            }
            Op::Scale(a, c) => vec![(*a, g.map(|x| x * c))],
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                vec![(*a, self.like(*a, vec![gd[0]; n]))]
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                vec![(*a, self.like(*a, vec![gd[0] / n as f64; n]))]
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                vec![(*a, self.like(*a, d))]
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect();
                vec![(*a, self.like(*a, d))]
            }
            Op::Softmax(a, axis) => {
                let y = node.value.data();
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + ii;
                        let dot: f64 = (0..len).map(|j| gd[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            d[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                vec![(*a, self.like(*a, d))]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma).data();
                let dm = gv.len();
                let rows = xhat.len() / dm;
                let mut dx = vec![0.0; xhat.len()];
                let mut dgamma = vec![0.0; dm];
                let mut dbeta = vec![0.0; dm];
                let mut dxhat = vec![0.0; dm];
                for r in 0..rows {
                    let gr = &gd[r * dm..(r + 1) * dm];
                    let hr = &xhat[r * dm..(r + 1) * dm];
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for j in 0..dm {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        dxhat[j] = gr[j] * gv[j];
                        mean_d += dxhat[j];
                        mean_dh += dxhat[j] * hr[j];
                    }
                    mean_d /= dm as f64;
                    mean_dh /= dm as f64;
                    for j in 0..dm {
                        dx[r * dm + j] = rstd[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                    }
                }
                vec![
                    (*x, self.like(*x, dx)),
                    (*gamma, self.like(*gamma, dgamma)),
                    (*beta, self.like(*beta, dbeta)),
                ]
            }
            Op::Conv1d {
                x,
                kernel,
                bias,
                dilation,
            } => self.conv_backward(*x, *kernel, *bias, *dilation, gd),
            Op::MeanAbs(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let scale = gd[0] / av.len() as f64;
                let da: Vec<f64> = av.iter().zip(bv).map(|(x, y)| scale * sign(x - y)).collect();
                let db = da.iter().map(|v| -v).collect();
                vec![(*a, self.like(*a, da)), (*b, self.like(*b, db))]
            }
            Op::Reshape(a) => vec![(*a, self.like(*a, gd.to_vec()))],
            Op::Permute(a, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                vec![(*a, g.permute(&inverse)?)]
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = axis_extents(node.value.shape(), *axis);
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let chunk = self.shape(*p)[*axis] * inner;
                    let mut d = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        d.extend_from_slice(&gd[o * total + offset..o * total + offset + chunk]);
                    }
                    offset += chunk;
                    res.push((*p, self.like(*p, d)));
                }
                res
            }
        };
        Ok(out)
    }

    fn matmul_backward(&self, a: Var, b: Var, gd: &[f64]) -> Result<Vec<(Var, Tensor)>> {
        let plan = matmul_plan(self.shape(a), self.shape(b))?;
        let MatmulPlan { m, k, n, .. } = plan;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let want_a = self.nodes[a.0].needs_grad;
        let want_b = self.nodes[b.0].needs_grad;
        let mut da = vec![0.0; if want_a { av.len() } else { 0 }];
        let mut db = vec![0.0; if want_b { bv.len() } else { 0 }];
        let count = plan.offsets.len();
        if plan.shared_rhs && self.shape(a).len() == 2 + plan.batch.len() {
            let rows = count * m;
            if want_a {
                gemm(rows, n, k, gd, false, bv, true, &mut da, 0.0);
            }
            if want_b {
                gemm(k, rows, n, av, true, gd, false, &mut db, 0.0);
            }
        } else {
            for (i, &(oa, ob)) in plan.offsets.iter().enumerate() {
                let gi = &gd[i * m * n..(i + 1) * m * n];
                if want_a {
                    gemm(
                        m,
                        n,
                        k,
                        gi,
                        false,
                        &bv[ob..ob + k * n],
                        true,
                        &mut da[oa..oa + m * k],
                        1.0,
                    );
                }
                if want_b {
                    gemm(
                        k,
                        m,
                        n,
                        &av[oa..oa + m * k],
                        true,
                        gi,
                        false,
                        &mut db[ob..ob + k * n],
                        1.0,
                    );
                }
            }
        }
        let mut res = Vec::with_capacity(2);
        if want_a {
            res.push((a, self.like(a, da)));
        }
        if want_b {
            res.push((b, self.like(b, db)));
        }
        Ok(res)
    }

    fn conv_backward(&self, x: Var, kernel: Var, bias: Var, dilation: usize, gd: &[f64]) -> Vec<(Var, Tensor)> {
        let xs = self.shape(x);
        let ks = self.shape(kernel);
        let (cout, cin, taps) = (ks[0], ks[1], ks[2]);
        let t = xs[xs.len() - 1];
        let bt: usize = xs[..xs.len() - 2].iter().product();
        let width = cin * taps;
        // Output gradient regrouped as (batch*time, c_out) rows.
        let mut grows = vec![0.0; bt * t * cout];
        let mut dbias = vec![0.0; cout];
        for b in 0..bt {
            for c in 0..cout {
                for ti in 0..t {
                    let v = gd[(b * cout + c) * t + ti];
                    grows[(b * t + ti) * cout + c] = v;
                    dbias[c] += v;
                }
            }
        }
        let mut res = Vec::with_capacity(3);
        if self.nodes[kernel.0].needs_grad {
            let col = conv_columns(self.value(x).data(), bt, cin, t, taps, dilation);
            let mut dk = vec![0.0; cout * width];
            gemm(cout, bt * t, width, &grows, true, &col, false, &mut dk, 0.0);
            res.push((kernel, self.like(kernel, dk)));
        }
        if self.nodes[x.0].needs_grad {
            let mut dcol = vec![0.0; bt * t * width];
            gemm(
                bt * t,
                cout,
                width,
                &grows,
                false,
                self.value(kernel).data(),
                false,
                &mut dcol,
                0.0,
            );
            let mut dx = vec![0.0; bt * cin * t];
            for b in 0..bt {
                for ci in 0..cin {
                    for tap in 0..taps {
                        let lag = dilation * tap;
                        for ti in lag..t {
                            dx[(b * cin + ci) * t + ti - lag] += dcol[(b * t + ti) * width + ci * taps + tap];
                        }
                    }
                }
            }
            res.push((x, self.like(x, dx)));
        }
        res.push((bias, self.like(bias, dbias)));
        res
    }
}
