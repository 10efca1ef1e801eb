//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in creation order, so a node's parents
//! always have smaller ids than the node itself. [`Tape::backward`] walks the
//! nodes once in reverse and leaves the tape untouched; it can be called
//! again for a different root.
//!
//! Binary elementwise ops accept a right-hand operand that is either the
//! same shape as the left one, a `1 × c` row, an `r × 1` column or a `1 × 1`
//! scalar; the row/column/scalar is broadcast across the left operand.
//!
//! Operations whose gradient is easier to state by hand (the equality
//! completions, for instance) plug in through [`CustomOp`].

use rand::Rng;

use crate::tensor::{Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Hand-written backward rule for an operation recorded with [`Tape::custom`].
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian products for each input given `upstream = dℓ/d(output)`.
    /// `None` means the input receives no gradient.
    fn backward(
        &self,
        upstream: &Tensor,
        inputs: &[&Tensor],
        output: &Tensor,
    ) -> Result<Vec<Option<Tensor>>, TensorError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn bcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast, TensorError> {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    if (br, bc) == (ar, ac) {
        Ok(Bcast::Same)
    } else if (br, bc) == (1, 1) {
        Ok(Bcast::Scalar)
    } else if br == 1 && bc == ac {
        Ok(Bcast::Row)
    } else if bc == 1 && br == ar {
        Ok(Bcast::Col)
    } else {
        Err(TensorError::shape(op, &[a.shape(), b.shape()]))
    }
}

fn bcast_apply(a: &Tensor, b: &Tensor, kind: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let c = a.cols();
    let bd = b.data();
    let mut out = a.clone();
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        let bv = match kind {
            Bcast::Same => bd[idx],
            Bcast::Row => bd[idx % c],
            Bcast::Col => bd[idx / c],
            Bcast::Scalar => bd[0],
        };
        *v = f(*v, bv);
    }
    out
}

/// Sum a full-size gradient back down to the broadcast operand's shape.
fn bcast_reduce(g: &Tensor, b: &Tensor, kind: Bcast) -> Tensor {
    match kind {
        Bcast::Same => g.clone(),
        Bcast::Scalar => Tensor::scalar(g.sum()),
        Bcast::Row => {
            let mut out = Tensor::zeros(1, g.cols());
            for i in 0..g.rows() {
                for (o, v) in out.data_mut().iter_mut().zip(g.row(i)) {
                    *o += v;
                }
            }
            out
        }
        Bcast::Col => {
            let mut out = Tensor::zeros(b.rows(), 1);
            for i in 0..g.rows() {
                out.data_mut()[i] = g.row(i).iter().sum();
            }
            out
        }
    }
}

enum Op {
    Leaf,
    Constant,
    MatMul,
    Add(Bcast),
    Sub(Bcast),
    Mul(Bcast),
    Scale(f64),
    AddScalar,
    Relu,
    Sigmoid,
    Sin,
    Cos,
    Square,
    /// `ReLU(x)²`, the inequality penalty of the soft loss.
    ClampSq,
    Sum,
    Mean,
    SumRows,
    Concat(Vec<usize>),
    Gather(Vec<usize>),
    BatchNormTrain { xhat: Tensor, inv_std: Vec<f64> },
    BatchNormEval { inv_std: Vec<f64>, mean: Vec<f64> },
    Dropout(Tensor),
    Custom(Box<dyn CustomOp>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul => "matmul",
            Op::Add(_) => "add",
            Op::Sub(_) => "subtract",
            Op::Mul(_) => "multiply",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Square => "square",
            Op::ClampSq => "clamp_sq",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumRows => "sum_rows",
            Op::Concat(_) => "concat",
            Op::Gather(_) => "gather",
            Op::BatchNormTrain { .. } => "batch_norm(train)",
            Op::BatchNormEval { .. } => "batch_norm(eval)",
            Op::Dropout(_) => "dropout",
            Op::Custom(c) => c.name(),
        }
    }
}

struct Node {
    op: Op,
    parents: Vec<usize>,
    value: Tensor,
    needs_grad: bool,
}

/// Batch statistics produced by a training-mode batch normalization; the
/// caller folds them into its running averages.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n − 1) variance, the convention used for running estimates.
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients from one [`Tape::backward`] call, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like `like` if nothing flowed there.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    /// Parent ids of a node; always smaller than the node's own id.
    pub fn parents(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].parents
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_raw(Op::Leaf, vec![], t, true)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(Op::Constant, vec![], t, false)
    }

    fn push_raw(&mut self, op: Op, parents: Vec<usize>, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, parents, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, parents: &[Var], value: Tensor) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push_raw(op, parents.iter().map(|p| p.0).collect(), value, needs_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul, &[a, b], out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let kind = bcast_kind("add", self.value(a), self.value(b))?;
        let out = bcast_apply(self.value(a), self.value(b), kind, |x, y| x + y);
        self.push(Op::Add(kind), &[a, b], out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let kind = bcast_kind("subtract", self.value(a), self.value(b))?;
        let out = bcast_apply(self.value(a), self.value(b), kind, |x, y| x - y);
        self.push(Op::Sub(kind), &[a, b], out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let kind = bcast_kind("multiply", self.value(a), self.value(b))?;
        let out = bcast_apply(self.value(a), self.value(b), kind, |x, y| x * y);
        self.push(Op::Mul(kind), &[a, b], out)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let out = self.value(a).scale(s);
        self.push(Op::Scale(s), &[a], out)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let out = self.value(a).map(|v| v + c);
        self.push(Op::AddScalar, &[a], out)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(Op::Relu, &[a], out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid, &[a], out)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(f64::sin);
        self.push(Op::Sin, &[a], out)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(f64::cos);
        self.push(Op::Cos, &[a], out)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(|v| v * v);
        self.push(Op::Square, &[a], out)
    }

    pub fn clamp_sq(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(|v| if v > 0.0 { v * v } else { 0.0 });
        self.push(Op::ClampSq, &[a], out)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum, &[a], out)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        if self.value(a).is_empty() {
            return Err(TensorError::shape("mean", &[self.value(a).shape()]));
        }
        let out = Tensor::scalar(self.value(a).mean());
        self.push(Op::Mean, &[a], out)
    }

    /// Per-row sums: `r × c → r × 1`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let sums: Vec<f64> = (0..t.rows()).map(|i| t.row(i).iter().sum()).collect();
        self.push(Op::SumRows, &[a], Tensor::col_vector(&sums))
    }

    /// Column-wise concatenation; all parts need the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let rows = parts.first().map_or(0, |p| self.value(*p).rows());
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            let shapes: Vec<&[usize]> = parts.iter().map(|p| self.value(*p).shape()).collect();
            return Err(TensorError::shape("concat", &shapes));
        }
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(rows, total);
        for i in 0..rows {
            let mut off = 0;
            for (p, w) in parts.iter().zip(&widths) {
                out.row_mut(i)[off..off + w].copy_from_slice(self.value(*p).row(i));
                off += w;
            }
        }
        self.push(Op::Concat(widths), parts, out)
    }

    /// Columns `start..start + len`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather(a, &idx)
    }

    /// Columns in `idx` order (repeats allowed).
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a);
        if idx.iter().any(|&j| j >= t.cols()) {
            return Err(TensorError::Shape {
                op: "gather",
                shapes: format!("{:?} indexed up to {:?}", t.shape(), idx.iter().max()),
            });
        }
        let out = t.select_cols(idx);
        self.push(Op::Gather(idx.to_vec()), &[a], out)
    }

    /// Batch normalization over rows with batch statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats), TensorError> {
        let xt = self.value(x);
        let (n, c) = (xt.rows(), xt.cols());
        if n < 2 {
            return Err(TensorError::Contract(format!(
                "batch normalization in training mode needs at least 2 rows, got {n}"
            )));
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.shape() != [1, c] || b.shape() != [1, c] {
            return Err(TensorError::shape("batch_norm", &[xt.shape(), g.shape(), b.shape()]));
        }
        let mut mean = vec![0.0; c];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(xt.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(xt.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let biased: Vec<f64> = var.iter().map(|s| s / n as f64).collect();
        let unbiased: Vec<f64> = var.iter().map(|s| s / (n - 1) as f64).collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(n, c);
        let mut out = Tensor::zeros(n, c);
        for i in 0..n {
            for j in 0..c {
                let h = (xt.get(i, j) - mean[j]) * inv_std[j];
                xhat.set(i, j, h);
                out.set(i, j, h * g.data()[j] + b.data()[j]);
            }
        }
        let var_id = self.push(Op::BatchNormTrain { xhat, inv_std }, &[x, gamma, beta], out)?;
        Ok((var_id, BatchStats { mean, var: unbiased }))
    }

    /// Batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var, TensorError> {
        let xt = self.value(x);
        let (n, c) = (xt.rows(), xt.cols());
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.shape() != [1, c] || b.shape() != [1, c] || running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::shape("batch_norm", &[xt.shape(), g.shape(), b.shape()]));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = Tensor::from_fn(n, c, |i, j| {
            (xt.get(i, j) - running_mean[j]) * inv_std[j] * g.data()[j] + b.data()[j]
        });
        self.push(
            Op::BatchNormEval { inv_std, mean: running_mean.to_vec() },
            &[x, gamma, beta],
            out,
        )
    }

    /// Inverted dropout: surviving entries are scaled by `1/(1 − rate)`, so
    /// evaluation needs no rescaling.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(x);
        let mask = Tensor::from_fn(t.rows(), t.cols(), |_, _| {
            if rng.gen::<f64>() < rate {
                0.0
            } else {
                keep
            }
        });
        let out = t.zip_map(&mask, |a, m| a * m);
        self.push(Op::Dropout(mask), &[x], out)
    }

    /// Record a hand-differentiated op whose forward value was computed by
    /// the caller.
    pub fn custom(
        &mut self,
        op: Box<dyn CustomOp>,
        inputs: &[Var],
        output: Tensor,
    ) -> Result<Var, TensorError> {
        self.push(Op::Custom(op), inputs, output)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients, TensorError> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(rv.rows(), rv.cols(), 1.0));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || node.parents.is_empty() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contribs = self.node_backward(node, &g)?;
            for (&p, c) in node.parents.iter().zip(contribs) {
                if let Some(c) = c {
                    if !self.nodes[p].needs_grad {
                        continue;
                    }
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&c),
                        slot @ None => *slot = Some(c),
                    }
                }
            }
            // Keep gradients of leaves only; interior ones were consumed.
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<Option<Tensor>>, TensorError> {
        let pv = |k: usize| &self.nodes[node.parents[k]].value;
        let out = &node.value;
        Ok(match &node.op {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul => {
                let (a, b) = (pv(0), pv(1));
                vec![Some(g.matmul_t(b)?), Some(a.t_matmul(g)?)]
            }
            Op::Add(k) => vec![Some(g.clone()), Some(bcast_reduce(g, pv(1), *k))],
            Op::Sub(k) => vec![Some(g.clone()), Some(bcast_reduce(g, pv(1), *k).scale(-1.0))],
            Op::Mul(k) => {
                let (a, b) = (pv(0), pv(1));
                let ga = bcast_apply(g, b, *k, |x, y| x * y);
                let gb_full = g.zip_map(a, |x, y| x * y);
                vec![Some(ga), Some(bcast_reduce(&gb_full, b, *k))]
            }
            Op::Scale(s) => vec![Some(g.scale(*s))],
            Op::AddScalar => vec![Some(g.clone())],
            // Subgradient 0 at exactly 0.
            Op::Relu => vec![Some(g.zip_map(pv(0), |gv, x| if x > 0.0 { gv } else { 0.0 }))],
            Op::Sigmoid => vec![Some(g.zip_map(out, |gv, s| gv * s * (1.0 - s)))],
            Op::Sin => vec![Some(g.zip_map(pv(0), |gv, x| gv * x.cos()))],
            Op::Cos => vec![Some(g.zip_map(pv(0), |gv, x| -gv * x.sin()))],
            Op::Square => vec![Some(g.zip_map(pv(0), |gv, x| 2.0 * gv * x))],
            Op::ClampSq => vec![Some(g.zip_map(pv(0), |gv, x| if x > 0.0 { 2.0 * gv * x } else { 0.0 }))],
            Op::Sum => {
                let a = pv(0);
                vec![Some(Tensor::filled(a.rows(), a.cols(), g.item()))]
            }
            Op::Mean => {
                let a = pv(0);
                vec![Some(Tensor::filled(a.rows(), a.cols(), g.item() / a.len() as f64))]
            }
            Op::SumRows => {
                let a = pv(0);
                vec![Some(Tensor::from_fn(a.rows(), a.cols(), |i, _| g.data()[i]))]
            }
            Op::Concat(widths) => {
                let mut off = 0;
                let mut res = Vec::with_capacity(widths.len());
                for &w in widths {
                    let idx: Vec<usize> = (off..off + w).collect();
                    res.push(Some(g.select_cols(&idx)));
                    off += w;
                }
                res
            }
            Op::Gather(idx) => {
                let a = pv(0);
                let mut ga = Tensor::zeros(a.rows(), a.cols());
                for i in 0..g.rows() {
                    let src = g.row(i);
                    let dst = ga.row_mut(i);
                    for (&j, v) in idx.iter().zip(src) {
                        dst[j] += v;
                    }
                }
                vec![Some(ga)]
            }
            Op::BatchNormTrain { xhat, inv_std } => {
                let gamma = pv(1).data();
                let (n, c) = (g.rows(), g.cols());
                let nf = n as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for j in 0..c {
                        dbeta[j] += g.get(i, j);
                        dgamma[j] += g.get(i, j) * xhat.get(i, j);
                    }
                }
                // dx = inv_std/N · (N·dx̂ − Σdx̂ − x̂·Σ(dx̂·x̂)), with dx̂ = g·γ
                let dx = Tensor::from_fn(n, c, |i, j| {
                    let dxhat = g.get(i, j) * gamma[j];
                    inv_std[j] / nf
                        * (nf * dxhat - dbeta[j] * gamma[j] - xhat.get(i, j) * dgamma[j] * gamma[j])
                });
                vec![Some(dx), Some(Tensor::row_vector(&dgamma)), Some(Tensor::row_vector(&dbeta))]
            }
            Op::BatchNormEval { inv_std, mean } => {
                let x = pv(0);
                let gamma = pv(1).data();
                let (n, c) = (g.rows(), g.cols());
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for j in 0..c {
                        dbeta[j] += g.get(i, j);
                        dgamma[j] += g.get(i, j) * (x.get(i, j) - mean[j]) * inv_std[j];
                    }
                }
                let dx = Tensor::from_fn(n, c, |i, j| g.get(i, j) * gamma[j] * inv_std[j]);
                vec![Some(dx), Some(Tensor::row_vector(&dgamma)), Some(Tensor::row_vector(&dbeta))]
            }
            Op::Dropout(mask) => vec![Some(g.zip_map(mask, |a, m| a * m))],
            Op::Custom(c) => {
                let inputs: Vec<&Tensor> = (0..node.parents.len()).map(pv).collect();
                c.backward(g, &inputs, out)?
            }
        })
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Largest relative disagreement between `analytic` and central differences
/// of `f` at `point`: `maxᵢ |analyticᵢ − fdᵢ| / max(1, |analyticᵢ|)`.
pub fn finite_difference_check<E>(
    mut f: impl FnMut(&[f64]) -> Result<f64, E>,
    point: &[f64],
    analytic: &[f64],
    eps: f64,
) -> Result<f64, E> {
    assert_eq!(point.len(), analytic.len(), "gradient length must match point");
    let mut p = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let fp = f(&p)?;
        p[i] = orig - eps;
        let fm = f(&p)?;
        p[i] = orig;
        let fd = (fp - fm) / (2.0 * eps);
        worst = worst.max((analytic[i] - fd).abs() / analytic[i].abs().max(1.0));
    }
    Ok(worst)
}

/// Run [`finite_difference_check`] on a scalar function built on a tape from
/// a single leaf: the analytic gradient comes from [`Tape::backward`].
pub fn check_tape_gradient(
    build: impl Fn(&mut Tape, Var) -> Result<Var, TensorError>,
    point: &Tensor,
    eps: f64,
) -> Result<f64, TensorError> {
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let root = build(&mut tape, x)?;
    let grads = tape.backward(root)?;
    let analytic = grads.get_or_zeros(x, point);
    let shape = point.shape().to_vec();
    finite_difference_check(
        |p| {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::new(shape.clone(), p.to_vec())?);
            let r = build(&mut t, x)?;
            Ok(t.value(r).item())
        },
        point.data(),
        analytic.data(),
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[vec![-1.0, 2.0]]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
        let s = tape.sum(r).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row_vector(&[0.0]));
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn sin_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row_vector(&[0.0]));
        let s = tape.sin(x).unwrap();
        let s = tape.sum(s).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn sigmoid_symmetry_point() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).item(), 0.5);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(2));
        let v = tape.constant(t(&[vec![3.0], vec![4.0]]));
        let out = tape.matmul(i, v).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        match tape.matmul(a, b) {
            Err(TensorError::Shape { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("expected shape error, got {other:?}"),
        }
        let c = tape.constant(Tensor::zeros(3, 2));
        assert!(matches!(tape.add(a, c), Err(TensorError::Shape { op: "add", .. })));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(f64::MAX));
        assert!(matches!(tape.scale(a, 10.0), Err(TensorError::NonFinite { op: "scale" })));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(a), Err(TensorError::Contract(_))));
    }

    #[test]
    fn parents_precede_children_and_backward_is_rerunnable() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row_vector(&[0.3, -0.7]));
        let s = tape.sin(x).unwrap();
        let q = tape.square(s).unwrap();
        let r = tape.sum(q).unwrap();
        for id in 0..tape.len() {
            let v = Var(id);
            assert!(tape.parents(v).iter().all(|&p| p < id));
        }
        let g1 = tape.backward(r).unwrap().get(x).unwrap().clone();
        let g2 = tape.backward(r).unwrap().get(x).unwrap().clone();
        assert_eq!(g1, g2);
    }

    #[test]
    fn backward_is_linear_in_the_root() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
        let x0 = Tensor::from_fn(5, 4, |_, _| rng.gen_range(-1.0..1.0));
        let mut tape = Tape::new();
        let x = tape.leaf(x0);
        let wv = tape.constant(w);
        let h = tape.matmul(x, wv).unwrap();
        let a = tape.sin(h).unwrap();
        let l1 = tape.sum(a).unwrap();
        let b = tape.clamp_sq(h).unwrap();
        let l2 = tape.mean(b).unwrap();
        let total = tape.add(l1, l2).unwrap();
        let g = tape.backward(total).unwrap().get(x).unwrap().clone();
        let mut g12 = tape.backward(l1).unwrap().get(x).unwrap().clone();
        g12.add_assign(tape.backward(l2).unwrap().get(x).unwrap());
        for (a, b) in g.data().iter().zip(g12.data()) {
            assert!((a - b).abs() <= 1e-14 * a.abs().max(1.0));
        }
    }

    #[test]
    fn fd_check_trivial_functions() {
        let err = finite_difference_check(|p| Ok::<_, ()>(p[0] * p[0]), &[3.0], &[6.0], 1e-6).unwrap();
        assert!(err < 1e-9);
        let err = finite_difference_check(|_| Ok::<_, ()>(7.5), &[1.0, 2.0], &[0.0, 0.0], 1e-6).unwrap();
        assert!(err < 1e-9);
    }

    fn random_away_from_kinks(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_fn(r, c, |_, _| {
            let v: f64 = rng.gen_range(0.05..1.5);
            if rng.gen::<bool>() {
                v
            } else {
                -v
            }
        })
    }

    /// Every catalog op agrees with central differences at random points.
    #[test]
    fn catalog_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let eps = 1e-6;
        for trial in 0..100 {
            let p = random_away_from_kinks(&mut rng, 3, 4);
            let w = Tensor::from_fn(4, 2, |_, _| rng.gen_range(-1.0..1.0));
            let row = Tensor::from_fn(1, 4, |_, _| rng.gen_range(-1.0..1.0));
            let col = Tensor::from_fn(3, 1, |_, _| rng.gen_range(-1.0..1.0));
            let other = Tensor::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0));
            let gamma = Tensor::from_fn(1, 4, |_, _| rng.gen_range(0.5..1.5));
            let beta = Tensor::from_fn(1, 4, |_, _| rng.gen_range(-0.5..0.5));
            // Weighting by a fixed random tensor keeps sum-of-op gradients non-trivial.
            let probe3x4 = Tensor::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0));
            type Build = Box<dyn Fn(&mut Tape, Var) -> Result<Var, TensorError>>;
            let weighted = |probe: Tensor, f: Build| -> Build {
                Box::new(move |tp: &mut Tape, x: Var| {
                    let y = f(tp, x)?;
                    let pr = tp.constant(probe.clone());
                    let m = tp.mul(y, pr)?;
                    tp.sum(m)
                })
            };
            let cases: Vec<(&str, Build)> = vec![
                ("matmul", {
                    let w = w.clone();
                    Box::new(move |tp: &mut Tape, x: Var| {
                        let wv = tp.constant(w.clone());
                        let y = tp.matmul(x, wv)?;
                        let s = tp.sin(y)?;
                        tp.sum(s)
                    })
                }),
                ("matmul_rhs", {
                    let other = other.clone();
                    Box::new(move |tp: &mut Tape, x: Var| {
                        let a = tp.constant(other.transpose());
                        let y = tp.matmul(a, x)?;
                        let s = tp.sin(y)?;
                        tp.sum(s)
                    })
                }),
                ("add_row", weighted(probe3x4.clone(), {
                    let row = row.clone();
                    Box::new(move |tp, x| {
                        let r = tp.constant(row.clone());
                        let y = tp.add(x, r)?;
                        tp.square(y)
                    })
                })),
                ("sub_col", weighted(probe3x4.clone(), {
                    let col = col.clone();
                    Box::new(move |tp, x| {
                        let c = tp.constant(col.clone());
                        let y = tp.sub(x, c)?;
                        tp.square(y)
                    })
                })),
                ("mul_same", weighted(probe3x4.clone(), {
                    let other = other.clone();
                    Box::new(move |tp, x| {
                        let o = tp.constant(other.clone());
                        let y = tp.mul(x, o)?;
                        tp.sin(y)
                    })
                })),
                ("mul_self", Box::new(|tp, x| {
                    let y = tp.mul(x, x)?;
                    tp.sum(y)
                })),
                ("scale", weighted(probe3x4.clone(), Box::new(|tp, x| tp.scale(x, -2.5)))),
                ("add_scalar", weighted(probe3x4.clone(), Box::new(|tp, x| {
                    let y = tp.add_scalar(x, 0.7)?;
                    tp.square(y)
                }))),
                ("relu", weighted(probe3x4.clone(), Box::new(|tp, x| tp.relu(x)))),
                ("sigmoid", weighted(probe3x4.clone(), Box::new(|tp, x| tp.sigmoid(x)))),
                ("sin", weighted(probe3x4.clone(), Box::new(|tp, x| tp.sin(x)))),
                ("cos", weighted(probe3x4.clone(), Box::new(|tp, x| tp.cos(x)))),
                ("square", weighted(probe3x4.clone(), Box::new(|tp, x| tp.square(x)))),
                ("clamp_sq", weighted(probe3x4.clone(), Box::new(|tp, x| tp.clamp_sq(x)))),
                ("mean", Box::new(|tp, x| {
                    let s = tp.sin(x)?;
                    tp.mean(s)
                })),
                ("sum_rows", Box::new(|tp, x| {
                    let s = tp.sum_rows(x)?;
                    let q = tp.sin(s)?;
                    tp.sum(q)
                })),
                ("concat_slice", Box::new(|tp, x| {
                    let a = tp.slice(x, 1, 2)?;
                    let b = tp.gather(x, &[3, 0, 3])?;
                    let c = tp.concat(&[a, b, x])?;
                    let s = tp.sin(c)?;
                    tp.sum(s)
                })),
                ("batch_norm_train", weighted(probe3x4.clone(), {
                    let (g, b) = (gamma.clone(), beta.clone());
                    Box::new(move |tp, x| {
                        let gv = tp.constant(g.clone());
                        let bv = tp.constant(b.clone());
                        Ok(tp.batch_norm_train(x, gv, bv, 1e-5)?.0)
                    })
                })),
                ("batch_norm_eval", weighted(probe3x4.clone(), {
                    let (g, b) = (gamma.clone(), beta.clone());
                    Box::new(move |tp, x| {
                        let gv = tp.constant(g.clone());
                        let bv = tp.constant(b.clone());
                        tp.batch_norm_eval(x, gv, bv, &[0.1, -0.2, 0.0, 0.3], &[1.0, 0.5, 2.0, 0.9], 1e-5)
                    })
                })),
                ("dropout", weighted(probe3x4.clone(), Box::new(move |tp, x| {
                    // Fixed seed: the mask is identical across FD evaluations.
                    let mut r = ChaCha8Rng::seed_from_u64(trial as u64);
                    tp.dropout(x, 0.2, &mut r)
                }))),
            ];
            for (name, build) in cases {
                let err = check_tape_gradient(|tp, x| build(tp, x), &p, eps).unwrap();
                assert!(err < 1e-5, "{name}: rel error {err} at trial {trial}");
            }
        }
    }

    #[test]
    fn batch_norm_parameters_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = Tensor::from_fn(6, 3, |_, _| rng.gen_range(-1.0..1.0));
        let probe = Tensor::from_fn(6, 3, |_, _| rng.gen_range(-1.0..1.0));
        let g0 = Tensor::row_vector(&[0.9, 1.1, 1.3]);
        let build = |tp: &mut Tape, g: Var| {
            let x = tp.constant(x0.clone());
            let b = tp.constant(Tensor::row_vector(&[0.1, 0.0, -0.1]));
            let (y, _) = tp.batch_norm_train(x, g, b, 1e-5)?;
            let pr = tp.constant(probe.clone());
            let m = tp.mul(y, pr)?;
            let s = tp.sin(m)?;
            tp.sum(s)
        };
        assert!(check_tape_gradient(build, &g0, 1e-6).unwrap() < 1e-6);
    }

    #[test]
    fn batch_norm_train_rejects_single_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(1, 3));
        let g = tape.constant(Tensor::filled(1, 3, 1.0));
        let b = tape.constant(Tensor::zeros(1, 3));
        assert!(matches!(tape.batch_norm_train(x, g, b, 1e-5), Err(TensorError::Contract(_))));
    }

    #[test]
    fn dropout_mean_matches_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = Tensor::from_fn(1, 5, |_, j| 1.0 + j as f64);
        let mut acc = Tensor::zeros(1, 5);
        let draws = 10_000;
        for _ in 0..draws {
            let mut tape = Tape::new();
            let x = tape.constant(base.clone());
            let d = tape.dropout(x, 0.2, &mut rng).unwrap();
            acc.add_assign(tape.value(d));
        }
        for (m, b) in acc.data().iter().zip(base.data()) {
            let mean = m / draws as f64;
            assert!((mean - b).abs() / b < 0.02, "mean {mean} vs {b}");
        }
        let mut tape = Tape::new();
        let x = tape.constant(base.clone());
        let d = tape.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(tape.value(d), &base);
    }
}
