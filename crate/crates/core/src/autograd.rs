//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every forward op in creation order, so node ids are
//! already a topological order and [`Graph::backward`] is a single reverse
//! sweep. Forward values are kept on the tape and reused by the backward
//! rules.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{contract, Error, Result};
use crate::tensor::{dims2, kernels, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Attention-style mask over the last two axes of a 2-D score matrix.
#[derive(Clone, Debug)]
pub enum Mask {
    /// Query row `i` sits at absolute position `offset + i` and may attend
    /// to key columns `0..=offset + i`.
    Causal { offset: usize },
    /// Row-major `rows × cols` table; `true` means the entry is kept.
    Explicit(Arc<Vec<bool>>),
}

impl Mask {
    pub fn allows(&self, i: usize, j: usize, cols: usize) -> bool {
        match self {
            Mask::Causal { offset } => j <= offset + i,
            Mask::Explicit(m) => m[i * cols + j],
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Transpose(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Tanh(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        pad: Option<usize>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v.0)
    }

    /// Gradient of `v`; panics if `v` was not a gradient-tracking node.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.grads
            .get(&v.0)
            .unwrap_or_else(|| panic!("no gradient recorded for node {}", v.0))
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    /// A gradient-tracking leaf (trainable parameter or checked input).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn dim_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dimension {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(self.dim_err("matmul", a, b));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    /// Elementwise sum. `b` may also be a trailing-axis vector (bias) or a
    /// one-element scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let xa = self.value(a).data();
        let xb = self.value(b).data();
        if sa == sb {
            let out = xa.iter().zip(xb).map(|(x, y)| x + y).collect();
            self.push("add", sa, out, Op::Add(a, b), &[a, b])
        } else if sb.len() == 1 && sb[0] == *sa.last().unwrap() {
            let n = sb[0];
            let out = xa.iter().enumerate().map(|(i, x)| x + xb[i % n]).collect();
            self.push("add", sa, out, Op::AddRow(a, b), &[a, b])
        } else if sb == [1] {
            let s = xb[0];
            let out = xa.iter().map(|x| x + s).collect();
            self.push("add", sa, out, Op::AddScalar(a, b), &[a, b])
        } else {
            Err(self.dim_err("add", a, b))
        }
    }

    /// Elementwise product; either side may be a one-element scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            let out = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x * y)
                .collect();
            self.push("mul", sa, out, Op::Mul(a, b), &[a, b])
        } else if sa == [1] {
            let s = self.value(a).item();
            let out = self.value(b).data().iter().map(|x| s * x).collect();
            self.push("mul", sb, out, Op::MulScalar(a, b), &[a, b])
        } else if sb == [1] {
            self.mul(b, a)
        } else {
            Err(self.dim_err("mul", a, b))
        }
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        self.push("scale", shape, out, Op::Scale(x, c), &[x])
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| contract("concat of nothing"))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(self.dim_err("concat", first, p));
            }
        }
        let rows = self.value(first).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push("concat", shape, out, Op::Concat(parts.to_vec()), parts)
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if len == 0 || start + len > c {
            return Err(contract(format!(
                "slice {start}..{} out of range for last axis {c}",
                start + len
            )));
        }
        let out: Vec<f64> = (0..t.rows())
            .flat_map(|r| t.row(r)[start..start + len].iter().copied())
            .collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        self.push("slice", shape, out, Op::Slice { x, start }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "transpose")?;
        let out = kernels::transpose(self.value(x).data(), r, c);
        self.push("transpose", vec![c, r], out, Op::Transpose(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, mask: Option<Mask>) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        if let Some(m) = &mask {
            for i in 0..t.rows() {
                if !(0..n).any(|j| m.allows(i, j, n)) {
                    return Err(contract(format!("softmax row {i} is fully masked")));
                }
            }
        }
        let out = match &mask {
            Some(m) => kernels::softmax_rows(t.data(), n, |i, j| m.allows(i, j, n)),
            None => kernels::softmax_rows(t.data(), n, |_, _| true),
        };
        let shape = t.shape().to_vec();
        self.push("softmax", shape, out, Op::Softmax(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape(gamma) != [d] {
            return Err(self.dim_err("layer_norm", x, gamma));
        }
        if self.shape(beta) != [d] {
            return Err(self.dim_err("layer_norm", x, beta));
        }
        let (xhat, _, rstd) = kernels::layer_norm_stats(self.value(x).data(), d, eps);
        // An overflowed variance would silently normalise to zero.
        if rstd.iter().any(|&r| !(r.is_finite() && r > 0.0)) {
            return Err(Error::NonFinite { op: "layer_norm" });
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out = xhat.iter().enumerate().map(|(i, v)| v * g[i % d] + b[i % d]).collect();
        let shape = self.shape(x).to_vec();
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| kernels::gelu(v)).collect();
        let shape = t.shape().to_vec();
        self.push("gelu", shape, out, Op::Gelu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v.tanh()).collect();
        let shape = t.shape().to_vec();
        self.push("tanh", shape, out, Op::Tanh(x), &[x])
    }

    /// Row lookup: output row `i` is row `ids[i]` of the 2-D `table`.
    /// Serves both token embedding and index-based row gathers.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2(self.value(table), "gather")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Vocabulary { token: bad, vocab: v });
        }
        if ids.is_empty() {
            return Err(contract("gather with no indices"));
        }
        let t = self.value(table);
        let out: Vec<f64> = ids.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        self.push(
            "gather",
            vec![ids.len(), d],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Mean token cross-entropy of 2-D `logits` against `targets`,
    /// skipping positions whose target equals `pad`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad: Option<usize>) -> Result<Var> {
        let (l, d) = dims2(self.value(logits), "cross_entropy")?;
        if targets.len() != l {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: vec![l, d],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= d) {
            return Err(Error::Vocabulary { token: bad, vocab: d });
        }
        let count = targets.iter().filter(|&&t| Some(t) != pad).count();
        if count == 0 {
            return Err(contract("cross_entropy targets are all padding"));
        }
        let x = self.value(logits).data();
        let probs = kernels::softmax_rows(x, d, |_, _| true);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if Some(t) == pad {
                continue;
            }
            let row = &x[i * d..(i + 1) * d];
            total += kernels::log_sum_exp(row) - row[t];
        }
        let loss = total / count as f64;
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad,
                probs,
                count,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", vec![1], vec![s], Op::Mean(x), &[x])
    }

    /// Linear layer: `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Reverse sweep from a scalar `loss`. Every gradient-tracking node
    /// receives an entry; nodes the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != [1] {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &gout, &mut grads);
            grads[id] = Some(gout);
        }

        let mut out = HashMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                continue;
            }
            let g = grads
                .get_mut(id)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![0.0; node.value.len()]);
            out.insert(id, Tensor::new(node.value.shape().to_vec(), g)?);
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(g);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &mut |g| {
                    // dA = dY · Bᵀ
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += gout[i * n + j] * bv[p * n + j];
                            }
                            g[i * k + p] += s;
                        }
                    }
                });
                acc(*b, &mut |g| {
                    // dB = Aᵀ · dY
                    for i in 0..m {
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            let grow = &gout[i * n..(i + 1) * n];
                            for (gb, &go) in g[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *gb += a_ip * go;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gout));
                acc(*b, &mut |g| add_into(g, gout));
            }
            Op::AddRow(a, b) => {
                acc(*a, &mut |g| add_into(g, gout));
                acc(*b, &mut |g| {
                    let n = g.len();
                    for (i, v) in gout.iter().enumerate() {
                        g[i % n] += v;
                    }
                });
            }
            Op::AddScalar(a, b) => {
                acc(*a, &mut |g| add_into(g, gout));
                acc(*b, &mut |g| g[0] += gout.iter().sum::<f64>());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * bv[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * av[i];
                    }
                });
            }
            Op::MulScalar(s, x) => {
                let sv = self.value(*s).item();
                let xv = self.value(*x).data();
                acc(*s, &mut |g| {
                    g[0] += gout.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
                });
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * sv;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] * c;
                }
            }),
            Op::Concat(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, &mut |g| {
                        for r in 0..rows {
                            for c in 0..w {
                                g[r * w + c] += gout[r * total + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice { x, start } => {
                let full = self.value(*x).cols();
                let w = node.value.cols();
                let rows = node.value.rows();
                acc(*x, &mut |g| {
                    for r in 0..rows {
                        for c in 0..w {
                            g[r * full + start + c] += gout[r * w + c];
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                acc(*x, &mut |g| {
                    let t = kernels::transpose(gout, r, c);
                    add_into(g, &t);
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.cols();
                acc(*x, &mut |g| {
                    for r in 0..y.len() / n {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &gout[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            g[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.cols();
                let gv = self.value(*gamma).data();
                acc(*gamma, &mut |g| {
                    for i in 0..gout.len() {
                        g[i % d] += gout[i] * xhat[i];
                    }
                });
                acc(*beta, &mut |g| {
                    for i in 0..gout.len() {
                        g[i % d] += gout[i];
                    }
                });
                acc(*x, &mut |g| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let base = r * d;
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let dxh = gout[base + j] * gv[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[base + j];
                        }
                        mean_dxhat /= d as f64;
                        mean_dxhat_xhat /= d as f64;
                        for j in 0..d {
                            let dxh = gout[base + j] * gv[j];
                            g[base + j] += rs * (dxh - mean_dxhat - xhat[base + j] * mean_dxhat_xhat);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * kernels::gelu_grad(xv[i]);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = node.value.cols();
                acc(*table, &mut |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            g[id * d + c] += gout[r * d + c];
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad,
                probs,
                count,
            } => {
                let d = self.value(*logits).cols();
                let scale = gout[0] / *count as f64;
                acc(*logits, &mut |g| {
                    for (i, &t) in targets.iter().enumerate() {
                        if Some(t) == *pad {
                            continue;
                        }
                        for j in 0..d {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            g[i * d + j] += scale * (probs[i * d + j] - onehot);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |g| {
                for v in g.iter_mut() {
                    *v += gout[0];
                }
            }),
            Op::Mean(x) => acc(*x, &mut |g| {
                let s = gout[0] / g.len() as f64;
                for v in g.iter_mut() {
                    *v += s;
                }
            }),
        }
    }
}

fn add_into(g: &mut [f64], src: &[f64]) {
    for (a, b) in g.iter_mut().zip(src) {
        *a += b;
    }
}

/// Compares analytic gradients of the scalar function `f` against central
/// differences with step `h`. Returns the largest relative error over all
/// input elements, `|a - c| / max(|a|, |c|, 1e-8)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(contract(format!("finite-difference step {h} outside [1e-6, 1e-4]")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).data().to_vec();
        for e in 0..input.len() {
            let mut shifted = inputs.to_vec();
            let mut plus = input.data().to_vec();
            plus[e] += h;
            shifted[k] = Tensor::new(input.shape().to_vec(), plus)?;
            let fp = eval(&shifted)?;
            let mut minus = input.data().to_vec();
            minus[e] -= h;
            shifted[k] = Tensor::new(input.shape().to_vec(), minus)?;
            let fm = eval(&shifted)?;
            let central = (fp - fm) / (2.0 * h);
            let a = analytic[e];
            let denom = a.abs().max(central.abs()).max(1e-8);
            worst = worst.max((a - central).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_ones() {
        let mut g = Graph::new();
        let i2 = g.constant(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = g.constant(t2(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
        let y = g.matmul(i2, b).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 6.0, 7.0, 8.0]);

        let a = g.constant(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let ones = g.constant(t2(&[vec![1.0], vec![1.0]]));
        let y = g.matmul(a, ones).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 1]);
        assert_eq!(g.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { op: "matmul", .. }));
    }

    #[test]
    fn softmax_edge_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = g.softmax(x, None).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(Tensor::new(vec![2], vec![3.0, 1003.0]).unwrap());
        let y = g.softmax(x, None).unwrap();
        assert!(g.value(y).data()[0] < 1e-300);
        assert_eq!(g.value(y).data()[1], 1.0);
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2]));
        let mask = Mask::Explicit(Arc::new(vec![false, false]));
        assert!(matches!(g.softmax(x, Some(mask)), Err(Error::Contract(_))));
    }

    #[test]
    fn layer_norm_constant_row_and_affine_collapse() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 4], 3.5));
        let gamma = g.constant(Tensor::ones(&[4]));
        let beta = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let x = g.constant(t2(&[vec![1.0, -2.0, 7.0]]));
        let gamma = g.constant(Tensor::zeros(&[3]));
        let beta = g.constant(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(kernels::gelu(0.0), 0.0);
        assert!((kernels::gelu(10.0) - 10.0).abs() < 1e-9);
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 4.0]).unwrap());
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_zero_fills_unused() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));

        let unused = g.leaf(Tensor::ones(&[3]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn overflow_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2], 1e308));
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn grad_check_linear_is_exact() {
        let w = Tensor::new(vec![2, 3], vec![0.3, -1.2, 2.0, 0.7, 0.1, -0.4]).unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.5, -0.5]).unwrap();
        let err = grad_check(
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                g.sum(y)
            },
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn grad_check_rejects_bad_step() {
        let x = Tensor::zeros(&[1]);
        assert!(grad_check(|g, v| g.sum(v[0]), &[x], 1e-2).is_err());
    }
}
