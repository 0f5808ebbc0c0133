//! Per-forward-pass gradient tape.
//!
//! Every differentiable operation appends a node holding its value and the
//! ids of its inputs. [`Tape::backward`] walks the nodes in reverse and
//! accumulates vector-Jacobian products. A tape is built for one forward
//! pass and dropped after the backward pass.

use std::collections::BTreeMap;

use crate::error::{LiraError, Result};
use crate::params::ParamStore;
use crate::tensor::{self, gemm, split_axis, Tensor};

const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// a · bᵀ
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Transpose(usize),
    Softmax { x: usize, axis: usize },
    CausalSoftmax(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    GatherRows { table: usize, ids: Vec<usize> },
    Gather { x: usize, idx: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    CrossEntropy { logits: usize, targets: Vec<(usize, usize)>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every trainable parameter that reached the loss.
    pub fn params(&self) -> BTreeMap<String, Vec<f64>> {
        self.params
            .iter()
            .filter_map(|(name, v)| self.get(*v).map(|g| (name.clone(), g.to_vec())))
            .collect()
    }
}

impl Tape {
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, i: usize) -> &[f64] {
        self.nodes[i].value.data()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf for a stored parameter. Trainable parameters participate in the
    /// backward pass; frozen ones are constants. Repeated calls return the
    /// same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let t = store.get(name)?;
        let trainable = store.is_trainable(name);
        let v = self.leaf(Tensor::new(t.shape().to_vec(), t.data().to_vec())?, trainable);
        if trainable {
            self.params.insert(name.to_string(), v);
        }
        Ok(v)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x.0])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(LiraError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(LiraError::shape(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(LiraError::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a.0), false, self.data(b.0), false, &mut out, 0.0);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(LiraError::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a.0), false, self.data(b.0), true, &mut out, 0.0);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a.0, b.0), &[a.0, b.0]))
    }

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let data = self.data(a.0).iter().zip(self.data(b.0)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, op, &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, Op::Div(a.0, b.0), |x, y| x / y)
    }

    /// Adds a length-N vector to every row of an M×N matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.dims2("add_row", a)?;
        if self.value(row).len() != n {
            return Err(LiraError::shape("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.data(row.0).to_vec();
        let data = self
            .data(a.0)
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(&r).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(a.0, row.0), &[a.0, row.0]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x.0, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::AddScalar(x.0), |v| v + c)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        Ok(self.push(value, Op::Transpose(x.0), &[x.0]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.value(x).softmax(axis)?;
        Ok(self.push(value, Op::Softmax { x: x.0, axis }, &[x.0]))
    }

    /// Row softmax of a square score matrix with future positions masked.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("causal_softmax", x)?;
        let mut data = self.data(x.0).to_vec();
        tensor::causal_softmax_rows(&mut data, r, c, 0);
        let value = Tensor::new(vec![r, c], data)?;
        Ok(self.push(value, Op::CausalSoftmax(x.0), &[x.0]))
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(LiraError::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let rows = self.value(x).len() / c;
        let mut xhat = vec![0.0; rows * c];
        let mut rstds = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        let (g, b) = (self.data(gain.0), self.data(bias.0));
        for r in 0..rows {
            let row = &self.data(x.0)[r * c..(r + 1) * c];
            let (mean, rstd) = tensor::row_stats(row, LN_EPS);
            rstds[r] = rstd;
            for j in 0..c {
                let h = (row[j] - mean) * rstd;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let op = Op::LayerNorm {
            x: x.0,
            gain: gain.0,
            bias: bias.0,
            xhat,
            rstd: rstds,
        };
        Ok(self.push(value, op, &[x.0, gain.0, bias.0]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x.0), tensor::gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x.0), tensor::sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x.0), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, Op::Log(x.0), f64::ln)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, Op::Clamp { x: x.0, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let value = self.value(table).embedding_lookup(ids)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table.0],
        ))
    }

    /// Flat gather: `out[i] = x.flat[idx[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, idx: &[usize], shape: &[usize]) -> Result<Var> {
        let src = self.data(x.0);
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(LiraError::invalid(format!("gather index {bad} out of range {}", src.len())));
        }
        let data = idx.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(value, Op::Gather { x: x.0, idx: idx.to_vec() }, &[x.0]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let value = Tensor::concat(&tensors, axis)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(value, Op::Concat { parts: ids.clone(), axis }, &ids))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let value = self.value(x).slice(axis, start, end)?;
        Ok(self.push(value, Op::Slice { x: x.0, axis, start }, &[x.0]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0), &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.value(x).mean();
        self.push(Tensor::scalar(s), Op::Mean(x.0), &[x.0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x.0), &[x.0]))
    }

    /// Mean softmax cross-entropy over `(row, class)` targets of a 2-D
    /// logits matrix.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let (rows, v) = self.dims2("cross_entropy", logits)?;
        if targets.is_empty() {
            return Err(LiraError::invalid("cross_entropy with no targets"));
        }
        let mut probs = Vec::with_capacity(targets.len() * v);
        let mut total = 0.0;
        for &(r, c) in targets {
            if r >= rows || c >= v {
                return Err(LiraError::invalid(format!("target ({r}, {c}) outside {rows}x{v}")));
            }
            let mut p = self.data(logits.0)[r * v..(r + 1) * v].to_vec();
            tensor::softmax_axis(&mut p, 1, v, 1);
            total -= p[c].max(f64::MIN_POSITIVE).ln();
            probs.extend_from_slice(&p);
        }
        let value = Tensor::scalar(total / targets.len() as f64);
        let op = Op::CrossEntropy {
            logits: logits.0,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(value, op, &[logits.0]))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(LiraError::shape("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        let mut acc = |target: usize, contribution: Vec<f64>| {
            if !self.nodes[target].requires_grad {
                return;
            }
            match &mut grads[target] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contribution) {
                        *e += c;
                    }
                }
                slot => *slot = Some(contribution),
            }
        };
        let wants = |i: usize| self.nodes[i].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[*a].value.rows(), self.nodes[*a].value.cols());
                let n = self.nodes[*b].value.cols();
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.data(*b), true, &mut da, 0.0);
                    acc(*a, da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.data(*a), true, g, false, &mut db, 0.0);
                    acc(*b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.nodes[*a].value.rows(), self.nodes[*a].value.cols());
                let n = self.nodes[*b].value.rows();
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.data(*b), false, &mut da, 0.0);
                    acc(*a, da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, g, true, self.data(*a), false, &mut db, 0.0);
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                acc(*b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(*a, g.iter().zip(bv).map(|(g, b)| g / b).collect());
                acc(
                    *b,
                    g.iter().zip(av).zip(bv).map(|((g, a), b)| -g * a / (b * b)).collect(),
                );
            }
            Op::AddRow(a, row) => {
                acc(*a, g.to_vec());
                if wants(*row) {
                    let n = self.nodes[*row].value.len();
                    let mut dr = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        for (d, v) in dr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    acc(*row, dr);
                }
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Transpose(x) => {
                let (r, c) = (self.nodes[*x].value.rows(), self.nodes[*x].value.cols());
                acc(*x, tensor::transpose_data(g, c, r));
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) =
                    split_axis(self.nodes[*x].value.shape(), *axis, "softmax").expect("validated in forward");
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| o * n * inner + j * inner + i;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            dx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::CausalSoftmax(x) => {
                let c = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = node.value.cols();
                let gv = self.data(*gain);
                if wants(*x) {
                    let mut dx = vec![0.0; y.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let range = r * c..(r + 1) * c;
                        let gr = &g[range.clone()];
                        let hr = &xhat[range.clone()];
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dhh = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dx[r * c + j] = rs * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                    acc(*x, dx);
                }
                if wants(*gain) || wants(*bias) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    acc(*gain, dg);
                    acc(*bias, db);
                }
            }
            Op::Gelu(x) => {
                let xv = self.data(*x);
                acc(*x, g.iter().zip(xv).map(|(g, &x)| g * tensor::gelu_grad(x)).collect());
            }
            Op::Sigmoid(x) => acc(*x, g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect()),
            Op::Exp(x) => acc(*x, g.iter().zip(y).map(|(g, e)| g * e).collect()),
            Op::Log(x) => {
                let xv = self.data(*x);
                acc(*x, g.iter().zip(xv).map(|(g, x)| g / x).collect());
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.data(*x);
                acc(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::GatherRows { table, ids } => {
                let d = self.nodes[*table].value.cols();
                let mut dt = vec![0.0; self.nodes[*table].value.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                acc(*table, dt);
            }
            Op::Gather { x, idx } => {
                let mut dx = vec![0.0; self.nodes[*x].value.len()];
                for (gi, &i) in g.iter().zip(idx) {
                    dx[i] += gi;
                }
                acc(*x, dx);
            }
            Op::Concat { parts, axis } => {
                let outer: usize = node.value.shape()[..*axis].iter().product();
                let inner: usize = node.value.shape()[*axis + 1..].iter().product();
                let total = node.value.shape()[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.shape()[*axis];
                    if wants(p) {
                        let mut dp = Vec::with_capacity(self.nodes[p].value.len());
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            dp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        acc(p, dp);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let src = self.nodes[*x].value.shape();
                let (outer, n, inner) = split_axis(src, *axis, "slice").expect("validated in forward");
                let len = node.value.shape()[*axis];
                let mut dx = vec![0.0; self.nodes[*x].value.len()];
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    let srcb = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[srcb..srcb + len * inner]);
                }
                acc(*x, dx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.nodes[*x].value.len()]),
            Op::Mean(x) => {
                let n = self.nodes[*x].value.len();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.nodes[*logits].value.cols();
                let mut dl = vec![0.0; self.nodes[*logits].value.len()];
                let scale = g[0] / targets.len() as f64;
                for (t, &(r, c)) in targets.iter().enumerate() {
                    let p = &probs[t * v..(t + 1) * v];
                    for j in 0..v {
                        dl[r * v + j] += scale * (p[j] - if j == c { 1.0 } else { 0.0 });
                    }
                }
                acc(*logits, dl);
            }
        }
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks d(sum(w ⊙ f(inputs)))/d(inputs) against central differences.
    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let build = |ins: &[Tensor], tape: &mut Tape| -> (Vec<Var>, Var) {
            let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone(), true)).collect();
            let out = f(tape, &vars);
            (vars, out)
        };
        let mut tape = Tape::new();
        let (_, out) = build(&inputs, &mut tape);
        let weights = rand_tensor(tape.shape(out), &mut rng);
        let loss_of = |ins: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let (_, out) = build(ins, &mut tape);
            tape.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
        };
        let mut tape = Tape::new();
        let (vars, out) = build(&inputs, &mut tape);
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        let h = 1e-5;
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
            for i in 0..inputs[k].len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
                assert!(err < 1e-4, "input {k}[{i}]: fd {fd} vs analytic {}", analytic[i]);
            }
        }
    }

    #[test]
    fn grads_of_every_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[4, 2], &mut rng);
        check(vec![a.clone(), b.clone()], |t, v| t.matmul(v[0], v[1]).unwrap());
        let c = rand_tensor(&[5, 4], &mut rng);
        check(vec![a.clone(), c.clone()], |t, v| t.matmul_nt(v[0], v[1]).unwrap());
        let a2 = rand_tensor(&[3, 4], &mut rng);
        check(vec![a.clone(), a2.clone()], |t, v| t.add(v[0], v[1]).unwrap());
        check(vec![a.clone(), a2.clone()], |t, v| t.sub(v[0], v[1]).unwrap());
        check(vec![a.clone(), a2.clone()], |t, v| t.mul(v[0], v[1]).unwrap());
        let pos = a2.map(|x| x.abs() + 0.5);
        check(vec![a.clone(), pos.clone()], |t, v| t.div(v[0], v[1]).unwrap());
        check(vec![pos.clone()], |t, v| t.log(v[0]));
        check(vec![a.clone()], |t, v| t.exp(v[0]));
        check(vec![a.clone()], |t, v| t.gelu(v[0]));
        check(vec![a.clone()], |t, v| t.sigmoid(v[0]));
        check(vec![a.clone()], |t, v| t.scale(v[0], -2.5));
        check(vec![a.clone()], |t, v| t.add_scalar(v[0], 1.5));
        check(vec![a.clone()], |t, v| t.transpose(v[0]).unwrap());
        check(vec![a.clone()], |t, v| t.clamp(v[0], -0.5, 0.5));
        let row = rand_tensor(&[4], &mut rng);
        check(vec![a.clone(), row.clone()], |t, v| t.add_row(v[0], v[1]).unwrap());
        for axis in 0..2 {
            check(vec![a.clone()], move |t, v| t.softmax(v[0], axis).unwrap());
        }
        let sq = rand_tensor(&[4, 4], &mut rng);
        check(vec![sq], |t, v| t.causal_softmax(v[0]).unwrap());
        let g = rand_tensor(&[4], &mut rng);
        check(vec![a.clone(), g, row.clone()], |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap());
        check(vec![a.clone()], |t, v| t.embedding_lookup(v[0], &[2, 0, 2]).unwrap());
        check(vec![a.clone()], |t, v| t.gather(v[0], &[11, 0, 0, 5], &[2, 2]).unwrap());
        check(vec![a.clone(), c.clone()], |t, v| t.concat(&[v[0], v[1]], 0).unwrap());
        let d = rand_tensor(&[3, 2], &mut rng);
        check(vec![a.clone(), d], |t, v| t.concat(&[v[0], v[1]], 1).unwrap());
        check(vec![a.clone()], |t, v| t.slice(v[0], 1, 1, 3).unwrap());
        check(vec![a.clone()], |t, v| t.slice(v[0], 0, 1, 2).unwrap());
        check(vec![a.clone()], |t, v| t.sum(v[0]));
        check(vec![a.clone()], |t, v| t.mean(v[0]));
        check(vec![a.clone()], |t, v| t.reshape(v[0], &[2, 6]).unwrap());
        check(vec![a.clone()], |t, v| t.cross_entropy(v[0], &[(0, 1), (2, 3), (2, 0)]).unwrap());
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::full(&[2, 2], 1.0), false);
        let b = tape.leaf(Tensor::full(&[2, 2], 2.0), true);
        let c = tape.mul(a, b).unwrap();
        let s = tape.sum(c);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let grads = tape.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[7.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_log_v() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[2, 7]));
        let ce = tape.cross_entropy(l, &[(0, 3), (1, 6)]).unwrap();
        assert!((tape.value(ce).item() - 7f64.ln()).abs() < 1e-12);
    }
}
