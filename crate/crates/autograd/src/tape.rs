//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is an append-only arena of nodes. Every operation on a [`Var`]
//! pushes its output onto the tape; when at least one input requires a
//! gradient the node also records which backward rule to apply. Because nodes
//! are only ever appended, insertion order is a valid topological order and
//! [`Tape::backward`] is a single reverse sweep.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sum(usize),
    Concat(Vec<usize>),
    RowMean(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Embedding { table: usize, ids: Vec<usize> },
    SliceCols { input: usize, start: usize },
    TileRows(usize, usize),
    Reshape(usize),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation recorder. Confined to one thread; build a fresh tape per step.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Arc::new(value), Op::Leaf, true)
    }

    /// A leaf that does not receive a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Arc::new(value), Op::Leaf, false)
    }

    /// Records a shared tensor without copying its data.
    pub fn shared(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn check(&self, v: &Var<'_>) -> Result<()> {
        if std::ptr::eq(v.tape, self) {
            Ok(())
        } else {
            Err(TensorError::ForeignVar)
        }
    }

    fn record(&self, op_name: &'static str, out: Tensor, op: Op, inputs: &[usize]) -> Result<Var<'_>> {
        if !out.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push(Arc::new(out), op, requires_grad))
    }

    /// Runs the reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check(&loss)?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                propagate(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let shapes = nodes[..=loss.id].iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, contribution: impl FnOnce(&mut Vec<f64>), len: usize) {
    let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
    contribution(slot);
}

fn add_into(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, delta: &[f64]) {
    if !nodes[id].requires_grad {
        return;
    }
    accumulate(
        grads,
        id,
        |g| g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        delta.len(),
    );
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            let gt = Tensor::from_parts(vec![m, n], g.to_vec());
            if nodes[a].requires_grad {
                // dA = G B^T
                let da = kernels::matmul_t(&gt, bv).expect("matmul backward shapes");
                add_into(grads, nodes, a, da.data());
            }
            if nodes[b].requires_grad {
                // dB = A^T G
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = av.data()[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let grow = &g[i * n..(i + 1) * n];
                        for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *d += aip * gv;
                        }
                    }
                }
                add_into(grads, nodes, b, &db);
            }
        }
        &Op::MatMulT(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[0];
            let gt = Tensor::from_parts(vec![m, n], g.to_vec());
            if nodes[a].requires_grad {
                // dA = G B
                let da = kernels::matmul(&gt, bv).expect("matmul_t backward shapes");
                add_into(grads, nodes, a, da.data());
            }
            if nodes[b].requires_grad {
                // dB = G^T A, accumulated in place
                let db = grads[b].get_or_insert_with(|| vec![0.0; n * k]);
                for i in 0..m {
                    let arow = &av.data()[i * k..(i + 1) * k];
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for (d, x) in db[j * k..(j + 1) * k].iter_mut().zip(arow) {
                            *d += gij * x;
                        }
                    }
                }
            }
        }
        &Op::Add(a, b) => {
            add_into(grads, nodes, a, g);
            add_into(grads, nodes, b, g);
        }
        &Op::Sub(a, b) => {
            add_into(grads, nodes, a, g);
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            add_into(grads, nodes, b, &neg);
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
            let da: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
            let db: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
            add_into(grads, nodes, a, &da);
            add_into(grads, nodes, b, &db);
        }
        &Op::AddRow(a, row) => {
            add_into(grads, nodes, a, g);
            let c = nodes[row].value.len();
            let mut dr = vec![0.0; c];
            for chunk in g.chunks(c) {
                dr.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
            }
            add_into(grads, nodes, row, &dr);
        }
        &Op::Scale(a, s) => {
            let da: Vec<f64> = g.iter().map(|v| v * s).collect();
            add_into(grads, nodes, a, &da);
        }
        &Op::AddScalar(a) | &Op::Reshape(a) => add_into(grads, nodes, a, g),
        &Op::Sum(a) => {
            let da = vec![g[0]; nodes[a].value.len()];
            add_into(grads, nodes, a, &da);
        }
        Op::Concat(parts) => {
            let rows = out.rows();
            let total = out.cols();
            let mut offset = 0;
            for &p in parts {
                let c = nodes[p].value.cols();
                if nodes[p].requires_grad {
                    let mut dp = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        dp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                    }
                    add_into(grads, nodes, p, &dp);
                }
                offset += c;
            }
        }
        &Op::RowMean(a) => {
            let av = &nodes[a].value;
            let r = av.rows();
            let inv = 1.0 / r as f64;
            let da: Vec<f64> = (0..r).flat_map(|_| g.iter().map(|v| v * inv)).collect();
            add_into(grads, nodes, a, &da);
        }
        &Op::Sigmoid(a) => {
            let da: Vec<f64> = g.iter().zip(out.data()).map(|(gv, y)| gv * y * (1.0 - y)).collect();
            add_into(grads, nodes, a, &da);
        }
        &Op::Tanh(a) => {
            let da: Vec<f64> = g.iter().zip(out.data()).map(|(gv, y)| gv * (1.0 - y * y)).collect();
            add_into(grads, nodes, a, &da);
        }
        &Op::Exp(a) => {
            let da: Vec<f64> = g.iter().zip(out.data()).map(|(gv, y)| gv * y).collect();
            add_into(grads, nodes, a, &da);
        }
        &Op::Log(a) => {
            let x = nodes[a].value.data();
            let da: Vec<f64> = g.iter().zip(x).map(|(gv, x)| gv / x).collect();
            add_into(grads, nodes, a, &da);
        }
        &Op::Softmax(a) => {
            let c = out.cols();
            let mut da = Vec::with_capacity(g.len());
            for (gr, yr) in g.chunks(c).zip(out.data().chunks(c)) {
                let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                da.extend(gr.iter().zip(yr).map(|(gv, y)| y * (gv - dot)));
            }
            add_into(grads, nodes, a, &da);
        }
        &Op::LogSoftmax(a) => {
            let c = out.cols();
            let mut da = Vec::with_capacity(g.len());
            for (gr, yr) in g.chunks(c).zip(out.data().chunks(c)) {
                let total: f64 = gr.iter().sum();
                da.extend(gr.iter().zip(yr).map(|(gv, ly)| gv - ly.exp() * total));
            }
            add_into(grads, nodes, a, &da);
        }
        Op::Embedding { table, ids } => {
            let table = *table;
            if !nodes[table].requires_grad {
                return;
            }
            let tv = &nodes[table].value;
            let d = tv.cols();
            let len = tv.len();
            accumulate(
                grads,
                table,
                |acc| {
                    for (k, &id) in ids.iter().enumerate() {
                        let src = &g[k * d..(k + 1) * d];
                        acc[id * d..(id + 1) * d].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                },
                len,
            );
        }
        &Op::SliceCols { input, start } => {
            let iv = &nodes[input].value;
            let c = iv.cols();
            let len = out.cols();
            let mut da = vec![0.0; iv.len()];
            for (r, gr) in g.chunks(len).enumerate() {
                da[r * c + start..r * c + start + len].copy_from_slice(gr);
            }
            add_into(grads, nodes, input, &da);
        }
        &Op::TileRows(a, k) => {
            let n = nodes[a].value.len();
            let mut da = vec![0.0; n];
            for block in g.chunks(n).take(k) {
                da.iter_mut().zip(block).for_each(|(d, v)| *d += v);
            }
            add_into(grads, nodes, a, &da);
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`; zero when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        let shape = var.shape();
        match self.grads.get(var.id).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn has(&self, var: Var<'_>) -> bool {
        self.grads.get(var.id).is_some_and(|g| g.is_some())
    }

    pub fn num_nodes(&self) -> usize {
        self.shapes.len()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// The single value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.data().to_vec()
    }

    fn unary(&self, name: &'static str, f: impl FnOnce(&Tensor) -> Result<Tensor>, op: Op) -> Result<Var<'t>> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value)?
        };
        self.tape.record(name, out, op, &[self.id])
    }

    fn binary(
        &self,
        other: &Var<'t>,
        name: &'static str,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
        op: Op,
    ) -> Result<Var<'t>> {
        self.tape.check(other)?;
        let out = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)?
        };
        self.tape.record(name, out, op, &[self.id, other.id])
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "matmul", kernels::matmul, Op::MatMul(self.id, other.id))
    }

    /// `self x other^T`
    pub fn matmul_t(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "matmul_t", kernels::matmul_t, Op::MatMulT(self.id, other.id))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", kernels::add, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", kernels::sub, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", kernels::mul, Op::Mul(self.id, other.id))
    }

    /// Adds a bias row to every row of `self`.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        self.binary(row, "add_row", kernels::add_row, Op::AddRow(self.id, row.id))
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        self.unary("scale", |t| Ok(kernels::scale(t, s)), Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", |t| Ok(kernels::add_scalar(t, s)), Op::AddScalar(self.id))
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        self.unary("sum", |t| Ok(kernels::sum(t)), Op::Sum(self.id))
    }

    pub fn row_mean(&self) -> Result<Var<'t>> {
        self.unary("row_mean", kernels::row_mean, Op::RowMean(self.id))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary("sigmoid", |t| Ok(kernels::sigmoid(t)), Op::Sigmoid(self.id))
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.unary("tanh", |t| Ok(kernels::tanh(t)), Op::Tanh(self.id))
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary("exp", |t| Ok(kernels::exp(t)), Op::Exp(self.id))
    }

    pub fn log(&self) -> Result<Var<'t>> {
        self.unary("log", kernels::log, Op::Log(self.id))
    }

    pub fn softmax(&self) -> Result<Var<'t>> {
        self.unary("softmax", |t| Ok(kernels::softmax(t)), Op::Softmax(self.id))
    }

    pub fn log_softmax(&self) -> Result<Var<'t>> {
        self.unary("log_softmax", |t| Ok(kernels::log_softmax(t)), Op::LogSoftmax(self.id))
    }

    /// Treats `self` as a `[vocab, dim]` table and gathers the given rows.
    pub fn embedding(&self, ids: &[usize]) -> Result<Var<'t>> {
        self.unary(
            "embedding",
            |t| kernels::embedding(t, ids),
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t>> {
        self.unary(
            "slice",
            |t| kernels::slice_cols(t, start, len),
            Op::SliceCols { input: self.id, start },
        )
    }

    /// Single element `col` of a row vector, as a `[1]` tensor.
    pub fn pick(&self, col: usize) -> Result<Var<'t>> {
        self.slice_cols(col, 1)?.reshape(vec![1])
    }

    pub fn tile_rows(&self, k: usize) -> Result<Var<'t>> {
        self.unary("tile_rows", |t| kernels::tile_rows(t, k), Op::TileRows(self.id, k))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'t>> {
        self.unary("reshape", |t| t.clone().reshaped(shape), Op::Reshape(self.id))
    }

    /// Concatenates along the last axis.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            return Err(TensorError::invalid("concat", "no inputs"));
        };
        let tape = first.tape;
        for p in parts {
            tape.check(p)?;
        }
        let out = {
            let nodes = tape.nodes.borrow();
            let refs: Vec<&Tensor> = parts.iter().map(|p| nodes[p.id].value.as_ref()).collect();
            kernels::concat(&refs)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.record("concat", out, Op::Concat(ids.clone()), &ids)
    }
}
