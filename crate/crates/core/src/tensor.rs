//! Dense tensors and a tape-based reverse-mode autodiff engine.
//!
//! A [`Tape`] records every primitive op of one forward pass. Values live on
//! the tape and are addressed by copyable [`Var`] handles. [`Tape::backward`]
//! walks the record in reverse once and returns a [`Gradients`] table for
//! every node that depends on a parameter leaf.
//!
//! All storage is row-major `f64`. Apart from scalar operands, shapes must
//! match exactly; there is no general broadcasting.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting mismatched lengths and non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return dim_err(format!("zero extent in shape {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Self::new(vec![1], vec![v])
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing extent product, i.e. the row length when viewed as a matrix.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product::<usize>().max(1)
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return dim_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `self += scale * other`, shapes must agree.
    pub fn axpy(&mut self, scale: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return dim_err(format!("axpy {:?} vs {:?}", self.shape, other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scaled(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => sigmoid(v),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the forward output `y`.
    fn grad_from_output(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryOp, Var, Var),
    Scale(Var, f64),
    Offset(Var),
    AddBias(Var, Var),
    Act(Activation, Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Propagate { adj: Var, h: Var },
    Gather { src: Var, index: Rc<[Option<usize>]> },
    Reshape(Var),
    ConcatCols(Var, Var),
    Blend { x: Var, x_hat: Var, mask: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    spent: bool,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn checked(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        parents: &[Var],
    ) -> Result<Var> {
        check_finite(name, &value.data)?;
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn matrix_dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a);
        let (k2, n) = self.matrix_dims(b);
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 || k != k2 {
            return dim_err(format!(
                "matmul {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let out = matmul_raw(&self.value(a).data, &self.value(b).data, m, k, n);
        self.checked("matmul", Tensor::from_raw(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// Elementwise add/sub/mul. Shapes must match unless one side is a scalar.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
        };
        let out = if ta.shape == tb.shape {
            let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_raw(ta.shape.clone(), data)
        } else if tb.numel() == 1 {
            let s = tb.data[0];
            Tensor::from_raw(ta.shape.clone(), ta.data.iter().map(|&x| f(x, s)).collect())
        } else if ta.numel() == 1 {
            let s = ta.data[0];
            Tensor::from_raw(tb.shape.clone(), tb.data.iter().map(|&y| f(s, y)).collect())
        } else {
            return dim_err(format!("elementwise {:?} vs {:?}", ta.shape, tb.shape));
        };
        self.checked("elementwise", out, Op::Binary(op, a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scaled(s);
        self.checked("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v + c);
        self.checked("offset", out, Op::Offset(a), &[a])
    }

    /// Adds a length-`n` bias to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a);
        if self.value(bias).numel() != n {
            return dim_err(format!(
                "bias {:?} for rows of {:?}",
                self.shape(bias),
                self.shape(a)
            ));
        }
        let ta = self.value(a);
        let tb = &self.value(bias).data;
        let mut data = ta.data.clone();
        for i in 0..m {
            for (d, b) in data[i * n..(i + 1) * n].iter_mut().zip(tb) {
                *d += b;
            }
        }
        let out = Tensor::from_raw(ta.shape.clone(), data);
        self.checked("add_bias", out, Op::AddBias(a, bias), &[a, bias])
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        if kind == Activation::Identity {
            return Ok(a);
        }
        let out = self.value(a).map(|v| kind.apply(v));
        self.checked("activation", out, Op::Act(kind, a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Tanh)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v * v);
        self.checked("square", out, Op::Square(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.checked("sum", Tensor::from_raw(vec![1], vec![s]), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).mean();
        self.checked("mean", Tensor::from_raw(vec![1], vec![s]), Op::Mean(a), &[a])
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape != tt.shape {
            return dim_err(format!("mse {:?} vs {:?}", tp.shape, tt.shape));
        }
        let s: f64 = tp.data.iter().zip(&tt.data).map(|(p, t)| (p - t) * (p - t)).sum();
        let v = s / tp.numel() as f64;
        self.checked("mse", Tensor::from_raw(vec![1], vec![v]), Op::Mse(pred, target), &[pred, target])
    }

    /// Applies an `N x N` matrix to each consecutive block of `N` rows of `h`.
    pub fn propagate(&mut self, adj: Var, h: Var) -> Result<Var> {
        let ta = self.value(adj);
        let th = self.value(h);
        if ta.shape.len() != 2 || ta.shape[0] != ta.shape[1] {
            return dim_err(format!("propagation matrix must be square, got {:?}", ta.shape));
        }
        let n = ta.shape[0];
        let (rows, d) = (th.rows(), th.cols());
        if rows % n != 0 {
            return dim_err(format!("{rows} rows do not split into blocks of {n}"));
        }
        let mut out = vec![0.0; rows * d];
        for g in 0..rows / n {
            let off = g * n * d;
            let block = matmul_raw(&ta.data, &th.data[off..off + n * d], n, n, d);
            out[off..off + n * d].copy_from_slice(&block);
        }
        let shape = th.shape.clone();
        self.checked("propagate", Tensor::from_raw(shape, out), Op::Propagate { adj, h }, &[adj, h])
    }

    /// `out[i] = src[index[i]]`, with `None` producing zero.
    pub fn gather(
        &mut self,
        src: Var,
        shape: Vec<usize>,
        index: Rc<[Option<usize>]>,
    ) -> Result<Var> {
        let n: usize = shape.iter().product();
        let ts = self.value(src);
        if n != index.len() {
            return dim_err(format!("gather index of {} for shape {shape:?}", index.len()));
        }
        if index.iter().flatten().any(|&i| i >= ts.numel()) {
            return dim_err("gather index out of range");
        }
        let data = index.iter().map(|i| i.map_or(0.0, |i| ts.data[i])).collect();
        self.checked("gather", Tensor::from_raw(shape, data), Op::Gather { src, index }, &[src])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.checked("reshape", out, Op::Reshape(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a);
        let index: Rc<[Option<usize>]> =
            (0..n).flat_map(|j| (0..m).map(move |i| Some(i * n + j))).collect();
        self.gather(a, vec![n, m], index)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.matrix_dims(a);
        let (m2, q) = self.matrix_dims(b);
        if m != m2 {
            return dim_err(format!("concat rows {m} vs {m2}"));
        }
        let (ta, tb) = (&self.value(a).data, &self.value(b).data);
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(&ta[i * p..(i + 1) * p]);
            data.extend_from_slice(&tb[i * q..(i + 1) * q]);
        }
        self.checked("concat", Tensor::from_raw(vec![m, p + q], data), Op::ConcatCols(a, b), &[a, b])
    }

    /// `mask * x + (1 - mask) * x_hat`, elementwise over identical shapes.
    pub fn blend(&mut self, x: Var, x_hat: Var, mask: Var) -> Result<Var> {
        let (tx, th, tm) = (self.value(x), self.value(x_hat), self.value(mask));
        if tx.shape != th.shape || tx.shape != tm.shape {
            return dim_err(format!(
                "blend {:?}, {:?}, {:?}",
                tx.shape, th.shape, tm.shape
            ));
        }
        let data = tx
            .data
            .iter()
            .zip(&th.data)
            .zip(&tm.data)
            .map(|((&a, &b), &m)| {
                // equal inputs pass through untouched so the blend is exact
                if a == b {
                    a
                } else {
                    m * a + (1.0 - m) * b
                }
            })
            .collect();
        let out = Tensor::from_raw(tx.shape.clone(), data);
        self.checked("blend", out, Op::Blend { x, x_hat, mask }, &[x, x_hat, mask])
    }

    /// Reverse sweep from a scalar node. A tape supports exactly one sweep.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.spent {
            return contract_err("tape already consumed by a backward pass; re-run the forward pass");
        }
        if self.value(loss).numel() != 1 {
            return contract_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        self.spent = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (g, node.requires_grad) {
                (Some(g), true) => Some(Tensor::from_raw(node.value.shape.clone(), g)),
                (None, true) if matches!(node.op, Op::Leaf) => {
                    Some(Tensor::zeros(&node.value.shape))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(contrib).for_each(|(b, c)| *b += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.requires_grad(*a) {
                    // dA = G B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gij * tb.data[p * n + j];
                            }
                        }
                    }
                    acc(*a, da);
                }
                if self.requires_grad(*b) {
                    // dB = A^T G
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = ta.data[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let row = &g[i * n..(i + 1) * n];
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(row) {
                                *d += aip * gv;
                            }
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Binary(op, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let same = ta.shape == tb.shape;
                let a_scalar = !same && ta.numel() == 1;
                let b_scalar = !same && tb.numel() == 1;
                let at = |i: usize| if a_scalar { ta.data[0] } else { ta.data[i] };
                let bt = |i: usize| if b_scalar { tb.data[0] } else { tb.data[i] };
                let (ga, gb): (Vec<f64>, Vec<f64>) = match op {
                    BinaryOp::Add => (g.to_vec(), g.to_vec()),
                    BinaryOp::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                    BinaryOp::Mul => (
                        g.iter().enumerate().map(|(i, v)| v * bt(i)).collect(),
                        g.iter().enumerate().map(|(i, v)| v * at(i)).collect(),
                    ),
                };
                let reduce = |v: Vec<f64>, scalar: bool| if scalar { vec![v.iter().sum()] } else { v };
                acc(*a, reduce(ga, a_scalar));
                acc(*b, reduce(gb, b_scalar));
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|v| v * s).collect()),
            Op::Offset(a) | Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::AddBias(a, bias) => {
                let n = self.value(*bias).numel();
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(b, v)| *b += v);
                }
                acc(*a, g.to_vec());
                acc(*bias, gb);
            }
            Op::Act(kind, a) => {
                let (x, y) = (&self.value(*a).data, &node.value.data);
                let d = g
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(gv, (&xv, &yv))| gv * kind.grad_from_output(xv, yv))
                    .collect();
                acc(*a, d);
            }
            Op::Square(a) => {
                let x = &self.value(*a).data;
                acc(*a, g.iter().zip(x).map(|(gv, xv)| 2.0 * gv * xv).collect());
            }
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::Mse(p, t) => {
                let (tp, tt) = (&self.value(*p).data, &self.value(*t).data);
                let c = 2.0 * g[0] / tp.len() as f64;
                let d: Vec<f64> = tp.iter().zip(tt).map(|(a, b)| c * (a - b)).collect();
                acc(*t, d.iter().map(|v| -v).collect());
                acc(*p, d);
            }
            Op::Propagate { adj, h } => {
                let (ta, th) = (self.value(*adj), self.value(*h));
                let n = ta.shape[0];
                let (rows, d) = (th.rows(), th.cols());
                if self.requires_grad(*h) {
                    let at = transpose_raw(&ta.data, n, n);
                    let mut dh = vec![0.0; rows * d];
                    for blk in 0..rows / n {
                        let off = blk * n * d;
                        let b = matmul_raw(&at, &g[off..off + n * d], n, n, d);
                        dh[off..off + n * d].copy_from_slice(&b);
                    }
                    acc(*h, dh);
                }
                if self.requires_grad(*adj) {
                    let mut da = vec![0.0; n * n];
                    for blk in 0..rows / n {
                        let off = blk * n * d;
                        for i in 0..n {
                            for j in 0..n {
                                let mut s = 0.0;
                                for c in 0..d {
                                    s += g[off + i * d + c] * th.data[off + j * d + c];
                                }
                                da[i * n + j] += s;
                            }
                        }
                    }
                    acc(*adj, da);
                }
            }
            Op::Gather { src, index } => {
                let mut d = vec![0.0; self.value(*src).numel()];
                for (gv, i) in g.iter().zip(index.iter()) {
                    if let Some(i) = i {
                        d[*i] += gv;
                    }
                }
                acc(*src, d);
            }
            Op::ConcatCols(a, b) => {
                let (m, p) = (self.value(*a).rows(), self.value(*a).cols());
                let q = self.value(*b).cols();
                let mut ga = Vec::with_capacity(m * p);
                let mut gb = Vec::with_capacity(m * q);
                for row in g.chunks(p + q) {
                    ga.extend_from_slice(&row[..p]);
                    gb.extend_from_slice(&row[p..]);
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Blend { x, x_hat, mask } => {
                let (tx, th, tm) = (
                    &self.value(*x).data,
                    &self.value(*x_hat).data,
                    &self.value(*mask).data,
                );
                acc(*x, g.iter().zip(tm).map(|(gv, m)| gv * m).collect());
                acc(*x_hat, g.iter().zip(tm).map(|(gv, m)| gv * (1.0 - m)).collect());
                acc(
                    *mask,
                    g.iter().zip(tx.iter().zip(th)).map(|(gv, (a, b))| gv * (a - b)).collect(),
                );
            }
        }
        Ok(())
    }
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Result<&Tensor> {
        self.get(v)
            .ok_or_else(|| Error::Contract(format!("no gradient recorded for node {}", v.0)))
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}
