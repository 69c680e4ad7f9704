//! Dynamic computation graph with reverse-mode differentiation.
//!
//! A [`Tape`] records operations as they execute (forward values are computed
//! eagerly) and replays them in reverse topological order to accumulate
//! gradients. Graphs are rebuilt per batch; node ids are plain indices, so
//! inputs always precede their consumers.

use crate::error::{HdeError, Result};
use crate::numerics::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// a[m,k] · b[k,n]
    MatMul(NodeId, NodeId),
    /// a[m,k] · b[n,k]ᵀ
    MatMulTb(NodeId, NodeId),
    /// a[m,k] · x[k]
    MatVec(NodeId, NodeId),
    /// x[m]ᵀ · a[m,n]
    VecMat(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// a[m,n] + b[n] broadcast over rows
    AddRow(NodeId, NodeId),
    AddN(Vec<NodeId>),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Square(NodeId),
    /// 1-D concatenation
    Concat(NodeId, NodeId),
    /// softmax over the last axis
    Softmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Scale(NodeId, f64),
    /// row gather from a matrix
    GatherRows(NodeId, Vec<usize>),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulTb(a, b)
            | Op::MatVec(a, b)
            | Op::VecMat(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::Concat(a, b) => vec![*a, *b],
            Op::AddN(ids) => ids.clone(),
            Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Square(a)
            | Op::Softmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Scale(a, _)
            | Op::GatherRows(a, _) => vec![*a],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradient table produced by [`Tape::backward`], indexed by node id.
///
/// Nodes unreachable from the loss have no entry.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient of `id`, or a zero tensor of the node's shape if unreachable.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> NodeId {
        self.leaf(Tensor::zeros(shape))
    }

    pub fn scalar(&mut self, x: f64) -> NodeId {
        self.leaf(Tensor::scalar(x))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.rows() {
            return Err(dim_err("matmul", ta, tb));
        }
        let out = mm(ta, tb);
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.cols() {
            return Err(dim_err("matmul_tb", ta, tb));
        }
        let out = mm_tb(ta, tb);
        Ok(self.push(Op::MatMulTb(a, b), out))
    }

    pub fn matvec(&mut self, a: NodeId, x: NodeId) -> Result<NodeId> {
        let (ta, tx) = (self.value(a), self.value(x));
        if !ta.is_matrix() || !tx.is_vector() || ta.cols() != tx.len() {
            return Err(dim_err("matvec", ta, tx));
        }
        let out = Tensor::vector(matvec(ta, tx.data()));
        Ok(self.push(Op::MatVec(a, x), out))
    }

    /// `xᵀ · a` for `x: [m]`, `a: [m,n]`.
    pub fn vecmat(&mut self, x: NodeId, a: NodeId) -> Result<NodeId> {
        let (tx, ta) = (self.value(x), self.value(a));
        if !ta.is_matrix() || !tx.is_vector() || ta.rows() != tx.len() {
            return Err(dim_err("vecmat", tx, ta));
        }
        let out = Tensor::vector(vecmat(tx.data(), ta));
        Ok(self.push(Op::VecMat(x, a), out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = zip("add", self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = zip("sub", self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = zip("mul", self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    /// Matrix plus a row vector broadcast over every row.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_vector() || ta.cols() != tb.len() {
            return Err(dim_err("add_row", ta, tb));
        }
        let cols = ta.cols();
        let data: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tb.data()[i % cols])
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::AddRow(a, b), out))
    }

    /// Sum of n same-shape tensors in one node.
    pub fn add_n(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(HdeError::Contract("add_n needs at least one input".into()));
        }
        let shape = self.value(ids[0]).shape().to_vec();
        let mut data = vec![0.0; self.value(ids[0]).len()];
        for &id in ids {
            let t = self.value(id);
            if t.shape() != shape.as_slice() {
                return Err(dim_err("add_n", self.value(ids[0]), t));
            }
            for (acc, x) in data.iter_mut().zip(t.data()) {
                *acc += x;
            }
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(Op::AddN(ids.to_vec()), out))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = map(self.value(a), sigmoid);
        self.push(Op::Sigmoid(a), out)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = map(self.value(a), f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = map(self.value(a), |x| x.max(0.0));
        self.push(Op::Relu(a), out)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let out = map(self.value(a), |x| x * x);
        self.push(Op::Square(a), out)
    }

    /// 1-D concatenation of two vectors.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_vector() || !tb.is_vector() {
            return Err(dim_err("concat", ta, tb));
        }
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        Ok(self.push(Op::Concat(a, b), Tensor::vector(data)))
    }

    /// Softmax over the last axis, computed with max-subtraction.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let last = t.cols();
        let mut data = Vec::with_capacity(t.len());
        for row in t.data().chunks(last) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / denom));
        }
        let out = Tensor::new(t.shape().to_vec(), data).expect("shape preserved");
        self.push(Op::Softmax(a), out)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let s: f64 = t.data().iter().sum();
        let m = s / t.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(m))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = map(self.value(a), |x| c * x);
        self.push(Op::Scale(a, c), out)
    }

    /// Gather rows of a matrix by index; duplicate indices are allowed and
    /// accumulate in the backward pass.
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let t = self.value(a);
        if !t.is_matrix() {
            return Err(HdeError::Dimension {
                op: "gather_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![indices.len()],
            });
        }
        if indices.is_empty() {
            return Err(HdeError::Contract("gather_rows with no indices".into()));
        }
        let cols = t.cols();
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.rows()) {
            return Err(HdeError::Contract(format!(
                "gather_rows index {bad} out of range for {} rows",
                t.rows()
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(indices.len(), cols, data)?;
        Ok(self.push(Op::GatherRows(a, indices.to_vec()), out))
    }

    /// Dot product of two vectors as a scalar node (mul + sum).
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let prod = self.mul(a, b)?;
        Ok(self.sum(prod))
    }

    /// Reverse accumulation from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss >= self.nodes.len() {
            return Err(HdeError::Contract(format!("unknown node id {loss}")));
        }
        let loss_val = &self.nodes[loss].value;
        if loss_val.shape() != [1] {
            return Err(HdeError::Contract(format!(
                "backward requires a scalar loss of shape [1], got {:?}",
                loss_val.shape()
            )));
        }

        // Restrict the sweep to ancestors of the loss.
        let mut reachable = vec![false; loss + 1];
        reachable[loss] = true;
        for id in (0..=loss).rev() {
            if !reachable[id] {
                continue;
            }
            for input in self.nodes[id].op.inputs() {
                reachable[input] = true;
            }
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            if !reachable[id] {
                continue;
            }
            let g = match &grads[id] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.accumulate(id, &g, &mut grads);
        }

        Ok(Gradients { grads })
    }

    fn accumulate(&self, id: NodeId, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                add_into(grads, *a, &mm_tb(g, tb), ta.shape());
                add_into(grads, *b, &mm_ta(ta, g), tb.shape());
            }
            Op::MatMulTb(a, b) => {
                // out = a · bᵀ ⇒ ga = g · b, gb = gᵀ · a
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                add_into(grads, *a, &mm(g, tb), ta.shape());
                add_into(grads, *b, &mm_ta(g, ta), tb.shape());
            }
            Op::MatVec(a, x) => {
                let (ta, tx) = (&self.nodes[*a].value, &self.nodes[*x].value);
                add_into(grads, *a, &outer(g.data(), tx.data()), ta.shape());
                add_into(grads, *x, &Tensor::vector(vecmat(g.data(), ta)), tx.shape());
            }
            Op::VecMat(x, a) => {
                let (tx, ta) = (&self.nodes[*x].value, &self.nodes[*a].value);
                add_into(grads, *x, &Tensor::vector(matvec(ta, g.data())), tx.shape());
                add_into(grads, *a, &outer(tx.data(), g.data()), ta.shape());
            }
            Op::Add(a, b) => {
                let sa = self.nodes[*a].value.shape().to_vec();
                let sb = self.nodes[*b].value.shape().to_vec();
                add_into(grads, *a, g, &sa);
                add_into(grads, *b, g, &sb);
            }
            Op::Sub(a, b) => {
                let sa = self.nodes[*a].value.shape().to_vec();
                let sb = self.nodes[*b].value.shape().to_vec();
                add_into(grads, *a, g, &sa);
                let neg = map(g, |x| -x);
                add_into(grads, *b, &neg, &sb);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let ga = zip("mul-bwd", g, tb, |x, y| x * y).expect("checked in forward");
                let gb = zip("mul-bwd", g, ta, |x, y| x * y).expect("checked in forward");
                add_into(grads, *a, &ga, ta.shape());
                add_into(grads, *b, &gb, tb.shape());
            }
            Op::AddRow(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                add_into(grads, *a, g, ta.shape());
                let cols = ta.cols();
                let mut colsum = vec![0.0; cols];
                for (i, &x) in g.data().iter().enumerate() {
                    colsum[i % cols] += x;
                }
                add_into(grads, *b, &Tensor::vector(colsum), tb.shape());
            }
            Op::AddN(ids) => {
                for &i in ids {
                    let shape = self.nodes[i].value.shape().to_vec();
                    add_into(grads, i, g, &shape);
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let ga: Vec<f64> = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &g)| g * y * (1.0 - y))
                    .collect();
                let shape = self.nodes[*a].value.shape().to_vec();
                add_into(grads, *a, &Tensor::vector(ga), &shape);
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let ga: Vec<f64> = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &g)| g * (1.0 - y * y))
                    .collect();
                let shape = self.nodes[*a].value.shape().to_vec();
                add_into(grads, *a, &Tensor::vector(ga), &shape);
            }
            Op::Relu(a) => {
                // subgradient 0 at the kink
                let x = &self.nodes[*a].value;
                let ga: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                let shape = x.shape().to_vec();
                add_into(grads, *a, &Tensor::vector(ga), &shape);
            }
            Op::Square(a) => {
                let x = &self.nodes[*a].value;
                let ga: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &g)| 2.0 * x * g)
                    .collect();
                let shape = x.shape().to_vec();
                add_into(grads, *a, &Tensor::vector(ga), &shape);
            }
            Op::Concat(a, b) => {
                let la = self.nodes[*a].value.len();
                let ga = Tensor::vector(g.data()[..la].to_vec());
                let gb = Tensor::vector(g.data()[la..].to_vec());
                let sa = self.nodes[*a].value.shape().to_vec();
                let sb = self.nodes[*b].value.shape().to_vec();
                add_into(grads, *a, &ga, &sa);
                add_into(grads, *b, &gb, &sb);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let last = y.cols();
                let mut ga = Vec::with_capacity(y.len());
                for (yrow, grow) in y.data().chunks(last).zip(g.data().chunks(last)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(&y, &g)| y * g).sum();
                    ga.extend(yrow.iter().zip(grow).map(|(&y, &g)| y * (g - dot)));
                }
                let shape = self.nodes[*a].value.shape().to_vec();
                add_into(grads, *a, &Tensor::vector(ga), &shape);
            }
            Op::Sum(a) => {
                let shape = self.nodes[*a].value.shape().to_vec();
                let numel: usize = shape.iter().product();
                let ga = Tensor::vector(vec![g.data()[0]; numel]);
                add_into(grads, *a, &ga, &shape);
            }
            Op::Mean(a) => {
                let shape = self.nodes[*a].value.shape().to_vec();
                let numel: usize = shape.iter().product();
                let ga = Tensor::vector(vec![g.data()[0] / numel as f64; numel]);
                add_into(grads, *a, &ga, &shape);
            }
            Op::Scale(a, c) => {
                let ga = map(g, |x| c * x);
                let shape = self.nodes[*a].value.shape().to_vec();
                add_into(grads, *a, &ga, &shape);
            }
            Op::GatherRows(a, indices) => {
                let src = &self.nodes[*a].value;
                let cols = src.cols();
                let mut ga = Tensor::zeros(src.shape());
                for (out_row, &src_row) in indices.iter().enumerate() {
                    let gr = &g.data()[out_row * cols..(out_row + 1) * cols];
                    let dst = &mut ga.data_mut()[src_row * cols..(src_row + 1) * cols];
                    for (d, &x) in dst.iter_mut().zip(gr) {
                        *d += x;
                    }
                }
                add_into(grads, *a, &ga, src.shape());
            }
        }
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> HdeError {
    HdeError::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
        .expect("shape preserved")
}

fn zip(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(dim_err(op, a, b));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn mm(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data()[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out).expect("dims checked")
}

/// a · bᵀ with b given row-major as [n,k].
fn mm_tb(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let brow = &b.data()[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    Tensor::matrix(m, n, out).expect("dims checked")
}

/// aᵀ · b for a [m,k], b [m,n] → [k,n].
fn mm_ta(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = a.row(i);
        let brow = b.row(i);
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(k, n, out).expect("dims checked")
}

fn matvec(a: &Tensor, x: &[f64]) -> Vec<f64> {
    a.data()
        .chunks(a.cols())
        .map(|row| row.iter().zip(x).map(|(&r, &v)| r * v).sum())
        .collect()
}

/// xᵀ · a for x [m], a [m,n] → [n].
fn vecmat(x: &[f64], a: &Tensor) -> Vec<f64> {
    let n = a.cols();
    let mut out = vec![0.0; n];
    for (i, &xv) in x.iter().enumerate() {
        for (o, &av) in out.iter_mut().zip(a.row(i)) {
            *o += xv * av;
        }
    }
    out
}

fn outer(x: &[f64], y: &[f64]) -> Tensor {
    let mut data = Vec::with_capacity(x.len() * y.len());
    for &xv in x {
        data.extend(y.iter().map(|&yv| xv * yv));
    }
    Tensor::matrix(x.len(), y.len(), data).expect("dims by construction")
}

/// Accumulate `delta` (whose data layout matches `shape`) into `grads[id]`.
fn add_into(grads: &mut [Option<Tensor>], id: NodeId, delta: &Tensor, shape: &[usize]) {
    let slot = &mut grads[id];
    match slot {
        Some(existing) => {
            for (e, &d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }
        None => {
            let mut t = Tensor::zeros(shape);
            for (e, &d) in t.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
            *slot = Some(t);
        }
    }
}
