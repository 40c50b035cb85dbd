//! Reverse-mode automatic differentiation over a recorded operation graph.
//!
//! A [`Graph`] is a define-then-run tape: every operation is evaluated when
//! it is recorded, and the recorded ops can be re-evaluated in order after a
//! leaf value changes ([`Graph::set_value`] + [`Graph::recompute`]). The
//! finite-difference checker relies on that to probe the same graph at
//! perturbed parameter values.
//!
//! Nodes only ever reference earlier nodes, so the node list is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm, ConvGeometry, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifier of a trainable tensor in a parameter registry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Conv2d(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Flatten(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize> },
    SigmoidBinaryCrossEntropy { logits: NodeId, targets: Tensor },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Conv2d(..) => "conv2d",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Flatten(_) => "flatten",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::SigmoidBinaryCrossEntropy { .. } => "sigmoid_binary_cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Conv2d(a, b) | Op::AddBias(a, b) | Op::Add(a, b) => {
                vec![*a, *b]
            }
            Op::Relu(x) | Op::Tanh(x) | Op::Flatten(x) | Op::Mean(x) | Op::Sum(x) => vec![*x],
            Op::SoftmaxCrossEntropy { logits, .. }
            | Op::SigmoidBinaryCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Recorded computation. Cheap to build per minibatch.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every parameter leaf of a
/// graph, keyed by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.grads.get_mut(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Name of the operation that produced `id`.
    pub fn op_kind(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.kind()
    }

    /// Which inputs of every relu node are strictly positive, in recording
    /// order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(self.value(x).data().iter().map(|&v| v > 0.0)),
                _ => None,
            })
            .flatten()
            .collect()
    }

    /// `(node, parameter)` pairs of all trainable leaves, in recording order.
    pub fn params(&self) -> Vec<(NodeId, ParamId)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) => Some((NodeId(i), p)),
                _ => None,
            })
            .collect()
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value, false)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor) -> NodeId {
        self.push(Op::Param(id), value, true)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<NodeId> {
        let value = self.eval(&op)?;
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        Ok(self.push(op, value, requires_grad))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::MatMul(a, b))
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId> {
        self.record(Op::Conv2d(input, kernel))
    }

    /// Adds a bias vector along the trailing dimension.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.record(Op::AddBias(x, bias))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add(a, b))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Relu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Tanh(x))
    }

    /// Collapses all non-leading dimensions.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Flatten(x))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Mean(x))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Sum(x))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.record(Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
        })
    }

    /// Binary cross-entropy on sigmoid outputs, summed over output nodes and
    /// averaged over the batch. Targets must be exactly 0 or 1.
    pub fn sigmoid_binary_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: Tensor,
    ) -> Result<NodeId> {
        self.record(Op::SigmoidBinaryCrossEntropy { logits, targets })
    }

    /// Replaces the value of an input or parameter leaf. Dependent nodes are
    /// stale until [`Self::recompute`] runs.
    pub fn set_value(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Input | Op::Param(_)) {
            return Err(Error::Contract(format!(
                "set_value on a {} node; only leaves can be assigned",
                node.op.kind()
            )));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::dim("set_value", node.value.shape(), value.shape()));
        }
        node.value = value;
        Ok(())
    }

    /// Re-evaluates every non-leaf node in recording order.
    pub fn recompute(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Input | Op::Param(_)) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.nodes[i].value = self.eval(&op)?;
        }
        Ok(())
    }

    fn eval(&self, op: &Op) -> Result<Tensor> {
        match op {
            Op::Input | Op::Param(_) => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => matmul_forward(self.value(*a), self.value(*b)),
            Op::Conv2d(x, k) => conv2d_forward(self.value(*x), self.value(*k)),
            Op::AddBias(x, b) => {
                let (x, b) = (self.value(*x), self.value(*b));
                let n = *x.shape().last().unwrap();
                if b.len() != n {
                    return Err(Error::dim("add_bias", x.shape(), b.shape()));
                }
                let mut out = x.clone();
                for chunk in out.data_mut().chunks_exact_mut(n) {
                    for (o, &bv) in chunk.iter_mut().zip(b.data()) {
                        *o += bv;
                    }
                }
                Ok(out)
            }
            Op::Add(a, b) => {
                let (a, b) = (self.value(*a), self.value(*b));
                if a.shape() != b.shape() {
                    return Err(Error::dim("add", a.shape(), b.shape()));
                }
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                Ok(Tensor::from_parts(a.shape().to_vec(), data))
            }
            Op::Relu(x) => Ok(map(self.value(*x), |v| if v > 0.0 { v } else { 0.0 })),
            Op::Tanh(x) => Ok(map(self.value(*x), f64::tanh)),
            Op::Flatten(x) => {
                let x = self.value(*x);
                let shape = if x.rank() <= 1 {
                    vec![1, x.len()]
                } else {
                    vec![x.rows(), x.row_len()]
                };
                Ok(Tensor::from_parts(shape, x.data().to_vec()))
            }
            Op::Mean(x) => {
                let x = self.value(*x);
                Ok(Tensor::scalar(x.sum() / x.len() as f64))
            }
            Op::Sum(x) => Ok(Tensor::scalar(self.value(*x).sum())),
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let logits = self.value(*logits);
                check_logits("softmax_cross_entropy", logits, labels.len())?;
                let classes = logits.shape()[1];
                let mut total = 0.0;
                for (i, &label) in labels.iter().enumerate() {
                    if label >= classes {
                        return Err(Error::Validation(format!(
                            "label {label} out of range for {classes} classes"
                        )));
                    }
                    let row = logits.row(i);
                    total += log_sum_exp(row) - row[label];
                }
                Ok(Tensor::scalar(total / labels.len() as f64))
            }
            Op::SigmoidBinaryCrossEntropy { logits, targets } => {
                let logits = self.value(*logits);
                if logits.shape() != targets.shape() {
                    return Err(Error::dim(
                        "sigmoid_binary_cross_entropy",
                        logits.shape(),
                        targets.shape(),
                    ));
                }
                check_logits("sigmoid_binary_cross_entropy", logits, targets.rows())?;
                if let Some(t) = targets.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
                    return Err(Error::Validation(format!(
                        "binary target {t} is not 0 or 1"
                    )));
                }
                let total: f64 = logits
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
                    .sum();
                Ok(Tensor::scalar(total / logits.rows() as f64))
            }
        }
    }

    /// Reverse sweep from a scalar `loss`. Returns one gradient per parameter
    /// leaf; parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Param(_) | Op::Input = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }

        let mut out = Gradients::default();
        for (node, pid) in self.params() {
            let g = match grads.get(node.0).and_then(|g| g.as_ref()) {
                Some(g) => g.clone(),
                None => Tensor::zeros(self.value(node).shape()),
            };
            match out.grads.get_mut(&pid) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    out.grads.insert(pid, g);
                }
            }
        }
        Ok(out)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, 0.0);
                    accumulate(grads, *a, av.shape(), da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut db, 0.0);
                    accumulate(grads, *b, bv.shape(), db);
                }
            }
            Op::Conv2d(x, k) => {
                let (xv, kv) = (self.value(*x), self.value(*k));
                let geo = conv_geometry(xv, kv).expect("validated at record time");
                let (p, plen, cout) = (geo.positions(), geo.patch_len(), geo.out_channels);
                if self.needs(*k) {
                    let mut cols = vec![0.0; p * plen];
                    geo.im2col(xv.data(), &mut cols);
                    let mut dk = vec![0.0; plen * cout];
                    gemm(plen, p, cout, &cols, true, g.data(), false, &mut dk, 0.0);
                    accumulate(grads, *k, kv.shape(), dk);
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; p * plen];
                    gemm(p, cout, plen, g.data(), false, kv.data(), true, &mut dcols, 0.0);
                    let mut dx = vec![0.0; xv.len()];
                    geo.col2im(&dcols, &mut dx);
                    accumulate(grads, *x, xv.shape(), dx);
                }
            }
            Op::AddBias(x, b) => {
                if self.needs(*b) {
                    let n = self.value(*b).len();
                    let mut db = vec![0.0; n];
                    for chunk in g.data().chunks_exact(n) {
                        for (d, v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *b, self.value(*b).shape(), db);
                }
                if self.needs(*x) {
                    accumulate(grads, *x, g.shape(), g.data().to_vec());
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if self.needs(id) {
                        accumulate(grads, id, g.shape(), g.data().to_vec());
                    }
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    // Subgradient 0 at 0: out > 0 exactly when the input was.
                    let d = g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(gv, &y)| if y > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(grads, *x, out.shape(), d);
                }
            }
            Op::Tanh(x) => {
                if self.needs(*x) {
                    let d = g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(gv, y)| gv * (1.0 - y * y))
                        .collect();
                    accumulate(grads, *x, out.shape(), d);
                }
            }
            Op::Flatten(x) => {
                if self.needs(*x) {
                    accumulate(grads, *x, self.value(*x).shape(), g.data().to_vec());
                }
            }
            Op::Mean(x) => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let d = vec![g.item() / xv.len() as f64; xv.len()];
                    accumulate(grads, *x, xv.shape(), d);
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    accumulate(grads, *x, xv.shape(), vec![g.item(); xv.len()]);
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                if self.needs(*logits) {
                    let lv = self.value(*logits);
                    let batch = labels.len() as f64;
                    let scale = g.item() / batch;
                    let mut d = Vec::with_capacity(lv.len());
                    for (i, &label) in labels.iter().enumerate() {
                        let row = lv.row(i);
                        let lse = log_sum_exp(row);
                        for (j, &z) in row.iter().enumerate() {
                            let p = (z - lse).exp();
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            d.push((p - onehot) * scale);
                        }
                    }
                    accumulate(grads, *logits, lv.shape(), d);
                }
            }
            Op::SigmoidBinaryCrossEntropy { logits, targets } => {
                if self.needs(*logits) {
                    let lv = self.value(*logits);
                    let scale = g.item() / lv.rows() as f64;
                    let d = lv
                        .data()
                        .iter()
                        .zip(targets.data())
                        .map(|(&z, &t)| (sigmoid(z) - t) * scale)
                        .collect();
                    accumulate(grads, *logits, lv.shape(), d);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize], d: Vec<f64>) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(&d) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::from_parts(shape.to_vec(), d)),
    }
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_logits(op: &'static str, logits: &Tensor, batch: usize) -> Result<()> {
    if logits.rank() != 2 || logits.rows() != batch {
        return Err(Error::dim(op, logits.shape(), &[batch]));
    }
    if !logits.is_finite() {
        return Err(Error::Validation(format!("{op}: non-finite logits")));
    }
    Ok(())
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut c, 0.0);
    Ok(Tensor::from_parts(vec![m, n], c))
}

fn conv_geometry(x: &Tensor, k: &Tensor) -> Result<ConvGeometry> {
    if x.rank() != 4 || k.rank() != 4 || x.shape()[3] != k.shape()[2] {
        return Err(Error::dim("conv2d", x.shape(), k.shape()));
    }
    let (kh, kw) = (k.shape()[0], k.shape()[1]);
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Validation(format!(
            "conv2d kernel must have odd spatial size, got {kh}x{kw}"
        )));
    }
    Ok(ConvGeometry {
        batch: x.shape()[0],
        height: x.shape()[1],
        width: x.shape()[2],
        in_channels: x.shape()[3],
        out_channels: k.shape()[3],
        kh,
        kw,
    })
}

fn conv2d_forward(x: &Tensor, k: &Tensor) -> Result<Tensor> {
    let geo = conv_geometry(x, k)?;
    let (p, plen, cout) = (geo.positions(), geo.patch_len(), geo.out_channels);
    let mut cols = vec![0.0; p * plen];
    geo.im2col(x.data(), &mut cols);
    let mut out = vec![0.0; p * cout];
    gemm(p, plen, cout, &cols, false, k.data(), false, &mut out, 0.0);
    Ok(Tensor::from_parts(
        vec![geo.batch, geo.height, geo.width, cout],
        out,
    ))
}
