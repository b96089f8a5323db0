//! Operation tape with reverse-mode gradients.

use std::collections::BTreeMap;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf { param: Option<String> },
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    Scale(NodeId, f64),
    ScaleBy { scalar: NodeId, x: NodeId },
    ConcatRows(NodeId, NodeId),
    MeanRows(NodeId),
    RepeatRow(NodeId, usize),
    Transpose(NodeId),
    SumAll(NodeId),
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
    GatherRow(NodeId, usize),
    WeightedSumRows(NodeId, Vec<f64>),
    CosineSim(NodeId, NodeId),
    LogSumExpRow(NodeId),
    /// Pure reindexing: output element `i` reads input flat index `src[i]`.
    Reindex { x: NodeId, src: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// A single forward pass: nodes are appended in evaluation order, so the
/// reverse index order is a valid topological order for backpropagation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite forward value");
        self.nodes.push(Node { value, grad: None, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Inserts a constant leaf (no gradient tracked).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// Inserts a leaf bound to a named parameter; gradients accumulate per name.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let value = store.get(name)?.clone();
        self.push(value, Op::Leaf { param: Some(name.to_string()) }, true);
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
        Error::ShapeMismatch { op, left: a.shape().to_vec(), right: b.shape().to_vec() }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.cols() != tb.rows() {
            return Err(Self::shape_err("matmul", ta, tb));
        }
        let (n, m, p) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Tensor::zeros(n, p);
        for i in 0..n {
            for k in 0..m {
                let aik = ta.at(i, k);
                if aik == 0.0 {
                    continue;
                }
                let brow = tb.row(k);
                let orow = &mut out.data_mut()[i * p..(i + 1) * p];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Matmul(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err("add", ta, tb));
        }
        let mut out = ta.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(tb.data()) {
            *o += v;
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a 1-row bias to every row of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        if tb.rows() != 1 || ta.cols() != tb.cols() {
            return Err(Self::shape_err("add_bias", ta, tb));
        }
        let mut out = ta.clone();
        let cols = out.cols();
        for r in 0..out.rows() {
            for c in 0..cols {
                let v = out.at(r, c) + tb.at(0, c);
                out.set(r, c, v);
            }
        }
        let rg = self.requires(a) || self.requires(bias);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut out = self.nodes[a.0].value.clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let rg = self.requires(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a.0].value.softmax_rows_values();
        let rg = self.requires(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut out = self.nodes[a.0].value.clone();
        for v in out.data_mut() {
            *v *= c;
        }
        let rg = self.requires(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Multiplies `x` elementwise by a learnable 1x1 scalar.
    pub fn scale_by(&mut self, scalar: NodeId, x: NodeId) -> Result<NodeId> {
        let ts = &self.nodes[scalar.0].value;
        if ts.shape() != [1, 1] {
            return Err(Self::shape_err("scale_by", ts, &self.nodes[x.0].value));
        }
        let s = ts.at(0, 0);
        let mut out = self.nodes[x.0].value.clone();
        for v in out.data_mut() {
            *v *= s;
        }
        let rg = self.requires(scalar) || self.requires(x);
        Ok(self.push(out, Op::ScaleBy { scalar, x }, rg))
    }

    /// Concatenates each row of `a` with the matching row of `b`.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rows() != tb.rows() {
            return Err(Self::shape_err("concat_rows", ta, tb));
        }
        let (n, ca, cb) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Tensor::zeros(n, ca + cb);
        for r in 0..n {
            for c in 0..ca {
                out.set(r, c, ta.at(r, c));
            }
            for c in 0..cb {
                out.set(r, ca + c, tb.at(r, c));
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::ConcatRows(a, b), rg))
    }

    /// Column-wise mean over rows, producing a single row.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let (n, c) = (ta.rows(), ta.cols());
        let mut out = Tensor::zeros(1, c);
        for r in 0..n {
            for j in 0..c {
                let v = out.at(0, j) + ta.at(r, j);
                out.set(0, j, v);
            }
        }
        for v in out.data_mut() {
            *v /= n as f64;
        }
        let rg = self.requires(a);
        self.push(out, Op::MeanRows(a), rg)
    }

    /// Broadcasts a single row into `count` identical rows.
    pub fn repeat_row(&mut self, a: NodeId, count: usize) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        if ta.rows() != 1 || count == 0 {
            return Err(Error::ShapeMismatch {
                op: "repeat_row",
                left: ta.shape().to_vec(),
                right: vec![count],
            });
        }
        let c = ta.cols();
        let mut out = Tensor::zeros(count, c);
        for r in 0..count {
            for j in 0..c {
                out.set(r, j, ta.at(0, j));
            }
        }
        let rg = self.requires(a);
        Ok(self.push(out, Op::RepeatRow(a, count), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let (n, c) = (ta.rows(), ta.cols());
        let mut out = Tensor::zeros(c, n);
        for r in 0..n {
            for j in 0..c {
                out.set(j, r, ta.at(r, j));
            }
        }
        let rg = self.requires(a);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let rg = self.requires(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    /// Mean cross-entropy of row-wise logits against integer labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let tl = &self.nodes[logits.0].value;
        if labels.len() != tl.rows() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let classes = tl.cols();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, max: classes - 1 });
        }
        let n = tl.rows();
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = tl.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let rg = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::CrossEntropy { logits, labels: labels.to_vec() },
            rg,
        ))
    }

    pub fn gather_row(&mut self, a: NodeId, row: usize) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        if row >= ta.rows() {
            return Err(Error::ShapeMismatch {
                op: "gather_row",
                left: ta.shape().to_vec(),
                right: vec![row],
            });
        }
        let out = Tensor::row_vector(ta.row(row));
        let rg = self.requires(a);
        Ok(self.push(out, Op::GatherRow(a, row), rg))
    }

    /// Weighted sum of rows: `out = sum_i w[i] * a[i, :]`.
    pub fn weighted_sum_rows(&mut self, a: NodeId, weights: &[f64]) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        if weights.len() != ta.rows() {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum_rows",
                left: ta.shape().to_vec(),
                right: vec![weights.len()],
            });
        }
        let c = ta.cols();
        let mut out = Tensor::zeros(1, c);
        for (r, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for j in 0..c {
                let v = out.at(0, j) + w * ta.at(r, j);
                out.set(0, j, v);
            }
        }
        let rg = self.requires(a);
        Ok(self.push(out, Op::WeightedSumRows(a, weights.to_vec()), rg))
    }

    /// Cosine similarity of two single-row vectors. Norms below 1e-12 are an
    /// error rather than a silent NaN.
    pub fn cosine_sim(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() || ta.rows() != 1 {
            return Err(Self::shape_err("cosine_sim", ta, tb));
        }
        let na = ta.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = tb.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if na < 1e-12 || nb < 1e-12 {
            return Err(Error::ZeroNorm);
        }
        let dot: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::scalar(dot / (na * nb)), Op::CosineSim(a, b), rg))
    }

    /// Stable log-sum-exp of a single row.
    pub fn logsumexp_row(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        if ta.rows() != 1 {
            return Err(Error::ShapeMismatch {
                op: "logsumexp_row",
                left: ta.shape().to_vec(),
                right: vec![1],
            });
        }
        let row = ta.row(0);
        let max = row.iter().fold(f64::NEG_INFINITY, |x, &y| x.max(y));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let rg = self.requires(a);
        Ok(self.push(Tensor::scalar(lse), Op::LogSumExpRow(a), rg))
    }

    /// Arbitrary gather by flat index into a new shape. The backward pass
    /// scatter-adds, so duplicate sources are allowed.
    pub fn reindex(&mut self, x: NodeId, rows: usize, cols: usize, src: Vec<usize>) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        if src.len() != rows * cols || src.iter().any(|&s| s >= tx.len()) {
            return Err(Error::ShapeMismatch {
                op: "reindex",
                left: tx.shape().to_vec(),
                right: vec![rows, cols],
            });
        }
        let data: Vec<f64> = src.iter().map(|&s| tx.data()[s]).collect();
        let out = Tensor::from_vec(rows, cols, data)?;
        let rg = self.requires(x);
        Ok(self.push(out, Op::Reindex { x, src }, rg))
    }

    fn accumulate(&mut self, id: NodeId, delta: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let len = self.nodes[id.0].value.len();
        let grad = self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; len]);
        for (g, &d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Backpropagates from a scalar loss node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.shape() != [1, 1] {
            return Err(Error::ShapeMismatch {
                op: "backward",
                left: self.nodes[loss.0].value.shape().to_vec(),
                right: vec![1, 1],
            });
        }
        if !self.nodes[loss.0].value.is_finite() {
            return Err(Error::NonFinite("backward seed"));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for idx in (0..self.nodes.len()).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let grad = self.nodes[idx].grad.clone().expect("grad present");
            // Pull the pieces we need before mutating input grads.
            match &self.nodes[idx].op {
                Op::Leaf { .. } => {}
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (ta, tb) = (self.nodes[a.0].value.clone(), self.nodes[b.0].value.clone());
                    let (n, m, p) = (ta.rows(), ta.cols(), tb.cols());
                    if self.nodes[a.0].requires_grad {
                        // dA = G . B^T
                        let mut da = vec![0.0; n * m];
                        for i in 0..n {
                            for j in 0..p {
                                let g = grad[i * p + j];
                                if g == 0.0 {
                                    continue;
                                }
                                for k in 0..m {
                                    da[i * m + k] += g * tb.at(k, j);
                                }
                            }
                        }
                        self.accumulate(a, &da);
                    }
                    if self.nodes[b.0].requires_grad {
                        // dB = A^T . G
                        let mut db = vec![0.0; m * p];
                        for i in 0..n {
                            for k in 0..m {
                                let av = ta.at(i, k);
                                if av == 0.0 {
                                    continue;
                                }
                                for j in 0..p {
                                    db[k * p + j] += av * grad[i * p + j];
                                }
                            }
                        }
                        self.accumulate(b, &db);
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, &grad);
                    self.accumulate(b, &grad);
                }
                Op::AddBias(a, bias) => {
                    let (a, bias) = (*a, *bias);
                    let cols = self.nodes[bias.0].value.cols();
                    self.accumulate(a, &grad);
                    let mut db = vec![0.0; cols];
                    for (i, &g) in grad.iter().enumerate() {
                        db[i % cols] += g;
                    }
                    self.accumulate(bias, &db);
                }
                Op::Relu(a) => {
                    let a = *a;
                    let da: Vec<f64> = self.nodes[a.0]
                        .value
                        .data()
                        .iter()
                        .zip(&grad)
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::SoftmaxRows(a) => {
                    let a = *a;
                    let s = self.nodes[idx].value.clone();
                    let (n, c) = (s.rows(), s.cols());
                    let mut da = vec![0.0; n * c];
                    for r in 0..n {
                        let dot: f64 =
                            (0..c).map(|j| grad[r * c + j] * s.at(r, j)).sum();
                        for j in 0..c {
                            da[r * c + j] = s.at(r, j) * (grad[r * c + j] - dot);
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::Scale(a, cst) => {
                    let (a, cst) = (*a, *cst);
                    let da: Vec<f64> = grad.iter().map(|&g| g * cst).collect();
                    self.accumulate(a, &da);
                }
                Op::ScaleBy { scalar, x } => {
                    let (scalar, x) = (*scalar, *x);
                    let s = self.nodes[scalar.0].value.at(0, 0);
                    if self.nodes[x.0].requires_grad {
                        let dx: Vec<f64> = grad.iter().map(|&g| g * s).collect();
                        self.accumulate(x, &dx);
                    }
                    if self.nodes[scalar.0].requires_grad {
                        let ds: f64 = self.nodes[x.0]
                            .value
                            .data()
                            .iter()
                            .zip(&grad)
                            .map(|(&xv, &g)| xv * g)
                            .sum();
                        self.accumulate(scalar, &[ds]);
                    }
                }
                Op::ConcatRows(a, b) => {
                    let (a, b) = (*a, *b);
                    let (n, ca) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                    let cb = self.nodes[b.0].value.cols();
                    let mut da = vec![0.0; n * ca];
                    let mut db = vec![0.0; n * cb];
                    for r in 0..n {
                        for c in 0..ca {
                            da[r * ca + c] = grad[r * (ca + cb) + c];
                        }
                        for c in 0..cb {
                            db[r * cb + c] = grad[r * (ca + cb) + ca + c];
                        }
                    }
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::MeanRows(a) => {
                    let a = *a;
                    let (n, c) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                    let mut da = vec![0.0; n * c];
                    for r in 0..n {
                        for j in 0..c {
                            da[r * c + j] = grad[j] / n as f64;
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::RepeatRow(a, count) => {
                    let (a, count) = (*a, *count);
                    let c = self.nodes[a.0].value.cols();
                    let mut da = vec![0.0; c];
                    for r in 0..count {
                        for j in 0..c {
                            da[j] += grad[r * c + j];
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::Transpose(a) => {
                    let a = *a;
                    let (n, c) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                    let mut da = vec![0.0; n * c];
                    for r in 0..n {
                        for j in 0..c {
                            da[r * c + j] = grad[j * n + r];
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let da = vec![grad[0]; self.nodes[a.0].value.len()];
                    self.accumulate(a, &da);
                }
                Op::CrossEntropy { logits, labels } => {
                    let logits = *logits;
                    let labels = labels.clone();
                    let probs = self.nodes[logits.0].value.softmax_rows_values();
                    let (n, c) = (probs.rows(), probs.cols());
                    let scale = grad[0] / n as f64;
                    let mut da = vec![0.0; n * c];
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            da[r * c + j] = (probs.at(r, j) - onehot) * scale;
                        }
                    }
                    self.accumulate(logits, &da);
                }
                Op::GatherRow(a, row) => {
                    let (a, row) = (*a, *row);
                    let c = self.nodes[a.0].value.cols();
                    let mut da = vec![0.0; self.nodes[a.0].value.len()];
                    da[row * c..(row + 1) * c].copy_from_slice(&grad);
                    self.accumulate(a, &da);
                }
                Op::WeightedSumRows(a, weights) => {
                    let a = *a;
                    let weights = weights.clone();
                    let c = self.nodes[a.0].value.cols();
                    let mut da = vec![0.0; self.nodes[a.0].value.len()];
                    for (r, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            da[r * c + j] = w * grad[j];
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::CosineSim(a, b) => {
                    let (a, b) = (*a, *b);
                    let ta = self.nodes[a.0].value.clone();
                    let tb = self.nodes[b.0].value.clone();
                    let na = ta.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nb = tb.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
                    let s = dot / (na * nb);
                    let g = grad[0];
                    if self.nodes[a.0].requires_grad {
                        let da: Vec<f64> = ta
                            .data()
                            .iter()
                            .zip(tb.data())
                            .map(|(&av, &bv)| g * (bv / (na * nb) - s * av / (na * na)))
                            .collect();
                        self.accumulate(a, &da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let db: Vec<f64> = ta
                            .data()
                            .iter()
                            .zip(tb.data())
                            .map(|(&av, &bv)| g * (av / (na * nb) - s * bv / (nb * nb)))
                            .collect();
                        self.accumulate(b, &db);
                    }
                }
                Op::LogSumExpRow(a) => {
                    let a = *a;
                    let sm = self.nodes[a.0].value.softmax_rows_values();
                    let da: Vec<f64> = sm.data().iter().map(|&p| p * grad[0]).collect();
                    self.accumulate(a, &da);
                }
                Op::Reindex { x, src } => {
                    let x = *x;
                    let src = src.clone();
                    let mut dx = vec![0.0; self.nodes[x.0].value.len()];
                    for (i, &s) in src.iter().enumerate() {
                        dx[s] += grad[i];
                    }
                    self.accumulate(x, &dx);
                }
            }
        }
        Ok(())
    }

    /// Sums gradients over every parameter leaf, keyed by parameter name.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for node in &self.nodes {
            if let Op::Leaf { param: Some(name) } = &node.op {
                let entry = out
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; node.value.len()]);
                if let Some(g) = &node.grad {
                    for (e, &gv) in entry.iter_mut().zip(g) {
                        *e += gv;
                    }
                }
            }
        }
        out
    }
}
