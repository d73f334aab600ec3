//! Reverse-mode differentiation tape.
//!
//! Every primitive appends one node holding its forward value, so the node
//! list is topologically ordered by construction. `backward` walks it in
//! reverse. Tapes are cheap to build and are rebuilt for every step.

use std::collections::BTreeMap;

use super::{Matrix, TensorError};

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which tensor of a layer a parameter is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamSlot {
    Weight,
    Bias,
    Gamma,
    Beta,
}

impl ParamSlot {
    pub fn name(self) -> &'static str {
        match self {
            ParamSlot::Weight => "W",
            ParamSlot::Bias => "b",
            ParamSlot::Gamma => "gamma",
            ParamSlot::Beta => "beta",
        }
    }
}

/// Identifies a trainable tensor: layer index (0-based) and slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub layer: usize,
    pub slot: ParamSlot,
}

impl ParamId {
    pub fn new(layer: usize, slot: ParamSlot) -> Self {
        Self { layer, slot }
    }
}

/// Adjoints keyed by parameter. A missing entry means a zero adjoint.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientStore {
    grads: BTreeMap<ParamId, Matrix>,
}

impl GradientStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Matrix) {
        self.grads.insert(id, grad);
    }

    /// Adds `grad` into the entry for `id`, creating it if absent.
    pub fn accumulate(&mut self, id: ParamId, grad: &Matrix, scale: f64) -> Result<(), TensorError> {
        match self.grads.get_mut(&id) {
            Some(existing) => existing.add_scaled_in_place(grad, scale),
            None => {
                self.grads.insert(id, grad.scale(scale));
                Ok(())
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Matrix)> {
        self.grads.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn scale(&self, s: f64) -> GradientStore {
        GradientStore {
            grads: self.grads.iter().map(|(k, v)| (*k, v.scale(s))).collect(),
        }
    }

    /// Largest absolute entry across all stored adjoints.
    pub fn max_abs(&self) -> f64 {
        self.grads.values().fold(0.0, |m, g| m.max(g.max_abs()))
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// Adds a `1 × cols` row to every row of a matrix.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Relu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Matrix,
    },
    Mse {
        pred: NodeId,
        target: NodeId,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Ordered record of primitive operations and their forward values.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoint for every node reachable from the loss.
#[derive(Clone, Debug)]
pub struct Adjoints {
    adjoints: Vec<Option<Matrix>>,
}

impl Adjoints {
    pub fn of(&self, node: NodeId) -> Option<&Matrix> {
        self.adjoints.get(node.0).and_then(|a| a.as_ref())
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

    pub fn value(&self, node: NodeId) -> &Matrix {
        &self.nodes[node.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, node: NodeId) -> f64 {
        self.value(node).get(0, 0)
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant input; it receives an adjoint but never appears in a [`GradientStore`].
    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId, value: Matrix) -> NodeId {
        self.push(value, Op::Param(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId, TensorError> {
        let value = add_row_forward(self.value(x), self.value(row))?;
        Ok(self.push(value, Op::AddRow(x, row)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::from_vec(1, 1, vec![self.value(a).sum()]);
        self.push(value, Op::Sum(a))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    /// Per-row normalization followed by `γ ⊙ z + β`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<NodeId, TensorError> {
        let xv = self.value(x);
        let d = xv.cols();
        for (name, node) in [("layer_norm gamma", gamma), ("layer_norm beta", beta)] {
            let v = self.value(node);
            if v.shape() != (1, d) {
                return Err(TensorError::shape(name, xv, v));
            }
        }
        let (normalized, inv_std) = layer_norm_normalize(xv);
        let value = layer_norm_affine(&normalized, self.value(gamma), self.value(beta));
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
        ))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, TensorError> {
        let lv = self.value(logits);
        if labels.len() != lv.rows() {
            return Err(TensorError::LabelCount {
                rows: lv.rows(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= lv.cols()) {
            return Err(TensorError::LabelOutOfRange {
                label: bad,
                classes: lv.cols(),
            });
        }
        let probs = softmax_rows(lv);
        let n = lv.rows() as f64;
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -log_softmax_at(lv.row(i), l))
            .sum::<f64>()
            / n;
        let value = Matrix::from_vec(1, 1, vec![loss]);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Half the mean over rows of the squared error `‖pred − target‖²`.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, TensorError> {
        let value = Matrix::from_vec(1, 1, vec![mse_forward(self.value(pred), self.value(target))?]);
        Ok(self.push(value, Op::Mse { pred, target }))
    }

    /// Recomputes every node from its inputs. Values equal the recorded ones bit for bit.
    pub fn replay(&self) -> Result<Vec<Matrix>, TensorError> {
        let mut values: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = |id: NodeId| -> &Matrix { &values[id.0] };
            let out = match &node.op {
                Op::Input | Op::Param(_) => node.value.clone(),
                Op::MatMul(a, b) => v(*a).matmul(v(*b))?,
                Op::Transpose(a) => v(*a).transpose(),
                Op::Add(a, b) => v(*a).add(v(*b))?,
                Op::AddRow(x, r) => add_row_forward(v(*x), v(*r))?,
                Op::Scale(a, s) => v(*a).scale(*s),
                Op::Sum(a) => Matrix::from_vec(1, 1, vec![v(*a).sum()]),
                Op::Relu(x) => v(*x).map(|e| e.max(0.0)),
                Op::LayerNorm { x, gamma, beta, .. } => {
                    let (z, _) = layer_norm_normalize(v(*x));
                    layer_norm_affine(&z, v(*gamma), v(*beta))
                }
                Op::SoftmaxCrossEntropy { logits, labels, .. } => {
                    let lv = v(*logits);
                    let loss = labels
                        .iter()
                        .enumerate()
                        .map(|(i, &l)| -log_softmax_at(lv.row(i), l))
                        .sum::<f64>()
                        / lv.rows() as f64;
                    Matrix::from_vec(1, 1, vec![loss])
                }
                Op::Mse { pred, target } => {
                    Matrix::from_vec(1, 1, vec![mse_forward(v(*pred), v(*target))?])
                }
            };
            values.push(out);
        }
        Ok(values)
    }

    /// Adjoints of every node with respect to the scalar `loss`.
    pub fn adjoints(&self, loss: NodeId) -> Result<Adjoints, TensorError> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(TensorError::NonScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let da = g.matmul(&bv.transpose())?;
                    let db = av.transpose().matmul(&g)?;
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Transpose(a) => accumulate(&mut adj, *a, g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g.clone());
                }
                Op::AddRow(x, r) => {
                    let mut col_sums = vec![0.0; g.cols()];
                    for i in 0..g.rows() {
                        for (s, v) in col_sums.iter_mut().zip(g.row(i)) {
                            *s += v;
                        }
                    }
                    accumulate(&mut adj, *r, Matrix::from_vec(1, g.cols(), col_sums));
                    accumulate(&mut adj, *x, g.clone());
                }
                Op::Scale(a, s) => accumulate(&mut adj, *a, g.scale(*s)),
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut adj, *a, Matrix::filled(r, c, g.get(0, 0)));
                }
                Op::Relu(x) => {
                    // ReLU'(0) is taken to be 1.
                    let mask = self.value(*x);
                    let dx = g.zip_map(mask, |gi, xi| if xi >= 0.0 { gi } else { 0.0 })?;
                    accumulate(&mut adj, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    normalized,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    let (rows, d) = normalized.shape();
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    let mut dx = vec![0.0; rows * d];
                    for i in 0..rows {
                        let gi = g.row(i);
                        let zi = normalized.row(i);
                        let mut mean_dz = 0.0;
                        let mut mean_dz_z = 0.0;
                        for j in 0..d {
                            dgamma[j] += gi[j] * zi[j];
                            dbeta[j] += gi[j];
                            let dz = gi[j] * gv.get(0, j);
                            mean_dz += dz;
                            mean_dz_z += dz * zi[j];
                        }
                        mean_dz /= d as f64;
                        mean_dz_z /= d as f64;
                        for j in 0..d {
                            let dz = gi[j] * gv.get(0, j);
                            dx[i * d + j] = inv_std[i] * (dz - mean_dz - zi[j] * mean_dz_z);
                        }
                    }
                    accumulate(&mut adj, *x, Matrix::from_vec(rows, d, dx));
                    accumulate(&mut adj, *gamma, Matrix::from_vec(1, d, dgamma));
                    accumulate(&mut adj, *beta, Matrix::from_vec(1, d, dbeta));
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let n = probs.rows() as f64;
                    let scale = g.get(0, 0) / n;
                    let mut d = probs.clone();
                    for (i, &l) in labels.iter().enumerate() {
                        let v = d.get(i, l);
                        d.set(i, l, v - 1.0);
                    }
                    accumulate(&mut adj, *logits, d.scale(scale));
                }
                Op::Mse { pred, target } => {
                    let pv = self.value(*pred);
                    let tv = self.value(*target);
                    let scale = g.get(0, 0) / pv.rows() as f64;
                    let diff = pv.sub(tv)?;
                    accumulate(&mut adj, *target, diff.scale(-scale));
                    accumulate(&mut adj, *pred, diff.scale(scale));
                }
            }
            adj[idx] = Some(g);
        }
        Ok(Adjoints { adjoints: adj })
    }

    /// Parameter adjoints of the scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<GradientStore, TensorError> {
        let adjoints = self.adjoints(loss)?;
        let mut store = GradientStore::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &adjoints.adjoints[idx]) {
                store.accumulate(*id, g, 1.0)?;
            }
        }
        Ok(store)
    }
}

fn accumulate(adj: &mut [Option<Matrix>], node: NodeId, grad: Matrix) {
    match &mut adj[node.0] {
        Some(existing) => {
            for (a, b) in existing.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(grad),
    }
}

fn add_row_forward(x: &Matrix, row: &Matrix) -> Result<Matrix, TensorError> {
    if row.rows() != 1 || row.cols() != x.cols() {
        return Err(TensorError::shape("add_row", x, row));
    }
    let mut out = x.clone();
    let cols = x.cols();
    for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
        *v += row.get(0, i % cols);
    }
    Ok(out)
}

fn layer_norm_normalize(x: &Matrix) -> (Matrix, Vec<f64>) {
    let (rows, d) = x.shape();
    let mut z = vec![0.0; rows * d];
    let mut inv_std = Vec::with_capacity(rows);
    for i in 0..rows {
        let r = x.row(i);
        let mean = r.iter().sum::<f64>() / d as f64;
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for j in 0..d {
            z[i * d + j] = (r[j] - mean) * s;
        }
        inv_std.push(s);
    }
    (Matrix::from_vec(rows, d, z), inv_std)
}

fn layer_norm_affine(z: &Matrix, gamma: &Matrix, beta: &Matrix) -> Matrix {
    let d = z.cols();
    let mut out = z.clone();
    for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
        let j = i % d;
        *v = gamma.get(0, j) * *v + beta.get(0, j);
    }
    out
}

fn mse_forward(pred: &Matrix, target: &Matrix) -> Result<f64, TensorError> {
    if !pred.same_shape(target) {
        return Err(TensorError::shape("mse", pred, target));
    }
    let sq: f64 = pred
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(0.5 * sq / pred.rows() as f64)
}

/// Row-wise softmax, stabilized by subtracting the row maximum.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let (rows, cols) = logits.shape();
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let r = logits.row(i);
        let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..cols {
            let e = (r[j] - max).exp();
            out[i * cols + j] = e;
            total += e;
        }
        for v in &mut out[i * cols..(i + 1) * cols] {
            *v /= total;
        }
    }
    Matrix::from_vec(rows, cols, out)
}

fn log_softmax_at(row: &[f64], label: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[label] - lse
}
