//! Eager computation tape for reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Node values are
//! computed immediately (there is no separate forward pass); calling
//! [`Graph::backward`] on a scalar node then sweeps the tape once in reverse
//! and fills per-node adjoints. Parameters are copied into the graph on
//! first use and their gradients are exported to the originating
//! [`ParamStore`] with [`Graph::accumulate_into`].
//!
//! All node values are flat `Vec<f64>`. Matrices only ever enter a graph as
//! parameters feeding [`Graph::affine`]; every derived node is a vector.

use std::collections::HashMap;

use crate::error::{HipError, Result};
use crate::numerics::tensor::{ParamStore, Shape};

/// Index of a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param,
    /// `W x (+ b)` with `W` a matrix node.
    Affine {
        w: NodeId,
        x: NodeId,
        b: Option<NodeId>,
    },
    Add(Vec<NodeId>),
    Scale(NodeId, f64),
    Hadamard(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Concat(Vec<NodeId>),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    /// `sum_k weights[k] * vectors[k]`.
    Mix {
        weights: NodeId,
        vectors: Vec<NodeId>,
    },
    /// Contiguous window of the source's flat values.
    Slice {
        src: NodeId,
        start: usize,
    },
    /// Scalar sum of all elements.
    Sum(NodeId),
}

struct Node {
    op: Op,
    shape: Shape,
    value: Vec<f64>,
}

/// One recorded forward evaluation, differentiable in reverse.
pub struct Graph {
    nodes: Vec<Node>,
    /// `(name, node)` in first-use order; drives deterministic export.
    params: Vec<(String, NodeId)>,
    param_cache: HashMap<String, NodeId>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            param_cache: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].shape
    }

    /// Total element count of a node.
    pub fn len_of(&self, id: NodeId) -> usize {
        self.nodes[id.0].shape.len()
    }

    fn push(&mut self, op: Op, shape: Shape, value: Vec<f64>) -> NodeId {
        debug_assert_eq!(shape.len(), value.len());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, shape, value });
        id
    }

    fn vector_of(&self, id: NodeId, op: &'static str, role: &str) -> Result<usize> {
        match self.nodes[id.0].shape {
            Shape::Vector(n) => Ok(n),
            m => Err(HipError::Dimension {
                op,
                detail: format!("{role} must be a vector, got {m}"),
            }),
        }
    }

    /// Records a constant vector.
    pub fn constant(&mut self, values: &[f64]) -> NodeId {
        self.push(Op::Constant, Shape::Vector(values.len()), values.to_vec())
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(&[v])
    }

    /// Copies a named parameter onto the tape. Repeated calls with the same
    /// name return the same node, so each parameter accumulates one adjoint.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_cache.get(name) {
            return Ok(id);
        }
        let tensor = store.require(name)?;
        let id = self.push(Op::Param, tensor.shape(), tensor.values().to_vec());
        self.params.push((name.to_string(), id));
        self.param_cache.insert(name.to_string(), id);
        Ok(id)
    }

    /// Matrix-vector product with optional bias: `W x + b`.
    pub fn affine(&mut self, w: NodeId, x: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (rows, cols) = match self.nodes[w.0].shape {
            Shape::Matrix(r, c) => (r, c),
            s => {
                return Err(HipError::Dimension {
                    op: "affine",
                    detail: format!("weight must be a matrix, got {s}"),
                })
            }
        };
        let xn = self.vector_of(x, "affine", "input")?;
        if xn != cols {
            return Err(HipError::Dimension {
                op: "affine",
                detail: format!("weight [{rows}x{cols}] incompatible with input [{xn}]"),
            });
        }
        if let Some(b) = b {
            let bn = self.vector_of(b, "affine", "bias")?;
            if bn != rows {
                return Err(HipError::Dimension {
                    op: "affine",
                    detail: format!("bias [{bn}] incompatible with weight [{rows}x{cols}]"),
                });
            }
        }
        let mut out = match b {
            Some(b) => self.nodes[b.0].value.clone(),
            None => vec![0.0; rows],
        };
        {
            let wv = &self.nodes[w.0].value;
            let xv = &self.nodes[x.0].value;
            for i in 0..rows {
                let row = &wv[i * cols..(i + 1) * cols];
                let mut acc = 0.0;
                for (wij, xj) in row.iter().zip(xv) {
                    acc += wij * xj;
                }
                out[i] += acc;
            }
        }
        Ok(self.push(Op::Affine { w, x, b }, Shape::Vector(rows), out))
    }

    /// Elementwise sum of two or more equal-length vectors.
    pub fn add(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        if terms.is_empty() {
            return Err(HipError::Input("add needs at least one term".into()));
        }
        let n = self.vector_of(terms[0], "add", "term")?;
        for &t in &terms[1..] {
            let tn = self.vector_of(t, "add", "term")?;
            if tn != n {
                return Err(HipError::Dimension {
                    op: "add",
                    detail: format!("term [{tn}] incompatible with term [{n}]"),
                });
            }
        }
        let mut out = vec![0.0; n];
        for &t in terms {
            for (o, v) in out.iter_mut().zip(&self.nodes[t.0].value) {
                *o += v;
            }
        }
        Ok(self.push(Op::Add(terms.to_vec()), Shape::Vector(n), out))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        let n = self.vector_of(x, "scale", "input")?;
        let out = self.nodes[x.0].value.iter().map(|v| v * s).collect();
        Ok(self.push(Op::Scale(x, s), Shape::Vector(n), out))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let an = self.vector_of(a, "hadamard", "left")?;
        let bn = self.vector_of(b, "hadamard", "right")?;
        if an != bn {
            return Err(HipError::Dimension {
                op: "hadamard",
                detail: format!("left [{an}] incompatible with right [{bn}]"),
            });
        }
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Op::Hadamard(a, b), Shape::Vector(an), out))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.vector_of(x, "sigmoid", "input")?;
        let out = self.nodes[x.0].value.iter().map(|&v| stable_sigmoid(v)).collect();
        Ok(self.push(Op::Sigmoid(x), Shape::Vector(n), out))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.vector_of(x, "tanh", "input")?;
        let out = self.nodes[x.0].value.iter().map(|v| v.tanh()).collect();
        Ok(self.push(Op::Tanh(x), Shape::Vector(n), out))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.vector_of(x, "relu", "input")?;
        let out = self.nodes[x.0].value.iter().map(|v| v.max(0.0)).collect();
        Ok(self.push(Op::Relu(x), Shape::Vector(n), out))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(HipError::Input("concat needs at least one part".into()));
        }
        let mut out = Vec::new();
        for &p in parts {
            self.vector_of(p, "concat", "part")?;
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        let n = out.len();
        Ok(self.push(Op::Concat(parts.to_vec()), Shape::Vector(n), out))
    }

    /// Numerically stable softmax (max-subtracted).
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.vector_of(x, "softmax", "input")?;
        if n == 0 {
            return Err(HipError::Input("softmax over an empty vector".into()));
        }
        let out = softmax_values(&self.nodes[x.0].value);
        Ok(self.push(Op::Softmax(x), Shape::Vector(n), out))
    }

    /// Numerically stable log-softmax (max-subtracted).
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.vector_of(x, "log_softmax", "input")?;
        if n == 0 {
            return Err(HipError::Input("log_softmax over an empty vector".into()));
        }
        let v = &self.nodes[x.0].value;
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let out = v.iter().map(|x| x - lse).collect();
        Ok(self.push(Op::LogSoftmax(x), Shape::Vector(n), out))
    }

    /// Convex-style combination `sum_k weights[k] * vectors[k]`.
    pub fn mix(&mut self, weights: NodeId, vectors: &[NodeId]) -> Result<NodeId> {
        let k = self.vector_of(weights, "mix", "weights")?;
        if k != vectors.len() {
            return Err(HipError::Dimension {
                op: "mix",
                detail: format!("{k} weights for {} vectors", vectors.len()),
            });
        }
        if vectors.is_empty() {
            return Err(HipError::Input("mix needs at least one vector".into()));
        }
        let d = self.vector_of(vectors[0], "mix", "vector")?;
        for &v in &vectors[1..] {
            let dn = self.vector_of(v, "mix", "vector")?;
            if dn != d {
                return Err(HipError::Dimension {
                    op: "mix",
                    detail: format!("vector [{dn}] incompatible with vector [{d}]"),
                });
            }
        }
        let mut out = vec![0.0; d];
        for (i, &v) in vectors.iter().enumerate() {
            let w = self.nodes[weights.0].value[i];
            for (o, x) in out.iter_mut().zip(&self.nodes[v.0].value) {
                *o += w * x;
            }
        }
        Ok(self.push(
            Op::Mix {
                weights,
                vectors: vectors.to_vec(),
            },
            Shape::Vector(d),
            out,
        ))
    }

    /// Window `[start, start+len)` of the source's flat values. This is also
    /// how embedding rows are read out of a matrix parameter.
    pub fn slice(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let total = self.nodes[src.0].shape.len();
        if start + len > total {
            return Err(HipError::Dimension {
                op: "slice",
                detail: format!("window {start}..{} out of range for {total} values", start + len),
            });
        }
        let out = self.nodes[src.0].value[start..start + len].to_vec();
        Ok(self.push(Op::Slice { src, start }, Shape::Vector(len), out))
    }

    /// Row of a matrix-shaped node (embedding lookup).
    pub fn row(&mut self, src: NodeId, row: usize) -> Result<NodeId> {
        match self.nodes[src.0].shape {
            Shape::Matrix(r, c) => {
                if row >= r {
                    return Err(HipError::Dimension {
                        op: "row",
                        detail: format!("row {row} out of range for [{r}x{c}]"),
                    });
                }
                self.slice(src, row * c, c)
            }
            s => Err(HipError::Dimension {
                op: "row",
                detail: format!("row lookup needs a matrix, got {s}"),
            }),
        }
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_elements(&mut self, x: NodeId) -> Result<NodeId> {
        self.vector_of(x, "sum_elements", "input")?;
        let total = self.nodes[x.0].value.iter().sum();
        Ok(self.push(Op::Sum(x), Shape::Vector(1), vec![total]))
    }

    /// Mean of scalar nodes.
    pub fn mean_of(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let s = self.add(terms)?;
        self.scale(s, 1.0 / terms.len() as f64)
    }

    /// Reverse sweep from a scalar node; returns per-node adjoints.
    fn adjoints(&self, loss: NodeId) -> Result<Vec<Vec<f64>>> {
        if self.nodes[loss.0].shape.len() != 1 {
            return Err(HipError::Input(format!(
                "backward needs a scalar loss node, got shape {}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        grads[loss.0][0] = 1.0;
        for idx in (0..=loss.0).rev() {
            let dy = std::mem::take(&mut grads[idx]);
            if dy.iter().all(|&g| g == 0.0) {
                grads[idx] = dy;
                continue;
            }
            match &self.nodes[idx].op {
                Op::Constant | Op::Param => {}
                Op::Affine { w, x, b } => {
                    let (rows, cols) = match self.nodes[w.0].shape {
                        Shape::Matrix(r, c) => (r, c),
                        _ => unreachable!("affine weight is always a matrix"),
                    };
                    let wv = &self.nodes[w.0].value;
                    let xv = &self.nodes[x.0].value;
                    for i in 0..rows {
                        let gi = dy[i];
                        if gi == 0.0 {
                            continue;
                        }
                        let gw = &mut grads[w.0][i * cols..(i + 1) * cols];
                        for (g, xj) in gw.iter_mut().zip(xv) {
                            *g += gi * xj;
                        }
                    }
                    for i in 0..rows {
                        let gi = dy[i];
                        if gi == 0.0 {
                            continue;
                        }
                        let wrow = &wv[i * cols..(i + 1) * cols];
                        for (gx, wij) in grads[x.0].iter_mut().zip(wrow) {
                            *gx += gi * wij;
                        }
                    }
                    if let Some(b) = b {
                        for (gb, gi) in grads[b.0].iter_mut().zip(&dy) {
                            *gb += gi;
                        }
                    }
                }
                Op::Add(terms) => {
                    for &t in terms {
                        for (g, gi) in grads[t.0].iter_mut().zip(&dy) {
                            *g += gi;
                        }
                    }
                }
                Op::Scale(x, s) => {
                    for (g, gi) in grads[x.0].iter_mut().zip(&dy) {
                        *g += s * gi;
                    }
                }
                Op::Hadamard(a, b) => {
                    for ((g, gi), y) in grads[a.0].iter_mut().zip(&dy).zip(&self.nodes[b.0].value) {
                        *g += gi * y;
                    }
                    for ((g, gi), x) in grads[b.0].iter_mut().zip(&dy).zip(&self.nodes[a.0].value) {
                        *g += gi * x;
                    }
                }
                Op::Sigmoid(x) => {
                    let yv = &self.nodes[idx].value;
                    for ((g, gi), y) in grads[x.0].iter_mut().zip(&dy).zip(yv) {
                        *g += gi * y * (1.0 - y);
                    }
                }
                Op::Tanh(x) => {
                    let yv = &self.nodes[idx].value;
                    for ((g, gi), y) in grads[x.0].iter_mut().zip(&dy).zip(yv) {
                        *g += gi * (1.0 - y * y);
                    }
                }
                Op::Relu(x) => {
                    for ((g, gi), xv) in grads[x.0].iter_mut().zip(&dy).zip(&self.nodes[x.0].value) {
                        if *xv > 0.0 {
                            *g += gi;
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.len();
                        for (g, gi) in grads[p.0].iter_mut().zip(&dy[offset..offset + len]) {
                            *g += gi;
                        }
                        offset += len;
                    }
                }
                Op::Softmax(x) => {
                    let yv = &self.nodes[idx].value;
                    let dot: f64 = dy.iter().zip(yv).map(|(g, y)| g * y).sum();
                    for ((g, gi), y) in grads[x.0].iter_mut().zip(&dy).zip(yv) {
                        *g += y * (gi - dot);
                    }
                }
                Op::LogSoftmax(x) => {
                    let yv = &self.nodes[idx].value;
                    let total: f64 = dy.iter().sum();
                    for ((g, gi), y) in grads[x.0].iter_mut().zip(&dy).zip(yv) {
                        *g += gi - y.exp() * total;
                    }
                }
                Op::Mix { weights, vectors } => {
                    for (k, &v) in vectors.iter().enumerate() {
                        let vk = &self.nodes[v.0].value;
                        let dot: f64 = dy.iter().zip(vk).map(|(g, x)| g * x).sum();
                        grads[weights.0][k] += dot;
                    }
                    for (k, &v) in vectors.iter().enumerate() {
                        let w = self.nodes[weights.0].value[k];
                        for (g, gi) in grads[v.0].iter_mut().zip(&dy) {
                            *g += w * gi;
                        }
                    }
                }
                Op::Slice { src, start } => {
                    for (g, gi) in grads[src.0][*start..*start + dy.len()].iter_mut().zip(&dy) {
                        *g += gi;
                    }
                }
                Op::Sum(x) => {
                    for g in grads[x.0].iter_mut() {
                        *g += dy[0];
                    }
                }
            }
            grads[idx] = dy;
        }
        Ok(grads)
    }

    /// Differentiates `loss` and adds each parameter's adjoint into `store`,
    /// scaled by `weight`. Parameters are visited in first-use order. Every
    /// parameter that was pulled onto this tape receives an accumulation,
    /// even if its adjoint is identically zero.
    pub fn backward_into(&self, loss: NodeId, store: &mut ParamStore, weight: f64) -> Result<()> {
        let grads = self.adjoints(loss)?;
        for (name, id) in &self.params {
            let scaled: Vec<f64> = grads[id.0].iter().map(|g| g * weight).collect();
            store.accumulate_grad(name, &scaled)?;
        }
        Ok(())
    }

    /// Convenience wrapper: gradients weighted 1.0.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        self.backward_into(loss, store, 1.0)
    }

    /// Raw parameter adjoints in first-use order, without touching a store.
    pub fn param_grads(&self, loss: NodeId) -> Result<Vec<(String, Vec<f64>)>> {
        let grads = self.adjoints(loss)?;
        Ok(self
            .params
            .iter()
            .map(|(name, id)| (name.clone(), grads[id.0].clone()))
            .collect())
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax over a plain slice.
pub fn softmax_values(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}
