//! Dense tensors and the named parameter store.
//!
//! Everything in this crate is 1-D or 2-D double precision. A [`Tensor`]
//! owns its values plus an optional gradient accumulator of identical
//! length; a [`ParamStore`] maps unique names to trainable tensors in a
//! deterministic (insertion) order and carries the Adam moment state.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HipError, Result};

/// Shape of a tensor: everything here is a vector or a row-major matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Vector(usize),
    /// `Matrix(rows, cols)`, stored row-major.
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Vector(n) => vec![n],
            Shape::Matrix(r, c) => vec![r, c],
        }
    }

    pub fn from_dims(dims: &[usize]) -> Result<Shape> {
        match dims {
            [n] => Ok(Shape::Vector(*n)),
            [r, c] => Ok(Shape::Matrix(*r, *c)),
            other => Err(HipError::Input(format!(
                "unsupported tensor rank {} (only vectors and matrices exist)",
                other.len()
            ))),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Shape::Vector(n) => write!(f, "[{n}]"),
            Shape::Matrix(r, c) => write!(f, "[{r}x{c}]"),
        }
    }
}

/// A dense double-precision array with an optional gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Tensor {
        Tensor {
            shape,
            values: vec![0.0; shape.len()],
            grad: None,
        }
    }

    /// Builds a tensor, checking that the value count matches the shape.
    pub fn from_values(shape: Shape, values: Vec<f64>) -> Result<Tensor> {
        if values.len() != shape.len() {
            return Err(HipError::Dimension {
                op: "tensor",
                detail: format!("shape {shape} expects {} values, got {}", shape.len(), values.len()),
            });
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    pub fn vector(values: Vec<f64>) -> Tensor {
        Tensor {
            shape: Shape::Vector(values.len()),
            values,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Tensor> {
        Tensor::from_values(Shape::Matrix(rows, cols), values)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::vector(vec![v])
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient accumulator, creating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.values.len() {
            return Err(HipError::Dimension {
                op: "accumulate_grad",
                detail: format!(
                    "gradient length {} does not match tensor length {}",
                    delta.len(),
                    self.values.len()
                ),
            });
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.values.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

/// Ordered map of named trainable tensors plus per-entry Adam moments.
///
/// Iteration order is insertion order, which makes every gradient
/// accumulation and optimizer sweep deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    index: HashMap<String, usize>,
    entries: Vec<Tensor>,
    moment1: Vec<Vec<f64>>,
    moment2: Vec<Vec<f64>>,
    step_count: u64,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    /// Registers a parameter under a unique name.
    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(HipError::State(format!("parameter `{name}` already registered")));
        }
        let len = tensor.len();
        self.index.insert(name.to_string(), self.entries.len());
        self.names.push(name.to_string());
        self.entries.push(tensor);
        self.moment1.push(vec![0.0; len]);
        self.moment2.push(vec![0.0; len]);
        Ok(())
    }

    /// Registers a matrix initialized uniform(-a, a), a = sqrt(6/(fan_in+fan_out)).
    pub fn insert_xavier<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, rng: &mut R) -> Result<()> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let values = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
        self.insert(name, Tensor::matrix(rows, cols, values)?)
    }

    /// Registers a zero-initialized bias vector.
    pub fn insert_zero_vector(&mut self, name: &str, len: usize) -> Result<()> {
        self.insert(name, Tensor::zeros(Shape::Vector(len)))
    }

    /// Registers a vector initialized like a 1×len weight row.
    pub fn insert_xavier_vector<R: Rng>(&mut self, name: &str, len: usize, rng: &mut R) -> Result<()> {
        let a = (6.0 / (1 + len) as f64).sqrt();
        let values = (0..len).map(|_| rng.random_range(-a..a)).collect();
        self.insert(name, Tensor::vector(values))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Some(&mut self.entries[i]),
            None => None,
        }
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| HipError::State(format!("parameter `{name}` not registered")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.entries.iter())
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub(crate) fn bump_step(&mut self) -> u64 {
        self.step_count += 1;
        self.step_count
    }

    pub(crate) fn entry_mut(&mut self, pos: usize) -> (&str, &mut Tensor, &mut Vec<f64>, &mut Vec<f64>) {
        (
            &self.names[pos],
            &mut self.entries[pos],
            &mut self.moment1[pos],
            &mut self.moment2[pos],
        )
    }

    pub fn accumulate_grad(&mut self, name: &str, delta: &[f64]) -> Result<()> {
        let tensor = self
            .get_mut(name)
            .ok_or_else(|| HipError::State(format!("parameter `{name}` not registered")))?;
        tensor.accumulate_grad(delta)
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.entries {
            t.clear_grad();
        }
    }

    /// Zero-fills gradients for parameters no forward pass touched, so a
    /// data-dependent parameter (say, an edge-label weight absent from one
    /// batch) still satisfies the optimizer's all-gradients-present check.
    pub fn fill_missing_grads(&mut self) {
        for t in &mut self.entries {
            if t.grad.is_none() {
                t.grad = Some(vec![0.0; t.len()]);
            }
        }
    }

    /// Global L2 norm of all accumulated gradients (absent grads count as zero).
    pub fn grad_norm(&self) -> f64 {
        let mut acc = 0.0;
        for t in &self.entries {
            if let Some(g) = t.grad() {
                for v in g {
                    acc += v * v;
                }
            }
        }
        acc.sqrt()
    }

    /// Rescales all gradients so the global norm does not exceed `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for t in &mut self.entries {
                if let Some(g) = t.grad.as_mut() {
                    for v in g.iter_mut() {
                        *v *= scale;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_values_rejects_length_mismatch() {
        let err = Tensor::from_values(Shape::Matrix(2, 3), vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, HipError::Dimension { .. }));
    }

    #[test]
    fn grad_accumulates_and_shape_matches() {
        let mut t = Tensor::vector(vec![1.0, 2.0]);
        t.accumulate_grad(&[0.5, 0.5]).unwrap();
        t.accumulate_grad(&[1.0, -0.5]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.5, 0.0]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }

    #[test]
    fn store_rejects_duplicate_names_and_keeps_order() {
        let mut store = ParamStore::new();
        store.insert("b", Tensor::scalar(1.0)).unwrap();
        store.insert("a", Tensor::scalar(2.0)).unwrap();
        assert!(store.insert("b", Tensor::scalar(3.0)).is_err());
        let names: Vec<&str> = store.names().collect();
        assert_eq!(names, ["b", "a"]);
    }

    #[test]
    fn clip_scales_down_to_max_norm() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::vector(vec![0.0, 0.0])).unwrap();
        store.accumulate_grad("p", &[3.0, 4.0]).unwrap();
        store.clip_grad_norm(1.0);
        let g = store.get("p").unwrap().grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-12);
        assert!((g[1] - 0.8).abs() < 1e-12);
        assert!((store.grad_norm() - 1.0).abs() < 1e-12);
    }
}
