//! Dense 64-bit tensors in row-major order.
//!
//! `Tensor` is a plain value: shape, data, and a `requires_grad` marker.
//! Differentiation happens on a [`crate::tape::Tape`], which stores tensors
//! as node values; the type itself carries no graph state.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("zero-sized dimension in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} wants {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor { shape: vec![n], data, requires_grad: false }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { shape: vec![1], data: vec![x], requires_grad: false }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], requires_grad: false }
    }

    /// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)], marked trainable.
    pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor { shape: shape.to_vec(), data, requires_grad: true }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a length-1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn is_vector(&self) -> bool {
        self.shape.len() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Largest elementwise |a - b|; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Cosine similarity with the degenerate-input policy: a near-zero norm on
/// either side yields 0 with `degenerate` set instead of an error, so empty
/// generated sequences never crash reward computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSim {
    pub value: f64,
    pub degenerate: bool,
}

pub const COSINE_NORM_EPS: f64 = 1e-12;

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<CosineSim> {
    if u.len() != v.len() {
        return Err(Error::invalid(format!(
            "cosine_similarity length mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu < COSINE_NORM_EPS || nv < COSINE_NORM_EPS {
        return Ok(CosineSim { value: 0.0, degenerate: true });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(CosineSim { value: (dot / (nu * nv)).clamp(-1.0, 1.0), degenerate: false })
}

/// Numerically stabilized softmax over a nonempty slice.
pub fn softmax_slice(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::invalid("softmax of empty vector"));
    }
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}
