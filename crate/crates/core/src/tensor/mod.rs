//! Minimal dense f64 tensor core with reverse-mode automatic differentiation.
//!
//! The operator set is exactly what the segmentation network needs: grouped
//! and depthwise 2D convolution, transposed convolution, channel shuffle,
//! batch normalization, ReLU, 3x3 pooling, channel concatenation, softmax
//! with weighted cross-entropy, and Adam with classic L2 decay. Activations
//! are laid out N x C x H x W, row-major. There is no broadcasting; every
//! shape mismatch is an error, and every op checks its output for NaN/Inf.

pub mod adam;
pub mod fmod;
pub mod gradcheck;
pub(crate) mod ops;
pub mod tape;

pub use adam::{AdamConfig, AdamState};
pub use tape::{Mode, NodeId, Tape};

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape error: {message}")]
    Shape { op: &'static str, message: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("weighted_cross_entropy: target label {0} outside {{0, 1}}")]
    InvalidTarget(u8),
    #[error("weighted_cross_entropy: class weights must be positive and finite, got [{0}, {1}]")]
    InvalidClassWeights(f64, f64),
    #[error("adam_step: missing gradient for parameter {0}")]
    MissingGrad(String),
    #[error("weight file {path}: {message}")]
    WeightFormat { path: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn shape_err(op: &'static str, message: String) -> TensorError {
    TensorError::Shape { op, message }
}

/// Dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(shape_err(
                "from_vec",
                format!("shape {shape:?} wants {expected} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// All entries drawn i.i.d. uniform from (-bound, bound).
    pub fn rand_uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize), TensorError> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(shape_err(op, format!("expected rank-4 tensor, got shape {other:?}"))),
        }
    }
}

/// Per-channel running mean/variance owned by one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStat {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStat {
    /// Fresh statistics: mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        RunningStat { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}
