//! Dense f64 tensor engine with reverse-mode automatic differentiation.
//!
//! Small by design: row-major storage, no broadcasting beyond bias-add
//! (matrix + row vector), single-threaded execution so results are
//! bit-reproducible. Shape mismatches are programming errors and panic with
//! the offending shapes named; domain-level failures (checkpoint IO,
//! non-finite training state) are returned as [`TensorError`].

mod checkpoint;
mod gradcheck;
pub(crate) mod kernels;
mod params;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use gradcheck::gradient_check;
pub use params::{adam_step, AdamHyper, AdamState, Gradients, ParameterSet};
pub use tape::{Tape, Var};

use thiserror::Error;

/// Errors surfaced by the tensor engine's fallible entry points.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

/// A dense row-major tensor of 64-bit floats.
///
/// `shape.iter().product() == data.len()` always holds; constructors check it.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Row vector `[1, n]` from a slice.
    pub fn row(values: &[f64]) -> Self {
        Tensor::new(vec![1, values.len()], values.to_vec())
    }

    /// Matrix from rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "from_rows needs at least one row");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows: {} vs {}", r.len(), cols);
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on shape {:?}", self.shape);
        self.data[0]
    }

    /// Rows of a 2-D tensor (a 1-D tensor counts as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on shape {:?}", self.shape),
        }
    }

    /// Columns of a 1-D or 2-D tensor.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on shape {:?}", self.shape),
        }
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Sinusoidal embedding of a (possibly fractional) timestep.
///
/// Half the dimensions carry `sin(w_i t)`, half `cos(w_i t)`, with
/// frequencies geometrically spaced from 1 down to 1/10000.
pub fn sinusoidal_time_embedding(t: f64, dim: usize) -> Tensor {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even, got {dim}");
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let exponent = if half > 1 {
            i as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let freq = (10_000.0_f64).powf(-exponent);
        data[i] = (freq * t).sin();
        data[half + i] = (freq * t).cos();
    }
    Tensor::new(vec![1, dim], data)
}
