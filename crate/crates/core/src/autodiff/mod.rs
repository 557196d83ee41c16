//! Reverse-mode automatic differentiation over dense real matrices.
//!
//! A [`Tape`] records each primitive as it is evaluated. Parameters enter the
//! tape with [`Tape::param`], data with [`Tape::constant`], and a single
//! [`Tape::backward`] call returns the gradient of a scalar loss with respect
//! to every parameter.
//!
//! ```
//! use gnnfp::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::row_vector(vec![1.0, -2.0, 3.0]));
//! let y = tape.square(x);
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().as_slice(), &[2.0, -4.0, 6.0]);
//! ```

mod optim;
mod rng;
mod tape;
mod tensor;

use thiserror::Error;

pub use optim::Adam;
pub(crate) use rng::mix;
pub use rng::DropoutKey;
pub use tape::{Axis, BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: (usize, usize) },
    #[error("training-mode batch normalization needs at least 2 rows, got {size}")]
    DegenerateBatch { size: usize },
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Learnable scale/shift plus running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(1, channels, 1.0),
            beta: Tensor::zeros(1, channels),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Exponential moving average toward the batch statistics.
    pub fn update(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var_unbiased) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}
