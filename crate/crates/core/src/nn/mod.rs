//! Dense networks on top of the autodiff tape: feed-forward stacks, an LSTM
//! cell, Adam, and a text checkpoint container.

mod adam;
mod checkpoint;
mod lstm;
mod mlp;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, CheckpointError, Entry, CHECKPOINT_VERSION};
pub use lstm::{BoundLstm, Lstm};
pub use mlp::{BoundMlp, Mlp};

use thiserror::Error;

use crate::autodiff::{self, AutodiffError, Matrix, Var};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid layer sizes {0:?}")]
    InvalidSizes(Vec<usize>),
    #[error("input has {got} columns, network expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("parameter {index}: shape {got:?}, expected {expected:?}")]
    ParameterShape {
        index: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("parameter count {got}, expected {expected}")]
    ParameterCount { expected: usize, got: usize },
    #[error("empty input sequence")]
    EmptySequence,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Softplus => "softplus",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "linear" => Activation::Linear,
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            "sigmoid" => Activation::Sigmoid,
            "softplus" => Activation::Softplus,
            _ => return None,
        })
    }

    /// Whether the second derivative is nonzero somewhere.
    pub fn is_smooth(self) -> bool {
        matches!(self, Activation::Tanh | Activation::Sigmoid | Activation::Softplus)
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => autodiff::sigmoid(x),
            Activation::Softplus => autodiff::softplus(x),
        }
    }

    pub fn apply_var<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Linear => x,
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => x.sigmoid(),
            Activation::Softplus => x.softplus(),
        }
    }
}

/// Anything with a flat, ordered list of parameter matrices.
pub trait Parametric {
    fn parameters(&self) -> Vec<&Matrix>;
    fn parameters_mut(&mut self) -> Vec<&mut Matrix>;

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.parameters()
            .iter()
            .all(|p| p.iter().all(|v| v.is_finite()))
    }
}
