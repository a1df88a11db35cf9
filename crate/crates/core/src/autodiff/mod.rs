//! Reverse-mode differentiation, the GCN encoder and the Adam optimizer.

mod gcn;
mod optim;
mod tape;

pub use gcn::{gcn_forward, glorot_uniform, project, EncoderParams, Parameter};
pub use optim::{optimizer_step, AdamConfig, OptimizerState};
pub use tape::{AutodiffError, Gradients, Result, Tape, Tensor};

/// Dense row-major real matrix used for every value in the crate.
pub type Matrix = ndarray::Array2<f64>;
