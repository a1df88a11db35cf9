use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{AutodiffError, Gradients, Result, Tape, Tensor};
use super::Matrix;
use crate::graph::NormalizedAdjacency;
use crate::rng::{derive_seed, rng_from_seed};

/// A trainable matrix and its pending gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub value: Matrix,
    #[serde(skip)]
    pub grad: Option<Matrix>,
}

impl Parameter {
    pub fn new(value: Matrix) -> Self {
        Self { value, grad: None }
    }
}

/// Uniform Glorot initialization, `U(-a, a)` with `a = sqrt(6 / (in + out))`.
pub fn glorot_uniform(fan_in: usize, fan_out: usize, seed: u64) -> Matrix {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = rng_from_seed(seed);
    Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-a..=a))
}

/// Weights of a stacked GCN encoder and its optional projection head.
///
/// `layers[l]` maps width `l` to width `l + 1`; layer 0 consumes the raw
/// node features. The projection head, when present, is two square
/// matrices applied as `relu(H P0) P1` before the contrastive loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub layers: Vec<Parameter>,
    #[serde(default)]
    pub projection: Vec<Parameter>,
}

impl EncoderParams {
    /// Glorot-initialized encoder with the given layer widths, e.g.
    /// `[F, hidden, embedding]` for two layers.
    pub fn init(widths: &[usize], projection_head: bool, seed: u64) -> Self {
        assert!(widths.len() >= 2, "an encoder needs at least one layer");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| Parameter::new(glorot_uniform(w[0], w[1], derive_seed(seed, l as u64))))
            .collect();
        let d = *widths.last().unwrap();
        let projection = if projection_head {
            (0..2)
                .map(|k| Parameter::new(glorot_uniform(d, d, derive_seed(seed, 1000 + k))))
                .collect()
        } else {
            Vec::new()
        };
        Self { layers, projection }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].value.nrows()
    }

    pub fn embedding_width(&self) -> usize {
        self.layers.last().map_or(0, |p| p.value.ncols())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.layers.iter().chain(&self.projection)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.layers.iter_mut().chain(&mut self.projection)
    }

    /// Places every parameter on the tape, returning `(layers, projection)`.
    pub fn register(&self, tape: &mut Tape) -> (Vec<Tensor>, Vec<Tensor>) {
        let layers = self.layers.iter().map(|p| tape.param(p.value.clone())).collect();
        let proj = self.projection.iter().map(|p| tape.param(p.value.clone())).collect();
        (layers, proj)
    }

    /// Moves gradients for the registered handles into `Parameter::grad`.
    pub fn collect_grads(&mut self, grads: &mut Gradients, layers: &[Tensor], proj: &[Tensor]) {
        for (p, &t) in self.iter_mut().zip(layers.iter().chain(proj)) {
            p.grad = grads.take(t);
        }
    }

    /// Encoder output for un-augmented input, without recording gradients.
    pub fn embed(&self, adj: &Arc<NormalizedAdjacency>, features: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let ws: Vec<Tensor> = self
            .layers
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect();
        let h = gcn_forward(&mut tape, adj, x, &ws)?;
        Ok(tape.value(h).clone())
    }
}

/// `H^{l+1} = σ(Â H^l W^l)` with ReLU on hidden layers and no activation on
/// the last one, so embeddings can take either sign.
pub fn gcn_forward(
    tape: &mut Tape,
    adj: &Arc<NormalizedAdjacency>,
    features: Tensor,
    weights: &[Tensor],
) -> Result<Tensor> {
    let mut h = features;
    for (l, &w) in weights.iter().enumerate() {
        let (rows, cols) = tape.shape(h);
        if cols != tape.shape(w).0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "gcn_forward",
                left: (rows, cols),
                right: tape.shape(w),
            });
        }
        // Â (H W) is cheaper than (Â H) W when the layer narrows.
        let hw = tape.matmul(h, w)?;
        h = tape.spmm(adj, hw)?;
        if l + 1 < weights.len() {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Two-layer projection head `relu(H P0) P1`.
pub fn project(tape: &mut Tape, h: Tensor, proj: &[Tensor]) -> Result<Tensor> {
    let mut z = h;
    for (k, &p) in proj.iter().enumerate() {
        z = tape.matmul(z, p)?;
        if k + 1 < proj.len() {
            z = tape.relu(z)?;
        }
    }
    Ok(z)
}
