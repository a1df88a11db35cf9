//! Stochastic view generation: edge dropping and feature-column masking.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Matrix;
use crate::graph::{Graph, NormalizedAdjacency};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AugmentError {
    #[error("{name} must lie in [0, 1), got {value}")]
    InvalidProbability { name: &'static str, value: f64 },
}

/// Augmentation rates for one view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub drop_edge_prob: f64,
    pub mask_feature_prob: f64,
}

impl AugmentConfig {
    pub fn new(drop_edge_prob: f64, mask_feature_prob: f64) -> Result<Self, AugmentError> {
        let cfg = Self {
            drop_edge_prob,
            mask_feature_prob,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn identity() -> Self {
        Self {
            drop_edge_prob: 0.0,
            mask_feature_prob: 0.0,
        }
    }

    /// Conventional first-view rates (drop 0.2 of edges, mask 0.3 of columns).
    pub fn default_alpha() -> Self {
        Self {
            drop_edge_prob: 0.2,
            mask_feature_prob: 0.3,
        }
    }

    /// Conventional second-view rates (drop 0.3 of edges, mask 0.2 of columns).
    pub fn default_beta() -> Self {
        Self {
            drop_edge_prob: 0.3,
            mask_feature_prob: 0.2,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        check_probability("drop_edge_prob", self.drop_edge_prob)?;
        check_probability("mask_feature_prob", self.mask_feature_prob)
    }
}

fn check_probability(name: &'static str, value: f64) -> Result<(), AugmentError> {
    if (0.0..1.0).contains(&value) {
        Ok(())
    } else {
        Err(AugmentError::InvalidProbability { name, value })
    }
}

/// An augmented copy of a graph with its propagation matrix.
#[derive(Debug, Clone)]
pub struct GraphView {
    pub graph: Graph,
    pub adjacency: Arc<NormalizedAdjacency>,
    pub seed: u64,
}

impl GraphView {
    /// The graph itself, un-augmented.
    pub fn identity(g: &Graph) -> Self {
        Self {
            graph: g.clone(),
            adjacency: NormalizedAdjacency::from_graph(g),
            seed: 0,
        }
    }
}

/// Removes each edge independently with probability `p`.
pub fn drop_edges(g: &Graph, p: f64, seed: u64) -> Graph {
    debug_assert!((0.0..1.0).contains(&p));
    if p == 0.0 {
        return g.clone();
    }
    let mut rng = rng_from_seed(seed);
    let edges = g
        .edges()
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() >= p)
        .collect();
    g.with_parts(g.features().clone(), edges)
}

/// Zeroes each feature column across all nodes independently with
/// probability `p`.
pub fn mask_features(x: &Matrix, p: f64, seed: u64) -> Matrix {
    debug_assert!((0.0..1.0).contains(&p));
    let mut out = x.clone();
    if p == 0.0 {
        return out;
    }
    let mut rng = rng_from_seed(seed);
    for mut col in out.columns_mut() {
        if rng.random::<f64>() < p {
            col.fill(0.0);
        }
    }
    out
}

fn make_view(g: &Graph, cfg: &AugmentConfig, seed: u64) -> GraphView {
    let dropped = drop_edges(g, cfg.drop_edge_prob, derive_seed(seed, 0));
    let features = mask_features(g.features(), cfg.mask_feature_prob, derive_seed(seed, 1));
    let graph = g.with_parts(features, dropped.edges().to_vec());
    let adjacency = NormalizedAdjacency::from_graph(&graph);
    GraphView {
        graph,
        adjacency,
        seed,
    }
}

/// Two independently augmented views. Each view draws from its own stream
/// derived from `seed`.
pub fn make_views(
    g: &Graph,
    cfg_alpha: &AugmentConfig,
    cfg_beta: &AugmentConfig,
    seed: u64,
) -> (GraphView, GraphView) {
    (
        make_view(g, cfg_alpha, derive_seed(seed, 0)),
        make_view(g, cfg_beta, derive_seed(seed, 1)),
    )
}
