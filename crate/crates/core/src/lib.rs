//! Graph contrastive learning with cross-domain negative promotion.
//!
//! Training runs in two stages. A warm-up stage optimizes the usual
//! symmetric InfoNCE objective over two augmented views of the graph. The
//! promotion stage then finds, each epoch, the most similar pairs of nodes
//! that belong to *different* domains and moves them from the negative side
//! of the contrastive fraction into the positive side. Pulling those pairs
//! together shrinks the pairwise distance between domain centroids, which is
//! what lets a frozen encoder transfer to an unseen target domain.
//!
//! The crate is organized bottom-up:
//!
//! - [`graph`]: validated multi-domain graphs and the symmetric normalized
//!   adjacency used by GCN propagation.
//! - [`augment`]: seeded edge dropping and feature-column masking.
//! - [`autodiff`]: a small dense reverse-mode tape, the GCN encoder and Adam.
//! - [`objective`]: similarity matrices, top-r cross-domain selection and the
//!   contrastive losses (warm-up, promoted, and the pair-removal ablation).
//! - [`metrics`]: pairwise domain discrepancy, pair-similarity reports, the
//!   linear probe and embedding export.
//! - [`data`]: the synthetic multi-domain SBM generator, graph files and
//!   domain splits.
//! - [`train`]: the two-stage trainer, checkpoints and the ablation driver.

pub mod augment;
pub mod autodiff;
pub mod data;
pub mod graph;
pub mod metrics;
pub mod objective;
pub mod rng;
pub mod train;

pub use autodiff::{Matrix, Tape, Tensor};
pub use graph::{Graph, GraphError, NormalizedAdjacency};
