//! Multi-domain node-classification graphs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use ndarray::Array2;
use thiserror::Error;

use crate::autodiff::Matrix;

/// A single violated graph invariant.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("edge {edge} references node {node}, but the graph has {num_nodes} nodes")]
    EdgeOutOfRange {
        edge: usize,
        node: usize,
        num_nodes: usize,
    },
    #[error("edge {edge} duplicates edge {{{u}, {v}}}")]
    DuplicateEdge { edge: usize, u: usize, v: usize },
    #[error("edge {edge} is a self-loop on node {node}")]
    SelfLoopInInput { edge: usize, node: usize },
    #[error("domain {0} has no nodes")]
    EmptyDomain(usize),
    #[error("node {node} has domain {domain}, but only {num_domains} domains are declared")]
    BadDomain {
        node: usize,
        domain: usize,
        num_domains: usize,
    },
    #[error("node {node} has label {label}, but only {num_classes} classes are declared")]
    BadLabel {
        node: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("feature ({row}, {col}) is not finite")]
    NonFiniteFeature { row: usize, col: usize },
    #[error("{what} has length {found}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
}

/// Every invariant a candidate graph violates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationErrors(pub Vec<GraphError>);

impl fmt::Display for ValidationErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid graph ({} problems)", self.0.len())?;
        for e in &self.0 {
            write!(f, "; {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationErrors {}

/// An undirected graph whose nodes carry features, a domain id and a class
/// label.
///
/// Edges are stored once as `(u, v)` with `u < v`, sorted. A `Graph` can only
/// be obtained through [`Graph::new`], so every value of this type satisfies
/// the invariants checked by [`validate_graph`].
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    features: Matrix,
    edges: Vec<(usize, usize)>,
    domains: Vec<usize>,
    labels: Vec<usize>,
    num_domains: usize,
    num_classes: usize,
}

/// Checks the graph invariants on raw parts and reports every violation.
///
/// Edges may be given in either orientation; `(5, 0)` and `(0, 5)` name the
/// same edge.
pub fn validate_graph(
    features: &Matrix,
    edges: &[(usize, usize)],
    domains: &[usize],
    labels: &[usize],
    num_domains: usize,
    num_classes: usize,
) -> Result<(), ValidationErrors> {
    let n = features.nrows();
    let mut errors = Vec::new();

    for (what, len) in [("domains", domains.len()), ("labels", labels.len())] {
        if len != n {
            errors.push(GraphError::LengthMismatch {
                what,
                expected: n,
                found: len,
            });
        }
    }

    let mut seen = BTreeSet::new();
    for (k, &(a, b)) in edges.iter().enumerate() {
        let mut bad = false;
        for node in [a, b] {
            if node >= n {
                errors.push(GraphError::EdgeOutOfRange {
                    edge: k,
                    node,
                    num_nodes: n,
                });
                bad = true;
            }
        }
        if a == b {
            errors.push(GraphError::SelfLoopInInput { edge: k, node: a });
            bad = true;
        }
        if bad {
            continue;
        }
        let key = (a.min(b), a.max(b));
        if !seen.insert(key) {
            errors.push(GraphError::DuplicateEdge {
                edge: k,
                u: key.0,
                v: key.1,
            });
        }
    }

    let mut counts = vec![0usize; num_domains];
    for (node, &d) in domains.iter().enumerate() {
        if d >= num_domains {
            errors.push(GraphError::BadDomain {
                node,
                domain: d,
                num_domains,
            });
        } else {
            counts[d] += 1;
        }
    }
    for (d, &c) in counts.iter().enumerate() {
        if c == 0 {
            errors.push(GraphError::EmptyDomain(d));
        }
    }

    for (node, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            errors.push(GraphError::BadLabel {
                node,
                label: y,
                num_classes,
            });
        }
    }

    for ((row, col), v) in features.indexed_iter() {
        if !v.is_finite() {
            errors.push(GraphError::NonFiniteFeature { row, col });
        }
    }

    if errors.is_empty() {
        Ok(())
    } else {
        Err(ValidationErrors(errors))
    }
}

impl Graph {
    pub fn new(
        features: Matrix,
        edges: Vec<(usize, usize)>,
        domains: Vec<usize>,
        labels: Vec<usize>,
        num_domains: usize,
        num_classes: usize,
    ) -> Result<Self, ValidationErrors> {
        validate_graph(&features, &edges, &domains, &labels, num_domains, num_classes)?;
        let mut edges: Vec<_> = edges.into_iter().map(|(a, b)| (a.min(b), a.max(b))).collect();
        edges.sort_unstable();
        Ok(Self {
            features,
            edges,
            domains,
            labels,
            num_domains,
            num_classes,
        })
    }

    /// Builds a graph that differs from `self` only in edges and features.
    /// Callers guarantee the replacements keep the invariants (edge subset,
    /// same shape, finite values).
    pub(crate) fn with_parts(&self, features: Matrix, edges: Vec<(usize, usize)>) -> Self {
        debug_assert_eq!(features.dim(), self.features.dim());
        Self {
            features,
            edges,
            domains: self.domains.clone(),
            labels: self.labels.clone(),
            num_domains: self.num_domains,
            num_classes: self.num_classes,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_domains(&self) -> usize {
        self.num_domains
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn domains(&self) -> &[usize] {
        &self.domains
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes()];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    /// Node ids whose domain is in `keep`, in ascending order.
    pub fn nodes_in_domains(&self, keep: &[usize]) -> Vec<usize> {
        let keep: BTreeSet<_> = keep.iter().copied().collect();
        (0..self.num_nodes())
            .filter(|&i| keep.contains(&self.domains[i]))
            .collect()
    }

    /// The subgraph induced by the nodes of the listed domains, with domain
    /// ids renumbered densely in ascending order of the original ids.
    pub fn restrict_to_domains(&self, keep: &[usize]) -> Result<Subgraph, ValidationErrors> {
        let node_ids = self.nodes_in_domains(keep);
        let domain_ids: Vec<usize> = keep
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let remap: BTreeMap<usize, usize> =
            domain_ids.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let mut position = vec![usize::MAX; self.num_nodes()];
        for (new, &old) in node_ids.iter().enumerate() {
            position[old] = new;
        }

        let features = self.features.select(ndarray::Axis(0), &node_ids);
        let edges = self
            .edges
            .iter()
            .filter(|&&(u, v)| position[u] != usize::MAX && position[v] != usize::MAX)
            .map(|&(u, v)| (position[u], position[v]))
            .collect();
        let domains = node_ids.iter().map(|&i| remap[&self.domains[i]]).collect();
        let labels = node_ids.iter().map(|&i| self.labels[i]).collect();
        let graph = Graph::new(
            features,
            edges,
            domains,
            labels,
            domain_ids.len(),
            self.num_classes,
        )?;
        Ok(Subgraph {
            graph,
            node_ids,
            domain_ids,
        })
    }
}

/// A graph cut out of a larger one, remembering where it came from.
#[derive(Debug, Clone)]
pub struct Subgraph {
    pub graph: Graph,
    /// `node_ids[k]` is the parent id of subgraph node `k`.
    pub node_ids: Vec<usize>,
    /// `domain_ids[d]` is the parent id of subgraph domain `d`.
    pub domain_ids: Vec<usize>,
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` in compressed sparse row form.
///
/// Columns within each row are ascending and every row holds its diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

pub fn normalized_adjacency(g: &Graph) -> NormalizedAdjacency {
    let n = g.num_nodes();
    let deg = g.degrees();

    let mut neighbors: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for &(u, v) in g.edges() {
        neighbors[u].push(v);
        neighbors[v].push(u);
    }

    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::with_capacity(n + 2 * g.edges().len());
    let mut values = Vec::with_capacity(n + 2 * g.edges().len());
    row_ptr.push(0);
    for (i, mut cols) in neighbors.into_iter().enumerate() {
        cols.sort_unstable();
        for j in cols {
            col_idx.push(j);
            values.push(1.0 / (((deg[i] + 1) * (deg[j] + 1)) as f64).sqrt());
        }
        row_ptr.push(col_idx.len());
    }
    NormalizedAdjacency {
        n,
        row_ptr,
        col_idx,
        values,
    }
}

impl NormalizedAdjacency {
    pub fn from_graph(g: &Graph) -> Arc<Self> {
        Arc::new(normalized_adjacency(g))
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Nonzeros of row `i` as `(column, value)`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[span.clone()].binary_search(&j) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Matrix {
        let mut out = Array2::zeros((self.n, self.n));
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                out[[i, j]] = v;
            }
        }
        out
    }

    /// `self · x`.
    pub fn matmul(&self, x: &Matrix) -> Matrix {
        assert_eq!(x.nrows(), self.n, "spmm row mismatch");
        let mut out = Array2::zeros((self.n, x.ncols()));
        for i in 0..self.n {
            let mut row = out.row_mut(i);
            for (j, v) in self.row(i) {
                row.scaled_add(v, &x.row(j));
            }
        }
        out
    }

    /// `selfᵀ · x`.
    pub fn transpose_matmul(&self, x: &Matrix) -> Matrix {
        assert_eq!(x.nrows(), self.n, "spmm row mismatch");
        let mut out = Array2::zeros((self.n, x.ncols()));
        for i in 0..self.n {
            let src = x.row(i);
            for (j, v) in self.row(i) {
                out.row_mut(j).scaled_add(v, &src);
            }
        }
        out
    }
}
