//! Synthetic multi-domain graphs, the graph file format and domain splits.
//!
//! The generator draws one stochastic block model per domain. Classes share
//! a prototype feature direction across all domains while each domain adds
//! its own mean shift, so class semantics transfer between domains but the
//! marginal feature distribution does not.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, GraphError, ValidationErrors};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator config: {0}")]
    ConfigInvalid(String),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error(transparent)]
    InvariantViolation(#[from] ValidationErrors),
    #[error("split needs {needed} domains but only {available} exist")]
    TooFewDomains { needed: usize, available: usize },
    #[error("split role {0} must contain at least one domain")]
    EmptyRole(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_domains: usize,
    pub num_classes: usize,
    pub nodes_per_domain: usize,
    pub num_features: usize,
    pub intra_class_edge_prob: f64,
    pub inter_class_edge_prob: f64,
    /// Weight of the domain-invariant class prototype.
    pub class_signal_strength: f64,
    /// Weight of the per-domain mean shift.
    pub domain_shift_strength: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_domains: 6,
            num_classes: 4,
            nodes_per_domain: 60,
            num_features: 8,
            intra_class_edge_prob: 0.15,
            inter_class_edge_prob: 0.02,
            class_signal_strength: 2.0,
            domain_shift_strength: 1.0,
            noise_std: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::ConfigInvalid(msg));
        for (name, v) in [
            ("num_domains", self.num_domains),
            ("num_classes", self.num_classes),
            ("nodes_per_domain", self.nodes_per_domain),
            ("num_features", self.num_features),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        for (name, p) in [
            ("intra_class_edge_prob", self.intra_class_edge_prob),
            ("inter_class_edge_prob", self.inter_class_edge_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.intra_class_edge_prob <= self.inter_class_edge_prob {
            return bad(format!(
                "intra_class_edge_prob ({}) must exceed inter_class_edge_prob ({})",
                self.intra_class_edge_prob, self.inter_class_edge_prob
            ));
        }
        for (name, v) in [
            ("class_signal_strength", self.class_signal_strength),
            ("domain_shift_strength", self.domain_shift_strength),
            ("noise_std", self.noise_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        Ok(())
    }
}

fn random_unit_vectors(count: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng_from_seed(seed);
    let mut out: Array2<f64> =
        Array2::from_shape_simple_fn((count, dim), || StandardNormal.sample(&mut rng));
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    out
}

/// Draws a multi-domain graph. Domain `d` owns nodes
/// `d * nodes_per_domain .. (d + 1) * nodes_per_domain`; no edge crosses
/// domains.
pub fn generate(cfg: &SyntheticConfig) -> Result<Graph, DataError> {
    cfg.validate()?;
    let n = cfg.num_domains * cfg.nodes_per_domain;
    let class_protos = random_unit_vectors(cfg.num_classes, cfg.num_features, derive_seed(cfg.seed, 0));
    let domain_shifts = random_unit_vectors(cfg.num_domains, cfg.num_features, derive_seed(cfg.seed, 1));

    let domains: Vec<usize> = (0..n).map(|i| i / cfg.nodes_per_domain).collect();
    let mut label_rng = rng_from_seed(derive_seed(cfg.seed, 2));
    let labels: Vec<usize> = (0..n)
        .map(|_| label_rng.random_range(0..cfg.num_classes))
        .collect();

    let mut edge_rng = rng_from_seed(derive_seed(cfg.seed, 3));
    let mut edges = Vec::new();
    for d in 0..cfg.num_domains {
        let start = d * cfg.nodes_per_domain;
        let end = start + cfg.nodes_per_domain;
        for u in start..end {
            for v in u + 1..end {
                let p = if labels[u] == labels[v] {
                    cfg.intra_class_edge_prob
                } else {
                    cfg.inter_class_edge_prob
                };
                if edge_rng.random::<f64>() < p {
                    edges.push((u, v));
                }
            }
        }
    }

    let mut noise_rng = rng_from_seed(derive_seed(cfg.seed, 4));
    let noise = Normal::new(0.0, cfg.noise_std).expect("validated noise_std");
    let mut features = Array2::zeros((n, cfg.num_features));
    for (i, mut row) in features.rows_mut().into_iter().enumerate() {
        let base: Array1<f64> = &class_protos.row(labels[i]) * cfg.class_signal_strength
            + &domain_shifts.row(domains[i]) * cfg.domain_shift_strength;
        row.assign(&base);
        if cfg.noise_std > 0.0 {
            row.mapv_inplace(|v| v + noise.sample(&mut noise_rng));
        }
    }

    Ok(Graph::new(
        features,
        edges,
        domains,
        labels,
        cfg.num_domains,
        cfg.num_classes,
    )?)
}

/// On-disk layout of a graph document.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    num_nodes: usize,
    num_features: usize,
    num_domains: usize,
    num_classes: usize,
    features: Vec<Vec<f64>>,
    edges: Vec<[usize; 2]>,
    domains: Vec<usize>,
    labels: Vec<usize>,
}

/// Serializes a graph as one JSON document with fields `num_nodes`,
/// `num_features`, `num_domains`, `num_classes`, `features` (rows),
/// `edges` (`[u, v]`, `u < v`, sorted), `domains` and `labels`.
pub fn write_graph(w: &mut impl Write, g: &Graph) -> Result<(), DataError> {
    let doc = GraphFile {
        num_nodes: g.num_nodes(),
        num_features: g.num_features(),
        num_domains: g.num_domains(),
        num_classes: g.num_classes(),
        features: g.features().rows().into_iter().map(|r| r.to_vec()).collect(),
        edges: g.edges().iter().map(|&(u, v)| [u, v]).collect(),
        domains: g.domains().to_vec(),
        labels: g.labels().to_vec(),
    };
    serde_json::to_writer(&mut *w, &doc).map_err(std::io::Error::from)?;
    writeln!(w)?;
    Ok(())
}

pub fn save_graph(g: &Graph, path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_graph(&mut w, g)?;
    w.flush()?;
    Ok(())
}

pub fn parse_graph(text: &str) -> Result<Graph, DataError> {
    let doc: GraphFile = serde_json::from_str(text).map_err(|e| DataError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    graph_from_doc(doc)
}

pub fn load_graph(path: &Path) -> Result<Graph, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let doc: GraphFile = serde_json::from_reader(reader).map_err(|e| {
        if e.is_io() {
            DataError::Io(e.into())
        } else {
            DataError::Parse {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            }
        }
    })?;
    graph_from_doc(doc)
}

fn graph_from_doc(doc: GraphFile) -> Result<Graph, DataError> {
    let mut problems = Vec::new();
    if doc.features.len() != doc.num_nodes {
        problems.push(GraphError::LengthMismatch {
            what: "features",
            expected: doc.num_nodes,
            found: doc.features.len(),
        });
    }
    for row in &doc.features {
        if row.len() != doc.num_features {
            problems.push(GraphError::LengthMismatch {
                what: "feature row",
                expected: doc.num_features,
                found: row.len(),
            });
            break;
        }
    }
    if !problems.is_empty() {
        return Err(ValidationErrors(problems).into());
    }
    let flat: Vec<f64> = doc.features.into_iter().flatten().collect();
    let features = Array2::from_shape_vec((doc.num_nodes, doc.num_features), flat)
        .expect("row lengths checked");
    let edges = doc.edges.into_iter().map(|[u, v]| (u, v)).collect();
    Ok(Graph::new(
        features,
        edges,
        doc.domains,
        doc.labels,
        doc.num_domains,
        doc.num_classes,
    )?)
}

/// Domain roles for out-of-distribution evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSplit {
    pub source: Vec<usize>,
    pub validation: Vec<usize>,
    pub target: Vec<usize>,
}

/// Seeded random assignment of domains to source, validation and target
/// roles. Each list comes back sorted.
pub fn make_split(
    num_domains: usize,
    n_source: usize,
    n_val: usize,
    n_target: usize,
    seed: u64,
) -> Result<DomainSplit, DataError> {
    for (role, count) in [("source", n_source), ("validation", n_val), ("target", n_target)] {
        if count == 0 {
            return Err(DataError::EmptyRole(role));
        }
    }
    let needed = n_source + n_val + n_target;
    if needed > num_domains {
        return Err(DataError::TooFewDomains {
            needed,
            available: num_domains,
        });
    }
    let mut ids: Vec<usize> = (0..num_domains).collect();
    ids.shuffle(&mut rng_from_seed(seed));
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    Ok(DomainSplit {
        source: sorted(&ids[..n_source]),
        validation: sorted(&ids[n_source..n_source + n_val]),
        target: sorted(&ids[n_source + n_val..needed]),
    })
}
