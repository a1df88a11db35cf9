//! Domain discrepancy, pair-similarity reports, the linear probe and
//! embedding export.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Matrix;
use crate::objective::SimilarityMask;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("discrepancy needs at least two domains, found {0}")]
    FewerThanTwoDomains(usize),
    #[error("no {0} pairs to average")]
    EmptySet(&'static str),
    #[error("training split contains a single class")]
    DegenerateLabels,
    #[error("{what}: {rows} rows but {labels} labels")]
    LengthMismatch {
        what: &'static str,
        rows: usize,
        labels: usize,
    },
    #[error("embedding widths differ: {0} vs {1}")]
    WidthMismatch(usize, usize),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Mean Euclidean distance between all pairs of domain centroids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PddReport {
    pub value: f64,
    /// `((p, q), ‖c_p − c_q‖)` for every `p < q`, in lexicographic order.
    pub pairs: Vec<((usize, usize), f64)>,
    /// Domain ids present, ascending; row `k` of `centers` belongs to
    /// `domain_ids[k]`.
    pub domain_ids: Vec<usize>,
    pub centers: Matrix,
}

impl PddReport {
    /// `p,q,distance` rows followed by a `pdd,<value>` summary line.
    pub fn to_table(&self) -> String {
        let mut out = String::from("p,q,distance\n");
        for ((p, q), d) in &self.pairs {
            out.push_str(&format!("{p},{q},{d}\n"));
        }
        out.push_str(&format!("pdd,{}\n", self.value));
        out
    }
}

pub fn pdd(h: &Matrix, domains: &[usize]) -> Result<PddReport, MetricsError> {
    if h.nrows() != domains.len() {
        return Err(MetricsError::LengthMismatch {
            what: "pdd",
            rows: h.nrows(),
            labels: domains.len(),
        });
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &d) in domains.iter().enumerate() {
        members.entry(d).or_default().push(i);
    }
    if members.len() < 2 {
        return Err(MetricsError::FewerThanTwoDomains(members.len()));
    }

    let domain_ids: Vec<usize> = members.keys().copied().collect();
    let mut centers = Array2::zeros((domain_ids.len(), h.ncols()));
    for (k, rows) in members.values().enumerate() {
        centers
            .row_mut(k)
            .assign(&h.select(Axis(0), rows).mean_axis(Axis(0)).expect("non-empty domain"));
    }

    let mut pairs = Vec::new();
    for p in 0..domain_ids.len() {
        for q in p + 1..domain_ids.len() {
            let diff = &centers.row(p) - &centers.row(q);
            pairs.push(((domain_ids[p], domain_ids[q]), diff.dot(&diff).sqrt()));
        }
    }
    let value = pairs.iter().map(|(_, d)| d).sum::<f64>() / pairs.len() as f64;
    Ok(PddReport {
        value,
        pairs,
        domain_ids,
        centers,
    })
}

/// Mean pairwise cosine similarity of cross-domain pairs, split by whether
/// the pair was promoted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdpSimilarityReport {
    pub space: String,
    pub all_mean: f64,
    pub all_count: usize,
    /// `None` when nothing was promoted.
    pub transformed_mean: Option<f64>,
    pub transformed_count: usize,
    /// `None` when every pair was promoted.
    pub remaining_mean: Option<f64>,
    pub remaining_count: usize,
}

pub fn cdp_similarity_report(
    vectors: &Matrix,
    domains: &[usize],
    mask: &SimilarityMask,
    space: &str,
) -> Result<CdpSimilarityReport, MetricsError> {
    let n = domains.len();
    if vectors.nrows() != n {
        return Err(MetricsError::LengthMismatch {
            what: "cdp_similarity_report",
            rows: vectors.nrows(),
            labels: n,
        });
    }
    let sim = crate::objective::cosine_similarity_matrix(vectors, vectors)
        .expect("same matrix on both sides");
    let selected = mask.to_matrix(n);

    let (mut all, mut picked, mut rest) = ((0.0, 0usize), (0.0, 0usize), (0.0, 0usize));
    for i in 0..n {
        for j in 0..n {
            if domains[i] == domains[j] {
                continue;
            }
            let s = sim[[i, j]];
            all.0 += s;
            all.1 += 1;
            let bucket = if selected[[i, j]] != 0.0 { &mut picked } else { &mut rest };
            bucket.0 += s;
            bucket.1 += 1;
        }
    }
    if all.1 == 0 {
        return Err(MetricsError::EmptySet("cross-domain"));
    }
    let mean = |(s, c): (f64, usize)| (c > 0).then(|| s / c as f64);
    Ok(CdpSimilarityReport {
        space: space.to_string(),
        all_mean: all.0 / all.1 as f64,
        all_count: all.1,
        transformed_mean: mean(picked),
        transformed_count: picked.1,
        remaining_mean: mean(rest),
        remaining_count: rest.1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.1,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

/// Multinomial logistic regression on frozen embeddings.
///
/// Inputs are standardized per dimension with statistics of the training
/// split, then the softmax weights are fit by full-batch gradient descent
/// with an L2 penalty on the weights (not the bias).
#[derive(Debug, Clone)]
pub struct LinearProbe {
    mean: Array1<f64>,
    scale: Array1<f64>,
    weights: Matrix,
    bias: Array1<f64>,
}

fn softmax_rows(logits: &mut Matrix) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
}

impl LinearProbe {
    pub fn fit(
        emb: &Matrix,
        labels: &[usize],
        num_classes: usize,
        cfg: &ProbeConfig,
    ) -> Result<Self, MetricsError> {
        if emb.nrows() != labels.len() {
            return Err(MetricsError::LengthMismatch {
                what: "probe training split",
                rows: emb.nrows(),
                labels: labels.len(),
            });
        }
        let first = labels.first().copied();
        if first.is_none() || labels.iter().all(|&y| Some(y) == first) {
            return Err(MetricsError::DegenerateLabels);
        }
        let k = num_classes.max(labels.iter().max().unwrap() + 1);
        let (n, d) = emb.dim();

        let mean = emb.mean_axis(Axis(0)).expect("non-empty split");
        let scale = emb.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { 1.0 / s } else { 1.0 });
        let x = (emb - &mean) * &scale;

        let mut onehot = Array2::<f64>::zeros((n, k));
        for (i, &y) in labels.iter().enumerate() {
            onehot[[i, y]] = 1.0;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        let mut weights = Array2::from_shape_simple_fn((d, k), || normal.sample(&mut rng));
        let mut bias = Array1::<f64>::zeros(k);

        for _ in 0..cfg.steps {
            let mut probs = x.dot(&weights) + &bias;
            softmax_rows(&mut probs);
            let err = (probs - &onehot) / n as f64;
            let grad_w = x.t().dot(&err) + &weights * cfg.weight_decay;
            let grad_b = err.sum_axis(Axis(0));
            weights.scaled_add(-cfg.lr, &grad_w);
            bias.scaled_add(-cfg.lr, &grad_b);
        }
        Ok(Self {
            mean,
            scale,
            weights,
            bias,
        })
    }

    pub fn predict(&self, emb: &Matrix) -> Vec<usize> {
        let x = (emb - &self.mean) * &self.scale;
        let logits = x.dot(&self.weights) + &self.bias;
        logits
            .rows()
            .into_iter()
            .map(|row| {
                // First maximum wins.
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    /// Top-1 accuracy; an empty split scores 0.
    pub fn accuracy(&self, emb: &Matrix, labels: &[usize]) -> Result<f64, MetricsError> {
        if emb.nrows() != labels.len() {
            return Err(MetricsError::LengthMismatch {
                what: "probe evaluation split",
                rows: emb.nrows(),
                labels: labels.len(),
            });
        }
        if emb.ncols() != self.weights.nrows() {
            return Err(MetricsError::WidthMismatch(emb.ncols(), self.weights.nrows()));
        }
        if labels.is_empty() {
            return Ok(0.0);
        }
        let hits = self
            .predict(emb)
            .iter()
            .zip(labels)
            .filter(|(p, y)| p == y)
            .count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

/// Fits a probe on the training split and scores the test split.
pub fn linear_probe(
    train_emb: &Matrix,
    train_labels: &[usize],
    test_emb: &Matrix,
    test_labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<f64, MetricsError> {
    let k = train_labels
        .iter()
        .chain(test_labels)
        .max()
        .map_or(0, |m| m + 1);
    LinearProbe::fit(train_emb, train_labels, k, cfg)?.accuracy(test_emb, test_labels)
}

/// Rows read back from an embedding export.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub node_ids: Vec<usize>,
    pub domains: Vec<usize>,
    pub labels: Vec<usize>,
    pub embeddings: Matrix,
}

/// Writes `node_id,domain,label,dim_0,..` with one row per node. Values use
/// the shortest decimal that parses back to the same `f64`.
pub fn export_embeddings(
    h: &Matrix,
    domains: &[usize],
    labels: &[usize],
    path: &Path,
) -> Result<(), MetricsError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_embeddings(&mut w, h, domains, labels)?;
    w.flush()?;
    Ok(())
}

pub fn write_embeddings(
    w: &mut impl Write,
    h: &Matrix,
    domains: &[usize],
    labels: &[usize],
) -> Result<(), MetricsError> {
    if h.nrows() != domains.len() || h.nrows() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            what: "export_embeddings",
            rows: h.nrows(),
            labels: domains.len().min(labels.len()),
        });
    }
    write!(w, "node_id,domain,label")?;
    for k in 0..h.ncols() {
        write!(w, ",dim_{k}")?;
    }
    writeln!(w)?;
    for (i, row) in h.rows().into_iter().enumerate() {
        write!(w, "{i},{},{}", domains[i], labels[i])?;
        for v in row {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingTable, MetricsError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().ok_or(MetricsError::Parse {
        line: 1,
        message: "empty file".into(),
    })??;
    let width = header.split(',').count().checked_sub(3).ok_or(MetricsError::Parse {
        line: 1,
        message: "header needs node_id,domain,label".into(),
    })?;

    let (mut node_ids, mut domains, mut labels, mut values) = (vec![], vec![], vec![], vec![]);
    for (k, line) in lines.enumerate() {
        let line = line?;
        let lineno = k + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width + 3 {
            return Err(MetricsError::Parse {
                line: lineno,
                message: format!("expected {} fields, found {}", width + 3, fields.len()),
            });
        }
        let int = |s: &str| {
            s.parse::<usize>().map_err(|e| MetricsError::Parse {
                line: lineno,
                message: format!("{s:?}: {e}"),
            })
        };
        node_ids.push(int(fields[0])?);
        domains.push(int(fields[1])?);
        labels.push(int(fields[2])?);
        for f in &fields[3..] {
            values.push(f.parse::<f64>().map_err(|e| MetricsError::Parse {
                line: lineno,
                message: format!("{f:?}: {e}"),
            })?);
        }
    }
    let embeddings = Array2::from_shape_vec((node_ids.len(), width), values)
        .expect("row widths checked while parsing");
    Ok(EmbeddingTable {
        node_ids,
        domains,
        labels,
        embeddings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn coincident_centers() {
        let h = Array2::from_elem((4, 3), 1.5);
        assert_eq!(pdd(&h, &[0, 1, 1, 2]).unwrap().value, 0.0);
    }

    #[test]
    fn three_four_five() {
        let h = array![[0.0, 0.0], [3.0, 4.0]];
        let r = pdd(&h, &[0, 1]).unwrap();
        assert_eq!(r.value, 5.0);
        assert_eq!(r.pairs, vec![((0, 1), 5.0)]);
    }

    #[test]
    fn pdd_needs_two_domains() {
        let h = Array2::zeros((3, 2));
        assert!(matches!(pdd(&h, &[4, 4, 4]), Err(MetricsError::FewerThanTwoDomains(1))));
    }

    #[test]
    fn pdd_table_format() {
        let h = array![[0.0], [1.0], [3.0]];
        let table = pdd(&h, &[0, 1, 2]).unwrap().to_table();
        let expected = "p,q,distance\n0,1,1\n0,2,3\n1,2,2\npdd,2\n";
        assert_eq!(table, expected);
    }

    #[test]
    fn full_mask_report() {
        let v = array![[1.0, 0.2], [0.3, 1.0], [-1.0, 0.5]];
        let domains = [0, 1, 1];
        let mut mask = SimilarityMask::empty(0);
        mask.pairs = vec![(0, 1), (0, 2), (1, 0), (2, 0)];
        let r = cdp_similarity_report(&v, &domains, &mask, "embedding").unwrap();
        assert_eq!(r.transformed_mean, Some(r.all_mean));
        assert_eq!(r.remaining_mean, None);
        assert_eq!(r.all_count, 4);
    }

    #[test]
    fn orthogonal_embeddings_report_zero() {
        let v: Matrix = Array2::eye(4);
        let mut mask = SimilarityMask::empty(0);
        mask.pairs = vec![(0, 2)];
        let r = cdp_similarity_report(&v, &[0, 0, 1, 1], &mask, "x").unwrap();
        assert_eq!(r.all_mean, 0.0);
        assert_eq!(r.transformed_mean, Some(0.0));
        assert_eq!(r.remaining_mean, Some(0.0));
        let empty = cdp_similarity_report(&v, &[0, 0, 1, 1], &SimilarityMask::empty(0), "x").unwrap();
        assert_eq!(empty.transformed_mean, None);
    }

    #[test]
    fn no_cross_domain_pairs() {
        let v: Matrix = Array2::eye(2);
        assert!(matches!(
            cdp_similarity_report(&v, &[0, 0], &SimilarityMask::empty(0), "x"),
            Err(MetricsError::EmptySet(_))
        ));
    }

    #[test]
    fn probe_separable_by_sign() {
        let train = array![[-2.0, 0.3], [-1.0, -0.2], [1.5, 0.1], [2.5, -0.4]];
        let test = array![[-3.0, 0.0], [0.7, 1.0], [-0.4, -1.0], [4.0, 0.2]];
        let acc = linear_probe(&train, &[0, 0, 1, 1], &test, &[0, 1, 0, 1], &ProbeConfig::default())
            .unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn probe_memorizes_tiny_split() {
        let x = array![[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]];
        let y = [0, 1, 2];
        assert_eq!(linear_probe(&x, &y, &x, &y, &ProbeConfig::default()).unwrap(), 1.0);
    }

    #[test]
    fn probe_rejects_single_class() {
        let x = array![[1.0], [2.0]];
        assert!(matches!(
            linear_probe(&x, &[1, 1], &x, &[0, 1], &ProbeConfig::default()),
            Err(MetricsError::DegenerateLabels)
        ));
    }

    #[test]
    fn export_single_row() {
        let mut buf = Vec::new();
        write_embeddings(&mut buf, &array![[0.1, -2.0]], &[3], &[1]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "node_id,domain,label,dim_0,dim_1\n0,3,1,0.1,-2\n"
        );
    }
}
