//! Contrastive objectives and cross-domain pair selection.
//!
//! All losses share one shape. For an anchor `i` in one view, with
//! `e(x, y) = exp(cos(x, y) / τ)`:
//!
//! ```text
//! den_i = e(a_i, b_i) + Σ_{j≠i} w_ij e(a_i, b_j) + Σ_{j≠i} w'_ij e(a_i, a_j)
//! num_i = e(a_i, b_i) + Σ_{j≠i} m_ij [e(a_i, b_j) + e(a_i, a_j)]
//! loss_i = log den_i - log num_i
//! ```
//!
//! Plain InfoNCE has `w = w' = 1` and `m = 0`. Promotion sets `m` to the
//! selected cross-domain pairs; the removal ablation zeroes random
//! cross-domain entries of `w` and `w'`. The reported loss averages anchors
//! of both views, with view `b` using transposed masks.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, Matrix, Tape, Tensor};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObjectiveError {
    #[error("similarity inputs differ in shape: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Softmax temperature.
    pub tau: f64,
    /// Fraction of cross-domain entries promoted per epoch.
    pub nap_ratio: f64,
    /// Epochs of plain InfoNCE before promotion starts.
    pub warmup_epochs: usize,
    /// Probability of deleting each cross-domain negative (ablation only).
    pub cdp_removal_ratio: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            nap_ratio: 0.01,
            warmup_epochs: 50,
            cdp_removal_ratio: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(ObjectiveError::InvalidConfig(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        for (name, v) in [
            ("nap_ratio", self.nap_ratio),
            ("cdp_removal_ratio", self.cdp_removal_ratio),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ObjectiveError::InvalidConfig(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Cross-domain pairs promoted to positives at one epoch.
///
/// `pairs[k] = (i, j)` means anchor `i` of the first view treats node `j` of
/// both views as positive. Pairs are in selection order (most similar first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMask {
    pub pairs: Vec<(usize, usize)>,
    /// Between-view cosine similarity of each pair when it was selected.
    pub similarities: Vec<f64>,
    pub epoch: usize,
    /// Requested count before clamping to the number of cross-domain pairs.
    pub r: usize,
}

impl SimilarityMask {
    pub fn empty(epoch: usize) -> Self {
        Self {
            pairs: Vec::new(),
            similarities: Vec::new(),
            epoch,
            r: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Dense 0/1 indicator of the selected pairs.
    pub fn to_matrix(&self, n: usize) -> Matrix {
        let mut m = Array2::zeros((n, n));
        for &(i, j) in &self.pairs {
            m[[i, j]] = 1.0;
        }
        m
    }

    /// Same pairs with roles of the two views swapped.
    pub fn transposed(&self) -> Self {
        Self {
            pairs: self.pairs.iter().map(|&(i, j)| (j, i)).collect(),
            ..self.clone()
        }
    }
}

/// Unit-normalizes rows; all-zero rows stay zero.
fn normalize_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    out
}

/// `B[i][j] = cos(a_i, b_j)`. A zero row has similarity 0 to everything.
pub fn cosine_similarity_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix, ObjectiveError> {
    if a.dim() != b.dim() {
        return Err(ObjectiveError::ShapeMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let s = normalize_rows(a).dot(&normalize_rows(b).t());
    Ok(s.mapv(|v| v.clamp(-1.0, 1.0)))
}

/// Sets every entry whose row and column share a domain to zero, diagonal
/// included.
pub fn zero_same_domain(b: &Matrix, domains: &[usize]) -> Matrix {
    let mut out = b.clone();
    for ((i, j), v) in out.indexed_iter_mut() {
        if domains[i] == domains[j] {
            *v = 0.0;
        }
    }
    out
}

/// Number of ordered pairs `(i, j)` with `d_i != d_j`.
pub fn cross_domain_count(domains: &[usize]) -> usize {
    let n = domains.len();
    let mut sizes = std::collections::BTreeMap::<usize, usize>::new();
    for &d in domains {
        *sizes.entry(d).or_default() += 1;
    }
    n * n - sizes.values().map(|s| s * s).sum::<usize>()
}

/// `r = ⌈ρ C⌉`, clamped to `C`.
///
/// The product is rounded with a small slack first so that e.g.
/// `0.01 * 43200` yields 432 rather than 433 from representation error.
pub fn promoted_count(ratio: f64, cross_pairs: usize) -> usize {
    let raw = ratio * cross_pairs as f64;
    let r = (raw - 1e-9 * raw.abs().max(1.0)).ceil().max(0.0) as usize;
    r.min(cross_pairs)
}

/// The `r` largest cross-domain entries of `b`.
///
/// Candidates are exactly the positions with `d_i != d_j`; zeroed
/// same-domain entries are never chosen however large `r` is. Ties go to
/// the lexicographically smaller `(i, j)`.
pub fn select_top_r(b: &Matrix, domains: &[usize], r: usize, epoch: usize) -> SimilarityMask {
    let n = domains.len();
    assert_eq!(b.dim(), (n, n), "similarity matrix must be N x N");
    let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(cross_domain_count(domains));
    for i in 0..n {
        for j in 0..n {
            if domains[i] != domains[j] {
                candidates.push((b[[i, j]], i, j));
            }
        }
    }
    let order = |x: &(f64, usize, usize), y: &(f64, usize, usize)| {
        y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2)))
    };
    let take = r.min(candidates.len());
    if take > 0 && take < candidates.len() {
        candidates.select_nth_unstable_by(take - 1, order);
        candidates.truncate(take);
    }
    candidates.sort_unstable_by(order);
    candidates.truncate(take);
    SimilarityMask {
        pairs: candidates.iter().map(|&(_, i, j)| (i, j)).collect(),
        similarities: candidates.iter().map(|&(s, _, _)| s).collect(),
        epoch,
        r,
    }
}

/// Weights applied to the negative terms of each anchor's denominator.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeWeights {
    /// Anchor `a_i` against `b_j`.
    pub inter: Matrix,
    /// Anchor `a_i` against `a_j`.
    pub intra_a: Matrix,
    /// Anchor `b_i` against `b_j`.
    pub intra_b: Matrix,
}

/// Keep/remove indicators for the pair-removal ablation.
///
/// Every cross-domain entry of the three weight matrices is dropped
/// independently with probability `q`; same-domain entries are kept and
/// the diagonal is always zero (it is the positive, not a negative). The
/// inter-view matrix is shared by both views through its transpose, since
/// `(a_i, b_j)` and `(b_j, a_i)` are the same pair.
pub fn removal_weights(domains: &[usize], q: f64, seed: u64) -> NegativeWeights {
    let n = domains.len();
    let mut rng = rng_from_seed(seed);
    let mut draw = || {
        Array2::from_shape_fn((n, n), |(i, j)| {
            if i == j {
                0.0
            } else if domains[i] == domains[j] || rng.random::<f64>() >= q {
                1.0
            } else {
                0.0
            }
        })
    };
    let inter = draw();
    let intra_a = draw();
    let intra_b = draw();
    NegativeWeights {
        inter,
        intra_a,
        intra_b,
    }
}

fn off_diagonal(n: usize) -> Matrix {
    Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { 1.0 })
}

/// Mean of `log den - log num` over anchors of one view.
fn anchor_loss(
    tape: &mut Tape,
    cross: Tensor,
    same: Tensor,
    promoted: Option<&Matrix>,
    inter_weights: Matrix,
    intra_weights: Matrix,
) -> autodiff::Result<Tensor> {
    let n = tape.shape(cross).0;
    let pos = tape.mul_const(cross, Array2::eye(n))?;
    let pos = tape.row_sum(pos)?;
    let inter = tape.mul_const(cross, inter_weights)?;
    let inter = tape.row_sum(inter)?;
    let intra = tape.mul_const(same, intra_weights)?;
    let intra = tape.row_sum(intra)?;
    let den = tape.add(pos, inter)?;
    let den = tape.add(den, intra)?;

    let num = match promoted {
        Some(m) => {
            let pc = tape.mul_const(cross, m.clone())?;
            let pc = tape.row_sum(pc)?;
            let ps = tape.mul_const(same, m.clone())?;
            let ps = tape.row_sum(ps)?;
            let num = tape.add(pos, pc)?;
            tape.add(num, ps)?
        }
        None => pos,
    };
    let log_den = tape.log(den)?;
    let log_num = tape.log(num)?;
    let per_anchor = tape.sub(log_den, log_num)?;
    tape.mean(per_anchor)
}

fn symmetric_loss(
    tape: &mut Tape,
    h_alpha: Tensor,
    h_beta: Tensor,
    tau: f64,
    mask: Option<&SimilarityMask>,
    weights: Option<NegativeWeights>,
) -> autodiff::Result<Tensor> {
    let n = tape.shape(h_alpha).0;
    let za = tape.row_l2_normalize(h_alpha)?;
    let zb = tape.row_l2_normalize(h_beta)?;
    let za_t = tape.transpose(za)?;
    let zb_t = tape.transpose(zb)?;

    let exp_sim = |tape: &mut Tape, x: Tensor, y_t: Tensor| -> autodiff::Result<Tensor> {
        let s = tape.matmul(x, y_t)?;
        let s = tape.scale(s, 1.0 / tau)?;
        tape.exp(s)
    };
    let e_ab = exp_sim(tape, za, zb_t)?;
    let e_aa = exp_sim(tape, za, za_t)?;
    let e_bb = exp_sim(tape, zb, zb_t)?;
    let e_ba = tape.transpose(e_ab)?;

    let promoted = mask.filter(|m| !m.is_empty()).map(|m| m.to_matrix(n));
    let promoted_t = promoted.as_ref().map(|m| m.t().to_owned());
    let weights = weights.unwrap_or_else(|| {
        let off = off_diagonal(n);
        NegativeWeights {
            inter: off.clone(),
            intra_a: off.clone(),
            intra_b: off,
        }
    });
    let inter_t = weights.inter.t().to_owned();

    let loss_a = anchor_loss(tape, e_ab, e_aa, promoted.as_ref(), weights.inter, weights.intra_a)?;
    let loss_b = anchor_loss(tape, e_ba, e_bb, promoted_t.as_ref(), inter_t, weights.intra_b)?;
    let total = tape.add(loss_a, loss_b)?;
    tape.scale(total, 0.5)
}

/// Symmetric InfoNCE with the masked pairs counted as positives. An empty
/// mask gives plain InfoNCE.
pub fn contrastive_loss(
    tape: &mut Tape,
    h_alpha: Tensor,
    h_beta: Tensor,
    mask: &SimilarityMask,
    tau: f64,
) -> autodiff::Result<Tensor> {
    symmetric_loss(tape, h_alpha, h_beta, tau, Some(mask), None)
}

/// Plain symmetric InfoNCE.
pub fn warmup_loss(
    tape: &mut Tape,
    h_alpha: Tensor,
    h_beta: Tensor,
    tau: f64,
) -> autodiff::Result<Tensor> {
    symmetric_loss(tape, h_alpha, h_beta, tau, None, None)
}

/// InfoNCE with each cross-domain negative deleted with probability `q`.
/// `q = 0` is exactly [`warmup_loss`].
pub fn cdp_removal_loss(
    tape: &mut Tape,
    h_alpha: Tensor,
    h_beta: Tensor,
    q: f64,
    seed: u64,
    tau: f64,
    domains: &[usize],
) -> autodiff::Result<Tensor> {
    if q == 0.0 {
        return warmup_loss(tape, h_alpha, h_beta, tau);
    }
    let weights = removal_weights(domains, q, seed);
    symmetric_loss(tape, h_alpha, h_beta, tau, None, Some(weights))
}
