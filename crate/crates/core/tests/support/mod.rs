//! Independent reference implementations shared by the integration and
//! acceptance tests. Everything here is written with plain loops over
//! scalars so that it shares no code path with the library.

#![allow(dead_code)]

use std::sync::Arc;

use nap::autodiff::{gcn_forward, Matrix, Tape};
use nap::graph::{Graph, NormalizedAdjacency};
use nap::objective::{
    cdp_removal_loss, contrastive_loss, cosine_similarity_matrix, cross_domain_count,
    promoted_count, select_top_r, warmup_loss, zero_same_domain, SimilarityMask,
};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Array2::from_shape_simple_fn((rows, cols), || {
        // Box-Muller keeps this independent of the library's sampling.
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    })
}

/// `n` domain ids over `0..p` with every domain used at least once.
pub fn random_domains(n: usize, p: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    assert!(n >= p);
    let mut d: Vec<usize> = (0..n)
        .map(|i| if i < p { i } else { rng.random_range(0..p) })
        .collect();
    d.shuffle(rng);
    d
}

pub fn random_edges(n: usize, p_edge: f64, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < p_edge {
                edges.push((u, v));
            }
        }
    }
    edges
}

pub fn random_graph(n: usize, f: usize, p: usize, k: usize, rng: &mut ChaCha8Rng) -> Graph {
    let x = normal_matrix(n, f, rng);
    let edges = random_edges(n, 0.3, rng);
    let domains = random_domains(n, p, rng);
    let labels = (0..n)
        .map(|i| if i < k { i } else { rng.random_range(0..k) })
        .collect();
    Graph::new(x, edges, domains, labels, p, k).unwrap()
}

pub fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut nx = 0.0;
    let mut ny = 0.0;
    for k in 0..x.len() {
        dot += x[k] * y[k];
        nx += x[k] * x[k];
        ny += y[k] * y[k];
    }
    if nx == 0.0 || ny == 0.0 {
        0.0
    } else {
        dot / (nx.sqrt() * ny.sqrt())
    }
}

fn row(m: &Matrix, i: usize) -> Vec<f64> {
    m.row(i).to_vec()
}

pub fn cosine_oracle(a: &Matrix, b: &Matrix) -> Matrix {
    let n = a.nrows();
    let mut out = Array2::zeros((n, b.nrows()));
    for i in 0..n {
        for j in 0..b.nrows() {
            out[[i, j]] = cosine(&row(a, i), &row(b, j));
        }
    }
    out
}

/// Plain InfoNCE, averaged over anchors of both views:
/// `-log(e(a_i,b_i) / (e(a_i,b_i) + Σ_{j≠i} e(a_i,b_j) + Σ_{j≠i} e(a_i,a_j)))`.
pub fn infonce_oracle(ha: &Matrix, hb: &Matrix, tau: f64) -> f64 {
    let n = ha.nrows();
    let e = |x: &[f64], y: &[f64]| (cosine(x, y) / tau).exp();
    let one_side = |u: &Matrix, v: &Matrix| {
        let mut total = 0.0;
        for i in 0..n {
            let ui = row(u, i);
            let pos = e(&ui, &row(v, i));
            let mut negatives = 0.0;
            for j in 0..n {
                if j != i {
                    negatives += e(&ui, &row(v, j)) + e(&ui, &row(u, j));
                }
            }
            total += -(pos / (pos + negatives)).ln();
        }
        total / n as f64
    };
    0.5 * (one_side(ha, hb) + one_side(hb, ha))
}

/// Weights applied to negatives and the promoted-pair indicator for one
/// evaluation of the general single-fraction loss.
pub struct LossTerms<'a> {
    pub mask: &'a Matrix,
    pub inter: &'a Matrix,
    pub intra_a: &'a Matrix,
    pub intra_b: &'a Matrix,
}

/// The single-fraction loss with arbitrary promotion mask and negative
/// weights, evaluated anchor by anchor.
pub fn general_loss_oracle(ha: &Matrix, hb: &Matrix, tau: f64, t: &LossTerms) -> f64 {
    let n = ha.nrows();
    let e = |x: &[f64], y: &[f64]| (cosine(x, y) / tau).exp();
    // `cross_w(i, j)` weights anchor i against view-other node j.
    let side = |u: &Matrix,
                v: &Matrix,
                mask: &dyn Fn(usize, usize) -> f64,
                cross_w: &dyn Fn(usize, usize) -> f64,
                same_w: &dyn Fn(usize, usize) -> f64| {
        let mut total = 0.0;
        for i in 0..n {
            let ui = row(u, i);
            let pos = e(&ui, &row(v, i));
            let mut den = pos;
            let mut num = pos;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let c = e(&ui, &row(v, j));
                let s = e(&ui, &row(u, j));
                den += cross_w(i, j) * c + same_w(i, j) * s;
                num += mask(i, j) * (c + s);
            }
            total += den.ln() - num.ln();
        }
        total / n as f64
    };
    let la = side(
        ha,
        hb,
        &|i, j| t.mask[[i, j]],
        &|i, j| t.inter[[i, j]],
        &|i, j| t.intra_a[[i, j]],
    );
    let lb = side(
        hb,
        ha,
        &|i, j| t.mask[[j, i]],
        &|i, j| t.inter[[j, i]],
        &|i, j| t.intra_b[[i, j]],
    );
    0.5 * (la + lb)
}

pub fn ones_off_diagonal(n: usize) -> Matrix {
    Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { 1.0 })
}

pub fn pdd_oracle(h: &Matrix, domains: &[usize]) -> f64 {
    let mut ids: Vec<usize> = domains.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let d = h.ncols();
    let mut centers = Vec::new();
    for &p in &ids {
        let mut c = vec![0.0; d];
        let mut count = 0.0;
        for i in 0..h.nrows() {
            if domains[i] == p {
                for k in 0..d {
                    c[k] += h[[i, k]];
                }
                count += 1.0;
            }
        }
        for v in &mut c {
            *v /= count;
        }
        centers.push(c);
    }
    let mut total = 0.0;
    let mut pairs = 0.0;
    for p in 0..centers.len() {
        for q in p + 1..centers.len() {
            let mut s = 0.0;
            for k in 0..d {
                s += (centers[p][k] - centers[q][k]).powi(2);
            }
            total += s.sqrt();
            pairs += 1.0;
        }
    }
    total / pairs
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` by dense matrix products.
pub fn dense_adjacency_oracle(n: usize, edges: &[(usize, usize)]) -> Matrix {
    let mut a = Array2::<f64>::eye(n);
    for &(u, v) in edges {
        a[[u, v]] = 1.0;
        a[[v, u]] = 1.0;
    }
    let mut d_inv_sqrt = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let deg: f64 = a.row(i).sum();
        d_inv_sqrt[[i, i]] = 1.0 / deg.sqrt();
    }
    d_inv_sqrt.dot(&a).dot(&d_inv_sqrt)
}

pub fn gcn_oracle(adj: &Matrix, x: &Matrix, weights: &[Matrix]) -> Matrix {
    let mut h = x.clone();
    for (l, w) in weights.iter().enumerate() {
        h = adj.dot(&h).dot(w);
        if l + 1 < weights.len() {
            h.mapv_inplace(|v| v.max(0.0));
        }
    }
    h
}

/// The `r`-subset of cross-domain positions with the largest total score,
/// found by enumerating every subset. Among equal totals the subset whose
/// sorted position list is lexicographically smallest wins. `scores` are
/// integers so that ties are exact.
pub fn top_r_oracle(scores: &Array2<i64>, domains: &[usize]) -> Vec<Vec<(usize, usize)>> {
    let n = domains.len();
    let mut positions = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if domains[i] != domains[j] {
                positions.push((i, j));
            }
        }
    }
    let c = positions.len();
    assert!(c <= 24, "enumeration limited to small instances");
    let mut best: Vec<Option<(i64, u32)>> = vec![None; c + 1];
    for subset in 0u32..(1u32 << c) {
        let r = subset.count_ones() as usize;
        let mut total = 0i64;
        for (k, &(i, j)) in positions.iter().enumerate() {
            if subset >> k & 1 == 1 {
                total += scores[[i, j]];
            }
        }
        let better = match best[r] {
            None => true,
            Some((bt, bs)) => {
                // Lowest differing position decides lexicographic order.
                total > bt || (total == bt && subset & (1 << (subset ^ bs).trailing_zeros()) != 0)
            }
        };
        if better {
            best[r] = Some((total, subset));
        }
    }
    best.into_iter()
        .map(|b| {
            let (_, s) = b.expect("every size is reachable");
            positions
                .iter()
                .enumerate()
                .filter(|(k, _)| s >> k & 1 == 1)
                .map(|(_, &p)| p)
                .collect()
        })
        .collect()
}

/// Which loss a gradient check exercises.
#[derive(Debug, Clone, Copy)]
pub enum LossKind {
    Warmup,
    Nap { rho: f64 },
    Removal { q: f64, seed: u64 },
}

/// The promoted pairs for `Nap` at the given embeddings, mirroring how the
/// trainer picks them: cosine of the two views, same-domain entries zeroed,
/// top `⌈ρC⌉`.
pub fn mask_for(kind: LossKind, ha: &Matrix, hb: &Matrix, domains: &[usize]) -> SimilarityMask {
    match kind {
        LossKind::Nap { rho } => {
            let b = zero_same_domain(&cosine_similarity_matrix(ha, hb).unwrap(), domains);
            let r = promoted_count(rho, cross_domain_count(domains));
            select_top_r(&b, domains, r, 0)
        }
        _ => SimilarityMask::empty(0),
    }
}

fn record_loss(
    tape: &mut Tape,
    kind: LossKind,
    za: nap::Tensor,
    zb: nap::Tensor,
    mask: &SimilarityMask,
    tau: f64,
    domains: &[usize],
) -> nap::Tensor {
    match kind {
        LossKind::Warmup => warmup_loss(tape, za, zb, tau),
        LossKind::Nap { .. } => contrastive_loss(tape, za, zb, mask, tau),
        LossKind::Removal { q, seed } => cdp_removal_loss(tape, za, zb, q, seed, tau, domains),
    }
    .unwrap()
}

/// Loss value and its gradients with respect to both embedding matrices.
pub fn loss_and_grads(
    kind: LossKind,
    ha: &Matrix,
    hb: &Matrix,
    mask: &SimilarityMask,
    tau: f64,
    domains: &[usize],
) -> (f64, Matrix, Matrix) {
    let mut tape = Tape::new();
    let a = tape.param(ha.clone());
    let b = tape.param(hb.clone());
    let loss = record_loss(&mut tape, kind, a, b, mask, tau, domains);
    let grads = tape.backward(loss).unwrap();
    (
        tape.scalar(loss),
        grads.get(a).unwrap().clone(),
        grads.get(b).unwrap().clone(),
    )
}

pub fn loss_value(
    kind: LossKind,
    ha: &Matrix,
    hb: &Matrix,
    mask: &SimilarityMask,
    tau: f64,
    domains: &[usize],
) -> f64 {
    let mut tape = Tape::new();
    let a = tape.constant(ha.clone());
    let b = tape.constant(hb.clone());
    let loss = record_loss(&mut tape, kind, a, b, mask, tau, domains);
    tape.scalar(loss)
}

/// Two-view GCN pipeline: value and gradients for every weight matrix.
pub fn pipeline_loss_and_grads(
    kind: LossKind,
    views: [(&Arc<NormalizedAdjacency>, &Matrix); 2],
    weights: &[Matrix],
    mask: &SimilarityMask,
    tau: f64,
    domains: &[usize],
) -> (f64, Vec<Matrix>) {
    let mut tape = Tape::new();
    let ws: Vec<_> = weights.iter().map(|w| tape.param(w.clone())).collect();
    let xa = tape.constant(views[0].1.clone());
    let xb = tape.constant(views[1].1.clone());
    let za = gcn_forward(&mut tape, views[0].0, xa, &ws).unwrap();
    let zb = gcn_forward(&mut tape, views[1].0, xb, &ws).unwrap();
    let loss = record_loss(&mut tape, kind, za, zb, mask, tau, domains);
    let grads = tape.backward(loss).unwrap();
    (
        tape.scalar(loss),
        ws.iter().map(|&w| grads.get(w).unwrap().clone()).collect(),
    )
}

pub fn pipeline_embeddings(
    views: [(&Arc<NormalizedAdjacency>, &Matrix); 2],
    weights: &[Matrix],
) -> (Matrix, Matrix) {
    let mut tape = Tape::new();
    let ws: Vec<_> = weights.iter().map(|w| tape.constant(w.clone())).collect();
    let xa = tape.constant(views[0].1.clone());
    let xb = tape.constant(views[1].1.clone());
    let za = gcn_forward(&mut tape, views[0].0, xa, &ws).unwrap();
    let zb = gcn_forward(&mut tape, views[1].0, xb, &ws).unwrap();
    (tape.value(za).clone(), tape.value(zb).clone())
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_grad(f: impl Fn(&Matrix) -> f64, x: &Matrix, h: f64) -> Matrix {
    let mut g = Array2::zeros(x.dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let (i, j) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[i, j]];
        probe[[i, j]] = orig + h;
        let up = f(&probe);
        probe[[i, j]] = orig - h;
        let down = f(&probe);
        probe[[i, j]] = orig;
        g[[i, j]] = (up - down) / (2.0 * h);
    }
    g
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both vanish.
pub fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
    let norm = |m: &Matrix| m.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&(a - b)) / scale
    }
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
