mod support;

use nap::autodiff::{glorot_uniform, EncoderParams, Matrix, Parameter, Tape};
use nap::graph::{normalized_adjacency, Graph, NormalizedAdjacency};
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::*;

#[test]
fn adjacency_matches_dense_algebra() {
    for seed in 0..40 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(8, 2, 2, 2, &mut rng);
        let adj = normalized_adjacency(&g);
        let oracle = dense_adjacency_oracle(8, g.edges());
        assert!(max_abs_diff(&adj.to_dense(), &oracle) < 1e-12, "seed {seed}");
    }
}

#[test]
fn adjacency_entries_follow_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = random_graph(12, 1, 3, 2, &mut rng);
    let adj = normalized_adjacency(&g);
    let deg = g.degrees();
    let dense = adj.to_dense();
    for i in 0..12 {
        assert!(dense[[i, i]] > 0.0);
        for j in 0..12 {
            assert_eq!(dense[[i, j]], dense[[j, i]]);
            let linked = i == j || g.edges().contains(&(i.min(j), i.max(j)));
            let expected = if linked {
                1.0 / (((deg[i] + 1) * (deg[j] + 1)) as f64).sqrt()
            } else {
                0.0
            };
            assert!((dense[[i, j]] - expected).abs() < 1e-15);
        }
    }
    assert_eq!(adj.nnz(), 12 + 2 * g.edges().len());
}

fn spectral_radius(adj: &NormalizedAdjacency, rng: &mut ChaCha8Rng) -> f64 {
    let n = adj.dim();
    let mut v: Matrix = Array2::from_shape_simple_fn((n, 1), || rng.random::<f64>() + 0.1);
    let mut estimate = 0.0;
    for _ in 0..500 {
        let w = adj.matmul(&v);
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        estimate = norm / v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = w / norm;
    }
    estimate
}

#[test]
fn spectral_radius_is_at_most_one() {
    for seed in 0..30 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let n = rng.random_range(1..=64);
        let p = rng.random_range(0.0..0.5);
        let edges = random_edges(n, p, &mut rng);
        let g = Graph::new(Array2::zeros((n, 1)), edges, vec![0; n], vec![0; n], 1, 1).unwrap();
        let adj = normalized_adjacency(&g);
        let rho = spectral_radius(&adj, &mut rng);
        assert!(rho <= 1.0 + 1e-9, "seed {seed}: {rho}");
    }
}

#[test]
fn spmm_on_path_matches_dense_product() {
    let g = Graph::new(Array2::ones((2, 3)), vec![(0, 1)], vec![0, 0], vec![0, 0], 1, 1).unwrap();
    let adj = NormalizedAdjacency::from_graph(&g);
    let mut tape = Tape::new();
    let x = tape.param(g.features().clone());
    let y = tape.spmm(&adj, x).unwrap();
    assert_eq!(tape.value(y), &adj.to_dense().dot(g.features()));
    assert_eq!(tape.value(y), &array![[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]]);
}

#[test]
fn sparse_products_match_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let g = random_graph(10, 4, 2, 2, &mut rng);
        let adj = normalized_adjacency(&g);
        let x = normal_matrix(10, 3, &mut rng);
        let dense = adj.to_dense();
        assert!(max_abs_diff(&adj.matmul(&x), &dense.dot(&x)) < 1e-12);
        assert!(max_abs_diff(&adj.transpose_matmul(&x), &dense.t().dot(&x)) < 1e-12);
    }
}

#[test]
fn gcn_forward_matches_dense_reimplementation() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let n = rng.random_range(1..=8);
        let g = random_graph(n, 5, 1, 1, &mut rng);
        let adj = NormalizedAdjacency::from_graph(&g);
        let params = EncoderParams {
            layers: vec![
                Parameter::new(glorot_uniform(5, 6, seed)),
                Parameter::new(glorot_uniform(6, 6, seed + 1)),
                Parameter::new(glorot_uniform(6, 3, seed + 2)),
            ],
            projection: vec![],
        };
        let h = params.embed(&adj, g.features()).unwrap();
        let ws: Vec<Matrix> = params.layers.iter().map(|p| p.value.clone()).collect();
        let oracle = gcn_oracle(&dense_adjacency_oracle(n, g.edges()), g.features(), &ws);
        assert!(max_abs_diff(&h, &oracle) < 1e-12, "seed {seed}");
    }
}

#[test]
fn final_layer_can_be_negative() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = random_graph(8, 4, 1, 1, &mut rng);
    let adj = NormalizedAdjacency::from_graph(&g);
    let params = EncoderParams::init(&[4, 8, 4], false, 11);
    let h = params.embed(&adj, g.features()).unwrap();
    assert!(h.iter().any(|&v| v < 0.0));
}

#[test]
fn pipeline_gradients_match_finite_differences() {
    use nap::augment::{make_views, AugmentConfig};

    let kinds = [
        LossKind::Warmup,
        LossKind::Nap { rho: 0.1 },
        LossKind::Nap { rho: 0.5 },
        LossKind::Removal { q: 0.5, seed: 4 },
    ];
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let g = random_graph(6, 3, 2, 2, &mut rng);
        let (va, vb) = make_views(&g, &AugmentConfig::new(0.2, 0.3).unwrap(), &AugmentConfig::new(0.3, 0.2).unwrap(), seed);
        let views = [
            (&va.adjacency, va.graph.features()),
            (&vb.adjacency, vb.graph.features()),
        ];
        let weights = vec![glorot_uniform(3, 4, seed), glorot_uniform(4, 2, seed + 7)];
        let (ha, hb) = pipeline_embeddings(views, &weights);
        for kind in kinds {
            let mask = mask_for(kind, &ha, &hb, g.domains());
            let (_, grads) = pipeline_loss_and_grads(kind, views, &weights, &mask, 0.5, g.domains());
            for (l, analytic) in grads.iter().enumerate() {
                let numeric = numeric_grad(
                    |w| {
                        let mut ws = weights.clone();
                        ws[l] = w.clone();
                        pipeline_loss_and_grads(kind, views, &ws, &mask, 0.5, g.domains()).0
                    },
                    &weights[l],
                    1e-5,
                );
                let err = rel_err(analytic, &numeric);
                assert!(err < 1e-5, "seed {seed} {kind:?} layer {l}: {err}");
            }
        }
    }
}
