mod support;

use nap::augment::{drop_edges, make_views, mask_features, AugmentConfig};
use nap::data::{generate, load_graph, make_split, parse_graph, save_graph, DataError, SyntheticConfig};
use nap::graph::{Graph, GraphError};
use nap::metrics::pdd;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::*;

fn within_3_sigma(observed: f64, expected: f64, sigma: f64) -> bool {
    (observed - expected).abs() <= 3.0 * sigma
}

#[test]
fn edge_dropping_follows_binomial() {
    // 1000 edges on 50 nodes.
    let mut edges = Vec::new();
    'outer: for u in 0..50 {
        for v in u + 1..50 {
            edges.push((u, v));
            if edges.len() == 1000 {
                break 'outer;
            }
        }
    }
    let g = Graph::new(Array2::zeros((50, 1)), edges, vec![0; 50], vec![0; 50], 1, 1).unwrap();
    let seeds = 200;
    let total: usize = (0..seeds).map(|s| drop_edges(&g, 0.5, s).edges().len()).sum();
    let mean = total as f64 / seeds as f64;
    let sigma = (1000.0f64 * 0.25).sqrt() / (seeds as f64).sqrt();
    assert!(within_3_sigma(mean, 500.0, sigma), "mean {mean}");
}

#[test]
fn feature_masking_follows_binomial_and_is_column_global() {
    let x = Array2::from_elem((5, 100), 1.0);
    let seeds = 200;
    let mut total = 0usize;
    for s in 0..seeds {
        let m = mask_features(&x, 0.3, s);
        for col in m.columns() {
            let zeros = col.iter().filter(|&&v| v == 0.0).count();
            assert!(zeros == 0 || zeros == 5);
            total += usize::from(zeros == 5);
        }
    }
    let mean = total as f64 / seeds as f64;
    let sigma = (100.0f64 * 0.3 * 0.7).sqrt() / (seeds as f64).sqrt();
    assert!(within_3_sigma(mean, 30.0, sigma), "mean {mean}");
}

#[test]
fn default_views_differ_from_the_graph_and_each_other() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let edges = (0..16).map(|i| (i, (i + 1) % 16)).chain((0..8).map(|i| (i, i + 8))).collect();
    let g = Graph::new(normal_matrix(16, 8, &mut rng), edges, vec![0; 16], vec![0; 16], 1, 1).unwrap();
    for seed in 0..10 {
        let (a, b) = make_views(&g, &AugmentConfig::default_alpha(), &AugmentConfig::default_beta(), seed);
        assert_ne!(a.graph, g);
        assert_ne!(b.graph, g);
        assert_ne!(a.graph, b.graph);
        assert_eq!(a.graph.domains(), g.domains());
        assert_eq!(b.graph.labels(), g.labels());
        assert_eq!(a.graph.num_nodes(), 16);
    }
}

#[test]
fn sbm_densities_match_probabilities() {
    let cfg = SyntheticConfig::default();
    let (mut intra_pairs, mut intra_edges) = (0u64, 0u64);
    let (mut inter_pairs, mut inter_edges) = (0u64, 0u64);
    for seed in 0..200 {
        let g = generate(&SyntheticConfig { seed, ..cfg.clone() }).unwrap();
        let (d, y) = (g.domains(), g.labels());
        for u in 0..g.num_nodes() {
            for v in u + 1..g.num_nodes() {
                if d[u] != d[v] {
                    continue;
                }
                if y[u] == y[v] {
                    intra_pairs += 1;
                } else {
                    inter_pairs += 1;
                }
            }
        }
        for &(u, v) in g.edges() {
            assert_eq!(d[u], d[v], "cross-domain edge");
            if y[u] == y[v] {
                intra_edges += 1;
            } else {
                inter_edges += 1;
            }
        }
    }
    let check = |edges: u64, pairs: u64, p: f64| {
        let density = edges as f64 / pairs as f64;
        let sigma = (p * (1.0 - p) / pairs as f64).sqrt();
        assert!(within_3_sigma(density, p, sigma), "density {density} vs {p}");
    };
    check(intra_edges, intra_pairs, cfg.intra_class_edge_prob);
    check(inter_edges, inter_pairs, cfg.inter_class_edge_prob);
}

#[test]
fn generated_graphs_show_domain_shift() {
    for seed in 0..10 {
        let g = generate(&SyntheticConfig { seed, ..SyntheticConfig::default() }).unwrap();
        assert_eq!(g.num_nodes(), 360);
        assert!(pdd(g.features(), g.domains()).unwrap().value > 0.0);
    }
}

#[test]
fn split_roles_are_uniform_over_seeds() {
    let (p, seeds) = (6, 100u64);
    let mut counts = vec![[0u32; 3]; p];
    for seed in 0..seeds {
        let s = make_split(p, 4, 1, 1, seed).unwrap();
        for (role, ids) in [&s.source, &s.validation, &s.target].into_iter().enumerate() {
            for &d in ids {
                counts[d][role] += 1;
            }
        }
    }
    for (d, c) in counts.iter().enumerate() {
        for (role, share) in [4.0, 1.0, 1.0].into_iter().enumerate() {
            let prob = share / p as f64;
            let expected = seeds as f64 * prob;
            let sigma = (seeds as f64 * prob * (1.0 - prob)).sqrt();
            assert!(
                within_3_sigma(c[role] as f64, expected, sigma),
                "domain {d} role {role}: {} vs {expected}",
                c[role]
            );
        }
    }
}

#[test]
fn graph_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = SyntheticConfig {
            num_domains: rng.random_range(1..5),
            num_classes: rng.random_range(1..4),
            nodes_per_domain: rng.random_range(1..12),
            num_features: rng.random_range(1..6),
            seed,
            ..SyntheticConfig::default()
        };
        let g = generate(&cfg).unwrap();
        let path = dir.path().join(format!("g{seed}.json"));
        save_graph(&g, &path).unwrap();
        assert_eq!(load_graph(&path).unwrap(), g);
    }
}

#[test]
fn load_reports_every_violation() {
    let text = r#"{"num_nodes":2,"num_features":1,"num_domains":2,"num_classes":1,
"features":[[1.0],[2.0]],"edges":[[0,1],[1,0],[1,1]],"domains":[0,0],"labels":[0,0]}"#;
    match parse_graph(text) {
        Err(DataError::InvariantViolation(errs)) => {
            assert!(errs.0.contains(&GraphError::DuplicateEdge { edge: 1, u: 0, v: 1 }));
            assert!(errs.0.contains(&GraphError::SelfLoopInInput { edge: 2, node: 1 }));
            assert!(errs.0.contains(&GraphError::EmptyDomain(1)));
        }
        other => panic!("unexpected {other:?}"),
    }
}

fn arbitrary_graph() -> impl Strategy<Value = Graph> {
    (1usize..10, 1usize..4, 1usize..3).prop_flat_map(|(n, f, p)| {
        let n = n.max(p);
        (
            prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL, n * f),
            prop::collection::vec(any::<bool>(), n * (n - 1) / 2),
            prop::collection::vec(0..p, n),
            prop::collection::vec(0usize..3, n),
        )
            .prop_map(move |(x, links, mut domains, labels)| {
                for (i, d) in domains.iter_mut().take(p).enumerate() {
                    *d = i;
                }
                let mut edges = Vec::new();
                let mut k = 0;
                for u in 0..n {
                    for v in u + 1..n {
                        if links[k] {
                            edges.push((u, v));
                        }
                        k += 1;
                    }
                }
                let x = Array2::from_shape_vec((n, f), x).unwrap();
                Graph::new(x, edges, domains, labels, p, 3).unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn arbitrary_graphs_round_trip(g in arbitrary_graph()) {
        let mut buf = Vec::new();
        nap::data::write_graph(&mut buf, &g).unwrap();
        let back = parse_graph(std::str::from_utf8(&buf).unwrap()).unwrap();
        for (a, b) in back.features().iter().zip(g.features()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(back, g);
    }
}
