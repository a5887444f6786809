use lac_core::analysis::{
    call_frequency_curve, discretize, oracle_adaptive, oracle_fixed, trajectory_graph, AnalysisError, Node,
};
use lac_core::pool::{
    generate_synthetic, presets, OffSubsetBehavior, Pool, Split, SplitSizes, SyntheticClassifier, SyntheticPoolConfig,
};
use lac_core::rng;
use lac_core::stacker::{k_subsets, knn_predict, knn_stacker, train_stacker, StackerConfig};
use lac_core::training::{EpochRecord, LossBreakdown, MetricsLog};
use rand::Rng;

/// Sorts every distance, ties by index, and counts the first k.
fn brute_knn(reference: &[Vec<f32>], labels: &[usize], n_classes: usize, query: &[f32], k: usize) -> usize {
    let mut d: Vec<(f64, usize)> = reference
        .iter()
        .enumerate()
        .map(|(i, r)| (r.iter().zip(query).map(|(a, b)| ((a - b) as f64).powi(2)).sum(), i))
        .collect();
    d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut votes = vec![0; n_classes];
    for &(_, i) in d.iter().take(k) {
        votes[labels[i]] += 1;
    }
    let top = *votes.iter().max().unwrap();
    votes.iter().position(|&v| v == top).unwrap()
}

#[test]
fn knn_matches_brute_force() {
    let mut r = rng::seeded(17);
    for _ in 0..40 {
        let n = r.random_range(1..40);
        // small integer grid so distance ties are common
        let reference: Vec<Vec<f32>> = (0..n).map(|_| (0..3).map(|_| r.random_range(0..3) as f32).collect()).collect();
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..4)).collect();
        let query: Vec<f32> = (0..3).map(|_| r.random_range(0..3) as f32).collect();
        let k = r.random_range(1..8);
        let fast = knn_predict(&reference, &labels, 4, &query, k);
        assert_eq!(fast, brute_knn(&reference, &labels, 4, &query, k), "n={n} k={k}");
    }
}

#[test]
fn knn_stacker_on_perfect_pool() {
    let pool = generate_synthetic(&presets::perfect(3, 2)).unwrap();
    assert_eq!(knn_stacker(&pool, 5, &[0], Split::Test).unwrap(), 1.0);
}

#[test]
fn stacker_learns_a_perfect_classifier() {
    let pool = generate_synthetic(&presets::perfect(4, 1)).unwrap();
    let cfg = StackerConfig { subset: vec![0], epochs: 10, seed: 1, ..StackerConfig::default() };
    let res = train_stacker(&pool, &cfg).unwrap();
    assert!(res.test_acc >= 0.99, "{}", res.test_acc);
    let deep = train_stacker(&pool, &StackerConfig { depth: 5, ..cfg }).unwrap();
    assert!(deep.test_acc >= 0.99, "{}", deep.test_acc);
}

#[test]
fn stacker_rejects_bad_subsets() {
    let pool = generate_synthetic(&presets::router(0)).unwrap();
    for subset in [vec![], vec![0, 0], vec![3]] {
        assert!(train_stacker(&pool, &StackerConfig { subset, ..StackerConfig::default() }).is_err());
    }
    assert!(train_stacker(&pool, &StackerConfig { subset: vec![0], depth: 4, ..StackerConfig::default() }).is_err());
}

#[test]
fn subsets_are_complete_and_ordered() {
    let s = k_subsets(5, 3);
    assert_eq!(s.len(), 10);
    assert!(s.windows(2).all(|w| w[0] < w[1]));
    assert!(s.iter().all(|x| x.windows(2).all(|p| p[0] < p[1]) && x.iter().all(|&i| i < 5)));
}

fn random_pool(seed: u64, n: usize) -> Pool {
    let mut r = rng::seeded(seed);
    let behaviors =
        [OffSubsetBehavior::UniformOverSubset, OffSubsetBehavior::ConfidentRandomInSubset, OffSubsetBehavior::UniformOverAll];
    let classifiers = (0..n)
        .map(|_| {
            let mut subset: Vec<usize> = (0..4).filter(|_| r.random_bool(0.6)).collect();
            if subset.is_empty() {
                subset.push(r.random_range(0..4));
            }
            SyntheticClassifier {
                name: None,
                class_subset: subset,
                in_subset_accuracy: r.random_range(0.5..1.0),
                off_subset_behavior: behaviors[r.random_range(0..3)],
                cost: 1.0,
            }
        })
        .collect();
    generate_synthetic(&SyntheticPoolConfig {
        name: "random".into(),
        n_classes: 4,
        classifiers,
        examples: SplitSizes { train: 300, val: 50, test: 300 },
        label_prior: None,
        stratified: false,
        seed,
    })
    .unwrap()
}

#[test]
fn adaptive_oracle_contains_fixed_oracle() {
    for seed in 0..8 {
        let pool = random_pool(seed, 4);
        for h in 1..=3 {
            let fixed = oracle_fixed(&pool, h).unwrap();
            let adaptive = oracle_adaptive(&pool, h).unwrap();
            assert!(adaptive.accuracy >= fixed.accuracy, "seed {seed} h {h}: {adaptive:?} < {fixed:?}");
        }
    }
}

#[test]
fn full_horizon_adaptive_equals_fixed_on_all() {
    for seed in 0..6 {
        let pool = random_pool(100 + seed, 3);
        assert_eq!(oracle_adaptive(&pool, 3).unwrap().accuracy, oracle_fixed(&pool, 3).unwrap().accuracy);
    }
}

#[test]
fn router_oracles() {
    let pool = generate_synthetic(&presets::router(0)).unwrap();
    let fixed = oracle_fixed(&pool, 2).unwrap();
    assert_eq!(fixed.accuracy, 0.75);
    let adaptive = oracle_adaptive(&pool, 2).unwrap();
    assert_eq!(adaptive.accuracy, 1.0);
    assert_eq!(adaptive.first, 0);
}

#[test]
fn oracles_refuse_large_problems() {
    let big = random_pool(1, 7);
    assert!(matches!(oracle_adaptive(&big, 2), Err(AnalysisError::TooLarge(_))));
    let pool = random_pool(1, 4);
    assert!(matches!(oracle_adaptive(&pool, 4), Err(AnalysisError::TooLarge(_))));
    assert!(matches!(oracle_fixed(&pool, 0), Err(AnalysisError::Invalid(_))));
    assert!(matches!(oracle_fixed(&pool, 5), Err(AnalysisError::Invalid(_))));
    let huge = random_pool(1, 21);
    assert!(matches!(oracle_fixed(&huge, 1), Err(AnalysisError::TooLarge(_))));
}

#[test]
fn discretization_levels() {
    assert_eq!(discretize(&[0.1, 0.95, 0.0]), 3);
    assert_eq!(discretize(&[0.5, 0.3, 0.2]), 0);
    assert_eq!(discretize(&[0.2, 0.2, 0.6]), 4);
}

#[test]
fn graph_edges_form_distributions() {
    let mut r = rng::seeded(5);
    let trajectories: Vec<Vec<usize>> = (0..200)
        .map(|_| {
            let mut avail: Vec<usize> = (0..5).collect();
            (0..3).map(|_| avail.remove(r.random_range(0..avail.len()))).collect()
        })
        .collect();
    let names: Vec<String> = (0..6).map(|i| format!("k{i}")).collect();
    let g = trajectory_graph(&trajectories, &names).unwrap();
    let from_start: usize = g.outgoing(Node::Start).map(|e| e.count).sum();
    assert_eq!(from_start, 200);
    for from in std::iter::once(Node::Start).chain((0..6).map(Node::Classifier)) {
        let edges: Vec<_> = g.outgoing(from).collect();
        if !edges.is_empty() {
            let p: f64 = edges.iter().map(|e| e.probability).sum();
            assert!((p - 1.0).abs() < 1e-12);
        }
    }
    assert!((g.call_share.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(!g.is_reachable(5));
    let dot = g.to_dot();
    assert!(dot.starts_with("digraph lac {"));
    assert!(dot.contains("c5 [label=\"k5\\n0.000\", style=dashed];"));
    assert!(dot.trim_end().ends_with('}'));
}

#[test]
fn frequency_curve_checks_shares() {
    let row = |epoch, freq: Vec<f64>| EpochRecord {
        epoch,
        loss: LossBreakdown::default(),
        test_accuracy: 0.0,
        call_freq: freq,
        first_step_identical: true,
    };
    let good = MetricsLog { n_classifiers: 2, rows: vec![row(1, vec![0.25, 0.75]), row(2, vec![0.5, 0.5])] };
    let curve = call_frequency_curve(&good).unwrap();
    assert_eq!(curve.epochs, vec![1, 2]);
    assert_eq!(curve.series, vec![vec![0.25, 0.5], vec![0.75, 0.5]]);
    let bad = MetricsLog { n_classifiers: 2, rows: vec![row(1, vec![0.25, 0.5])] };
    assert!(call_frequency_curve(&bad).is_err());
}
