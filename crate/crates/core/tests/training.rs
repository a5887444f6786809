use lac_core::agent::{Agent, AgentConfig, SelectMode};
use lac_core::pool::{generate_synthetic, presets, Pool, Split, SplitSizes};
use lac_core::training::{evaluate, train, MetricsLog, TrainConfig, TrainError};

fn small_router(seed: u64) -> Pool {
    let mut cfg = presets::router(seed);
    cfg.examples = SplitSizes { train: 400, val: 100, test: 400 };
    generate_synthetic(&cfg).unwrap()
}

fn agent_for(pool: &Pool, seed: u64) -> Agent {
    let mut cfg = AgentConfig::new(pool.n_classifiers(), pool.n_classes());
    cfg.seed = seed;
    Agent::new(cfg).unwrap()
}

fn config(horizon: usize, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig { horizon, seed, batch_size: 64, ..TrainConfig::default() }.with_epochs(epochs)
}

#[test]
fn logged_total_is_the_composition_of_its_parts() {
    let pool = small_router(1);
    let cfg = config(2, 4, 1);
    let out = train(&pool, agent_for(&pool, 1), &cfg).unwrap();
    let mut buf = Vec::new();
    out.log.write_csv(&mut buf).unwrap();
    let reread = MetricsLog::read_csv(buf.as_slice()).unwrap();
    assert_eq!(reread.rows.len(), 4);
    for (row, back) in out.log.rows.iter().zip(&reread.rows) {
        for l in [&row.loss, &back.loss] {
            let composed = cfg.gamma * (l.action + cfg.alpha * l.entropy) + l.supervised;
            assert!((l.total - composed).abs() <= 1e-6, "epoch {}: {} vs {composed}", row.epoch, l.total);
        }
        assert_eq!(row.loss, back.loss, "csv must round-trip floats exactly");
    }
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let pool = small_router(2);
    let cfg = config(2, 3, 5);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| train(&pool, agent_for(&pool, 5), &cfg).unwrap())
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a.log, b.log);
    assert_eq!(a.agent, b.agent);

    let other = train(&pool, agent_for(&pool, 5), &TrainConfig { seed: 6, ..cfg.clone() }).unwrap();
    assert_ne!(a.agent, other.agent);
}

#[test]
fn first_step_never_depends_on_the_example() {
    let pool = small_router(3);
    let out = train(&pool, agent_for(&pool, 3), &config(2, 5, 3)).unwrap();
    assert!(out.log.rows.iter().all(|r| r.first_step_identical));
    let report =
        evaluate(&pool, &out.agent, Split::Test, config(2, 5, 3).reward(), SelectMode::Sample, 11).unwrap();
    assert!(report.first_step_identical);
}

#[test]
fn hard_mask_never_repeats_a_call() {
    let pool = small_router(4);
    // horizon equal to the pool size forces every classifier exactly once
    let cfg = config(3, 3, 4);
    let out = train(&pool, agent_for(&pool, 4), &cfg).unwrap();
    for mode in [SelectMode::Argmax, SelectMode::Sample] {
        let report = evaluate(&pool, &out.agent, Split::Test, cfg.reward(), mode, 9).unwrap();
        assert!(!report.has_repeated_calls());
        assert!(report.trajectories.iter().all(|t| t.len() == 3));
        let total: f64 = report.call_freq.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

#[test]
fn soft_mask_may_repeat_calls() {
    let pool = small_router(4);
    let mut acfg = AgentConfig::new(3, 4);
    acfg.hard_mask = false;
    let agent = Agent::new(acfg).unwrap();
    let cfg = config(3, 1, 4);
    let report = evaluate(&pool, &agent, Split::Test, cfg.reward(), SelectMode::Sample, 2).unwrap();
    assert!(report.has_repeated_calls());
}

#[test]
fn exploding_learning_rate_reports_divergence() {
    let pool = small_router(5);
    let cfg = TrainConfig { learning_rate: 1e30, ..config(2, 3, 5) };
    match train(&pool, agent_for(&pool, 5), &cfg) {
        Err(TrainError::Diverged { epoch, last_good, .. }) => {
            assert!(epoch >= 1);
            assert_eq!(last_good.config, agent_for(&pool, 5).config);
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log.rows.len())),
    }
}

#[test]
fn mismatched_agent_is_rejected() {
    let pool = small_router(6);
    let agent = Agent::new(AgentConfig::new(2, 4)).unwrap();
    assert!(matches!(train(&pool, agent, &config(1, 1, 0)), Err(TrainError::Mismatch(_))));
}

#[test]
fn perfect_classifier_is_learned() {
    let pool = generate_synthetic(&presets::perfect(4, 7)).unwrap();
    let out = train(&pool, agent_for(&pool, 7), &config(1, 20, 7)).unwrap();
    let acc = out.log.rows.last().unwrap().test_accuracy;
    assert!(acc >= 0.99, "accuracy {acc}");
}
