//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use lac_core::agent::{Agent, AgentConfig, SelectMode};
use lac_core::analysis::{oracle_adaptive, oracle_fixed};
use lac_core::gdboost::{
    bag, boost, gaussian_blobs, gdmc_loss, gradient_targets, BagConfig, BlobConfig, BoostConfig, Codebook,
    LearnerConfig,
};
use lac_core::numkit::{mlp_specs, Activation, DenseNet, Mode};
use lac_core::pool::{generate_synthetic, presets, Pool, Split};
use lac_core::rng;
use lac_core::stacker::{best_subset, StackerConfig};
use lac_core::training::{evaluate, total_loss, train, BatchTrace, EpisodeTrace, MetricsLog, TrainConfig};
use rand::Rng;

const GAMMA: f64 = 0.01;
const ALPHA: f64 = 0.5;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

/// Runs one criterion, prints its line and returns whether it passed.
fn criterion(name: &str, limit: Option<Duration>, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let mut v = f();
    let took = start.elapsed();
    if let Some(limit) = limit {
        if took > limit {
            v.pass = false;
            v.detail.push_str(&format!("; over time limit {}s", limit.as_secs()));
        }
    }
    println!("{} {name}: {} [{:.1}s]", if v.pass { "PASS" } else { "FAIL" }, v.detail, took.as_secs_f64());
    v.pass
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn net_worst(seed: u64) -> f64 {
    let mut r = rng::seeded(seed);
    let dims = (r.random_range(1..6), r.random_range(1..8), r.random_range(1..4));
    let net = DenseNet::new(dims.0, &mlp_specs(&[dims.1, dims.1], dims.2), &mut r).unwrap();
    let x: Vec<f32> = (0..dims.0).map(|_| r.random_range(-2.0..2.0)).collect();
    let c: Vec<f64> = (0..dims.2).map(|_| r.random_range(-1.0..1.0)).collect();
    let layers: Vec<(Vec<f64>, Vec<f64>, usize, bool)> = net
        .layers()
        .iter()
        .map(|l| {
            (
                l.weights.data().iter().map(|&w| w as f64).collect(),
                l.bias.iter().map(|&b| b as f64).collect(),
                l.in_dim(),
                l.activation == Activation::Relu,
            )
        })
        .collect();
    let forward = |layers: &[(Vec<f64>, Vec<f64>, usize, bool)]| -> (f64, f64) {
        let mut h: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let mut margin = f64::INFINITY;
        for (w, b, cols, relu) in layers {
            h = (0..b.len())
                .map(|r| {
                    let z = b[r] + (0..*cols).map(|k| w[r * cols + k] * h[k]).sum::<f64>();
                    if *relu {
                        margin = margin.min(z.abs());
                        z.max(0.0)
                    } else {
                        z
                    }
                })
                .collect();
        }
        (h.iter().zip(&c).map(|(a, b)| a * b).sum(), margin)
    };
    if forward(&layers).1 < 1e-3 {
        return 0.0;
    }
    let (_, tape) = net.forward(&x, Mode::Train, &mut r).unwrap();
    let g = net.backward(&tape, &c.iter().map(|&v| v as f32).collect::<Vec<_>>()).unwrap();
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for li in 0..layers.len() {
        for wi in 0..layers[li].0.len() {
            let (mut p, mut m) = (layers.clone(), layers.clone());
            p[li].0[wi] += eps;
            m[li].0[wi] -= eps;
            let num = (forward(&p).0 - forward(&m).0) / (2.0 * eps);
            worst = worst.max(rel_err(g.weights[li][wi] as f64, num, 1e-3));
        }
    }
    worst
}

fn gdmc_worst(seed: u64) -> f64 {
    let mut r = rng::seeded(seed);
    let m = r.random_range(2..6);
    let cb = Codebook::new(m).unwrap();
    let f: Vec<Vec<f64>> = (0..8).map(|_| (0..m).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
    let z: Vec<usize> = (0..8).map(|_| r.random_range(0..m)).collect();
    let t = gradient_targets(&f, &z, &cb);
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..8 {
        for j in 0..m {
            let (mut p, mut q) = (f.clone(), f.clone());
            p[i][j] += eps;
            q[i][j] -= eps;
            let num = (gdmc_loss(&p, &z, &cb) - gdmc_loss(&q, &z, &cb)) / (2.0 * eps);
            worst = worst.max(rel_err(-t[i][j], num, 1e-3));
        }
    }
    worst
}

fn softmax_masked(l: &[f64], allowed: &[bool]) -> Vec<f64> {
    let mx = l.iter().zip(allowed).filter(|p| *p.1).map(|p| *p.0).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().zip(allowed).map(|(&v, &a)| if a { (v - mx).exp() } else { 0.0 }).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Action-logit gradients of the hybrid loss on a random frozen trace.
fn composite_worst(seed: u64) -> f64 {
    let (k, h, n, c) = (5, 3, 4, 3);
    let cfg = TrainConfig { gamma: 1.0, alpha: 2.0, beta: 0.5, ..TrainConfig::default() };
    let mut r = rng::seeded(seed);
    let mut episodes = Vec::new();
    let mut masks = Vec::new();
    for _ in 0..k {
        let mut called = vec![false; n];
        let mut ep = EpisodeTrace {
            label: r.random_range(0..c),
            actions: vec![],
            action_logits: vec![],
            policies: vec![],
            decision_logits: vec![],
            decisions: vec![],
            baselines: vec![],
            reward: f64::from(u8::from(r.random_bool(0.5))),
            cost: 0.0,
        };
        let mut em = Vec::new();
        for _ in 0..h {
            let logits: Vec<f32> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
            let allowed: Vec<bool> = called.iter().map(|x| !x).collect();
            let pi = softmax_masked(&logits.iter().map(|&v| v as f64).collect::<Vec<_>>(), &allowed);
            let open: Vec<usize> = (0..n).filter(|&i| allowed[i]).collect();
            let a = open[r.random_range(0..open.len())];
            called[a] = true;
            let d: Vec<f32> = (0..c).map(|_| r.random_range(-2.0..2.0)).collect();
            let dp = softmax_masked(&d.iter().map(|&v| v as f64).collect::<Vec<_>>(), &[true; 3]);
            ep.actions.push(a);
            ep.action_logits.push(logits);
            ep.policies.push(pi.iter().map(|&p| p as f32).collect());
            ep.decision_logits.push(d);
            ep.decisions.push(dp.iter().map(|&p| p as f32).collect());
            ep.baselines.push(r.random_range(0.0..1.0));
            em.push(allowed);
        }
        episodes.push(ep);
        masks.push(em);
    }
    let trace = BatchTrace { episodes };
    let (_, grads) = total_loss(&trace, &cfg).unwrap();
    let reinforce = |logits: &Vec<Vec<Vec<f64>>>| -> f64 {
        let pis: Vec<Vec<Vec<f64>>> =
            logits.iter().zip(&masks).map(|(e, m)| e.iter().zip(m).map(|(l, a)| softmax_masked(l, a)).collect()).collect();
        let kf = k as f64;
        let mut la = 0.0;
        let mut per = 0.0;
        for (i, e) in trace.episodes.iter().enumerate() {
            for t in 0..h {
                la -= (e.reward - e.baselines[t] as f64) * pis[i][t][e.actions[t]].ln() / kf;
                per += pis[i][t].iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
            }
        }
        let mut lb = 0.0;
        for t in 1..h {
            for j in 0..n {
                let m = pis.iter().map(|e| e[t][j]).sum::<f64>() / kf;
                if m > 0.0 {
                    lb += m * m.ln();
                }
            }
        }
        cfg.gamma * (la + cfg.alpha * (lb + cfg.beta * per / (kf * h as f64)))
    };
    let base: Vec<Vec<Vec<f64>>> =
        trace.episodes.iter().map(|e| e.action_logits.iter().map(|l| l.iter().map(|&v| v as f64).collect()).collect()).collect();
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..k {
        for t in 0..h {
            for j in (0..n).filter(|&j| masks[i][t][j]) {
                let (mut p, mut q) = (base.clone(), base.clone());
                p[i][t][j] += eps;
                q[i][t][j] -= eps;
                let num = (reinforce(&p) - reinforce(&q)) / (2.0 * eps);
                worst = worst.max(rel_err(grads.action_logits[i][t][j], num, 1e-4));
            }
        }
    }
    worst
}

fn agent(pool: &Pool, seed: u64) -> Agent {
    let mut c = AgentConfig::new(pool.n_classifiers(), pool.n_classes());
    c.seed = seed;
    Agent::new(c).unwrap()
}

struct Trained {
    pool_name: &'static str,
    horizon: usize,
    log: MetricsLog,
    accuracy: f64,
    repeated: bool,
}

fn train_budgets(pool: &Pool, name: &'static str, horizons: &[usize], epochs: usize, seed: u64) -> Vec<Trained> {
    horizons
        .iter()
        .map(|&h| {
            let cfg = TrainConfig { horizon: h, seed, ..TrainConfig::default() }.with_epochs(epochs);
            let out = train(pool, agent(pool, seed), &cfg).unwrap();
            let argmax = evaluate(pool, &out.agent, Split::Test, cfg.reward(), SelectMode::Argmax, seed).unwrap();
            let sampled = evaluate(pool, &out.agent, Split::Test, cfg.reward(), SelectMode::Sample, seed).unwrap();
            Trained {
                pool_name: name,
                horizon: h,
                log: out.log,
                accuracy: argmax.accuracy,
                repeated: argmax.has_repeated_calls() || sampled.has_repeated_calls(),
            }
        })
        .collect()
}

fn lac(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_lac"))
        .args(args)
        .env_remove("LAC_DATA_DIR")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn same_file(a: &Path, b: &Path) -> bool {
    matches!((std::fs::read(a), std::fs::read(b)), (Ok(x), Ok(y)) if x == y)
}

fn main() {
    let mut all = true;

    all &= criterion("gradient integrity", None, || {
        let net = (0..40).map(net_worst).fold(0.0, f64::max);
        let gd = (0..40).map(gdmc_worst).fold(0.0, f64::max);
        let comp = (0..10).map(composite_worst).fold(0.0, f64::max);
        verdict(
            net < 1e-4 && gd < 1e-4 && comp < 1e-3,
            format!("max rel err nets {net:.2e}, gdmc {gd:.2e}, hybrid loss {comp:.2e}"),
        )
    });

    let router = generate_synthetic(&presets::router(1)).unwrap();
    let overlap = generate_synthetic(&presets::overlap(7)).unwrap();
    let mut runs: Vec<Trained> = Vec::new();

    all &= criterion("router separation", Some(Duration::from_secs(600)), || {
        let fixed = oracle_fixed(&router, 2).unwrap().accuracy;
        let adaptive = oracle_adaptive(&router, 2).unwrap().accuracy;
        let lac = train_budgets(&router, "router", &[2], 20, 1).remove(0);
        let stack = best_subset(&router, 2, &StackerConfig { seed: 1, ..StackerConfig::default() }).unwrap().best;
        let detail = format!(
            "fixed oracle {fixed}, adaptive oracle {adaptive}, LAC-2 {:.4}, best 2-stacker {:?} test {:.4}",
            lac.accuracy, stack.subset, stack.test_acc
        );
        let pass = fixed == 0.75
            && adaptive == 1.0
            && lac.accuracy >= 0.95
            && (stack.test_acc - 0.75).abs() <= 0.03
            && lac.accuracy > stack.test_acc;
        runs.push(lac);
        verdict(pass, detail)
    });

    all &= criterion("budget monotonicity", Some(Duration::from_secs(1200)), || {
        let sweeps =
            [train_budgets(&router, "router", &[1, 2, 3], 20, 3), train_budgets(&overlap, "overlap", &[1, 2, 3], 40, 3)];
        let mut pass = true;
        let mut parts = Vec::new();
        for sweep in &sweeps {
            let accs: Vec<f64> = sweep.iter().map(|t| t.accuracy).collect();
            pass &= accs.windows(2).all(|w| w[1] >= w[0] - 0.01);
            parts.push(format!(
                "{} {}",
                sweep[0].pool_name,
                accs.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join("/")
            ));
        }
        runs.extend(sweeps.into_iter().flatten());
        verdict(pass, format!("test accuracy at horizons 1/2/3: {}", parts.join(", ")))
    });

    all &= criterion("context-free first step", None, || {
        let epochs: usize = runs.iter().map(|t| t.log.rows.len()).sum();
        let bad: Vec<String> = runs
            .iter()
            .flat_map(|t| {
                t.log
                    .rows
                    .iter()
                    .filter(|r| !r.first_step_identical)
                    .map(move |r| format!("{} h{} epoch {}", t.pool_name, t.horizon, r.epoch))
            })
            .collect();
        verdict(bad.is_empty() && epochs > 0, format!("{epochs} epochs checked, {} differ {bad:?}", bad.len()))
    });

    all &= criterion("duplicate-action safety", None, || {
        let bad: Vec<String> =
            runs.iter().filter(|t| t.repeated).map(|t| format!("{} h{}", t.pool_name, t.horizon)).collect();
        verdict(bad.is_empty(), format!("{} trained agents, argmax and sampled test runs, repeats in {bad:?}", runs.len()))
    });

    all &= criterion("boosting behavior", Some(Duration::from_secs(300)), || {
        let clean = BlobConfig { seed: 0, ..BlobConfig::default() };
        let train_set = gaussian_blobs(&clean, 0).unwrap();
        let val_set = gaussian_blobs(&clean, 1).unwrap();
        let run = boost(&train_set, &val_set, &BoostConfig { seed: 0, ..BoostConfig::default() }).unwrap();
        let losses: Vec<f64> = run.curve.iter().map(|r| r.train_loss).collect();
        let monotone = losses.windows(2).all(|w| w[1] <= w[0]);
        let committee = run.curve.last().unwrap().val_acc;
        let best_member = run.rounds.iter().map(|r| r.member_val_acc).fold(0.0, f64::max);

        let noisy = BlobConfig { per_class: 100, label_noise: 0.3, dim: 4, seed: 0, ..BlobConfig::default() };
        let noisy_train = gaussian_blobs(&noisy, 0).unwrap();
        let noisy_val = gaussian_blobs(&BlobConfig { per_class: 500, ..noisy.clone() }, 1).unwrap();
        let bagged = bag(
            &noisy_train,
            &noisy_val,
            &BagConfig {
                rounds: 10,
                learner: LearnerConfig { hidden: vec![64], epochs: 80, ..LearnerConfig::default() },
                seed: 0,
                ..BagConfig::default()
            },
        )
        .unwrap();
        let (first, last) = (bagged.curve[0].val_acc, bagged.curve[9].val_acc);
        verdict(
            monotone && committee >= best_member - 0.01 && last >= first,
            format!(
                "boost loss {:.4}->{:.4} non-increasing={monotone}, committee {committee:.4} vs best member \
                 {best_member:.4}; bagging val acc round1 {first:.4} round10 {last:.4}",
                losses[0],
                losses[losses.len() - 1]
            ),
        )
    });

    all &= criterion("loss bookkeeping", None, || {
        let mut worst: f64 = 0.0;
        let mut rows = 0;
        for t in &runs {
            let mut buf = Vec::new();
            t.log.write_csv(&mut buf).unwrap();
            let logged = MetricsLog::read_csv(buf.as_slice()).unwrap();
            for r in &logged.rows {
                let l = &r.loss;
                worst = worst.max((l.total - (GAMMA * (l.action + ALPHA * l.entropy) + l.supervised)).abs());
                rows += 1;
            }
        }
        verdict(worst <= 1e-6 && rows > 0, format!("{rows} logged epochs, max |total - composed| {worst:.2e}"))
    });

    all &= criterion("CLI determinism", None, || {
        let dir = tempfile::tempdir().unwrap();
        let d = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
        let pool = d("pool");
        if !lac(&["pool", "synth", "--preset", "router", "--seed", "2", "--out", &pool]) {
            return verdict(false, "pool synth failed");
        }
        let mut checked = Vec::new();
        for (threads, tag) in [("1", "a"), ("4", "b")] {
            let ok = lac(&["train-lac", "--pool", &pool, "--horizon", "2", "--epochs", "3", "--seed", "9", "--threads", threads, "--out", &d(&format!("train_{tag}"))])
                && lac(&["boost", "--rounds", "3", "--blob-per-class", "60", "--seed", "9", "--threads", threads, "--out", &d(&format!("boost_{tag}"))])
                && lac(&["bag", "--rounds", "3", "--blob-per-class", "60", "--seed", "9", "--threads", threads, "--out", &d(&format!("bag_{tag}"))])
                && lac(&["stack", "--pool", &pool, "--best-k", "2", "--epochs", "3", "--seed", "9", "--threads", threads, "--out", &d(&format!("stack_{tag}.csv"))])
                && lac(&["report", "oracles", "--pool", &pool, "--threads", threads, "--out", &d(&format!("oracles_{tag}.csv"))]);
            if !ok {
                return verdict(false, format!("a command failed with {threads} threads"));
            }
        }
        let pairs = [
            ("train_a/metrics.csv", "train_b/metrics.csv"),
            ("boost_a/curve.csv", "boost_b/curve.csv"),
            ("bag_a/curve.csv", "bag_b/curve.csv"),
            ("stack_a.csv", "stack_b.csv"),
            ("oracles_a.csv", "oracles_b.csv"),
        ];
        let mut pass = true;
        for (a, b) in pairs {
            let same = same_file(&dir.path().join(a), &dir.path().join(b));
            pass &= same;
            checked.push(format!("{a}={same}"));
        }
        verdict(pass, format!("1 vs 4 threads: {}", checked.join(", ")))
    });

    if !all {
        std::process::exit(1);
    }
}
