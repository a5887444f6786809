//! Hybrid training of the agent.
//!
//! Each batch rolls out one episode per example, sampling classifier choices
//! from the current policy. The minimized objective is
//!
//! ```text
//! loss = gamma * (L_action + alpha * L_entropy) + L_supervised
//! ```
//!
//! - `L_supervised`: cross-entropy of the decision maker after every step,
//!   averaged over episodes and steps.
//! - `L_action`: `-(1/K) sum_k sum_t (R_k - b(s_{k,t-1})) * log pi(a_{k,t})`,
//!   the baseline treated as a constant.
//! - `L_entropy`: negative entropy of the batch-mean policy at every step
//!   after the first, plus `beta` times the mean per-episode negative entropy.
//!
//! The baseline net regresses `R` with its own squared-error loss. Gradients
//! stay on their own paths: supervised loss reaches only the decision maker,
//! the reinforcement terms only the action generator, and the baseline loss
//! only the baseline net.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{select_action, Agent, AgentError, SelectMode};
use crate::envmdp::{EnvError, Environment, RewardConfig};
use crate::numkit::{
    argmax, cross_entropy, softmax, softmax_cross_entropy_grad, Gradients, NumError, Optimizer, OptimizerKind, Tape,
    PROB_FLOOR,
};
use crate::pool::{Pool, Split};
use crate::rng;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String, last_good: Box<Agent> },
    #[error("agent does not match pool: {0}")]
    Mismatch(String),
    #[error("metrics log: {0}")]
    Log(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Net(#[from] NumError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the reinforcement part of the loss.
    pub gamma: f64,
    /// Weight of the entropy bonus inside the reinforcement part.
    pub alpha: f64,
    /// Weight of the per-episode entropy term.
    pub beta: f64,
    /// Cost weight in the reward.
    pub lambda: f64,
    pub horizon: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Epochs after which the learning rate is multiplied by `lr_decay`.
    pub lr_drops: Vec<usize>,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub eval_mode: SelectMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.01,
            alpha: 0.5,
            beta: 1e-4,
            lambda: 0.0,
            horizon: 1,
            epochs: 200,
            learning_rate: 1e-3,
            lr_drops: vec![170, 190],
            lr_decay: 0.1,
            batch_size: 128,
            optimizer: OptimizerKind::Adam,
            eval_mode: SelectMode::Argmax,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Sets the epoch count, rescaling the default 170/190-of-200 schedule
    /// when it is still in place.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        if self.lr_drops == [170, 190] && self.epochs == 200 && epochs != 200 {
            self.lr_drops = [170usize, 190]
                .iter()
                .map(|&d| d * epochs / 200)
                .filter(|&d| d > 0 && d < epochs)
                .collect();
            self.lr_drops.dedup();
        }
        self.epochs = epochs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [("gamma", self.gamma), ("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if self.horizon == 0 {
            return Err(TrainError::Config("horizon must be at least 1".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if let Some(&d) = self.lr_drops.iter().find(|&&d| d >= self.epochs) {
            return Err(TrainError::Config(format!("lr drop at epoch {d} is not before the final epoch {}", self.epochs)));
        }
        Ok(())
    }

    pub fn reward(&self) -> RewardConfig {
        RewardConfig { lambda: self.lambda, horizon: self.horizon }
    }

    /// Learning rate in effect for 0-based epoch `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drops.iter().filter(|&&d| epoch >= d).count();
        self.learning_rate * self.lr_decay.powi(drops as i32)
    }
}

/// Everything the loss needs about one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub label: usize,
    pub actions: Vec<usize>,
    /// Logits of the action generator before each call.
    pub action_logits: Vec<Vec<f32>>,
    /// Selection distribution before each call (zeros on masked entries).
    pub policies: Vec<Vec<f32>>,
    /// Decision-maker logits after each call.
    pub decision_logits: Vec<Vec<f32>>,
    pub decisions: Vec<Vec<f32>>,
    /// Baseline prediction for the state before each call.
    pub baselines: Vec<f32>,
    pub reward: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchTrace {
    pub episodes: Vec<EpisodeTrace>,
}

impl BatchTrace {
    fn horizon(&self) -> usize {
        self.episodes.first().map_or(0, |e| e.actions.len())
    }

    fn n_steps(&self) -> f64 {
        self.episodes.iter().map(|e| e.actions.len()).sum::<usize>() as f64
    }
}

/// Mean cross-entropy of every step's decision against the label.
pub fn supervised_loss(trace: &BatchTrace) -> f64 {
    let n = trace.n_steps();
    if n == 0.0 {
        return 0.0;
    }
    let total: f64 = trace
        .episodes
        .iter()
        .flat_map(|e| e.decisions.iter().map(move |d| cross_entropy(d, e.label).unwrap_or(f64::NAN)))
        .sum();
    total / n
}

/// `-(1/K) sum_k sum_t A_{k,t} log pi(a_{k,t})` with `A = R - b`.
pub fn action_loss(trace: &BatchTrace) -> f64 {
    let k = trace.episodes.len();
    if k == 0 {
        return 0.0;
    }
    let total: f64 = trace
        .episodes
        .iter()
        .map(|e| {
            e.actions
                .iter()
                .zip(&e.policies)
                .zip(&e.baselines)
                .map(|((&a, pi), &b)| (e.reward - b as f64) * (pi[a] as f64).max(PROB_FLOOR).ln())
                .sum::<f64>()
        })
        .sum();
    -total / k as f64
}

fn neg_entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum()
}

fn batch_mean_policy(trace: &BatchTrace, step: usize) -> Vec<f64> {
    let k = trace.episodes.len() as f64;
    let n = trace.episodes[0].policies[step].len();
    let mut mean = vec![0.0; n];
    for e in &trace.episodes {
        mean.iter_mut().zip(&e.policies[step]).for_each(|(m, &p)| *m += p as f64 / k);
    }
    mean
}

/// Entropy bonus split into (batch-mean term over steps >= 2, per-episode term).
pub fn entropy_terms(trace: &BatchTrace, beta: f64) -> (f64, f64) {
    if trace.episodes.is_empty() {
        return (0.0, 0.0);
    }
    let term1: f64 = (1..trace.horizon()).map(|t| neg_entropy(&batch_mean_policy(trace, t))).sum();
    let per_episode: f64 = trace
        .episodes
        .iter()
        .flat_map(|e| e.policies.iter())
        .map(|p| neg_entropy(&p.iter().map(|&v| v as f64).collect::<Vec<_>>()))
        .sum();
    (term1, beta * per_episode / trace.n_steps())
}

pub fn entropy_bonus(trace: &BatchTrace, beta: f64) -> f64 {
    let (a, b) = entropy_terms(trace, beta);
    a + b
}

/// Mean squared error between baseline predictions and the episode reward.
pub fn baseline_loss(trace: &BatchTrace) -> f64 {
    let n = trace.n_steps();
    if n == 0.0 {
        return 0.0;
    }
    let total: f64 = trace
        .episodes
        .iter()
        .flat_map(|e| e.baselines.iter().map(move |&b| (b as f64 - e.reward).powi(2)))
        .sum();
    total / n
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub action: f64,
    pub entropy: f64,
    pub supervised: f64,
    pub baseline: f64,
}

impl LossBreakdown {
    pub fn compose(action: f64, entropy: f64, supervised: f64, baseline: f64, gamma: f64, alpha: f64) -> Self {
        Self { total: gamma * (action + alpha * entropy) + supervised, action, entropy, supervised, baseline }
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.action, self.entropy, self.supervised, self.baseline].iter().all(|v| v.is_finite())
    }
}

/// Loss gradients with respect to the recorded net outputs, indexed
/// `[episode][step]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceGradients {
    pub action_logits: Vec<Vec<Vec<f64>>>,
    pub decision_logits: Vec<Vec<Vec<f64>>>,
    pub baselines: Vec<Vec<f64>>,
}

/// Loss value and its gradients for a frozen trace.
pub fn total_loss(trace: &BatchTrace, config: &TrainConfig) -> Result<(LossBreakdown, TraceGradients)> {
    let action = action_loss(trace);
    let entropy = entropy_bonus(trace, config.beta);
    let supervised = supervised_loss(trace);
    let base = baseline_loss(trace);
    let loss = LossBreakdown::compose(action, entropy, supervised, base, config.gamma, config.alpha);
    if !loss.is_finite() {
        return Err(TrainError::Config(format!("non-finite loss {loss:?}")));
    }

    let k = trace.episodes.len() as f64;
    let steps = trace.n_steps();
    let horizon = trace.horizon();
    let mean_policies: Vec<Vec<f64>> = (0..horizon).map(|t| batch_mean_policy(trace, t)).collect();

    let mut grads = TraceGradients { action_logits: Vec::new(), decision_logits: Vec::new(), baselines: Vec::new() };
    for e in &trace.episodes {
        let mut a_grads = Vec::with_capacity(horizon);
        let mut d_grads = Vec::with_capacity(horizon);
        let mut b_grads = Vec::with_capacity(horizon);
        for t in 0..e.actions.len() {
            let pi: Vec<f64> = e.policies[t].iter().map(|&p| p as f64).collect();
            let advantage = e.reward - e.baselines[t] as f64;

            // dL/dpi for the two entropy terms, then through the softmax
            let mut g_pi = vec![0.0; pi.len()];
            if t >= 1 {
                for (i, g) in g_pi.iter_mut().enumerate() {
                    if mean_policies[t][i] > 0.0 {
                        *g += (mean_policies[t][i].ln() + 1.0) / k;
                    }
                }
            }
            for (i, g) in g_pi.iter_mut().enumerate() {
                if pi[i] > 0.0 {
                    *g += config.beta * (pi[i].ln() + 1.0) / steps;
                }
            }
            let dot: f64 = pi.iter().zip(&g_pi).map(|(p, g)| p * g).sum();
            let a = e.actions[t];
            let logit_grad: Vec<f64> = (0..pi.len())
                .map(|j| {
                    let entropy_part = pi[j] * (g_pi[j] - dot);
                    let indicator = if j == a { 1.0 } else { 0.0 };
                    let action_part = -advantage / k * (indicator - pi[j]);
                    config.gamma * (action_part + config.alpha * entropy_part)
                })
                .collect();
            a_grads.push(logit_grad);

            let ce = softmax_cross_entropy_grad(&e.decisions[t], e.label);
            d_grads.push(ce.into_iter().map(|g| g as f64 / steps).collect());
            b_grads.push(2.0 * (e.baselines[t] as f64 - e.reward) / steps);
        }
        grads.action_logits.push(a_grads);
        grads.decision_logits.push(d_grads);
        grads.baselines.push(b_grads);
    }
    Ok((loss, grads))
}

/// Tapes for backpropagating one episode.
struct EpisodeTapes {
    action: Vec<Tape>,
    decision: Vec<Tape>,
    baseline: Vec<Tape>,
}

fn rollout(
    agent: &Agent,
    env: &Environment<'_>,
    example: usize,
    mode: SelectMode,
    rng: &mut rng::Rng,
) -> Result<(EpisodeTrace, EpisodeTapes)> {
    let mut episode = env.reset(example)?;
    let mut state = agent.initial_state();
    let horizon = env.reward_config().horizon;
    let mut trace = EpisodeTrace {
        label: env.label(&episode),
        actions: Vec::with_capacity(horizon),
        action_logits: Vec::with_capacity(horizon),
        policies: Vec::with_capacity(horizon),
        decision_logits: Vec::with_capacity(horizon),
        decisions: Vec::with_capacity(horizon),
        baselines: Vec::with_capacity(horizon),
        reward: 0.0,
        cost: 0.0,
    };
    let mut tapes = EpisodeTapes { action: Vec::new(), decision: Vec::new(), baseline: Vec::new() };
    for _ in 0..horizon {
        let (logits, a_tape) = agent.action_logits(&state)?;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::Config("non-finite action logits".into()));
        }
        let policy = agent.policy_from_logits(&logits, &state)?;
        let (b, b_tape) = agent.baseline_train(&state, rng)?;
        let action = select_action(&policy, mode, rng);
        let (response, _) = env.query(&mut episode, action)?;
        if agent.config.hard_mask {
            state.encode_response(action, response)?;
        } else if !state.is_called(action) {
            // soft mode: a repeated call reveals nothing new
            state.encode_response(action, response)?;
        }
        let (d_logits, d_tape) = agent.decision_logits(&state)?;
        trace.decisions.push(softmax(&d_logits));
        trace.decision_logits.push(d_logits);
        trace.actions.push(action);
        trace.action_logits.push(logits);
        trace.policies.push(policy);
        trace.baselines.push(b);
        tapes.action.push(a_tape);
        tapes.decision.push(d_tape);
        tapes.baseline.push(b_tape);
    }
    let prediction = argmax(trace.decisions.last().expect("horizon >= 1"));
    trace.reward = env.finalize(&episode, prediction)?;
    trace.cost = episode.accumulated_cost;
    Ok((trace, tapes))
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Per-net parameter gradients accumulated over one episode.
fn episode_gradients(
    agent: &Agent,
    tapes: &EpisodeTapes,
    grads: &TraceGradients,
    k: usize,
) -> Result<(Gradients, Gradients, Gradients)> {
    let nets = &agent.nets;
    let mut ga = Gradients::zeros_like(&nets.action);
    let mut gd = Gradients::zeros_like(&nets.decision);
    let mut gb = Gradients::zeros_like(&nets.baseline);
    for t in 0..tapes.action.len() {
        ga.add_assign(&nets.action.backward(&tapes.action[t], &to_f32(&grads.action_logits[k][t]))?);
        gd.add_assign(&nets.decision.backward(&tapes.decision[t], &to_f32(&grads.decision_logits[k][t]))?);
        gb.add_assign(&nets.baseline.backward(&tapes.baseline[t], &[grads.baselines[k][t] as f32])?);
    }
    Ok((ga, gd, gb))
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub test_accuracy: f64,
    /// Share of all test-split calls that went to each classifier.
    pub call_freq: Vec<f64>,
    /// Whether every test example got a bitwise-identical first-step policy.
    pub first_step_identical: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    pub n_classifiers: usize,
    pub rows: Vec<EpochRecord>,
}

impl MetricsLog {
    pub fn header(n_classifiers: usize) -> Vec<String> {
        let mut h: Vec<String> = [
            "epoch",
            "loss_total",
            "loss_action",
            "loss_entropy",
            "loss_supervised",
            "loss_baseline",
            "test_accuracy",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        h.extend((0..n_classifiers).map(|i| format!("call_freq_{i}")));
        h
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let err = |e: csv::Error| TrainError::Log(e.to_string());
        out.write_record(Self::header(self.n_classifiers)).map_err(err)?;
        for r in &self.rows {
            let mut rec = vec![
                r.epoch.to_string(),
                r.loss.total.to_string(),
                r.loss.action.to_string(),
                r.loss.entropy.to_string(),
                r.loss.supervised.to_string(),
                r.loss.baseline.to_string(),
                r.test_accuracy.to_string(),
            ];
            rec.extend(r.call_freq.iter().map(|f| f.to_string()));
            out.write_record(rec).map_err(err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Parses a log written by [`write_csv`](Self::write_csv).
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let headers = reader.headers().map_err(|e| TrainError::Log(e.to_string()))?.clone();
        let n = headers.len().checked_sub(7).ok_or_else(|| TrainError::Log("too few columns".into()))?;
        let expected = Self::header(n);
        if headers.iter().ne(expected.iter().map(String::as_str)) {
            return Err(TrainError::Log(format!("unexpected header {headers:?}")));
        }
        let mut rows = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| TrainError::Log(e.to_string()))?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| TrainError::Log(format!("row {}: bad value in column {}", line + 1, expected[i])))
            };
            rows.push(EpochRecord {
                epoch: num(0)? as usize,
                loss: LossBreakdown { total: num(1)?, action: num(2)?, entropy: num(3)?, supervised: num(4)?, baseline: num(5)? },
                test_accuracy: num(6)?,
                call_freq: (0..n).map(|i| num(7 + i)).collect::<Result<_>>()?,
                first_step_identical: true,
            });
        }
        Ok(Self { n_classifiers: n, rows })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub agent: Agent,
    pub log: MetricsLog,
}

/// Trains `agent` on the pool's train split, evaluating on test after every epoch.
pub fn train(pool: &Pool, mut agent: Agent, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if agent.config.n_classifiers != pool.n_classifiers() || agent.config.n_classes != pool.n_classes() {
        return Err(TrainError::Mismatch(format!(
            "agent is {}x{}, pool is {}x{}",
            agent.config.n_classifiers,
            agent.config.n_classes,
            pool.n_classifiers(),
            pool.n_classes()
        )));
    }
    let env = Environment::new(pool, Split::Train, config.reward(), agent.config.hard_mask)?;
    // fail early if the test split is missing
    Environment::new(pool, Split::Test, config.reward(), agent.config.hard_mask)?;

    let mut opt_action = Optimizer::new(config.optimizer, config.learning_rate)?;
    let mut opt_decision = Optimizer::new(config.optimizer, config.learning_rate)?;
    let mut opt_baseline = Optimizer::new(config.optimizer, config.learning_rate)?;

    let n = env.n_examples();
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = MetricsLog { n_classifiers: pool.n_classifiers(), rows: Vec::with_capacity(config.epochs) };
    let mut last_good = agent.clone();

    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        for opt in [&mut opt_action, &mut opt_decision, &mut opt_baseline] {
            opt.set_learning_rate(lr);
        }
        order.shuffle(&mut rng::stream(config.seed, rng::mix(&[1, epoch as u64])));

        let mut sums = LossBreakdown::default();
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let rolled = chunk
                .par_iter()
                .enumerate()
                .map(|(pos, &example)| {
                    let mut r = rng::stream(config.seed, rng::mix(&[2, epoch as u64, b as u64, pos as u64]));
                    rollout(&agent, &env, example, SelectMode::Sample, &mut r)
                })
                .collect::<Result<Vec<_>>>();
            let rolled = match rolled {
                Ok(v) => v,
                Err(TrainError::Config(detail)) => {
                    return Err(TrainError::Diverged { epoch: epoch + 1, batch: b, detail, last_good: Box::new(last_good) })
                }
                Err(e) => return Err(e),
            };
            let (episodes, tapes): (Vec<_>, Vec<_>) = rolled.into_iter().unzip();
            let trace = BatchTrace { episodes };
            let (loss, grads) = match total_loss(&trace, config) {
                Ok(v) => v,
                Err(TrainError::Config(detail)) => {
                    return Err(TrainError::Diverged { epoch: epoch + 1, batch: b, detail, last_good: Box::new(last_good) })
                }
                Err(e) => return Err(e),
            };
            let per_episode = tapes
                .par_iter()
                .enumerate()
                .map(|(k, t)| episode_gradients(&agent, t, &grads, k))
                .collect::<Result<Vec<_>>>()?;
            let mut ga = Gradients::zeros_like(&agent.nets.action);
            let mut gd = Gradients::zeros_like(&agent.nets.decision);
            let mut gb = Gradients::zeros_like(&agent.nets.baseline);
            for (a, d, bb) in &per_episode {
                ga.add_assign(a);
                gd.add_assign(d);
                gb.add_assign(bb);
            }
            let step = opt_action
                .step(&mut agent.nets.action, &ga)
                .and_then(|_| opt_decision.step(&mut agent.nets.decision, &gd))
                .and_then(|_| opt_baseline.step(&mut agent.nets.baseline, &gb));
            if let Err(e) = step {
                return Err(TrainError::Diverged {
                    epoch: epoch + 1,
                    batch: b,
                    detail: e.to_string(),
                    last_good: Box::new(last_good),
                });
            }
            sums.action += loss.action;
            sums.entropy += loss.entropy;
            sums.supervised += loss.supervised;
            sums.baseline += loss.baseline;
            batches += 1;
        }
        let m = batches as f64;
        let loss = LossBreakdown::compose(
            sums.action / m,
            sums.entropy / m,
            sums.supervised / m,
            sums.baseline / m,
            config.gamma,
            config.alpha,
        );
        let report = match evaluate(pool, &agent, Split::Test, config.reward(), config.eval_mode, config.seed) {
            Ok(r) => r,
            Err(TrainError::Config(detail)) => {
                return Err(TrainError::Diverged { epoch: epoch + 1, batch: batches, detail, last_good: Box::new(last_good) })
            }
            Err(e) => return Err(e),
        };
        log.rows.push(EpochRecord {
            epoch: epoch + 1,
            loss,
            test_accuracy: report.accuracy,
            call_freq: report.call_freq,
            first_step_identical: report.first_step_identical,
        });
        last_good = agent.clone();
    }
    Ok(TrainOutcome { agent, log })
}

/// Result of running the agent over a split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_reward: f64,
    pub mean_cost: f64,
    /// Share of all calls that went to each classifier; sums to 1.
    pub call_freq: Vec<f64>,
    /// Ordered classifier sequence of every example.
    pub trajectories: Vec<Vec<usize>>,
    /// Multiset of ordered action sequences.
    pub trajectory_counts: BTreeMap<Vec<usize>, usize>,
    pub predictions: Vec<usize>,
    pub first_step_identical: bool,
}

impl EvalReport {
    pub fn has_repeated_calls(&self) -> bool {
        self.trajectories.iter().any(|t| {
            let mut s = t.clone();
            s.sort_unstable();
            s.windows(2).any(|w| w[0] == w[1])
        })
    }
}

/// Runs one episode per example of `split`. Argmax mode is deterministic;
/// sample mode draws from streams of `seed`.
pub fn evaluate(
    pool: &Pool,
    agent: &Agent,
    split: Split,
    reward: RewardConfig,
    mode: SelectMode,
    seed: u64,
) -> Result<EvalReport> {
    let env = Environment::new(pool, split, reward, agent.config.hard_mask)?;
    let first_policy = agent.policy(&agent.initial_state())?;
    let results = (0..env.n_examples())
        .into_par_iter()
        .map(|e| {
            let mut r = rng::stream(seed, rng::mix(&[3, e as u64]));
            let mut episode = env.reset(e)?;
            let mut state = agent.initial_state();
            let mut first_same = true;
            for t in 0..reward.horizon {
                let policy = agent.policy(&state)?;
                if policy.iter().any(|p| !p.is_finite()) {
                    return Err(TrainError::Config("non-finite policy".into()));
                }
                if t == 0 {
                    first_same = policy == first_policy;
                }
                let action = select_action(&policy, mode, &mut r);
                let (response, _) = env.query(&mut episode, action)?;
                if !state.is_called(action) {
                    state.encode_response(action, response)?;
                }
            }
            let prediction = agent.predict_class(&state)?;
            let rew = env.finalize(&episode, prediction)?;
            Ok((episode, prediction, rew, first_same))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = results.len().max(1) as f64;
    let mut calls = vec![0usize; pool.n_classifiers()];
    let mut counts = BTreeMap::new();
    let mut report = EvalReport {
        accuracy: 0.0,
        mean_reward: 0.0,
        mean_cost: 0.0,
        call_freq: Vec::new(),
        trajectories: Vec::with_capacity(results.len()),
        trajectory_counts: BTreeMap::new(),
        predictions: Vec::with_capacity(results.len()),
        first_step_identical: true,
    };
    for (episode, prediction, rew, first_same) in results {
        if prediction == env.label(&episode) {
            report.accuracy += 1.0;
        }
        report.mean_reward += rew;
        report.mean_cost += episode.accumulated_cost;
        report.first_step_identical &= first_same;
        episode.called.iter().for_each(|&c| calls[c] += 1);
        *counts.entry(episode.called.clone()).or_insert(0) += 1;
        report.trajectories.push(episode.called);
        report.predictions.push(prediction);
    }
    report.accuracy /= n;
    report.mean_reward /= n;
    report.mean_cost /= n;
    let total_calls = calls.iter().sum::<usize>().max(1) as f64;
    report.call_freq = calls.iter().map(|&c| c as f64 / total_calls).collect();
    report.trajectory_counts = counts;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn episode(label: usize, actions: Vec<usize>, policies: Vec<Vec<f32>>, decisions: Vec<Vec<f32>>, baselines: Vec<f32>, reward: f64) -> EpisodeTrace {
        EpisodeTrace {
            label,
            action_logits: policies.iter().map(|p| p.iter().map(|v| v.max(1e-30).ln()).collect()).collect(),
            decision_logits: decisions.iter().map(|p| p.iter().map(|v| v.max(1e-30).ln()).collect()).collect(),
            actions,
            policies,
            decisions,
            baselines,
            reward,
            cost: 0.0,
        }
    }

    #[test]
    fn supervised_loss_examples() {
        let perfect = BatchTrace { episodes: vec![episode(1, vec![0, 1], vec![vec![0.5, 0.5]; 2], vec![vec![0.0, 1.0]; 2], vec![0.0; 2], 1.0)] };
        assert_eq!(supervised_loss(&perfect), 0.0);
        let uniform = BatchTrace { episodes: vec![episode(3, vec![0], vec![vec![1.0]], vec![vec![0.1; 10]], vec![0.0], 0.0)] };
        assert!((supervised_loss(&uniform) - 10f64.ln()).abs() < 1e-6);
        let mixed = BatchTrace {
            episodes: vec![episode(0, vec![0, 1], vec![vec![0.5, 0.5]; 2], vec![vec![1.0, 0.0], vec![0.5, 0.5]], vec![0.0; 2], 1.0)],
        };
        assert!((supervised_loss(&mixed) - 2f64.ln() / 2.0).abs() < 1e-9);
    }

    #[test]
    fn action_loss_examples() {
        let zero_adv = BatchTrace { episodes: vec![episode(0, vec![1], vec![vec![0.3, 0.7]], vec![vec![1.0, 0.0]], vec![1.0], 1.0)] };
        assert_eq!(action_loss(&zero_adv), 0.0);
        let one = BatchTrace { episodes: vec![episode(0, vec![0], vec![vec![0.5, 0.5]], vec![vec![1.0, 0.0]], vec![0.0], 1.0)] };
        assert!((action_loss(&one) - 2f64.ln()).abs() < 1e-9);
        let mut doubled = one.clone();
        doubled.episodes.extend(one.episodes.clone());
        assert!((action_loss(&doubled) - action_loss(&one)).abs() < 1e-12);
    }

    #[test]
    fn entropy_examples() {
        let horizon_one = BatchTrace { episodes: vec![episode(0, vec![0], vec![vec![0.5, 0.5]], vec![vec![1.0, 0.0]], vec![0.0], 1.0)] };
        assert_eq!(entropy_terms(&horizon_one, 0.0).0, 0.0);
        let uniform = BatchTrace {
            episodes: (0..3).map(|_| episode(0, vec![0, 1], vec![vec![0.25; 4]; 2], vec![vec![1.0, 0.0]; 2], vec![0.0; 2], 1.0)).collect(),
        };
        assert!((entropy_terms(&uniform, 0.0).0 + 4f64.ln()).abs() < 1e-6);
        let det = BatchTrace {
            episodes: (0..3).map(|_| episode(0, vec![0, 2], vec![vec![0.0, 0.0, 1.0]; 2], vec![vec![1.0, 0.0]; 2], vec![0.0; 2], 1.0)).collect(),
        };
        assert_eq!(entropy_terms(&det, 1.0), (0.0, 0.0));
    }

    #[test]
    fn baseline_loss_examples() {
        let perfect = BatchTrace { episodes: vec![episode(0, vec![0], vec![vec![1.0]], vec![vec![1.0, 0.0]], vec![1.0], 1.0)] };
        assert_eq!(baseline_loss(&perfect), 0.0);
        let zero = BatchTrace { episodes: vec![episode(0, vec![0], vec![vec![1.0]], vec![vec![1.0, 0.0]], vec![0.0], 1.0)] };
        assert_eq!(baseline_loss(&zero), 1.0);
        let half = BatchTrace {
            episodes: vec![
                episode(0, vec![0], vec![vec![1.0]], vec![vec![1.0, 0.0]], vec![0.5], 1.0),
                episode(0, vec![0], vec![vec![1.0]], vec![vec![1.0, 0.0]], vec![0.5], 0.0),
            ],
        };
        assert_eq!(baseline_loss(&half), 0.25);
    }

    #[test]
    fn composition_arithmetic() {
        let l = LossBreakdown::compose(2.0, -1.0, 1.0, 0.0, 0.01, 0.5);
        assert!((l.total - 1.015).abs() < 1e-12);
        let pure = LossBreakdown::compose(5.0, -3.0, 0.7, 0.2, 0.0, 0.5);
        assert_eq!(pure.total, 0.7);
    }

    #[test]
    fn schedule_rescales_with_epochs() {
        let c = TrainConfig::default().with_epochs(60);
        assert_eq!(c.lr_drops, vec![51, 57]);
        c.validate().unwrap();
        assert_eq!(c.learning_rate_at(50), 1e-3);
        assert!((c.learning_rate_at(51) - 1e-4).abs() < 1e-15);
        assert!((c.learning_rate_at(59) - 1e-5).abs() < 1e-15);
        let d = TrainConfig::default();
        assert!((d.learning_rate_at(169) - 1e-3).abs() < 1e-15);
        assert!((d.learning_rate_at(170) - 1e-4).abs() < 1e-15);
        let bad = TrainConfig { epochs: 100, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
        let zero = TrainConfig { horizon: 0, ..TrainConfig::default() };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn metrics_csv_round_trip() {
        let log = MetricsLog {
            n_classifiers: 2,
            rows: vec![EpochRecord {
                epoch: 1,
                loss: LossBreakdown::compose(0.1, -0.3, 1.2, 0.25, 0.01, 0.5),
                test_accuracy: 0.75,
                call_freq: vec![0.5, 0.5],
                first_step_identical: true,
            }],
        };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("epoch,loss_total,loss_action,loss_entropy,loss_supervised,loss_baseline,test_accuracy,call_freq_0,call_freq_1\n"));
        assert_eq!(MetricsLog::read_csv(buf.as_slice()).unwrap(), log);
    }
}
