//! Oracles and reports.
//!
//! The oracles are exact policy optima on small pools. Responses are reduced
//! to a pattern (argmax class, whether the top probability is at least 0.9),
//! and the final answer for an observed set of patterns is the majority
//! train-split label among examples showing that set. Policies are scored
//! on the test split.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numkit::argmax;
use crate::pool::{Pool, PoolError, ResponseTable, Split};
use crate::stacker::k_subsets;
use crate::training::MetricsLog;

pub const CONFIDENT: f32 = 0.9;
pub const MAX_FIXED_POOL: usize = 20;
pub const MAX_ADAPTIVE_POOL: usize = 6;
pub const MAX_ADAPTIVE_HORIZON: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("search too large: {0}")]
    TooLarge(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("malformed metrics log: {0}")]
    MalformedLog(String),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// Discretized response: `2 * argmax + confident`.
pub fn discretize(response: &[f32]) -> u32 {
    let top = argmax(response);
    2 * top as u32 + u32::from(response[top] >= CONFIDENT)
}

/// Pattern of every classifier on every example of a split.
struct Patterns {
    labels: Vec<usize>,
    codes: Vec<Vec<u32>>,
}

impl Patterns {
    fn of(table: &ResponseTable) -> Self {
        Self {
            labels: (0..table.n_examples()).map(|e| table.label(e)).collect(),
            codes: (0..table.n_examples())
                .map(|e| (0..table.n_classifiers()).map(|k| discretize(table.response(e, k))).collect())
                .collect(),
        }
    }
}

/// Majority-label decisions keyed by the sorted observed `(classifier, code)` set.
struct BayesRule<'a> {
    train: &'a Patterns,
    n_classes: usize,
    fallback: usize,
}

impl<'a> BayesRule<'a> {
    fn new(train: &'a Patterns, n_classes: usize) -> Self {
        let fallback = majority(train.labels.iter().copied(), n_classes).unwrap_or(0);
        Self { train, n_classes, fallback }
    }

    fn decide(&self, train_rows: &[usize]) -> usize {
        majority(train_rows.iter().map(|&e| self.train.labels[e]), self.n_classes).unwrap_or(self.fallback)
    }
}

fn majority(labels: impl Iterator<Item = usize>, n_classes: usize) -> Option<usize> {
    let mut counts = vec![0usize; n_classes];
    let mut any = false;
    for l in labels {
        counts[l] += 1;
        any = true;
    }
    any.then(|| {
        let mut best = 0;
        for (c, &n) in counts.iter().enumerate() {
            if n > counts[best] {
                best = c;
            }
        }
        best
    })
}

/// Test hits of a fixed subset.
fn subset_hits(rule: &BayesRule<'_>, test: &Patterns, subset: &[usize]) -> usize {
    let mut groups: BTreeMap<Vec<u32>, Vec<usize>> = BTreeMap::new();
    for (e, codes) in rule.train.codes.iter().enumerate() {
        groups.entry(subset.iter().map(|&k| codes[k]).collect()).or_default().push(e);
    }
    let decisions: BTreeMap<&Vec<u32>, usize> = groups.iter().map(|(key, rows)| (key, rule.decide(rows))).collect();
    test.codes
        .iter()
        .zip(&test.labels)
        .filter(|(codes, &label)| {
            let key: Vec<u32> = subset.iter().map(|&k| codes[k]).collect();
            decisions.get(&key).copied().unwrap_or(rule.fallback) == label
        })
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedOracle {
    pub k: usize,
    pub accuracy: f64,
    /// Best subset; lexicographically smallest among equals.
    pub subset: Vec<usize>,
}

/// Best test accuracy over every `k`-subset of classifiers.
pub fn oracle_fixed(pool: &Pool, k: usize) -> Result<FixedOracle> {
    let n = pool.n_classifiers();
    if k == 0 || k > n {
        return Err(AnalysisError::Invalid(format!("k = {k} is not in 1..={n}")));
    }
    if n > MAX_FIXED_POOL {
        return Err(AnalysisError::TooLarge(format!(
            "{n} classifiers; the fixed oracle enumerates subsets of at most {MAX_FIXED_POOL}, use `pool subset` first"
        )));
    }
    let train = Patterns::of(pool.table(Split::Train)?);
    let test = Patterns::of(pool.table(Split::Test)?);
    let rule = BayesRule::new(&train, pool.n_classes());
    let scored: Vec<(usize, Vec<usize>)> = k_subsets(n, k)
        .into_par_iter()
        .map(|s| (subset_hits(&rule, &test, &s), s))
        .collect();
    let (hits, subset) = scored.into_iter().reduce(|a, b| if b.0 > a.0 { b } else { a }).expect("k <= n");
    Ok(FixedOracle { k, accuracy: hits as f64 / test.labels.len().max(1) as f64, subset })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveOracle {
    pub horizon: usize,
    pub accuracy: f64,
    /// Classifier of the best tree's root.
    pub first: usize,
}

/// Best test accuracy over decision trees of the given depth that pick the
/// next classifier from the patterns observed so far.
pub fn oracle_adaptive(pool: &Pool, horizon: usize) -> Result<AdaptiveOracle> {
    let n = pool.n_classifiers();
    if n > MAX_ADAPTIVE_POOL || horizon > MAX_ADAPTIVE_HORIZON {
        return Err(AnalysisError::TooLarge(format!(
            "{n} classifiers at horizon {horizon}; the adaptive oracle handles at most {MAX_ADAPTIVE_POOL} classifiers \
             and horizon {MAX_ADAPTIVE_HORIZON}, use `pool subset` first"
        )));
    }
    if horizon == 0 || horizon > n {
        return Err(AnalysisError::Invalid(format!("horizon {horizon} is not in 1..={n}")));
    }
    let train = Patterns::of(pool.table(Split::Train)?);
    let test = Patterns::of(pool.table(Split::Test)?);
    let rule = BayesRule::new(&train, pool.n_classes());
    let all_train: Vec<usize> = (0..train.labels.len()).collect();
    let all_test: Vec<usize> = (0..test.labels.len()).collect();
    let scored: Vec<(usize, usize)> = (0..n)
        .into_par_iter()
        .map(|a| (branch_hits(&rule, &test, &all_train, &all_test, &mut vec![a], a, horizon), a))
        .collect();
    let (hits, first) = scored.into_iter().reduce(|a, b| if b.0 > a.0 { b } else { a }).expect("n >= 1");
    Ok(AdaptiveOracle { horizon, accuracy: hits as f64 / test.labels.len().max(1) as f64, first })
}

/// Hits after calling `a` on the rows consistent with the history so far.
fn branch_hits(
    rule: &BayesRule<'_>,
    test: &Patterns,
    train_rows: &[usize],
    test_rows: &[usize],
    used: &mut Vec<usize>,
    a: usize,
    depth_left: usize,
) -> usize {
    let mut groups: BTreeMap<u32, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for &e in train_rows {
        groups.entry(rule.train.codes[e][a]).or_default().0.push(e);
    }
    for &e in test_rows {
        groups.entry(test.codes[e][a]).or_default().1.push(e);
    }
    let n = rule.train.codes.first().map_or(0, Vec::len);
    let mut total = 0;
    for (tr, te) in groups.values() {
        if te.is_empty() {
            continue;
        }
        total += if depth_left == 1 {
            let decision = if tr.is_empty() { rule.fallback } else { rule.decide(tr) };
            te.iter().filter(|&&e| test.labels[e] == decision).count()
        } else {
            let mut best = 0;
            for b in 0..n {
                if used.contains(&b) {
                    continue;
                }
                used.push(b);
                best = best.max(branch_hits(rule, test, tr, te, used, b, depth_left - 1));
                used.pop();
            }
            best
        };
    }
    total
}

/// Per-classifier call shares over epochs. Every epoch's shares sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyCurve {
    pub epochs: Vec<usize>,
    /// `series[i][t]`: share of calls to classifier `i` at epoch `epochs[t]`.
    pub series: Vec<Vec<f64>>,
}

pub fn call_frequency_curve(log: &MetricsLog) -> Result<FrequencyCurve> {
    if log.rows.is_empty() {
        return Err(AnalysisError::MalformedLog("no rows".into()));
    }
    let n = log.n_classifiers;
    let mut curve = FrequencyCurve { epochs: Vec::new(), series: vec![Vec::new(); n] };
    for row in &log.rows {
        if row.call_freq.len() != n {
            return Err(AnalysisError::MalformedLog(format!("epoch {} has {} frequencies", row.epoch, row.call_freq.len())));
        }
        let sum: f64 = row.call_freq.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || row.call_freq.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(AnalysisError::MalformedLog(format!("epoch {} frequencies do not form shares", row.epoch)));
        }
        curve.epochs.push(row.epoch);
        row.call_freq.iter().zip(&mut curve.series).for_each(|(&f, s)| s.push(f));
    }
    Ok(curve)
}

pub fn read_frequency_curve<R: Read>(r: R) -> Result<FrequencyCurve> {
    let log = MetricsLog::read_csv(r).map_err(|e| AnalysisError::MalformedLog(e.to_string()))?;
    call_frequency_curve(&log)
}

impl FrequencyCurve {
    /// CSV with columns `epoch, call_share_0, ...`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let err = |e: csv::Error| AnalysisError::Invalid(e.to_string());
        let mut header = vec!["epoch".to_string()];
        header.extend((0..self.series.len()).map(|i| format!("call_share_{i}")));
        out.write_record(header).map_err(err)?;
        for (t, epoch) in self.epochs.iter().enumerate() {
            let mut rec = vec![epoch.to_string()];
            rec.extend(self.series.iter().map(|s| s[t].to_string()));
            out.write_record(rec).map_err(err)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Node {
    Start,
    Classifier(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: Node,
    pub to: usize,
    pub count: usize,
    /// `count` over all transitions leaving `from`.
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryGraph {
    pub names: Vec<String>,
    /// Share of all calls that went to each classifier.
    pub call_share: Vec<f64>,
    /// Sorted by `(from, to)`.
    pub edges: Vec<Edge>,
}

/// Transition graph of a set of classifier-call sequences.
pub fn trajectory_graph(trajectories: &[Vec<usize>], names: &[String]) -> Result<TrajectoryGraph> {
    if trajectories.is_empty() {
        return Err(AnalysisError::Invalid("no trajectories".into()));
    }
    let n = names.len();
    let mut counts: BTreeMap<(Node, usize), usize> = BTreeMap::new();
    let mut calls = vec![0usize; n];
    for t in trajectories {
        let mut from = Node::Start;
        for &k in t {
            if k >= n {
                return Err(AnalysisError::Invalid(format!("classifier {k} out of range for {n} names")));
            }
            *counts.entry((from, k)).or_insert(0) += 1;
            calls[k] += 1;
            from = Node::Classifier(k);
        }
    }
    let mut outgoing: BTreeMap<Node, usize> = BTreeMap::new();
    for (&(from, _), &c) in &counts {
        *outgoing.entry(from).or_insert(0) += c;
    }
    let edges = counts
        .into_iter()
        .map(|((from, to), count)| Edge { from, to, count, probability: count as f64 / outgoing[&from] as f64 })
        .collect();
    let total = calls.iter().sum::<usize>().max(1) as f64;
    Ok(TrajectoryGraph {
        names: names.to_vec(),
        call_share: calls.iter().map(|&c| c as f64 / total).collect(),
        edges,
    })
}

impl TrajectoryGraph {
    pub fn outgoing(&self, from: Node) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.from == from)
    }

    pub fn is_reachable(&self, k: usize) -> bool {
        self.edges.iter().any(|e| e.to == k)
    }

    /// Graphviz text; unreachable classifiers are drawn dashed.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph lac {\n  rankdir=LR;\n  s [label=\"s\", shape=circle];\n");
        for (k, name) in self.names.iter().enumerate() {
            let style = if self.is_reachable(k) { "" } else { ", style=dashed" };
            let _ = writeln!(s, "  c{k} [label=\"{}\\n{:.3}\"{style}];", escape(name), self.call_share[k]);
        }
        for e in &self.edges {
            let from = match e.from {
                Node::Start => "s".to_string(),
                Node::Classifier(k) => format!("c{k}"),
            };
            let _ = writeln!(s, "  {from} -> c{} [label=\"{:.3}\"];", e.to, e.probability);
        }
        s.push_str("}\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// One budget of a budget-accuracy table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub horizon: usize,
    pub test_accuracy: f64,
    pub mean_cost: f64,
}

pub fn write_budget_csv<W: Write>(rows: &[BudgetRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| AnalysisError::Invalid(e.to_string());
    out.write_record(["horizon", "test_accuracy", "mean_cost"]).map_err(err)?;
    for r in rows {
        out.write_record([r.horizon.to_string(), r.test_accuracy.to_string(), r.mean_cost.to_string()]).map_err(err)?;
    }
    out.flush()?;
    Ok(())
}
