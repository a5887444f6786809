//! Context-agnostic baselines: an MLP or k-NN over the concatenated responses
//! of a fixed classifier subset, and exhaustive best-subset search.

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numkit::{argmax, mlp_specs, softmax, softmax_cross_entropy_grad, DenseNet, Gradients, Mode, NumError, Optimizer};
use crate::pool::{Pool, PoolError, ResponseTable, Split};
use crate::rng;

#[derive(Debug, thiserror::Error)]
pub enum StackError {
    #[error("invalid stacker configuration: {0}")]
    Config(String),
    #[error("stacker diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("results: {0}")]
    Output(String),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Net(#[from] NumError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, StackError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StackerConfig {
    /// Number of fully connected layers, 3 or 5.
    pub depth: usize,
    /// Hidden widths; `None` picks the default for `depth`.
    pub hidden: Option<Vec<usize>>,
    pub subset: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for StackerConfig {
    fn default() -> Self {
        Self { depth: 3, hidden: None, subset: Vec::new(), epochs: 30, batch_size: 64, learning_rate: 1e-3, seed: 0 }
    }
}

impl StackerConfig {
    pub fn hidden_widths(&self) -> Result<Vec<usize>> {
        match (&self.hidden, self.depth) {
            (Some(h), d) if h.len() + 1 == d => Ok(h.clone()),
            (Some(h), d) => Err(StackError::Config(format!("{} hidden widths do not make {d} layers", h.len()))),
            (None, 3) => Ok(vec![256, 128]),
            (None, 5) => Ok(vec![256, 256, 128, 64]),
            (None, d) => Err(StackError::Config(format!("depth must be 3 or 5, got {d}"))),
        }
    }

    fn validate(&self, pool: &Pool) -> Result<()> {
        self.hidden_widths()?;
        check_subset(&self.subset, pool.n_classifiers())?;
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(StackError::Config("epochs, batch_size and learning_rate must be positive".into()));
        }
        Ok(())
    }
}

fn check_subset(subset: &[usize], n: usize) -> Result<()> {
    if subset.is_empty() {
        return Err(StackError::Config("subset is empty".into()));
    }
    let mut sorted = subset.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != subset.len() {
        return Err(StackError::Config(format!("subset {subset:?} repeats a classifier")));
    }
    if let Some(&id) = subset.iter().find(|&&id| id >= n) {
        return Err(StackError::Config(format!("classifier {id} out of range for a pool of {n}")));
    }
    Ok(())
}

fn split_features(table: &ResponseTable, subset: &[usize]) -> Vec<Vec<f32>> {
    (0..table.n_examples()).map(|e| table.features(e, subset)).collect()
}

fn net_accuracy(net: &DenseNet, table: &ResponseTable, subset: &[usize]) -> Result<f64> {
    if table.n_examples() == 0 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for e in 0..table.n_examples() {
        if argmax(&net.predict(&table.features(e, subset))?) == table.label(e) {
            hits += 1;
        }
    }
    Ok(hits as f64 / table.n_examples() as f64)
}

#[derive(Debug, Clone)]
pub struct StackerResult {
    pub subset: Vec<usize>,
    pub net: DenseNet,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
}

/// Trains on the train split with cross-entropy and reports validation and
/// test accuracy.
pub fn train_stacker(pool: &Pool, config: &StackerConfig) -> Result<StackerResult> {
    config.validate(pool)?;
    let subset = &config.subset;
    let train = pool.table(Split::Train)?;
    let features = split_features(train, subset);
    let input_dim = subset.len() * pool.n_classes();
    let mut r = rng::stream(config.seed, rng::mix(&[20, subset.len() as u64, rng::mix(&subset.iter().map(|&i| i as u64).collect::<Vec<_>>())]));
    let mut net = DenseNet::new(input_dim, &mlp_specs(&config.hidden_widths()?, pool.n_classes()), &mut r)?;
    let mut opt = Optimizer::adam(config.learning_rate)?;
    let mut order: Vec<usize> = (0..features.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(config.batch_size) {
            let mut grads = Gradients::zeros_like(&net);
            let scale = 1.0 / chunk.len() as f32;
            for &e in chunk {
                let (out, tape) = net.forward(&features[e], Mode::Train, &mut r)?;
                let g: Vec<f32> = softmax_cross_entropy_grad(&softmax(&out), train.label(e)).into_iter().map(|v| v * scale).collect();
                grads.add_assign(&net.backward(&tape, &g)?);
            }
            opt.step(&mut net, &grads).map_err(|e| StackError::Diverged { epoch: epoch + 1, detail: e.to_string() })?;
        }
    }
    Ok(StackerResult {
        subset: subset.clone(),
        train_acc: net_accuracy(&net, train, subset)?,
        val_acc: net_accuracy(&net, pool.table(Split::Val)?, subset)?,
        test_acc: net_accuracy(&net, pool.table(Split::Test)?, subset)?,
        net,
    })
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn k_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k <= n {
        rec(0, n, k, &mut Vec::new(), &mut out);
    }
    out
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackRow {
    pub subset: Vec<usize>,
    pub k: usize,
    pub val_acc: f64,
    pub test_acc: f64,
}

impl From<&StackerResult> for StackRow {
    fn from(r: &StackerResult) -> Self {
        Self { subset: r.subset.clone(), k: r.subset.len(), val_acc: r.val_acc, test_acc: r.test_acc }
    }
}

#[derive(Debug, Clone)]
pub struct SubsetSearch {
    pub best: StackerResult,
    /// Every subset tried, lexicographic order.
    pub rows: Vec<StackRow>,
}

/// Trains one stacker per `k`-subset and keeps the best by validation
/// accuracy; ties go to the lexicographically smallest subset.
pub fn best_subset(pool: &Pool, k: usize, config: &StackerConfig) -> Result<SubsetSearch> {
    if k == 0 || k > pool.n_classifiers() {
        return Err(StackError::Config(format!("k = {k} is not in 1..={}", pool.n_classifiers())));
    }
    let results = k_subsets(pool.n_classifiers(), k)
        .into_par_iter()
        .map(|subset| train_stacker(pool, &StackerConfig { subset, ..config.clone() }))
        .collect::<Result<Vec<_>>>()?;
    let rows = results.iter().map(StackRow::from).collect();
    // strict comparison keeps the earliest of equal accuracies
    let best = results.into_iter().reduce(|a, b| if b.val_acc > a.val_acc { b } else { a }).expect("at least one subset");
    Ok(SubsetSearch { best, rows })
}

/// Majority vote among the `k` nearest reference rows (Euclidean). Distance
/// ties go to the lower reference index, vote ties to the lower class.
pub fn knn_predict(reference: &[Vec<f32>], labels: &[usize], n_classes: usize, query: &[f32], k: usize) -> usize {
    let mut dist: Vec<(f64, usize)> = reference
        .iter()
        .enumerate()
        .map(|(i, r)| (r.iter().zip(query).map(|(a, b)| ((a - b) as f64).powi(2)).sum(), i))
        .collect();
    let k = k.min(dist.len());
    if k < dist.len() {
        dist.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).expect("finite distances"));
    }
    let mut votes = vec![0usize; n_classes];
    dist[..k].iter().for_each(|&(_, i)| votes[labels[i]] += 1);
    let mut best = 0;
    for (c, &v) in votes.iter().enumerate() {
        if v > votes[best] {
            best = c;
        }
    }
    best
}

/// k-NN over the train split, scored on `split`.
pub fn knn_stacker(pool: &Pool, k_neighbors: usize, subset: &[usize], split: Split) -> Result<f64> {
    if k_neighbors == 0 {
        return Err(StackError::Config("k_neighbors must be at least 1".into()));
    }
    check_subset(subset, pool.n_classifiers())?;
    let train = pool.table(Split::Train)?;
    let reference = split_features(train, subset);
    let labels: Vec<usize> = (0..train.n_examples()).map(|e| train.label(e)).collect();
    let eval = pool.table(split)?;
    let hits: usize = (0..eval.n_examples())
        .into_par_iter()
        .filter(|&e| knn_predict(&reference, &labels, pool.n_classes(), &eval.features(e, subset), k_neighbors) == eval.label(e))
        .count();
    Ok(hits as f64 / eval.n_examples().max(1) as f64)
}

pub fn format_subset(subset: &[usize]) -> String {
    subset.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";")
}

pub fn write_results_csv<W: Write>(rows: &[StackRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| StackError::Output(e.to_string());
    out.write_record(["subset", "k", "val_acc", "test_acc"]).map_err(err)?;
    for r in rows {
        out.write_record([format_subset(&r.subset), r.k.to_string(), r.val_acc.to_string(), r.test_acc.to_string()])
            .map_err(err)?;
    }
    out.flush()?;
    Ok(())
}
