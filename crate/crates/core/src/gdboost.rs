//! Multi-class gradient boosting in function space, and bagging.
//!
//! Boosting follows the GD-MC scheme: each class has a codeword `y_z`, the
//! committee output `f(x)` is an `M`-vector, and the loss is
//!
//! ```text
//! L = sum_i sum_{j != z_i} exp(0.5 * (<y_j, f(x_i)> - <y_{z_i}, f(x_i)>))
//! ```
//!
//! Every round fits a dense net to the negative functional gradient with
//! squared error, finds the step `beta` by bisection on the sign of
//! `dL/dbeta`, and adds `v * beta * phi` to the committee.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numkit::{
    argmax, cross_entropy, mlp_specs, softmax, softmax_cross_entropy_grad, DenseNet, Gradients, Mode, NumError,
    Optimizer,
};
use crate::rng;

pub const COMMITTEE_MAGIC: &[u8; 8] = b"LACGB1\0\0";

#[derive(Debug, thiserror::Error)]
pub enum BoostError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error("base learner diverged in round {round}: {detail}")]
    Diverged { round: usize, detail: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Net(#[from] NumError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BoostError>;

/// Feature vectors with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    pub features: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl LabeledData {
    pub fn new(features: Vec<Vec<f32>>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(BoostError::Data(format!("{} feature rows but {} labels", features.len(), labels.len())));
        }
        if features.is_empty() {
            return Err(BoostError::Data("empty dataset".into()));
        }
        let dim = features[0].len();
        if features.iter().any(|f| f.len() != dim) {
            return Err(BoostError::Data("ragged feature rows".into()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(BoostError::Data(format!("label {l} out of range for {n_classes} classes")));
        }
        Ok(Self { features, labels, n_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    /// Rows at `indices`, repeats allowed.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }
}

/// Isotropic Gaussian clusters, one per class, with centers evenly spaced on
/// a circle in the first two coordinates. A `label_noise` share of the
/// labels is replaced by a uniformly drawn class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobConfig {
    pub n_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub radius: f64,
    pub spread: f64,
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self { n_classes: 3, dim: 2, per_class: 200, radius: 2.0, spread: 1.0, label_noise: 0.0, seed: 0 }
    }
}

pub fn gaussian_blobs(config: &BlobConfig, stream: u64) -> Result<LabeledData> {
    if config.n_classes < 2 || config.dim < 2 || config.per_class == 0 {
        return Err(BoostError::Config("blobs need >= 2 classes, >= 2 dims, >= 1 sample per class".into()));
    }
    if !(0.0..=1.0).contains(&config.label_noise) || !(config.spread > 0.0) {
        return Err(BoostError::Config("label_noise must be in [0,1] and spread positive".into()));
    }
    let mut r = rng::stream(config.seed, stream);
    let noise = Normal::new(0.0, config.spread).map_err(|e| BoostError::Config(e.to_string()))?;
    let mut features = Vec::with_capacity(config.n_classes * config.per_class);
    let mut labels = Vec::with_capacity(features.capacity());
    for c in 0..config.n_classes {
        let angle = 2.0 * std::f64::consts::PI * c as f64 / config.n_classes as f64;
        for _ in 0..config.per_class {
            let mut x: Vec<f32> = (0..config.dim).map(|_| noise.sample(&mut r) as f32).collect();
            x[0] += (config.radius * angle.cos()) as f32;
            x[1] += (config.radius * angle.sin()) as f32;
            let label = if r.random::<f64>() < config.label_noise { r.random_range(0..config.n_classes) } else { c };
            features.push(x);
            labels.push(label);
        }
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut r);
    LabeledData::new(features, labels, config.n_classes).map(|d| d.select(&order))
}

/// Class codewords: `+1` on the class coordinate, `-1/(M-1)` elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    words: Vec<Vec<f64>>,
}

impl Codebook {
    pub fn new(n_classes: usize) -> Result<Self> {
        if n_classes < 2 {
            return Err(BoostError::Config("a codebook needs at least 2 classes".into()));
        }
        let off = -1.0 / (n_classes - 1) as f64;
        let words = (0..n_classes)
            .map(|z| (0..n_classes).map(|j| if j == z { 1.0 } else { off }).collect())
            .collect();
        Ok(Self { words })
    }

    pub fn n_classes(&self) -> usize {
        self.words.len()
    }

    pub fn word(&self, z: usize) -> &[f64] {
        &self.words[z]
    }

    /// Class whose codeword has the largest projection; lowest index on ties.
    pub fn decode(&self, f: &[f64]) -> usize {
        let scores: Vec<f64> = self.words.iter().map(|y| dot(y, f)).collect();
        let mut best = 0;
        for (j, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = j;
            }
        }
        best
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Summed GD-MC loss over all samples.
pub fn gdmc_loss(outputs: &[Vec<f64>], labels: &[usize], codebook: &Codebook) -> f64 {
    outputs
        .iter()
        .zip(labels)
        .map(|(f, &z)| {
            let own = dot(codebook.word(z), f);
            (0..codebook.n_classes())
                .filter(|&j| j != z)
                .map(|j| (0.5 * (dot(codebook.word(j), f) - own)).exp())
                .sum::<f64>()
        })
        .sum()
}

/// Negative gradient of [`gdmc_loss`] with respect to each `f(x_i)`.
pub fn gradient_targets(outputs: &[Vec<f64>], labels: &[usize], codebook: &Codebook) -> Vec<Vec<f64>> {
    outputs
        .iter()
        .zip(labels)
        .map(|(f, &z)| {
            let yz = codebook.word(z);
            let own = dot(yz, f);
            let mut target = vec![0.0; f.len()];
            for j in (0..codebook.n_classes()).filter(|&j| j != z) {
                let yj = codebook.word(j);
                let e = (0.5 * (dot(yj, f) - own)).exp();
                for (t, (a, b)) in target.iter_mut().zip(yj.iter().zip(yz)) {
                    *t -= 0.5 * e * (a - b);
                }
            }
            target
        })
        .collect()
}

/// `dL/dbeta` of the loss at `f + beta * phi`.
fn directional_derivative(outputs: &[Vec<f64>], direction: &[Vec<f64>], labels: &[usize], codebook: &Codebook, beta: f64) -> f64 {
    let moved: Vec<Vec<f64>> = outputs
        .iter()
        .zip(direction)
        .map(|(f, d)| f.iter().zip(d).map(|(a, b)| a + beta * b).collect())
        .collect();
    -gradient_targets(&moved, labels, codebook).iter().zip(direction).map(|(g, d)| dot(g, d)).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaSearch {
    pub beta: f64,
    /// `false` when the loss does not decrease along the direction at 0.
    pub descent: bool,
}

/// Line minimum of the loss along `direction` over `[0, beta_max]`, found by
/// halving on the sign of the derivative `iters` times.
pub fn binary_search_beta(
    outputs: &[Vec<f64>],
    direction: &[Vec<f64>],
    labels: &[usize],
    codebook: &Codebook,
    beta_max: f64,
    iters: usize,
) -> BetaSearch {
    let d = |b: f64| directional_derivative(outputs, direction, labels, codebook, b);
    if d(0.0) >= 0.0 {
        return BetaSearch { beta: 0.0, descent: false };
    }
    if d(beta_max) <= 0.0 {
        return BetaSearch { beta: beta_max, descent: true };
    }
    let (mut lo, mut hi) = (0.0, beta_max);
    for _ in 0..iters {
        let mid = 0.5 * (lo + hi);
        if d(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    BetaSearch { beta: 0.5 * (lo + hi), descent: true }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerLoss {
    /// Squared error against real-valued targets.
    Mse,
    /// Softmax cross-entropy against class labels.
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self { hidden: vec![32], epochs: 30, batch_size: 32, learning_rate: 3e-3 }
    }
}

impl LearnerConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(BoostError::Config("learner epochs, batch_size and learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Trains a dense net on `features`. With `Mse` the net regresses
/// `targets`; with `CrossEntropy` it classifies `labels`. `init` warm-starts
/// the weights.
pub fn fit_base_learner<R: Rng + ?Sized>(
    features: &[Vec<f32>],
    targets: &[Vec<f64>],
    labels: &[usize],
    loss: LearnerLoss,
    config: &LearnerConfig,
    init: Option<&DenseNet>,
    rng: &mut R,
) -> Result<DenseNet> {
    config.validate()?;
    let out_dim = match loss {
        LearnerLoss::Mse => targets.first().map(Vec::len).unwrap_or(0),
        LearnerLoss::CrossEntropy => labels.iter().max().map_or(0, |&m| m + 1).max(init.map_or(0, |n| n.output_dim())),
    };
    let n = features.len();
    if n == 0 || out_dim == 0 {
        return Err(BoostError::Data("nothing to fit".into()));
    }
    let mut net = match init {
        Some(prev) => prev.clone(),
        None => DenseNet::new(features[0].len(), &mlp_specs(&config.hidden, out_dim), rng)?,
    };
    let mut opt = Optimizer::adam(config.learning_rate)?;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_size) {
            let mut grads = Gradients::zeros_like(&net);
            let scale = 1.0 / chunk.len() as f32;
            for &i in chunk {
                let (out, tape) = net.forward(&features[i], Mode::Train, rng)?;
                let g: Vec<f32> = match loss {
                    LearnerLoss::Mse => out
                        .iter()
                        .zip(&targets[i])
                        .map(|(&o, &t)| 2.0 * (o - t as f32) * scale / out_dim as f32)
                        .collect(),
                    LearnerLoss::CrossEntropy => {
                        softmax_cross_entropy_grad(&softmax(&out), labels[i]).into_iter().map(|v| v * scale).collect()
                    }
                };
                grads.add_assign(&net.backward(&tape, &g)?);
            }
            opt.step(&mut net, &grads)
                .map_err(|e| BoostError::Diverged { round: epoch, detail: e.to_string() })?;
        }
    }
    Ok(net)
}

fn net_outputs(net: &DenseNet, data: &LabeledData) -> Result<Vec<Vec<f64>>> {
    data.features
        .iter()
        .map(|x| Ok(net.predict(x)?.into_iter().map(f64::from).collect()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommitteeKind {
    /// `f = sum v * beta_m * phi_m`.
    Boosted,
    /// Mean of member softmax outputs.
    Bagged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub net: DenseNet,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Committee {
    pub kind: CommitteeKind,
    pub shrinkage: f64,
    pub n_classes: usize,
    pub members: Vec<Member>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CommitteeHeader {
    kind: CommitteeKind,
    rounds: usize,
    shrinkage: f64,
    n_classes: usize,
    betas: Vec<f64>,
}

impl Committee {
    pub fn new(kind: CommitteeKind, shrinkage: f64, n_classes: usize) -> Self {
        Self { kind, shrinkage, n_classes, members: Vec::new() }
    }

    pub fn output(&self, x: &[f32]) -> Result<Vec<f64>> {
        let mut f = vec![0.0; self.n_classes];
        if self.members.is_empty() {
            return Ok(f);
        }
        for m in &self.members {
            let out = m.net.predict(x)?;
            match self.kind {
                CommitteeKind::Boosted => {
                    let w = self.shrinkage * m.beta;
                    f.iter_mut().zip(&out).for_each(|(a, &o)| *a += w * o as f64);
                }
                CommitteeKind::Bagged => {
                    f.iter_mut().zip(softmax(&out)).for_each(|(a, p)| *a += p as f64);
                }
            }
        }
        if self.kind == CommitteeKind::Bagged {
            let k = self.members.len() as f64;
            f.iter_mut().for_each(|a| *a /= k);
        }
        Ok(f)
    }

    pub fn outputs(&self, data: &LabeledData) -> Result<Vec<Vec<f64>>> {
        data.features.iter().map(|x| self.output(x)).collect()
    }

    pub fn accuracy(&self, data: &LabeledData) -> Result<f64> {
        let outs = self.outputs(data)?;
        Ok(accuracy_of(&outs, &data.labels))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = CommitteeHeader {
            kind: self.kind,
            rounds: self.members.len(),
            shrinkage: self.shrinkage,
            n_classes: self.n_classes,
            betas: self.members.iter().map(|m| m.beta).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| BoostError::Checkpoint(e.to_string()))?;
        w.write_all(COMMITTEE_MAGIC)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for m in &self.members {
            m.net.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != COMMITTEE_MAGIC {
            return Err(BoostError::Checkpoint("bad magic".into()));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: CommitteeHeader =
            serde_json::from_slice(&json).map_err(|e| BoostError::Checkpoint(e.to_string()))?;
        if header.betas.len() != header.rounds {
            return Err(BoostError::Checkpoint("beta count does not match rounds".into()));
        }
        let members = header
            .betas
            .iter()
            .map(|&beta| Ok(Member { net: DenseNet::read_from(r)?, beta }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { kind: header.kind, shrinkage: header.shrinkage, n_classes: header.n_classes, members })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn accuracy_of(outputs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let hits = outputs
        .iter()
        .zip(labels)
        .filter(|(f, &z)| argmax(&f.iter().map(|&v| v as f32).collect::<Vec<_>>()) == z)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// One row of a learning curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub round: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundInfo {
    pub beta: f64,
    /// `false` for skipped rounds, which leave the committee unchanged.
    pub accepted: bool,
    /// Accuracy of the round's learner alone on validation.
    pub member_val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub committee: Committee,
    pub curve: Vec<CurveRow>,
    pub rounds: Vec<RoundInfo>,
}

pub fn write_curve_csv<W: Write>(rows: &[CurveRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| BoostError::Checkpoint(e.to_string());
    out.write_record(["round", "train_loss", "val_loss", "train_acc", "val_acc"]).map_err(err)?;
    for r in rows {
        out.write_record([
            r.round.to_string(),
            r.train_loss.to_string(),
            r.val_loss.to_string(),
            r.train_acc.to_string(),
            r.val_acc.to_string(),
        ])
        .map_err(err)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoostConfig {
    pub rounds: usize,
    /// Shrinkage `v` in `(0, 1]`.
    pub shrinkage: f64,
    pub weight_transfer: bool,
    pub beta_max: f64,
    pub beta_iters: usize,
    pub learner: LearnerConfig,
    pub seed: u64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            shrinkage: 0.5,
            weight_transfer: false,
            beta_max: 8.0,
            beta_iters: 20,
            learner: LearnerConfig::default(),
            seed: 0,
        }
    }
}

/// Gradient boosting. Rounds whose learner is not a descent direction, or
/// whose step would raise the training loss, are recorded and skipped.
pub fn boost(train: &LabeledData, val: &LabeledData, config: &BoostConfig) -> Result<EnsembleRun> {
    if config.rounds == 0 || !(config.shrinkage > 0.0 && config.shrinkage <= 1.0) {
        return Err(BoostError::Config("rounds must be positive and shrinkage in (0, 1]".into()));
    }
    if !(config.beta_max > 0.0) || config.beta_iters == 0 {
        return Err(BoostError::Config("beta_max and beta_iters must be positive".into()));
    }
    if train.n_classes != val.n_classes || train.dim() != val.dim() {
        return Err(BoostError::Data("train and validation sets disagree in shape".into()));
    }
    let codebook = Codebook::new(train.n_classes)?;
    let mut committee = Committee::new(CommitteeKind::Boosted, config.shrinkage, train.n_classes);
    let mut f_train = vec![vec![0.0; train.n_classes]; train.len()];
    let mut f_val = vec![vec![0.0; train.n_classes]; val.len()];
    let mut loss = gdmc_loss(&f_train, &train.labels, &codebook);
    let mut previous: Option<DenseNet> = None;
    let mut run = EnsembleRun { committee: committee.clone(), curve: Vec::new(), rounds: Vec::new() };

    for round in 1..=config.rounds {
        let mut r = rng::stream(config.seed, rng::mix(&[10, round as u64]));
        let targets = gradient_targets(&f_train, &train.labels, &codebook);
        let init = if config.weight_transfer { previous.as_ref() } else { None };
        let net = fit_base_learner(&train.features, &targets, &[], LearnerLoss::Mse, &config.learner, init, &mut r)
            .map_err(|e| match e {
                BoostError::Diverged { detail, .. } => BoostError::Diverged { round, detail },
                other => other,
            })?;
        let phi_train = net_outputs(&net, train)?;
        let phi_val = net_outputs(&net, val)?;
        let search = binary_search_beta(&f_train, &phi_train, &train.labels, &codebook, config.beta_max, config.beta_iters);
        let step = config.shrinkage * search.beta;
        let moved: Vec<Vec<f64>> =
            f_train.iter().zip(&phi_train).map(|(f, p)| f.iter().zip(p).map(|(a, b)| a + step * b).collect()).collect();
        let new_loss = gdmc_loss(&moved, &train.labels, &codebook);
        let accepted = search.descent && new_loss <= loss;
        if accepted {
            f_train = moved;
            f_val.iter_mut().zip(&phi_val).for_each(|(f, p)| f.iter_mut().zip(p).for_each(|(a, b)| *a += step * b));
            loss = new_loss;
            committee.members.push(Member { net: net.clone(), beta: search.beta });
        }
        run.rounds.push(RoundInfo {
            beta: if accepted { search.beta } else { 0.0 },
            accepted,
            member_val_acc: accuracy_of(&phi_val, &val.labels),
        });
        run.curve.push(CurveRow {
            round,
            train_loss: loss / train.len() as f64,
            val_loss: gdmc_loss(&f_val, &val.labels, &codebook) / val.len() as f64,
            train_acc: accuracy_of(&f_train, &train.labels),
            val_acc: accuracy_of(&f_val, &val.labels),
        });
        previous = Some(net);
    }
    run.committee = committee;
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BagConfig {
    pub rounds: usize,
    /// Bootstrap sample size; `None` means the training-set size.
    pub bag_size: Option<usize>,
    pub weight_transfer: bool,
    pub learner: LearnerConfig,
    pub seed: u64,
}

impl Default for BagConfig {
    fn default() -> Self {
        Self { rounds: 10, bag_size: None, weight_transfer: false, learner: LearnerConfig::default(), seed: 0 }
    }
}

/// Bootstrap indices used by bagging round `round` (1-based).
pub fn bootstrap_indices(n: usize, size: usize, seed: u64, round: usize) -> Vec<usize> {
    let mut r = rng::stream(seed, rng::mix(&[11, round as u64]));
    (0..size).map(|_| r.random_range(0..n)).collect()
}

fn mean_cross_entropy(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, &z)| cross_entropy(&p.iter().map(|&v| v as f32).collect::<Vec<_>>(), z).unwrap_or(f64::NAN))
        .sum();
    total / labels.len().max(1) as f64
}

/// Bagging of cross-entropy classifiers with uniform weights. Losses in the
/// curve are mean cross-entropy of the averaged probabilities.
pub fn bag(train: &LabeledData, val: &LabeledData, config: &BagConfig) -> Result<EnsembleRun> {
    if config.rounds == 0 || config.bag_size == Some(0) {
        return Err(BoostError::Config("rounds and bag_size must be positive".into()));
    }
    if train.n_classes != val.n_classes || train.dim() != val.dim() {
        return Err(BoostError::Data("train and validation sets disagree in shape".into()));
    }
    let size = config.bag_size.unwrap_or(train.len());
    let mut committee = Committee::new(CommitteeKind::Bagged, 1.0, train.n_classes);
    let mut sum_train = vec![vec![0.0; train.n_classes]; train.len()];
    let mut sum_val = vec![vec![0.0; train.n_classes]; val.len()];
    let mut run = EnsembleRun { committee: committee.clone(), curve: Vec::new(), rounds: Vec::new() };
    let mut previous: Option<DenseNet> = None;

    for round in 1..=config.rounds {
        let sample = train.select(&bootstrap_indices(train.len(), size, config.seed, round));
        let mut r = rng::stream(config.seed, rng::mix(&[12, round as u64]));
        let init = if config.weight_transfer { previous.as_ref() } else { None };
        let net = fit_base_learner(
            &sample.features,
            &[],
            &sample.labels,
            LearnerLoss::CrossEntropy,
            &config.learner,
            init,
            &mut r,
        )
        .map_err(|e| match e {
            BoostError::Diverged { detail, .. } => BoostError::Diverged { round, detail },
            other => other,
        })?;
        let probs = |data: &LabeledData| -> Result<Vec<Vec<f64>>> {
            data.features
                .iter()
                .map(|x| Ok(softmax(&net.predict(x)?).into_iter().map(f64::from).collect()))
                .collect()
        };
        let p_train = probs(train)?;
        let p_val = probs(val)?;
        for (s, p) in sum_train.iter_mut().zip(&p_train).chain(sum_val.iter_mut().zip(&p_val)) {
            s.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
        let k = round as f64;
        let avg = |sums: &[Vec<f64>]| -> Vec<Vec<f64>> { sums.iter().map(|s| s.iter().map(|v| v / k).collect()).collect() };
        let (avg_train, avg_val) = (avg(&sum_train), avg(&sum_val));
        run.rounds.push(RoundInfo { beta: 1.0, accepted: true, member_val_acc: accuracy_of(&p_val, &val.labels) });
        run.curve.push(CurveRow {
            round,
            train_loss: mean_cross_entropy(&avg_train, &train.labels),
            val_loss: mean_cross_entropy(&avg_val, &val.labels),
            train_acc: accuracy_of(&avg_train, &train.labels),
            val_acc: accuracy_of(&avg_val, &val.labels),
        });
        committee.members.push(Member { net: net.clone(), beta: 1.0 });
        previous = Some(net);
    }
    run.committee = committee;
    Ok(run)
}
