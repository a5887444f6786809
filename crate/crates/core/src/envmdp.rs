//! One episode = classifying one example by querying a fixed number of
//! classifiers, then emitting a prediction.
//!
//! The environment only reads the pool's response table, so a query is a
//! table lookup. The reward is `1[prediction == label] - lambda * cost`,
//! delivered once at the end of the episode.

use serde::{Deserialize, Serialize};

use crate::pool::{ClassifierSpec, Pool, ResponseTable, Split};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EnvError {
    #[error("example {index} out of range for {n} examples")]
    ExampleOutOfRange { index: usize, n: usize },
    #[error("classifier {id} out of range for {n} classifiers")]
    ClassifierOutOfRange { id: usize, n: usize },
    #[error("policy bug: classifier {id} queried twice with hard masking on")]
    DuplicateQuery { id: usize },
    #[error("horizon {horizon} exhausted")]
    HorizonExceeded { horizon: usize },
    #[error("finalize called after {steps} of {horizon} queries")]
    PrematureFinalize { steps: usize, horizon: usize },
    #[error("invalid reward configuration: {0}")]
    Config(String),
    #[error("split {0} not present in pool")]
    MissingSplit(Split),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Cost weight; 0 reproduces the fixed-budget setting.
    pub lambda: f64,
    /// Number of classifier calls per episode.
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeState {
    pub example: usize,
    /// Ordered classifier ids queried so far; its length is the step count.
    pub called: Vec<usize>,
    pub accumulated_cost: f64,
}

impl EpisodeState {
    pub fn step(&self) -> usize {
        self.called.len()
    }
}

/// Episode driver over one split of a pool.
#[derive(Debug, Clone, Copy)]
pub struct Environment<'a> {
    table: &'a ResponseTable,
    specs: &'a [ClassifierSpec],
    reward: RewardConfig,
    hard_mask: bool,
}

impl<'a> Environment<'a> {
    pub fn new(pool: &'a Pool, split: Split, reward: RewardConfig, hard_mask: bool) -> Result<Self, EnvError> {
        let table = pool.table(split).map_err(|_| EnvError::MissingSplit(split))?;
        if reward.horizon == 0 {
            return Err(EnvError::Config("horizon must be positive".into()));
        }
        if hard_mask && reward.horizon > pool.n_classifiers() {
            return Err(EnvError::Config(format!(
                "horizon {} exceeds pool size {} with hard masking",
                reward.horizon,
                pool.n_classifiers()
            )));
        }
        if !(reward.lambda >= 0.0 && reward.lambda.is_finite()) {
            return Err(EnvError::Config(format!("lambda must be >= 0, got {}", reward.lambda)));
        }
        Ok(Self { table, specs: pool.specs(), reward, hard_mask })
    }

    pub fn table(&self) -> &'a ResponseTable {
        self.table
    }

    pub fn reward_config(&self) -> RewardConfig {
        self.reward
    }

    pub fn hard_mask(&self) -> bool {
        self.hard_mask
    }

    pub fn n_examples(&self) -> usize {
        self.table.n_examples()
    }

    pub fn reset(&self, example: usize) -> Result<EpisodeState, EnvError> {
        if example >= self.table.n_examples() {
            return Err(EnvError::ExampleOutOfRange { index: example, n: self.table.n_examples() });
        }
        Ok(EpisodeState { example, called: Vec::with_capacity(self.reward.horizon), accumulated_cost: 0.0 })
    }

    /// Returns the stored response of `classifier` for the episode's example
    /// and its cost, recording the call in `state`.
    pub fn query(&self, state: &mut EpisodeState, classifier: usize) -> Result<(&'a [f32], f64), EnvError> {
        if state.step() >= self.reward.horizon {
            return Err(EnvError::HorizonExceeded { horizon: self.reward.horizon });
        }
        if classifier >= self.specs.len() {
            return Err(EnvError::ClassifierOutOfRange { id: classifier, n: self.specs.len() });
        }
        if self.hard_mask && state.called.contains(&classifier) {
            return Err(EnvError::DuplicateQuery { id: classifier });
        }
        let cost = self.specs[classifier].cost;
        state.called.push(classifier);
        state.accumulated_cost += cost;
        Ok((self.table.response(state.example, classifier), cost))
    }

    pub fn label(&self, state: &EpisodeState) -> usize {
        self.table.label(state.example)
    }

    /// Terminal reward; only valid once the horizon is reached.
    pub fn finalize(&self, state: &EpisodeState, prediction: usize) -> Result<f64, EnvError> {
        if state.step() != self.reward.horizon {
            return Err(EnvError::PrematureFinalize { steps: state.step(), horizon: self.reward.horizon });
        }
        Ok(reward(prediction, self.label(state), state.accumulated_cost, self.reward.lambda))
    }
}

/// `1[prediction == label] - lambda * cost`.
pub fn reward(prediction: usize, label: usize, cost: f64, lambda: f64) -> f64 {
    let hit = if prediction == label { 1.0 } else { 0.0 };
    hit - lambda * cost
}
