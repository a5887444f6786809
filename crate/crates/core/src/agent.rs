//! The short-memory agent.
//!
//! Memory is two `N x C` tables: the responses of classifiers called so far
//! and a mask table whose row is all ones once the classifier was called.
//! The flattened state `[responses row-major || masks row-major]` of length
//! `2*N*C` feeds three independent nets:
//!
//! - action generator: one ReLU hidden layer, `N` logits (next classifier);
//! - decision maker: two ReLU hidden layers, `C` logits (current answer);
//! - baseline: linear (depth 1) or one hidden layer with dropout (depth 2),
//!   predicting the episode return.
//!
//! Encoding a response is the only state transition; there are no
//! recurrent connections.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numkit::{self, argmax, masked_softmax, mlp_specs, softmax, DenseNet, LayerSpec, Mode, NumError, Tape};
use crate::rng;

pub const AGENT_MAGIC: &[u8; 8] = b"LACAG1\0\0";

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("classifier {0} already encoded in this state")]
    DoubleWrite(usize),
    #[error("classifier {id} out of range for {n} classifiers")]
    ClassifierOutOfRange { id: usize, n: usize },
    #[error("response has {got} entries, expected {expected}")]
    ResponseLength { got: usize, expected: usize },
    #[error("every classifier has already been called")]
    NothingLeft,
    #[error("invalid agent configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Net(#[from] NumError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AgentError>;

/// Response table plus call masks.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    n_classifiers: usize,
    n_classes: usize,
    responses: Vec<f32>,
    masks: Vec<f32>,
}

impl HiddenState {
    /// All-zero state at the start of an episode.
    pub fn new(n_classifiers: usize, n_classes: usize) -> Self {
        Self {
            n_classifiers,
            n_classes,
            responses: vec![0.0; n_classifiers * n_classes],
            masks: vec![0.0; n_classifiers * n_classes],
        }
    }

    pub fn is_called(&self, classifier: usize) -> bool {
        self.masks[classifier * self.n_classes] != 0.0
    }

    pub fn called(&self) -> Vec<usize> {
        (0..self.n_classifiers).filter(|&k| self.is_called(k)).collect()
    }

    /// `true` for classifiers that may still be called.
    pub fn available(&self) -> Vec<bool> {
        (0..self.n_classifiers).map(|k| !self.is_called(k)).collect()
    }

    pub fn response_row(&self, classifier: usize) -> &[f32] {
        &self.responses[classifier * self.n_classes..(classifier + 1) * self.n_classes]
    }

    pub fn mask_row(&self, classifier: usize) -> &[f32] {
        &self.masks[classifier * self.n_classes..(classifier + 1) * self.n_classes]
    }

    /// Writes `response` into row `classifier` and sets its mask row to ones.
    pub fn encode_response(&mut self, classifier: usize, response: &[f32]) -> Result<()> {
        if classifier >= self.n_classifiers {
            return Err(AgentError::ClassifierOutOfRange { id: classifier, n: self.n_classifiers });
        }
        if response.len() != self.n_classes {
            return Err(AgentError::ResponseLength { got: response.len(), expected: self.n_classes });
        }
        if self.is_called(classifier) {
            return Err(AgentError::DoubleWrite(classifier));
        }
        let range = classifier * self.n_classes..(classifier + 1) * self.n_classes;
        self.responses[range.clone()].copy_from_slice(response);
        self.masks[range].iter_mut().for_each(|m| *m = 1.0);
        Ok(())
    }

    /// Non-mutating form of [`encode_response`](Self::encode_response).
    pub fn with_response(&self, classifier: usize, response: &[f32]) -> Result<Self> {
        let mut next = self.clone();
        next.encode_response(classifier, response)?;
        Ok(next)
    }

    /// Flattened network input `[responses || masks]`.
    pub fn to_input(&self) -> Vec<f32> {
        let mut v = Vec::with_capacity(2 * self.responses.len());
        v.extend_from_slice(&self.responses);
        v.extend_from_slice(&self.masks);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub n_classifiers: usize,
    pub n_classes: usize,
    #[serde(default = "default_action_hidden")]
    pub action_hidden: usize,
    #[serde(default = "default_decision_hidden")]
    pub decision_hidden: usize,
    /// 1: linear baseline; 2: one hidden layer with dropout.
    #[serde(default = "default_baseline_depth")]
    pub baseline_depth: usize,
    #[serde(default = "default_baseline_hidden")]
    pub baseline_hidden: usize,
    #[serde(default = "default_baseline_dropout")]
    pub baseline_dropout: f32,
    #[serde(default = "default_true")]
    pub hard_mask: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_action_hidden() -> usize {
    64
}
fn default_decision_hidden() -> usize {
    128
}
fn default_baseline_depth() -> usize {
    1
}
fn default_baseline_hidden() -> usize {
    32
}
fn default_baseline_dropout() -> f32 {
    0.5
}
fn default_true() -> bool {
    true
}

impl AgentConfig {
    pub fn new(n_classifiers: usize, n_classes: usize) -> Self {
        Self {
            n_classifiers,
            n_classes,
            action_hidden: default_action_hidden(),
            decision_hidden: default_decision_hidden(),
            baseline_depth: default_baseline_depth(),
            baseline_hidden: default_baseline_hidden(),
            baseline_dropout: default_baseline_dropout(),
            hard_mask: true,
            seed: 0,
        }
    }

    pub fn state_dim(&self) -> usize {
        2 * self.n_classifiers * self.n_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classifiers == 0 || self.n_classes < 2 {
            return Err(AgentError::Config("need at least one classifier and two classes".into()));
        }
        if self.action_hidden == 0 || self.decision_hidden == 0 || self.baseline_hidden == 0 {
            return Err(AgentError::Config("hidden sizes must be positive".into()));
        }
        if !matches!(self.baseline_depth, 1 | 2) {
            return Err(AgentError::Config(format!("baseline depth must be 1 or 2, got {}", self.baseline_depth)));
        }
        Ok(())
    }
}

/// The three trainable nets.
#[derive(Debug, Clone, PartialEq)]
pub struct LacNets {
    pub action: DenseNet,
    pub decision: DenseNet,
    pub baseline: DenseNet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMode {
    Sample,
    Argmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub config: AgentConfig,
    pub nets: LacNets,
}

impl Agent {
    pub fn new(config: AgentConfig) -> Result<Self> {
        config.validate()?;
        let dim = config.state_dim();
        let mut init = rng::stream(config.seed, 0xA6E7);
        let action = DenseNet::new(dim, &mlp_specs(&[config.action_hidden], config.n_classifiers), &mut init)?;
        let decision = DenseNet::new(
            dim,
            &mlp_specs(&[config.decision_hidden, config.decision_hidden], config.n_classes),
            &mut init,
        )?;
        let baseline_specs = if config.baseline_depth == 1 {
            vec![LayerSpec::linear(1)]
        } else {
            vec![LayerSpec::relu(config.baseline_hidden), LayerSpec::linear(1).with_dropout(config.baseline_dropout)]
        };
        let baseline = DenseNet::new(dim, &baseline_specs, &mut init)?;
        Ok(Self { config, nets: LacNets { action, decision, baseline } })
    }

    pub fn initial_state(&self) -> HiddenState {
        HiddenState::new(self.config.n_classifiers, self.config.n_classes)
    }

    fn check_state(&self, state: &HiddenState) -> Result<()> {
        if state.n_classifiers != self.config.n_classifiers || state.n_classes != self.config.n_classes {
            return Err(AgentError::Config(format!(
                "state is {}x{}, agent expects {}x{}",
                state.n_classifiers, state.n_classes, self.config.n_classifiers, self.config.n_classes
            )));
        }
        Ok(())
    }

    /// Raw action logits with a tape for backprop.
    pub fn action_logits(&self, state: &HiddenState) -> Result<(Vec<f32>, Tape)> {
        self.check_state(state)?;
        Ok(self.nets.action.forward_eval(&state.to_input())?)
    }

    /// Turns action logits into the selection distribution for `state`.
    pub fn policy_from_logits(&self, logits: &[f32], state: &HiddenState) -> Result<Vec<f32>> {
        if self.config.hard_mask {
            let allowed = state.available();
            if !allowed.iter().any(|&a| a) {
                return Err(AgentError::NothingLeft);
            }
            Ok(masked_softmax(logits, &allowed))
        } else {
            Ok(softmax(logits))
        }
    }

    /// Distribution over the next classifier to call.
    pub fn policy(&self, state: &HiddenState) -> Result<Vec<f32>> {
        let (logits, _) = self.action_logits(state)?;
        self.policy_from_logits(&logits, state)
    }

    pub fn decision_logits(&self, state: &HiddenState) -> Result<(Vec<f32>, Tape)> {
        self.check_state(state)?;
        Ok(self.nets.decision.forward_eval(&state.to_input())?)
    }

    /// Class distribution given what has been observed so far.
    pub fn decide(&self, state: &HiddenState) -> Result<Vec<f32>> {
        Ok(softmax(&self.decision_logits(state)?.0))
    }

    pub fn predict_class(&self, state: &HiddenState) -> Result<usize> {
        Ok(argmax(&self.decide(state)?))
    }

    /// Eval-mode baseline prediction.
    pub fn baseline_value(&self, state: &HiddenState) -> Result<f32> {
        self.check_state(state)?;
        Ok(self.nets.baseline.predict(&state.to_input())?[0])
    }

    /// Training-mode baseline pass (dropout active for depth 2).
    pub fn baseline_train<R: Rng + ?Sized>(&self, state: &HiddenState, rng: &mut R) -> Result<(f32, Tape)> {
        self.check_state(state)?;
        let (out, tape) = self.nets.baseline.forward(&state.to_input(), Mode::Train, rng)?;
        Ok((out[0], tape))
    }

    /// Checkpoint: magic `LACAG1\0\0`, u32 LE length of a JSON
    /// [`AgentConfig`], the JSON bytes, then the action, decision and
    /// baseline nets in the `LACNN1` format.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let json = serde_json::to_vec(&self.config).map_err(|e| AgentError::Checkpoint(e.to_string()))?;
        w.write_all(AGENT_MAGIC)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        self.nets.action.write_to(w)?;
        self.nets.decision.write_to(w)?;
        self.nets.baseline.write_to(w)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != AGENT_MAGIC {
            return Err(AgentError::Checkpoint("bad magic, expected LACAG1".into()));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let config: AgentConfig = serde_json::from_slice(&json).map_err(|e| AgentError::Checkpoint(e.to_string()))?;
        config.validate()?;
        let nets = LacNets {
            action: DenseNet::read_from(r)?,
            decision: DenseNet::read_from(r)?,
            baseline: DenseNet::read_from(r)?,
        };
        let dim = config.state_dim();
        let shapes = [
            (nets.action.input_dim(), nets.action.output_dim(), config.n_classifiers),
            (nets.decision.input_dim(), nets.decision.output_dim(), config.n_classes),
            (nets.baseline.input_dim(), nets.baseline.output_dim(), 1),
        ];
        if shapes.iter().any(|&(i, o, want)| i != dim || o != want) {
            return Err(AgentError::Checkpoint("net shapes do not match the stored config".into()));
        }
        Ok(Self { config, nets })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

/// Picks a classifier from `probs`. Sampling never returns a zero-probability
/// entry; argmax breaks ties toward the lowest index.
pub fn select_action<R: Rng + ?Sized>(probs: &[f32], mode: SelectMode, rng: &mut R) -> usize {
    match mode {
        SelectMode::Argmax => numkit::argmax(probs),
        SelectMode::Sample => {
            let total: f64 = probs.iter().map(|&p| p as f64).sum();
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut last_positive = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > 0.0 {
                    acc += p as f64;
                    last_positive = i;
                    if u < acc {
                        return i;
                    }
                }
            }
            last_positive
        }
    }
}
