//! Dense neural-network core with hand-written gradients.
//!
//! Everything above this module (agent nets, stackers, boosting base
//! learners) is built from [`DenseNet`]: a stack of affine layers, each
//! followed by either ReLU or identity, with optional inverted dropout on the
//! layer input. Parameters and activations are `f32`; every reduction
//! (dot products, sums) accumulates in `f64`.
//!
//! A forward pass returns a [`Tape`] recording what backward needs. Tapes are
//! stamped with the net's generation counter, which advances on every
//! parameter update, so a tape from before an optimizer step is rejected.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Floor applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Magic bytes opening a serialized [`DenseNet`].
pub const NET_MAGIC: &[u8; 8] = b"LACNN1\0\0";

#[derive(Debug, thiserror::Error)]
pub enum NumError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stale tape: recorded at generation {tape}, net is at generation {net}")]
    StaleTape { tape: u64, net: u64 },
    #[error("label {label} out of range for {n} classes")]
    LabelOutOfRange { label: usize, n: usize },
    #[error("non-finite gradient in layer {layer} ({which}); step aborted")]
    NonFiniteGradient { layer: usize, which: &'static str },
    #[error("checkpoint format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NumError>;

/// Row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NumError::Dimension(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumError::Config("matrix entries must be finite".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// `self · x` with `f64` accumulation.
    pub fn matvec(&self, x: &[f32]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| {
                self.row(r)
                    .iter()
                    .zip(x)
                    .map(|(&w, &v)| w as f64 * v as f64)
                    .sum()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// One affine layer `y = act(W · drop(x) + b)`; `W` is `(out, in)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f32>,
    pub activation: Activation,
    /// Inverted-dropout probability applied to this layer's input in training mode.
    pub dropout: f32,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }
}

/// Blueprint for one layer, used by [`DenseNet::new`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub out_dim: usize,
    pub activation: Activation,
    pub dropout: f32,
}

impl LayerSpec {
    pub fn relu(out_dim: usize) -> Self {
        Self { out_dim, activation: Activation::Relu, dropout: 0.0 }
    }

    pub fn linear(out_dim: usize) -> Self {
        Self { out_dim, activation: Activation::Identity, dropout: 0.0 }
    }

    pub fn with_dropout(mut self, rate: f32) -> Self {
        self.dropout = rate;
        self
    }
}

/// MLP with ReLU hidden layers and an identity output layer.
pub fn mlp_specs(hidden: &[usize], out_dim: usize) -> Vec<LayerSpec> {
    hidden
        .iter()
        .map(|&h| LayerSpec::relu(h))
        .chain(std::iter::once(LayerSpec::linear(out_dim)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    layers: Vec<Layer>,
    #[serde(skip)]
    generation: u64,
}

/// Per-layer record of one forward pass.
#[derive(Debug, Clone)]
struct LayerRecord {
    /// Layer input after dropout.
    input: Vec<f32>,
    /// Dropout multipliers (0 or 1/(1-p)); empty when no dropout was applied.
    dropout_scale: Vec<f32>,
    /// Pre-activation values.
    pre: Vec<f32>,
}

/// Activation record of a forward pass, consumed by [`DenseNet::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    generation: u64,
    records: Vec<LayerRecord>,
}

/// Gradients for every layer's weights and bias, plus the input gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f32>>,
    pub biases: Vec<Vec<f32>>,
    pub input: Vec<f32>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.data.len()]).collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
            input: vec![0.0; net.input_dim()],
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += *y);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += *y);
        }
        self.input.iter_mut().zip(&other.input).for_each(|(x, y)| *x += *y);
    }

    pub fn scale(&mut self, s: f32) {
        self.weights.iter_mut().flatten().for_each(|x| *x *= s);
        self.biases.iter_mut().flatten().for_each(|x| *x *= s);
        self.input.iter_mut().for_each(|x| *x *= s);
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().flatten().chain(self.biases.iter().flatten()).all(|&x| x == 0.0)
    }

    /// Sum of parameter gradients in a fixed order.
    pub fn sum(parts: impl IntoIterator<Item = Gradients>) -> Option<Gradients> {
        parts.into_iter().reduce(|mut acc, g| {
            acc.add_assign(&g);
            acc
        })
    }
}

impl DenseNet {
    /// Builds a net with Glorot-uniform weights and zero biases.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        if input_dim == 0 || specs.is_empty() {
            return Err(NumError::Config("a net needs a positive input dim and at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut fan_in = input_dim;
        for spec in specs {
            if spec.out_dim == 0 {
                return Err(NumError::Config("layer width must be positive".into()));
            }
            if !(0.0..1.0).contains(&spec.dropout) {
                return Err(NumError::Config(format!("dropout {} outside [0,1)", spec.dropout)));
            }
            let limit = (6.0 / (fan_in + spec.out_dim) as f64).sqrt() as f32;
            let data = (0..fan_in * spec.out_dim)
                .map(|_| rng.random_range(-limit..=limit))
                .collect();
            layers.push(Layer {
                weights: Matrix { rows: spec.out_dim, cols: fan_in, data },
                bias: vec![0.0; spec.out_dim],
                activation: spec.activation,
                dropout: spec.dropout,
            });
            fan_in = spec.out_dim;
        }
        Ok(Self { layers, generation: 0 })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(NumError::Config("a net needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(NumError::Dimension(format!("layer {i}: bias length {} != {}", l.bias.len(), l.out_dim())));
            }
            if i > 0 && layers[i - 1].out_dim() != l.in_dim() {
                return Err(NumError::Dimension(format!(
                    "layer {i} expects {} inputs, previous layer emits {}",
                    l.in_dim(),
                    layers[i - 1].out_dim()
                )));
            }
            if !(0.0..1.0).contains(&l.dropout) {
                return Err(NumError::Config(format!("layer {i}: dropout {} outside [0,1)", l.dropout)));
            }
        }
        Ok(Self { layers, generation: 0 })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Direct parameter access; bumps the generation so outstanding tapes go stale.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.data.len() + l.bias.len()).sum()
    }

    /// Copies parameters from a net of identical shape.
    pub fn copy_params_from(&mut self, other: &DenseNet) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(NumError::Dimension("cannot copy parameters between nets of different shape".into()));
        }
        self.layers.clone_from(&other.layers);
        self.generation += 1;
        Ok(())
    }

    fn shape(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.in_dim(), l.out_dim())).collect()
    }

    pub fn forward<R: Rng + ?Sized>(&self, input: &[f32], mode: Mode, rng: &mut R) -> Result<(Vec<f32>, Tape)> {
        self.run(input, mode, Some(rng))
    }

    /// Eval-mode forward pass; a pure function of parameters and input.
    pub fn predict(&self, input: &[f32]) -> Result<Vec<f32>> {
        self.run::<rand_chacha::ChaCha8Rng>(input, Mode::Eval, None).map(|(out, _)| out)
    }

    /// Eval-mode forward pass that also records a tape.
    pub fn forward_eval(&self, input: &[f32]) -> Result<(Vec<f32>, Tape)> {
        self.run::<rand_chacha::ChaCha8Rng>(input, Mode::Eval, None)
    }

    fn run<R: Rng + ?Sized>(&self, input: &[f32], mode: Mode, mut rng: Option<&mut R>) -> Result<(Vec<f32>, Tape)> {
        if input.len() != self.input_dim() {
            return Err(NumError::Dimension(format!(
                "input length {} != net input dim {}",
                input.len(),
                self.input_dim()
            )));
        }
        let mut records = Vec::with_capacity(self.layers.len());
        let mut x = input.to_vec();
        for layer in &self.layers {
            let mut dropout_scale = Vec::new();
            if mode == Mode::Train && layer.dropout > 0.0 {
                let rng = rng.as_deref_mut().ok_or_else(|| {
                    NumError::Config("training-mode dropout needs a random source".into())
                })?;
                let keep = 1.0 - layer.dropout;
                dropout_scale = (0..x.len())
                    .map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                x.iter_mut().zip(&dropout_scale).for_each(|(v, s)| *v *= s);
            }
            let pre: Vec<f32> = layer
                .weights
                .matvec(&x)
                .into_iter()
                .zip(&layer.bias)
                .map(|(z, &b)| (z + b as f64) as f32)
                .collect();
            let out = match layer.activation {
                Activation::Identity => pre.clone(),
                Activation::Relu => pre.iter().map(|&z| z.max(0.0)).collect(),
            };
            records.push(LayerRecord { input: x, dropout_scale, pre });
            x = out;
        }
        Ok((x, Tape { generation: self.generation, records }))
    }

    /// Backpropagates `output_gradient` (dL/d output) through a recorded pass.
    pub fn backward(&self, tape: &Tape, output_gradient: &[f32]) -> Result<Gradients> {
        if tape.generation != self.generation {
            return Err(NumError::StaleTape { tape: tape.generation, net: self.generation });
        }
        if tape.records.len() != self.layers.len() {
            return Err(NumError::Dimension("tape was recorded on a different net".into()));
        }
        if output_gradient.len() != self.output_dim() {
            return Err(NumError::Dimension(format!(
                "output gradient length {} != output dim {}",
                output_gradient.len(),
                self.output_dim()
            )));
        }
        let n = self.layers.len();
        let mut weights = vec![Vec::new(); n];
        let mut biases = vec![Vec::new(); n];
        let mut upstream = output_gradient.to_vec();
        for (i, (layer, rec)) in self.layers.iter().zip(&tape.records).enumerate().rev() {
            let delta: Vec<f32> = match layer.activation {
                Activation::Identity => upstream,
                Activation::Relu => upstream
                    .iter()
                    .zip(&rec.pre)
                    .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
                    .collect(),
            };
            let (rows, cols) = (layer.out_dim(), layer.in_dim());
            let mut gw = vec![0.0f32; rows * cols];
            for r in 0..rows {
                let d = delta[r];
                if d != 0.0 {
                    let row = &mut gw[r * cols..(r + 1) * cols];
                    row.iter_mut().zip(&rec.input).for_each(|(g, &x)| *g = d * x);
                }
            }
            let mut gx = vec![0.0f64; cols];
            for r in 0..rows {
                let d = delta[r] as f64;
                if d != 0.0 {
                    gx.iter_mut()
                        .zip(layer.weights.row(r))
                        .for_each(|(g, &w)| *g += d * w as f64);
                }
            }
            let mut gx: Vec<f32> = gx.into_iter().map(|v| v as f32).collect();
            if !rec.dropout_scale.is_empty() {
                gx.iter_mut().zip(&rec.dropout_scale).for_each(|(g, s)| *g *= s);
            }
            weights[i] = gw;
            biases[i] = delta;
            upstream = gx;
        }
        Ok(Gradients { weights, biases, input: upstream })
    }

    /// Writes the net in the `LACNN1` layout:
    ///
    /// ```text
    /// magic "LACNN1\0\0"
    /// u32 layer count
    /// per layer: u32 in_dim, u32 out_dim, u8 activation (0 identity, 1 relu),
    ///            f32 dropout, f32 weights[out*in] row-major, f32 bias[out]
    /// ```
    /// All integers and reals little-endian.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(NET_MAGIC)?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            w.write_all(&(l.in_dim() as u32).to_le_bytes())?;
            w.write_all(&(l.out_dim() as u32).to_le_bytes())?;
            w.write_all(&[l.activation.code()])?;
            w.write_all(&l.dropout.to_le_bytes())?;
            for v in l.weights.data.iter().chain(&l.bias) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut reader = CountingReader { inner: r, offset: 0 };
        let magic: [u8; 8] = reader.array()?;
        if &magic != NET_MAGIC {
            return Err(NumError::Format { offset: 0, msg: "bad magic, expected LACNN1".into() });
        }
        let n = reader.u32()? as usize;
        if n == 0 {
            return Err(NumError::Format { offset: 8, msg: "net has no layers".into() });
        }
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let at = reader.offset;
            let in_dim = reader.u32()? as usize;
            let out_dim = reader.u32()? as usize;
            let [code] = reader.array::<1>()?;
            let activation = Activation::from_code(code).ok_or_else(|| NumError::Format {
                offset: at + 8,
                msg: format!("unknown activation code {code}"),
            })?;
            let dropout = reader.f32()?;
            let weights = (0..in_dim * out_dim).map(|_| reader.f32()).collect::<Result<Vec<_>>>()?;
            let bias = (0..out_dim).map(|_| reader.f32()).collect::<Result<Vec<_>>>()?;
            layers.push(Layer {
                weights: Matrix::from_vec(out_dim, in_dim, weights)
                    .map_err(|e| NumError::Format { offset: at, msg: e.to_string() })?,
                bias,
                activation,
                dropout,
            });
        }
        Self::from_layers(layers)
    }
}

struct CountingReader<'a, R: Read> {
    inner: &'a mut R,
    offset: u64,
}

impl<R: Read> CountingReader<'_, R> {
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => NumError::Format { offset: self.offset, msg: "truncated".into() },
            _ => NumError::Io(e),
        })?;
        self.offset += N as u64;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    fn f32(&mut self) -> Result<f32> {
        self.array().map(f32::from_le_bytes)
    }
}

/// Numerically stable softmax (max subtraction, `f64` accumulation).
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| (e / total) as f32).collect()
}

/// Softmax restricted to `allowed` entries; the rest get exactly zero.
pub fn masked_softmax(logits: &[f32], allowed: &[bool]) -> Vec<f32> {
    debug_assert_eq!(logits.len(), allowed.len());
    let max = logits
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .fold(f64::NEG_INFINITY, |m, (&v, _)| m.max(v as f64));
    let exps: Vec<f64> = logits
        .iter()
        .zip(allowed)
        .map(|(&v, &a)| if a { (v as f64 - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| (e / total) as f32).collect()
}

/// `-ln(max(probs[label], 1e-12))`.
pub fn cross_entropy(probs: &[f32], label: usize) -> Result<f64> {
    let p = probs
        .get(label)
        .ok_or(NumError::LabelOutOfRange { label, n: probs.len() })?;
    Ok(-(*p as f64).max(PROB_FLOOR).ln())
}

/// Gradient of `cross_entropy(softmax(z), label)` with respect to `z`.
pub fn softmax_cross_entropy_grad(probs: &[f32], label: usize) -> Vec<f32> {
    probs
        .iter()
        .enumerate()
        .map(|(i, &p)| if i == label { p - 1.0 } else { p })
        .collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer state for one [`DenseNet`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    // first/second moments, one buffer per weight and bias tensor
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(NumError::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        Ok(Self { kind, learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, step: 0, m: Vec::new(), v: Vec::new() })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Non-finite gradients abort the step and leave the
    /// net and optimizer untouched.
    pub fn step(&mut self, net: &mut DenseNet, grads: &Gradients) -> Result<()> {
        if grads.weights.len() != net.layers.len() || grads.biases.len() != net.layers.len() {
            return Err(NumError::Dimension("gradient layer count does not match net".into()));
        }
        for (i, l) in net.layers.iter().enumerate() {
            if grads.weights[i].len() != l.weights.data.len() || grads.biases[i].len() != l.bias.len() {
                return Err(NumError::Dimension(format!("gradient shape mismatch in layer {i}")));
            }
            if grads.weights[i].iter().any(|g| !g.is_finite()) {
                return Err(NumError::NonFiniteGradient { layer: i, which: "weights" });
            }
            if grads.biases[i].iter().any(|g| !g.is_finite()) {
                return Err(NumError::NonFiniteGradient { layer: i, which: "bias" });
            }
        }
        if self.kind == OptimizerKind::Adam && self.m.is_empty() {
            for l in &net.layers {
                self.m.push(vec![0.0; l.weights.data.len()]);
                self.m.push(vec![0.0; l.bias.len()]);
            }
            self.v = self.m.clone();
        }
        self.step += 1;
        let lr = self.learning_rate;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, layer) in net.layers.iter_mut().enumerate() {
            let tensors = [(&mut layer.weights.data, &grads.weights[i]), (&mut layer.bias, &grads.biases[i])];
            for (j, (params, g)) in tensors.into_iter().enumerate() {
                match self.kind {
                    OptimizerKind::Sgd => {
                        params.iter_mut().zip(g).for_each(|(p, &g)| *p = (*p as f64 - lr * g as f64) as f32);
                    }
                    OptimizerKind::Adam => {
                        let m = &mut self.m[2 * i + j];
                        let v = &mut self.v[2 * i + j];
                        for k in 0..params.len() {
                            let g = g[k] as f64;
                            m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                            v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                            let m_hat = m[k] / bc1;
                            let v_hat = v[k] / bc2;
                            params[k] = (params[k] as f64 - lr * m_hat / (v_hat.sqrt() + self.epsilon)) as f32;
                        }
                    }
                }
            }
        }
        net.generation += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(w: Vec<f32>, rows: usize, cols: usize, b: Vec<f32>, act: Activation) -> DenseNet {
        DenseNet::from_layers(vec![Layer {
            weights: Matrix::from_vec(rows, cols, w).unwrap(),
            bias: b,
            activation: act,
            dropout: 0.0,
        }])
        .unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = DenseNet::from_layers(vec![Layer {
            weights: Matrix::identity(2),
            bias: vec![0.0; 2],
            activation: Activation::Identity,
            dropout: 0.0,
        }])
        .unwrap();
        assert_eq!(net.predict(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn relu_clips_negative() {
        let net = single(vec![-1.0], 1, 1, vec![0.0], Activation::Relu);
        assert_eq!(net.predict(&[3.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn input_dimension_mismatch_is_rejected() {
        let net = single(vec![1.0, 1.0], 1, 2, vec![0.0], Activation::Relu);
        assert!(matches!(net.predict(&[1.0]), Err(NumError::Dimension(_))));
    }

    #[test]
    fn scalar_chain_rule() {
        let net = single(vec![2.0], 1, 1, vec![0.0], Activation::Relu);
        let (out, tape) = net.forward_eval(&[3.0]).unwrap();
        assert_eq!(out, vec![6.0]);
        let g = net.backward(&tape, &[1.0]).unwrap();
        assert_eq!(g.weights[0], vec![3.0]);
        assert_eq!(g.biases[0], vec![1.0]);
        assert_eq!(g.input, vec![2.0]);
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = DenseNet::new(5, &mlp_specs(&[7, 6], 3), &mut rng).unwrap();
        let x: Vec<f32> = (0..5).map(|i| i as f32 * 0.3 - 0.5).collect();
        let (_, tape) = net.forward_eval(&x).unwrap();
        let g = net.backward(&tape, &[0.0; 3]).unwrap();
        assert!(g.is_zero());
        assert!(g.input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = DenseNet::new(3, &mlp_specs(&[4], 2), &mut rng).unwrap();
        let (_, tape) = net.forward_eval(&[0.1, 0.2, 0.3]).unwrap();
        let grads = net.backward(&tape, &[1.0, -1.0]).unwrap();
        Optimizer::sgd(0.1).unwrap().step(&mut net, &grads).unwrap();
        assert!(matches!(net.backward(&tape, &[1.0, -1.0]), Err(NumError::StaleTape { .. })));
    }

    #[test]
    fn eval_mode_ignores_dropout() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let specs = [LayerSpec::relu(16), LayerSpec::linear(1).with_dropout(0.5)];
        let net = DenseNet::new(4, &specs, &mut rng).unwrap();
        let x = [0.3, -0.2, 0.9, 0.1];
        let a = net.forward(&x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(10)).unwrap().0;
        let b = net.forward(&x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(11)).unwrap().0;
        assert_eq!(a, b);
        assert_eq!(a, net.predict(&x).unwrap());
        let t1 = net.forward(&x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(10)).unwrap().0;
        let t2 = net.forward(&x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(10)).unwrap().0;
        assert_eq!(t1, t2);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0; 4]), vec![0.25; 4]);
        let p = softmax(&[1000.0, 0.0]);
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] >= 0.0 && p[1] < 1e-30);
        let z = [1.0f64, 2.0, 3.0];
        let s: f64 = z.iter().map(|v| v.exp()).sum();
        for (p, v) in softmax(&[1.0, 2.0, 3.0]).iter().zip(z) {
            assert!((*p as f64 - v.exp() / s).abs() < 1e-7);
        }
    }

    #[test]
    fn masked_softmax_zeroes_disallowed() {
        let p = masked_softmax(&[0.3, 5.0, -1.0], &[true, false, true]);
        assert_eq!(p[1], 0.0);
        assert!(((p[0] + p[2]) as f64 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
        assert!((cross_entropy(&[0.1; 10], 7).unwrap() - 10f64.ln()).abs() < 1e-6);
        assert!((cross_entropy(&[0.5, 0.25, 0.25], 1).unwrap() - 4f64.ln()).abs() < 1e-9);
        assert!((cross_entropy(&[1.0, 0.0], 1).unwrap() - (-(1e-12f64).ln())).abs() < 1e-9);
        assert!(matches!(cross_entropy(&[1.0], 3), Err(NumError::LabelOutOfRange { .. })));
    }

    #[test]
    fn sgd_step() {
        let mut net = single(vec![1.0], 1, 1, vec![0.0], Activation::Identity);
        let g = Gradients { weights: vec![vec![1.0]], biases: vec![vec![0.0]], input: vec![0.0] };
        Optimizer::sgd(0.1).unwrap().step(&mut net, &g).unwrap();
        assert!((net.layers()[0].weights.get(0, 0) - 0.9).abs() < 1e-7);
        assert_eq!(net.layers()[0].bias[0], 0.0);
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = DenseNet::new(3, &mlp_specs(&[4], 2), &mut rng).unwrap();
        let before = net.clone();
        let mut g = Gradients::zeros_like(&net);
        g.weights.iter_mut().flatten().for_each(|v| *v = 1.0);
        g.biases.iter_mut().flatten().for_each(|v| *v = 1.0);
        let lr = 0.01;
        Optimizer::adam(lr).unwrap().step(&mut net, &g).unwrap();
        // m_hat = 1, v_hat = 1, so every parameter moves by lr / (1 + 1e-8)
        for (a, b) in net.layers().iter().zip(before.layers()) {
            for (x, y) in a.weights.data().iter().zip(b.weights.data()) {
                assert!(((y - x) as f64 - lr / (1.0 + 1e-8)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = DenseNet::new(3, &mlp_specs(&[4], 2), &mut rng).unwrap();
        let before = net.clone();
        let g = Gradients::zeros_like(&net);
        let mut adam = Optimizer::adam(0.01).unwrap();
        adam.step(&mut net, &g).unwrap();
        adam.step(&mut net, &g).unwrap();
        Optimizer::sgd(0.5).unwrap().step(&mut net, &g).unwrap();
        assert_eq!(net.layers(), before.layers());
    }

    #[test]
    fn nonfinite_gradient_aborts_step() {
        let mut net = single(vec![1.0], 1, 1, vec![0.0], Activation::Identity);
        let g = Gradients { weights: vec![vec![f32::NAN]], biases: vec![vec![0.0]], input: vec![0.0] };
        let mut opt = Optimizer::adam(0.1).unwrap();
        assert!(matches!(opt.step(&mut net, &g), Err(NumError::NonFiniteGradient { layer: 0, .. })));
        assert_eq!(opt.steps(), 0);
        assert_eq!(net.layers()[0].weights.get(0, 0), 1.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let specs = [LayerSpec::relu(5), LayerSpec::linear(2).with_dropout(0.25)];
        let net = DenseNet::new(3, &specs, &mut rng).unwrap();
        let mut buf = Vec::new();
        net.write_to(&mut buf).unwrap();
        // header 12 + per layer (13 + 4 * params)
        assert_eq!(buf.len(), 12 + 13 + 4 * (15 + 5) + 13 + 4 * (10 + 2));
        let back = DenseNet::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.layers(), net.layers());

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(DenseNet::read_from(&mut bad.as_slice()), Err(NumError::Format { offset: 0, .. })));
        let short = &buf[..buf.len() - 3];
        assert!(matches!(DenseNet::read_from(&mut &short[..]), Err(NumError::Format { .. })));
    }
}
