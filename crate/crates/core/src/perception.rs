//! A feed-forward network that estimates the current phase from the recent
//! observation window.
//!
//! The input is the current time followed by the last `window` samples
//! (oldest first, left-padded by repeating the first sample); the output is
//! squashed to `[0, 1]` by a logistic unit. Classification can then replace
//! the phase integral with a single Gaussian evaluation at the estimate.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Trajectory;
use crate::promp::Demonstration;
use crate::recognition::{classify_with_phases, MovementLibrary, RecognitionError, RecognitionTrace};

#[derive(Error, Debug)]
pub enum PerceptionError {
    #[error("window must be at least 1")]
    InvalidWindow,
    #[error("hidden sizes must be non-empty and positive")]
    InvalidHiddenSizes,
    #[error("training needs at least {min} pairs, got {got}")]
    TooFewPairs { got: usize, min: usize },
    #[error("training pair {index} has {got} features, expected {expected}")]
    InputDimension { index: usize, got: usize, expected: usize },
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid network file: {0}")]
    InvalidNet(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("network JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation value.
    fn derivative_from_output(&self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Architecture and training controls of the phase estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseNetConfig {
    /// Number of recent samples fed to the network.
    pub window: usize,
    pub hidden_sizes: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PhaseNetConfig {
    fn default() -> Self {
        Self {
            window: 20,
            hidden_sizes: vec![40, 20, 10],
            activation: Activation::Tanh,
            epochs: 200,
            learning_rate: 5e-3,
            batch_size: 512,
            seed: 0,
        }
    }
}

/// One supervised example: flattened observation window and phase target.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub input: DVector<f64>,
    pub target: f64,
}

/// Per-feature standardization fitted on the training inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    weight: DMatrix<f64>,
    bias: DVector<f64>,
}

/// Trained phase estimator. The forward pass is pure; the logistic output
/// keeps estimates inside `[0, 1]` for arbitrary inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseNet {
    window: usize,
    activation: Activation,
    normalization: Normalization,
    layers: Vec<Layer>,
}

/// Training outcome: the network, its final training RMSE and the per-epoch
/// loss trace.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub net: PhaseNet,
    pub rmse: f64,
    pub loss_trace: Vec<f64>,
}

/// Flatten one observation window into the network input layout:
/// `[t, y_old, ..., y_now]`, left-padded by repeating the first sample.
fn window_input(t: f64, prefix: &[DVector<f64>], window: usize) -> DVector<f64> {
    let dims = prefix[0].len();
    let mut input = DVector::zeros(1 + window * dims);
    input[0] = t;
    for w in 0..window {
        // oldest first; indices before the prefix start clamp to sample 0
        let idx = (prefix.len() as i64 - window as i64 + w as i64).max(0) as usize;
        let sample = &prefix[idx.min(prefix.len() - 1)];
        for d in 0..dims {
            input[1 + w * dims + d] = sample[d];
        }
    }
    input
}

/// Supervised pairs from aligned demonstrations: one pair per time step,
/// with the demonstration's own profile providing the target phase.
pub fn build_training_pairs(demos: &[Demonstration], window: usize) -> Vec<TrainingPair> {
    let mut pairs = Vec::new();
    for demo in demos {
        let traj = &demo.trajectory;
        let rows: Vec<DVector<f64>> = (0..traj.len()).map(|j| traj.row(j)).collect();
        for j in 0..traj.len() {
            let t = traj.time_of(j);
            let input = window_input(t, &rows[..=j], window);
            pairs.push(TrainingPair { input, target: demo.profile.phase_at(t) });
        }
    }
    pairs
}

impl PhaseNet {
    pub fn window(&self) -> usize {
        self.window
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    /// Train with mini-batch Adam on the squared phase error. Deterministic
    /// given the config seed.
    pub fn train(pairs: &[TrainingPair], config: &PhaseNetConfig) -> Result<TrainReport, PerceptionError> {
        if config.window == 0 {
            return Err(PerceptionError::InvalidWindow);
        }
        if config.hidden_sizes.is_empty() || config.hidden_sizes.iter().any(|h| *h == 0) {
            return Err(PerceptionError::InvalidHiddenSizes);
        }
        if pairs.len() < 10 {
            return Err(PerceptionError::TooFewPairs { got: pairs.len(), min: 10 });
        }
        let input_dim = pairs[0].input.len();
        for (index, p) in pairs.iter().enumerate() {
            if p.input.len() != input_dim {
                return Err(PerceptionError::InputDimension {
                    index,
                    got: p.input.len(),
                    expected: input_dim,
                });
            }
        }

        let normalization = fit_normalization(pairs, input_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut layers = Vec::new();
        let mut fan_in = input_dim;
        for &h in config.hidden_sizes.iter().chain(std::iter::once(&1)) {
            let scale = (6.0 / (fan_in + h) as f64).sqrt();
            let weight = DMatrix::from_fn(h, fan_in, |_, _| rng.gen_range(-scale..scale));
            layers.push(Layer { weight, bias: DVector::zeros(h) });
            fan_in = h;
        }
        let mut net = PhaseNet {
            window: config.window,
            activation: config.activation,
            normalization,
            layers,
        };

        // standardized design matrix, one column per pair
        let mut inputs = DMatrix::zeros(input_dim, pairs.len());
        let mut targets = DVector::zeros(pairs.len());
        for (i, p) in pairs.iter().enumerate() {
            inputs.column_mut(i).copy_from(&net.normalize(&p.input));
            targets[i] = p.target;
        }

        let mut adam = AdamState::new(&net.layers);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut loss_trace = Vec::with_capacity(config.epochs);
        let batch = config.batch_size.max(1).min(pairs.len());

        for epoch in 0..config.epochs {
            // deterministic shuffle
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            let mut epoch_loss = 0.0;
            let mut seen = 0usize;
            for chunk in order.chunks(batch) {
                let mut x = DMatrix::zeros(input_dim, chunk.len());
                let mut y = DVector::zeros(chunk.len());
                for (c, &idx) in chunk.iter().enumerate() {
                    x.column_mut(c).copy_from(&inputs.column(idx));
                    y[c] = targets[idx];
                }
                let (loss, grads) = net.batch_gradient(&x, &y);
                if !loss.is_finite() {
                    return Err(PerceptionError::NonFiniteLoss { epoch });
                }
                epoch_loss += loss * chunk.len() as f64;
                seen += chunk.len();
                adam.step(&mut net.layers, &grads, config.learning_rate);
            }
            loss_trace.push(epoch_loss / seen as f64);
        }

        let mut sq = 0.0;
        for (i, p) in pairs.iter().enumerate() {
            let out = net.forward_normalized(&inputs.column(i).into_owned());
            sq += (out - p.target).powi(2);
        }
        let rmse = (sq / pairs.len() as f64).sqrt();
        Ok(TrainReport { net, rmse, loss_trace })
    }

    fn normalize(&self, input: &DVector<f64>) -> DVector<f64> {
        let mut out = input.clone();
        for i in 0..out.len() {
            out[i] = (out[i] - self.normalization.mean[i]) / self.normalization.std[i];
        }
        out
    }

    /// Forward pass on an already standardized input.
    fn forward_normalized(&self, x: &DVector<f64>) -> f64 {
        let mut a = x.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weight * a + &layer.bias;
            if l < last {
                z.apply(|v| *v = self.activation.apply(*v));
            } else {
                z.apply(|v| *v = logistic(*v));
            }
            a = z;
        }
        a[0]
    }

    /// Phase estimate for a raw (unstandardized) input vector.
    pub fn estimate_from_input(&self, input: &DVector<f64>) -> f64 {
        self.forward_normalized(&self.normalize(input))
    }

    /// Phase estimate at time `t` given the stream prefix observed so far.
    pub fn estimate_phase(&self, t: f64, prefix: &[DVector<f64>]) -> f64 {
        assert!(!prefix.is_empty(), "need at least one observed sample");
        self.estimate_from_input(&window_input(t, prefix, self.window))
    }

    /// Phase estimates over a whole observation stream.
    pub fn estimate_stream(&self, observations: &[(f64, DVector<f64>)]) -> Vec<f64> {
        let rows: Vec<DVector<f64>> = observations.iter().map(|(_, y)| y.clone()).collect();
        observations
            .iter()
            .enumerate()
            .map(|(i, (t, _))| self.estimate_from_input(&window_input(*t, &rows[..=i], self.window)))
            .collect()
    }

    /// Mean squared loss and gradients for one batch of standardized
    /// columns. Loss is averaged over the batch.
    fn batch_gradient(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> (f64, Vec<Layer>) {
        let batch = x.ncols() as f64;
        let last = self.layers.len() - 1;

        let mut activations: Vec<DMatrix<f64>> = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.clone());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weight * activations.last().unwrap();
            for c in 0..z.ncols() {
                for r in 0..z.nrows() {
                    z[(r, c)] += layer.bias[r];
                }
            }
            if l < last {
                z.apply(|v| *v = self.activation.apply(*v));
            } else {
                z.apply(|v| *v = logistic(*v));
            }
            activations.push(z);
        }

        let output = activations.last().unwrap();
        let mut loss = 0.0;
        // output delta: d(mean (a - y)^2)/dz through the logistic
        let mut delta = DMatrix::zeros(1, x.ncols());
        for c in 0..x.ncols() {
            let a = output[(0, c)];
            let err = a - y[c];
            loss += err * err;
            delta[(0, c)] = 2.0 * err * a * (1.0 - a) / batch;
        }
        loss /= batch;

        let mut grads: Vec<Layer> = self
            .layers
            .iter()
            .map(|l| Layer {
                weight: DMatrix::zeros(l.weight.nrows(), l.weight.ncols()),
                bias: DVector::zeros(l.bias.len()),
            })
            .collect();

        for l in (0..self.layers.len()).rev() {
            grads[l].weight = &delta * activations[l].transpose();
            for c in 0..delta.ncols() {
                for r in 0..delta.nrows() {
                    grads[l].bias[r] += delta[(r, c)];
                }
            }
            if l > 0 {
                let mut upstream = self.layers[l].weight.transpose() * &delta;
                for c in 0..upstream.ncols() {
                    for r in 0..upstream.nrows() {
                        upstream[(r, c)] *=
                            self.activation.derivative_from_output(activations[l][(r, c)]);
                    }
                }
                delta = upstream;
            }
        }
        (loss, grads)
    }

    /// Mean squared loss over raw pairs.
    pub fn loss(&self, pairs: &[TrainingPair]) -> f64 {
        let mut acc = 0.0;
        for p in pairs {
            let out = self.estimate_from_input(&p.input);
            acc += (out - p.target).powi(2);
        }
        acc / pairs.len() as f64
    }

    /// Flat analytic gradient of [`Self::loss`], ordered layer by layer,
    /// row-major weights then bias.
    pub fn loss_gradient(&self, pairs: &[TrainingPair]) -> Vec<f64> {
        let dim = pairs[0].input.len();
        let mut x = DMatrix::zeros(dim, pairs.len());
        let mut y = DVector::zeros(pairs.len());
        for (i, p) in pairs.iter().enumerate() {
            x.column_mut(i).copy_from(&self.normalize(&p.input));
            y[i] = p.target;
        }
        let (_, grads) = self.batch_gradient(&x, &y);
        let mut flat = Vec::with_capacity(self.param_count());
        for g in &grads {
            for r in 0..g.weight.nrows() {
                for c in 0..g.weight.ncols() {
                    flat.push(g.weight[(r, c)]);
                }
            }
            flat.extend(g.bias.iter().copied());
        }
        flat
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn get_param(&self, index: usize) -> f64 {
        self.with_param_slot(index, |layer, slot| match slot {
            Slot::Weight(r, c) => layer.weight[(r, c)],
            Slot::Bias(r) => layer.bias[r],
        })
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        let (l, slot) = self.locate_param(index);
        match slot {
            Slot::Weight(r, c) => self.layers[l].weight[(r, c)] = value,
            Slot::Bias(r) => self.layers[l].bias[r] = value,
        }
    }

    fn locate_param(&self, mut index: usize) -> (usize, Slot) {
        for (l, layer) in self.layers.iter().enumerate() {
            let w = layer.weight.len();
            if index < w {
                let cols = layer.weight.ncols();
                return (l, Slot::Weight(index / cols, index % cols));
            }
            index -= w;
            if index < layer.bias.len() {
                return (l, Slot::Bias(index));
            }
            index -= layer.bias.len();
        }
        panic!("parameter index out of range");
    }

    fn with_param_slot<R>(&self, index: usize, f: impl Fn(&Layer, Slot) -> R) -> R {
        let (l, slot) = self.locate_param(index);
        f(&self.layers[l], slot)
    }

    pub fn save_json<W: Write>(&self, writer: &mut W) -> Result<(), PerceptionError> {
        let file = NetFile {
            config: NetFileConfig {
                window: self.window,
                activation: self.activation,
                hidden_sizes: self.layers[..self.layers.len() - 1]
                    .iter()
                    .map(|l| l.weight.nrows())
                    .collect(),
            },
            normalization: self.normalization.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| {
                    let mut weights = Vec::with_capacity(l.weight.len());
                    for r in 0..l.weight.nrows() {
                        for c in 0..l.weight.ncols() {
                            weights.push(l.weight[(r, c)]);
                        }
                    }
                    LayerFile {
                        rows: l.weight.nrows(),
                        cols: l.weight.ncols(),
                        weights,
                        bias: l.bias.iter().copied().collect(),
                    }
                })
                .collect(),
            format_version: 1,
        };
        serde_json::to_writer_pretty(&mut *writer, &file)?;
        writer.write_all(b"\n")?;
        Ok(())
    }

    pub fn save_json_file(&self, path: impl AsRef<Path>) -> Result<(), PerceptionError> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save_json(&mut file)
    }

    pub fn load_json<R: Read>(reader: R) -> Result<Self, PerceptionError> {
        let file: NetFile = serde_json::from_reader(reader)?;
        if file.format_version != 1 {
            return Err(PerceptionError::InvalidNet(format!(
                "unsupported format version {}",
                file.format_version
            )));
        }
        if file.layers.is_empty() {
            return Err(PerceptionError::InvalidNet("no layers".into()));
        }
        let mut layers = Vec::with_capacity(file.layers.len());
        for (i, l) in file.layers.iter().enumerate() {
            if l.weights.len() != l.rows * l.cols || l.bias.len() != l.rows {
                return Err(PerceptionError::InvalidNet(format!(
                    "layer {i} dimensions disagree with payload"
                )));
            }
            layers.push(Layer {
                weight: DMatrix::from_row_slice(l.rows, l.cols, &l.weights),
                bias: DVector::from_vec(l.bias.clone()),
            });
        }
        let input_dim = layers[0].weight.ncols();
        if file.normalization.mean.len() != input_dim
            || file.normalization.std.len() != input_dim
        {
            return Err(PerceptionError::InvalidNet(
                "normalization length does not match input dimension".into(),
            ));
        }
        if file.layers.last().unwrap().rows != 1 {
            return Err(PerceptionError::InvalidNet("output layer must have one unit".into()));
        }
        Ok(PhaseNet {
            window: file.config.window,
            activation: file.config.activation,
            normalization: file.normalization,
            layers,
        })
    }

    pub fn load_json_file(path: impl AsRef<Path>) -> Result<Self, PerceptionError> {
        Self::load_json(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

enum Slot {
    Weight(usize, usize),
    Bias(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetFile {
    config: NetFileConfig,
    normalization: Normalization,
    layers: Vec<LayerFile>,
    format_version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetFileConfig {
    window: usize,
    activation: Activation,
    hidden_sizes: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn fit_normalization(pairs: &[TrainingPair], dim: usize) -> Normalization {
    let mut mean = vec![0.0; dim];
    for p in pairs {
        for i in 0..dim {
            mean[i] += p.input[i];
        }
    }
    for m in &mut mean {
        *m /= pairs.len() as f64;
    }
    let mut var = vec![0.0; dim];
    for p in pairs {
        for i in 0..dim {
            let d = p.input[i] - mean[i];
            var[i] += d * d;
        }
    }
    let std = var
        .iter()
        .map(|v| (v / pairs.len() as f64).sqrt().max(1e-8))
        .collect();
    Normalization { mean, std }
}

struct AdamState {
    m: Vec<Layer>,
    v: Vec<Layer>,
    t: usize,
}

impl AdamState {
    fn new(layers: &[Layer]) -> Self {
        let zeros = |l: &Layer| Layer {
            weight: DMatrix::zeros(l.weight.nrows(), l.weight.ncols()),
            bias: DVector::zeros(l.bias.len()),
        };
        Self {
            m: layers.iter().map(zeros).collect(),
            v: layers.iter().map(zeros).collect(),
            t: 0,
        }
    }

    fn step(&mut self, layers: &mut [Layer], grads: &[Layer], lr: f64) {
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let correction1 = 1.0 - BETA1.powi(self.t as i32);
        let correction2 = 1.0 - BETA2.powi(self.t as i32);
        for ((layer, grad), (m, v)) in layers
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (w, (g, (mw, vw))) in layer.weight.iter_mut().zip(
                grad.weight.iter().zip(m.weight.iter_mut().zip(v.weight.iter_mut())),
            ) {
                *mw = BETA1 * *mw + (1.0 - BETA1) * g;
                *vw = BETA2 * *vw + (1.0 - BETA2) * g * g;
                let m_hat = *mw / correction1;
                let v_hat = *vw / correction2;
                *w -= lr * m_hat / (v_hat.sqrt() + EPS);
            }
            for (b, (g, (mb, vb))) in layer
                .bias
                .iter_mut()
                .zip(grad.bias.iter().zip(m.bias.iter_mut().zip(v.bias.iter_mut())))
            {
                *mb = BETA1 * *mb + (1.0 - BETA1) * g;
                *vb = BETA2 * *vb + (1.0 - BETA2) * g * g;
                let m_hat = *mb / correction1;
                let v_hat = *vb / correction2;
                *b -= lr * m_hat / (v_hat.sqrt() + EPS);
            }
        }
    }
}

/// Classification with the network supplying phase estimates instead of the
/// phase integral.
pub fn classify_with_phase_estimate(
    library: &MovementLibrary,
    observations: &[(f64, DVector<f64>)],
    net: &PhaseNet,
) -> Result<RecognitionTrace, RecognitionError> {
    let phases = net.estimate_stream(observations);
    classify_with_phases(library, observations, &phases)
}

/// Pairs from raw trajectories whose true profiles are known (a generator
/// convenience used by tools and tests).
pub fn pairs_from_profiles(
    trajectories: &[Trajectory],
    profiles: &[crate::phase::PhaseMap],
    window: usize,
) -> Vec<TrainingPair> {
    let demos: Vec<Demonstration> = trajectories
        .iter()
        .zip(profiles)
        .map(|(t, p)| Demonstration {
            trajectory: t.clone(),
            weights: DVector::zeros(1),
            profile: *p,
        })
        .collect();
    build_training_pairs(&demos, window)
}
