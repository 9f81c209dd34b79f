//! Desk-scale federated learning: tiny from-scratch models, deterministic
//! local SGD, weighted aggregation every E steps, and a per-step capacity
//! ledger.
//!
//! Models are deliberately small (a linear regressor, a softmax regressor,
//! and an MLP with tanh hidden layers) so reconstruction attacks run in
//! seconds. All randomness flows from per-client derived streams, so serial
//! and parallel execution produce identical traces.

use crate::channels::{self, ChannelError, NoisePlan};
use crate::rng::{derive_seed, CounterRng, StreamRng};
use crate::spectral::{Covariance, DataMatrix, SpectralError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Seed-derivation tags; one per independent consumer of the master seed.
pub mod seed_tags {
    /// Per-client batch shuffling.
    pub const SAMPLER: u64 = 1;
    /// Model initialization.
    pub const INIT: u64 = 2;
    /// Per-client synthetic training data.
    pub const CLIENT_DATA: u64 = 3;
    /// Held-out test data.
    pub const TEST_DATA: u64 = 4;
    /// Channel noise.
    pub const NOISE: u64 = 5;
    /// Mixture component means.
    pub const MEANS: u64 = 6;
    /// Attack trials.
    pub const ATTACK: u64 = 7;
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("DimensionMismatch: model expects {expected} features, batch has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("ShapeMismatch: parameter vectors differ in kind or length")]
    ShapeMismatch,
    #[error("BadWeights: aggregation weights must be non-negative and sum to 1")]
    BadWeights,
    #[error("BadSchedule: {0}")]
    BadSchedule(&'static str),
    #[error("BadConfig: {0}")]
    BadConfig(String),
    #[error("BudgetExceeded: charge at step {step} would push total {total} over {limit}")]
    BudgetExceeded { step: usize, total: f64, limit: f64 },
    #[error("EmptyBatch: gradient of an empty batch is undefined")]
    EmptyBatch,
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

type Result<T> = std::result::Result<T, SimError>;

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

/// Supported model architectures. Every first layer is fully connected
/// with a bias.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    /// Scalar output, squared-error loss with a 1/2 factor.
    LinearRegression { input_dim: usize },
    /// Softmax over `classes` logits, natural-log cross-entropy.
    LogisticRegression { input_dim: usize, classes: usize },
    /// Tanh hidden layers, softmax output, cross-entropy.
    Mlp {
        input_dim: usize,
        hidden: Vec<usize>,
        classes: usize,
    },
}

impl ModelKind {
    pub fn input_dim(&self) -> usize {
        match self {
            ModelKind::LinearRegression { input_dim } => *input_dim,
            ModelKind::LogisticRegression { input_dim, .. } => *input_dim,
            ModelKind::Mlp { input_dim, .. } => *input_dim,
        }
    }

    /// (out, in) shapes of the dense layers in order.
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        match self {
            ModelKind::LinearRegression { input_dim } => vec![(1, *input_dim)],
            ModelKind::LogisticRegression { input_dim, classes } => {
                vec![(*classes, *input_dim)]
            }
            ModelKind::Mlp {
                input_dim,
                hidden,
                classes,
            } => {
                let mut shapes = Vec::with_capacity(hidden.len() + 1);
                let mut prev = *input_dim;
                for &h in hidden {
                    shapes.push((h, prev));
                    prev = h;
                }
                shapes.push((*classes, prev));
                shapes
            }
        }
    }

    /// Total parameter count: weights plus biases, layer by layer.
    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|(out, inp)| out * inp + out)
            .sum()
    }
}

/// Flat parameter vector with the layout implied by its kind: for each
/// layer, row-major weights then biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub kind: ModelKind,
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(kind: ModelKind) -> Self {
        let n = kind.param_count();
        ModelParams {
            kind,
            values: vec![0.0; n],
        }
    }

    pub fn random(kind: ModelKind, scale: f64, rng: &mut StreamRng) -> Self {
        let n = kind.param_count();
        let values = (0..n).map(|_| scale * rng.next_normal()).collect();
        ModelParams { kind, values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Offsets of the first layer's weight and bias blocks:
    /// `(weights_range, bias_range, out, in)`.
    pub fn first_layer_layout(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>, usize, usize) {
        let (out, inp) = self.kind.layer_shapes()[0];
        (0..out * inp, out * inp..out * inp + out, out, inp)
    }
}

/// Supervision targets: real-valued for regression, class indices for
/// classification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Real(Vec<f64>),
    Class(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Real(v) => v.len(),
            Targets::Class(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dataset {
    pub features: DataMatrix,
    pub targets: Targets,
}

impl Dataset {
    pub fn new(features: DataMatrix, targets: Targets) -> Result<Self> {
        if features.rows() != targets.len() {
            return Err(SimError::DimensionMismatch {
                expected: features.rows(),
                got: targets.len(),
            });
        }
        Ok(Dataset { features, targets })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same targets, different feature matrix (used to swap in the noisy
    /// features).
    pub fn with_features(&self, features: DataMatrix) -> Result<Self> {
        Dataset::new(features, self.targets.clone())
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

fn check_dims(model: &ModelParams, features: &DataMatrix) -> Result<()> {
    if model.kind.input_dim() != features.cols() {
        return Err(SimError::DimensionMismatch {
            expected: model.kind.input_dim(),
            got: features.cols(),
        });
    }
    Ok(())
}

fn softmax(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for z in logits.iter_mut() {
        *z /= sum;
    }
}

struct DenseLayers<'a> {
    shapes: Vec<(usize, usize)>,
    values: &'a [f64],
}

impl<'a> DenseLayers<'a> {
    fn new(model: &'a ModelParams) -> Self {
        DenseLayers {
            shapes: model.kind.layer_shapes(),
            values: &model.values,
        }
    }

    fn layer(&self, idx: usize) -> (&[f64], &[f64], usize, usize) {
        let mut offset = 0;
        for (i, &(out, inp)) in self.shapes.iter().enumerate() {
            let w_len = out * inp;
            if i == idx {
                return (
                    &self.values[offset..offset + w_len],
                    &self.values[offset + w_len..offset + w_len + out],
                    out,
                    inp,
                );
            }
            offset += w_len + out;
        }
        unreachable!("layer index in range");
    }

    fn forward(&self, x: &[f64], idx: usize, tanh_hidden: bool) -> Vec<f64> {
        let (w, b, out, inp) = self.layer(idx);
        let mut a = vec![0.0; out];
        for o in 0..out {
            let mut acc = b[o];
            let row = &w[o * inp..(o + 1) * inp];
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            a[o] = if tanh_hidden { acc.tanh() } else { acc };
        }
        a
    }
}

/// Per-sample gradient accumulation shared by `grad` and `loss`.
fn accumulate(
    model: &ModelParams,
    features: &DataMatrix,
    targets: &Targets,
    indices: &[usize],
    mut grad_out: Option<&mut [f64]>,
) -> Result<f64> {
    check_dims(model, features)?;
    if indices.is_empty() {
        return Err(SimError::EmptyBatch);
    }
    let layers = DenseLayers::new(model);
    let n_layers = layers.shapes.len();
    let scale = 1.0 / indices.len() as f64;
    let mut total_loss = 0.0;

    for &row in indices {
        let x = features.row(row);
        match (&model.kind, targets) {
            (ModelKind::LinearRegression { .. }, Targets::Real(ys)) => {
                let (w, b, _, inp) = layers.layer(0);
                let mut pred = b[0];
                for (wi, xi) in w.iter().zip(x) {
                    pred += wi * xi;
                }
                let residual = pred - ys[row];
                total_loss += 0.5 * residual * residual;
                if let Some(g) = grad_out.as_deref_mut() {
                    for k in 0..inp {
                        g[k] += scale * residual * x[k];
                    }
                    g[inp] += scale * residual;
                }
            }
            (ModelKind::LogisticRegression { classes, .. }, Targets::Class(ys)) => {
                let (_, _, _, inp) = layers.layer(0);
                let mut logits = layers.forward(x, 0, false);
                softmax(&mut logits);
                let y = ys[row];
                total_loss += -(logits[y].max(1e-300)).ln();
                if let Some(g) = grad_out.as_deref_mut() {
                    for c in 0..*classes {
                        let delta = logits[c] - if c == y { 1.0 } else { 0.0 };
                        for k in 0..inp {
                            g[c * inp + k] += scale * delta * x[k];
                        }
                        g[classes * inp + c] += scale * delta;
                    }
                }
            }
            (ModelKind::Mlp { .. }, Targets::Class(ys)) => {
                // forward pass keeping activations
                let mut activations: Vec<Vec<f64>> = vec![x.to_vec()];
                for l in 0..n_layers - 1 {
                    let next = layers.forward(activations[l].as_slice(), l, true);
                    activations.push(next);
                }
                let mut logits = layers.forward(activations[n_layers - 1].as_slice(), n_layers - 1, false);
                softmax(&mut logits);
                let y = ys[row];
                total_loss += -(logits[y].max(1e-300)).ln();

                if let Some(g) = grad_out.as_deref_mut() {
                    // delta at the output, then walk backwards
                    let mut delta: Vec<f64> = logits
                        .iter()
                        .enumerate()
                        .map(|(c, p)| p - if c == y { 1.0 } else { 0.0 })
                        .collect();
                    let mut offset_of_layer: Vec<usize> = Vec::with_capacity(n_layers);
                    let mut off = 0;
                    for &(out, inp) in &layers.shapes {
                        offset_of_layer.push(off);
                        off += out * inp + out;
                    }
                    for l in (0..n_layers).rev() {
                        let (w, _, out, inp) = layers.layer(l);
                        let input = activations[l].as_slice();
                        let base = offset_of_layer[l];
                        for o in 0..out {
                            for k in 0..inp {
                                g[base + o * inp + k] += scale * delta[o] * input[k];
                            }
                            g[base + out * inp + o] += scale * delta[o];
                        }
                        if l > 0 {
                            let mut prev = vec![0.0; inp];
                            for (k, pk) in prev.iter_mut().enumerate() {
                                let mut acc = 0.0;
                                for o in 0..out {
                                    acc += w[o * inp + k] * delta[o];
                                }
                                // tanh'(a) = 1 - tanh(a)^2, and input[k] is tanh(a)
                                *pk = acc * (1.0 - input[k] * input[k]);
                            }
                            delta = prev;
                        }
                    }
                }
            }
            _ => return Err(SimError::ShapeMismatch),
        }
    }
    Ok(total_loss * scale)
}

/// Analytic gradient of the mean loss over the whole dataset.
pub fn grad(model: &ModelParams, data: &Dataset) -> Result<Vec<f64>> {
    let indices: Vec<usize> = (0..data.len()).collect();
    grad_indices(model, data, &indices)
}

/// Analytic gradient of the mean loss over the rows in `indices`.
pub fn grad_indices(model: &ModelParams, data: &Dataset, indices: &[usize]) -> Result<Vec<f64>> {
    let mut g = vec![0.0; model.dim()];
    accumulate(model, &data.features, &data.targets, indices, Some(&mut g))?;
    Ok(g)
}

/// Mean loss over the dataset.
pub fn loss(model: &ModelParams, data: &Dataset) -> Result<f64> {
    let indices: Vec<usize> = (0..data.len()).collect();
    accumulate(model, &data.features, &data.targets, &indices, None)
}

/// Utility score on held-out data: classification accuracy, or R^2 for
/// regression targets.
pub fn utility_score(model: &ModelParams, data: &Dataset) -> Result<f64> {
    check_dims(model, &data.features)?;
    match (&model.kind, &data.targets) {
        (ModelKind::LinearRegression { .. }, Targets::Real(ys)) => {
            let layers = DenseLayers::new(model);
            let mean_y: f64 = ys.iter().sum::<f64>() / ys.len() as f64;
            let mut ss_res = 0.0;
            let mut ss_tot = 0.0;
            for (row, &y) in ys.iter().enumerate() {
                let pred = layers.forward(data.features.row(row), 0, false)[0];
                ss_res += (pred - y) * (pred - y);
                ss_tot += (y - mean_y) * (y - mean_y);
            }
            Ok(if ss_tot == 0.0 { 0.0 } else { 1.0 - ss_res / ss_tot })
        }
        (_, Targets::Class(ys)) => {
            let layers = DenseLayers::new(model);
            let n_layers = layers.shapes.len();
            let mut correct = 0usize;
            for (row, &y) in ys.iter().enumerate() {
                let mut h = data.features.row(row).to_vec();
                for l in 0..n_layers - 1 {
                    h = layers.forward(&h, l, true);
                }
                let logits = layers.forward(&h, n_layers - 1, false);
                let pred = logits
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                if pred == y {
                    correct += 1;
                }
            }
            Ok(correct as f64 / ys.len() as f64)
        }
        _ => Err(SimError::ShapeMismatch),
    }
}

// ---------------------------------------------------------------------------
// Schedule, sampler, local training, aggregation
// ---------------------------------------------------------------------------

/// Training schedule: E local steps per round, n total steps (E divides n),
/// so there are n/E communication rounds.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainingSchedule {
    pub local_steps: usize,
    pub total_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.local_steps == 0 {
            return Err(SimError::BadSchedule("local_steps must be >= 1"));
        }
        if self.total_steps == 0 || self.total_steps % self.local_steps != 0 {
            return Err(SimError::BadSchedule("local_steps must divide total_steps"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(SimError::BadSchedule("learning_rate must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(SimError::BadSchedule("batch_size must be >= 1"));
        }
        Ok(())
    }

    pub fn rounds(&self) -> usize {
        self.total_steps / self.local_steps
    }
}

/// Without-replacement mini-batch sampler: shuffles the index set at each
/// epoch boundary and hands out consecutive slices, so no index repeats
/// within an epoch.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: StreamRng,
}

impl BatchSampler {
    pub fn new(n_samples: usize, seed: u64, stream: u64) -> Self {
        let mut rng = StreamRng::new(seed, stream);
        let mut order: Vec<usize> = (0..n_samples).collect();
        rng.shuffle(&mut order);
        BatchSampler { order, pos: 0, rng }
    }

    /// Next batch of at most `batch_size` indices; shorter at an epoch
    /// boundary.
    pub fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let end = (self.pos + batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        batch
    }
}

/// One communication round of local SGD: `schedule.local_steps` deterministic
/// mini-batch steps on `data`, drawing batches from `sampler`.
pub fn local_round(
    model: &ModelParams,
    data: &Dataset,
    schedule: &TrainingSchedule,
    sampler: &mut BatchSampler,
) -> Result<ModelParams> {
    schedule.validate()?;
    let mut current = model.clone();
    for _ in 0..schedule.local_steps {
        let batch = sampler.next_batch(schedule.batch_size);
        let g = grad_indices(&current, data, &batch)?;
        for (w, gi) in current.values.iter_mut().zip(&g) {
            *w -= schedule.learning_rate * gi;
        }
    }
    Ok(current)
}

/// Weighted parameter average, reduced in fixed client-index order.
pub fn fedavg(params: &[ModelParams], weights: &[f64]) -> Result<ModelParams> {
    let first = params.first().ok_or(SimError::ShapeMismatch)?;
    if params.iter().any(|p| p.kind != first.kind || p.dim() != first.dim()) {
        return Err(SimError::ShapeMismatch);
    }
    if weights.len() != params.len()
        || weights.iter().any(|w| !(*w >= 0.0))
        || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(SimError::BadWeights);
    }
    let mut out = ModelParams::zeros(first.kind.clone());
    for (p, &w) in params.iter().zip(weights) {
        for (acc, v) in out.values.iter_mut().zip(&p.values) {
            *acc += w * v;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Budget ledger
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub step: usize,
    pub nats: f64,
}

/// Per-local-step record of capacity charges, enforcing that no entry
/// exceeds the per-step cap and the total stays within `n * kappa`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub kappa_nats: f64,
    pub max_steps: usize,
    pub entries: Vec<LedgerEntry>,
    pub total: f64,
}

impl BudgetLedger {
    pub fn new(kappa_nats: f64, max_steps: usize) -> Self {
        BudgetLedger {
            kappa_nats,
            max_steps,
            entries: Vec::new(),
            total: 0.0,
        }
    }

    /// Total budget for the whole run.
    pub fn limit(&self) -> f64 {
        self.max_steps as f64 * self.kappa_nats
    }

    pub fn charge(&mut self, step: usize, nats: f64) -> Result<()> {
        let slack = 1.0 + 1e-8;
        if nats > self.kappa_nats * slack || self.total + nats > self.limit() * slack {
            return Err(SimError::BudgetExceeded {
                step,
                total: self.total + nats,
                limit: self.limit(),
            });
        }
        self.entries.push(LedgerEntry { step, nats });
        self.total += nats;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Federation
// ---------------------------------------------------------------------------

/// Fully materialized federation setup: concrete client datasets, the
/// victim's calibrated plan (if any), and the schedule.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FederationConfig {
    pub model: ModelKind,
    pub clients: Vec<Dataset>,
    pub victim: usize,
    /// Aggregation weights; uniform when absent.
    pub weights: Option<Vec<f64>>,
    /// Channel plan for the victim; absent means undefended.
    pub plan: Option<NoisePlan>,
    pub schedule: TrainingSchedule,
    pub test: Dataset,
    /// Scale of the random parameter initialization.
    pub init_scale: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    pub ledger_total: Option<f64>,
}

/// The victim's view of one round: parameters received from the server and
/// parameters shared back after E local steps.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VictimRound {
    pub round: usize,
    pub received: Vec<f64>,
    pub shared: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FederationTrace {
    pub rounds: Vec<RoundRecord>,
    pub victim_rounds: Vec<VictimRound>,
    pub final_model: ModelParams,
    pub ledger: Option<BudgetLedger>,
    /// The victim's one-shot noisy features, when defended.
    pub victim_noisy: Option<DataMatrix>,
}

/// Run T = n/E rounds of E local steps each. The victim trains on its
/// noisy dataset and is charged kappa per local step; everyone else trains
/// on raw data. Aggregation is a barrier with fixed-order reduction.
pub fn run_federation(config: &FederationConfig) -> Result<FederationTrace> {
    config.schedule.validate()?;
    let k = config.clients.len();
    if k < 2 {
        return Err(SimError::BadConfig("need at least 2 clients".into()));
    }
    if config.victim >= k {
        return Err(SimError::BadConfig(format!(
            "victim index {} out of range for {} clients",
            config.victim, k
        )));
    }
    let weights = match &config.weights {
        Some(w) => w.clone(),
        None => vec![1.0 / k as f64; k],
    };
    if weights.len() != k {
        return Err(SimError::BadWeights);
    }

    // One-shot noise on the victim's features.
    let mut train_sets: Vec<Dataset> = config.clients.clone();
    let mut victim_noisy = None;
    let mut ledger = None;
    if let Some(plan) = &config.plan {
        let noisy = channels::apply(plan, &config.clients[config.victim].features)?;
        victim_noisy = Some(noisy.data.clone());
        train_sets[config.victim] = config.clients[config.victim].with_features(noisy.data)?;
        ledger = Some(BudgetLedger::new(plan.kappa_nats, config.schedule.total_steps));
    }

    let seed = config.schedule.seed;
    let mut samplers: Vec<BatchSampler> = (0..k)
        .map(|c| BatchSampler::new(train_sets[c].len(), derive_seed(seed, seed_tags::SAMPLER, c as u64), c as u64))
        .collect();
    let mut init_rng = StreamRng::new(derive_seed(seed, seed_tags::INIT, 0), 0);
    let mut global = ModelParams::random(config.model.clone(), config.init_scale, &mut init_rng);

    let rounds = config.schedule.rounds();
    let mut round_records = Vec::with_capacity(rounds);
    let mut victim_rounds = Vec::with_capacity(rounds);

    for round in 0..rounds {
        let received = global.values.clone();
        let mut locals = Vec::with_capacity(k);
        for c in 0..k {
            locals.push(local_round(&global, &train_sets[c], &config.schedule, &mut samplers[c])?);
        }
        if let Some(ledger) = ledger.as_mut() {
            let kappa = ledger.kappa_nats;
            for e in 0..config.schedule.local_steps {
                ledger.charge(round * config.schedule.local_steps + e, kappa)?;
            }
        }
        victim_rounds.push(VictimRound {
            round,
            received,
            shared: locals[config.victim].values.clone(),
        });
        global = fedavg(&locals, &weights)?;

        let mut train_loss = 0.0;
        for (c, w) in weights.iter().enumerate() {
            train_loss += w * loss(&global, &train_sets[c])?;
        }
        round_records.push(RoundRecord {
            round,
            train_loss,
            test_acc: utility_score(&global, &config.test)?,
            ledger_total: ledger.as_ref().map(|l| l.total),
        });
    }

    Ok(FederationTrace {
        rounds: round_records,
        victim_rounds,
        final_model: global,
        ledger,
        victim_noisy,
    })
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Generator for labeled Gaussian mixtures (classification) or a linear
/// target with Gaussian features (regression).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub classes: usize,
    /// Distance scale of the class means from the origin.
    pub separation: f64,
    pub samples_per_client: usize,
    pub test_samples: usize,
    #[serde(default)]
    pub regression: bool,
}

impl SyntheticSpec {
    /// Class means, drawn once from the master seed: random directions
    /// scaled to `separation`.
    pub fn class_means(&self, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = StreamRng::new(derive_seed(seed, seed_tags::MEANS, 0), 0);
        (0..self.classes)
            .map(|_| {
                let raw: Vec<f64> = (0..self.dim).map(|_| rng.next_normal()).collect();
                let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                raw.iter().map(|v| v * self.separation / norm).collect()
            })
            .collect()
    }

    /// Exact second moment of the generator: identity within-class noise
    /// plus the between-class spread of the balanced mixture.
    pub fn generator_covariance(&self, seed: u64) -> Covariance {
        let d = self.dim;
        if self.regression {
            return Covariance::identity(d);
        }
        let means = self.class_means(seed);
        let c = self.classes as f64;
        let mut grand = vec![0.0; d];
        for mu in &means {
            for (g, m) in grand.iter_mut().zip(mu) {
                *g += m / c;
            }
        }
        let mut entries = vec![0.0; d * d];
        for i in 0..d {
            for j in i..d {
                let mut acc = if i == j { 1.0 } else { 0.0 };
                for mu in &means {
                    acc += (mu[i] - grand[i]) * (mu[j] - grand[j]) / c;
                }
                entries[i * d + j] = acc;
                entries[j * d + i] = acc;
            }
        }
        Covariance::new(d, entries).expect("generator covariance is symmetric")
    }

    /// Exact mean of the generator.
    pub fn generator_mean(&self, seed: u64) -> Vec<f64> {
        if self.regression {
            return vec![0.0; self.dim];
        }
        let means = self.class_means(seed);
        let c = self.classes as f64;
        let mut grand = vec![0.0; self.dim];
        for mu in &means {
            for (g, m) in grand.iter_mut().zip(mu) {
                *g += m / c;
            }
        }
        grand
    }

    /// Draw one dataset from the stream identified by `(seed, tag, index)`.
    /// Classification labels cycle round-robin so classes stay balanced.
    pub fn generate(&self, seed: u64, tag: u64, index: u64, count: usize) -> Dataset {
        let rng = CounterRng::new(derive_seed(seed, tag, index), 0);
        let d = self.dim;
        let mut values = vec![0.0; count * d];
        if self.regression {
            // y = w* . x + noise, with a fixed unit slope vector
            let slope: Vec<f64> = {
                let mut s = StreamRng::new(derive_seed(seed, seed_tags::MEANS, 1), 0);
                let raw: Vec<f64> = (0..d).map(|_| s.next_normal()).collect();
                let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                raw.iter().map(|v| v / norm).collect()
            };
            let mut ys = vec![0.0; count];
            for r in 0..count {
                let mut y = 0.0;
                for c in 0..d {
                    let x = rng.normal_at((r * (d + 1) + c) as u64);
                    values[r * d + c] = x;
                    y += slope[c] * x;
                }
                y += 0.1 * rng.normal_at((r * (d + 1) + d) as u64);
                ys[r] = y;
            }
            let features = DataMatrix::new(count, d, values).expect("finite");
            Dataset::new(features, Targets::Real(ys)).expect("lengths match")
        } else {
            let means = self.class_means(seed);
            let mut labels = vec![0usize; count];
            for r in 0..count {
                let class = r % self.classes;
                labels[r] = class;
                for c in 0..d {
                    values[r * d + c] =
                        means[class][c] + rng.normal_at((r * d + c) as u64);
                }
            }
            let features = DataMatrix::new(count, d, values).expect("finite");
            Dataset::new(features, Targets::Class(labels)).expect("lengths match")
        }
    }
}

// ---------------------------------------------------------------------------
// Taylor check for data-space noise
// ---------------------------------------------------------------------------

/// Report of how well a first-order expansion explains the gradient change
/// caused by a data perturbation.
#[derive(Clone, Debug)]
pub struct TaylorReport {
    /// || g(D + xi) - g(D) - J xi ||.
    pub discrepancy: f64,
    /// Same with xi halved.
    pub halved_discrepancy: f64,
    /// discrepancy / halved_discrepancy; near 4 for a second-order
    /// remainder.
    pub ratio: f64,
    /// Mixed Jacobian d(grad)/d(data), row per parameter, column per data
    /// coordinate, by forward finite differences.
    pub mixed_jacobian: Vec<Vec<f64>>,
    /// The equivalent parameter-space noise eta * J * xi.
    pub parameter_noise: Vec<f64>,
}

const TAYLOR_FD_STEP: f64 = 1e-6;

/// Check the first-order equivalence between data-space noise and adaptive
/// parameter-space noise for an arbitrary gradient map `grad_at(data)`.
pub fn taylor_noise_check_fn<F>(grad_at: F, data: &[f64], xi: &[f64], eta: f64) -> TaylorReport
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let base = grad_at(data);
    let d_m = base.len();
    let d_d = data.len();

    let mut jacobian = vec![vec![0.0; d_d]; d_m];
    let mut bumped = data.to_vec();
    for j in 0..d_d {
        bumped[j] += TAYLOR_FD_STEP;
        let g = grad_at(&bumped);
        for i in 0..d_m {
            jacobian[i][j] = (g[i] - base[i]) / TAYLOR_FD_STEP;
        }
        bumped[j] = data[j];
    }

    let discrepancy_for = |scale: f64| -> f64 {
        let shifted: Vec<f64> = data.iter().zip(xi).map(|(d, x)| d + scale * x).collect();
        let g = grad_at(&shifted);
        let mut acc = 0.0;
        for i in 0..d_m {
            let linear: f64 = jacobian[i].iter().zip(xi).map(|(j, x)| j * scale * x).sum();
            let r = g[i] - base[i] - linear;
            acc += r * r;
        }
        acc.sqrt()
    };

    let discrepancy = discrepancy_for(1.0);
    let halved_discrepancy = discrepancy_for(0.5);
    let ratio = if halved_discrepancy == 0.0 {
        f64::NAN
    } else {
        discrepancy / halved_discrepancy
    };
    let parameter_noise: Vec<f64> = jacobian
        .iter()
        .map(|row| eta * row.iter().zip(xi).map(|(j, x)| j * x).sum::<f64>())
        .collect();

    TaylorReport {
        discrepancy,
        halved_discrepancy,
        ratio,
        mixed_jacobian: jacobian,
        parameter_noise,
    }
}

/// Convenience wrapper around a single data point of a model: perturbs the
/// feature vector, holding the target fixed.
pub fn taylor_noise_check(
    model: &ModelParams,
    point: &[f64],
    target: &Targets,
    xi: &[f64],
    eta: f64,
) -> Result<TaylorReport> {
    check_dims(
        model,
        &DataMatrix::new(1, point.len(), point.to_vec())?,
    )?;
    let model = model.clone();
    let target = target.clone();
    let grad_at = move |data: &[f64]| -> Vec<f64> {
        let features = DataMatrix::new(1, data.len(), data.to_vec()).expect("finite");
        let ds = Dataset::new(features, target.clone()).expect("one target");
        grad_indices(&model, &ds, &[0]).expect("gradient at perturbed point")
    };
    Ok(taylor_noise_check_fn(grad_at, point, xi, eta))
}
