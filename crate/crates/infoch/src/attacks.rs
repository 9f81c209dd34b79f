//! Data-reconstruction attacks and the metrics used to audit them against
//! the information-theoretic error floor.
//!
//! Three attackers are provided: an exact bias-ratio inversion for B=1
//! observations of a dense-with-bias first layer, an iterative gradient
//! matcher with a cosine objective, and the closed-form Bayes posterior
//! mean for diagonal Gaussian channels. The Bayes attacker is the tightness
//! witness: at d=1 its expected error equals the floor exactly.

use crate::capacity::{mse_lower_bound, BoundInputs, CapacityNats};
use crate::flsim::{grad_indices, Dataset, ModelParams, SimError, Targets};
use crate::rng::{CounterRng, StreamRng};
use crate::spectral::DataMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("DeadNeurons: every first-layer bias gradient is zero")]
    DeadNeurons,
    #[error("ShapeMismatch: reconstructed and target shapes differ")]
    ShapeMismatch,
    #[error("NonPositiveVariance: prior and noise variances must be > 0")]
    NonPositiveVariance,
    #[error("ZeroIterations: gradient matching needs at least one iteration")]
    ZeroIterations,
    #[error("NonPositiveRange: PSNR needs data_range > 0")]
    NonPositiveRange,
    #[error(transparent)]
    Sim(#[from] SimError),
}

type Result<T> = std::result::Result<T, AttackError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackKind {
    BiasRatio,
    GradientMatching,
    BayesGaussian,
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttackKind::BiasRatio => write!(f, "bias-ratio"),
            AttackKind::GradientMatching => write!(f, "grad-match"),
            AttackKind::BayesGaussian => write!(f, "bayes"),
        }
    }
}

/// The target value the victim's observed gradient was computed against.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum TargetValue {
    Real(f64),
    Class(usize),
}

/// What the attacker sees: the model snapshot the victim received and the
/// gradient it effectively shared (directly, or as a parameter delta
/// divided by the learning rate).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradientObservation {
    pub model: ModelParams,
    pub gradient: Vec<f64>,
    pub batch_size: usize,
    pub target_output: TargetValue,
}

impl GradientObservation {
    pub fn from_gradient(
        model: ModelParams,
        gradient: Vec<f64>,
        batch_size: usize,
        target_output: TargetValue,
    ) -> Self {
        GradientObservation {
            model,
            gradient,
            batch_size,
            target_output,
        }
    }

    /// Observation recovered from a shared parameter update:
    /// `(W_received - W_shared) / eta`.
    pub fn from_update(
        received: &ModelParams,
        shared: &ModelParams,
        eta: f64,
        batch_size: usize,
        target_output: TargetValue,
    ) -> Self {
        let gradient = received
            .values
            .iter()
            .zip(&shared.values)
            .map(|(i, o)| (i - o) / eta)
            .collect();
        GradientObservation {
            model: received.clone(),
            gradient,
            batch_size,
            target_output,
        }
    }
}

/// Exact single-sample inversion for a dense-with-bias first layer: the
/// weight gradient row is the bias gradient times the input, so the ratio
/// reproduces the input coordinate for coordinate. Exact at B=1 with no
/// channel noise; under a channel it recovers the noisy sample instead.
pub fn bias_ratio_invert(obs: &GradientObservation) -> Result<DataMatrix> {
    let (w_range, b_range, _, input_dim) = obs.model.first_layer_layout();
    let w_grad = &obs.gradient[w_range];
    let b_grad = &obs.gradient[b_range];
    let (best_row, best_mag) = b_grad
        .iter()
        .enumerate()
        .map(|(i, g)| (i, g.abs()))
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .ok_or(AttackError::DeadNeurons)?;
    if best_mag == 0.0 {
        return Err(AttackError::DeadNeurons);
    }
    let pivot = b_grad[best_row];
    let values: Vec<f64> = (0..input_dim)
        .map(|k| w_grad[best_row * input_dim + k] / pivot)
        .collect();
    DataMatrix::new(1, input_dim, values).map_err(|_| AttackError::DeadNeurons)
}

/// Iterative gradient matching: start from a standard-normal dummy sample
/// and descend on `1 - cos(grad(dummy), observed)` with sign-of-gradient
/// steps, decaying the step by 0.9 every ceil(iters/10) steps. Returns the
/// best iterate seen. Best effort: never fails past argument validation.
pub fn gradient_matching_invert(
    obs: &GradientObservation,
    iters: usize,
    step_size: f64,
    seed: u64,
) -> Result<DataMatrix> {
    if iters == 0 {
        return Err(AttackError::ZeroIterations);
    }
    let d = obs.model.kind.input_dim();
    let rng = CounterRng::new(seed, 0x4D41_5443);
    let mut dummy: Vec<f64> = (0..d).map(|i| rng.normal_at(i as u64)).collect();

    let targets = match obs.target_output {
        TargetValue::Real(y) => Targets::Real(vec![y]),
        TargetValue::Class(c) => Targets::Class(vec![c]),
    };
    let objective = |x: &[f64]| -> f64 {
        let features = DataMatrix::new(1, d, x.to_vec()).expect("finite dummy");
        let ds = Dataset::new(features, targets.clone()).expect("single target");
        let g = grad_indices(&obs.model, &ds, &[0]).expect("dummy gradient");
        1.0 - cosine(&g, &obs.gradient)
    };

    let decay_every = iters.div_ceil(10);
    let mut step = step_size;
    let mut best = dummy.clone();
    let mut best_obj = objective(&dummy);
    let fd = 1e-6;
    for iter in 1..=iters {
        // sign of the objective gradient by central differences
        for j in 0..d {
            let keep = dummy[j];
            dummy[j] = keep + fd;
            let up = objective(&dummy);
            dummy[j] = keep - fd;
            let down = objective(&dummy);
            dummy[j] = keep;
            let slope = up - down;
            if slope > 0.0 {
                dummy[j] -= step;
            } else if slope < 0.0 {
                dummy[j] += step;
            }
        }
        let obj = objective(&dummy);
        if obj < best_obj {
            best_obj = obj;
            best = dummy.clone();
        }
        if iter % decay_every == 0 {
            step *= 0.9;
        }
    }
    Ok(DataMatrix::new(1, d, best).expect("finite iterate"))
}

/// Closed-form optimum for the diagonal Gaussian channel `D + xi`:
/// per-dimension posterior-mean error and the exact information carried.
pub fn bayes_gaussian_oracle(
    prior_var: &[f64],
    noise_var: &[f64],
) -> Result<(f64, CapacityNats)> {
    if prior_var.len() != noise_var.len() {
        return Err(AttackError::ShapeMismatch);
    }
    if prior_var
        .iter()
        .chain(noise_var)
        .any(|v| !(*v > 0.0) || !v.is_finite())
    {
        return Err(AttackError::NonPositiveVariance);
    }
    let d = prior_var.len() as f64;
    let mse = prior_var
        .iter()
        .zip(noise_var)
        .map(|(l, s)| l * s / (l + s))
        .sum::<f64>()
        / d;
    let info = prior_var
        .iter()
        .zip(noise_var)
        .map(|(l, s)| 0.5 * (l / s).ln_1p())
        .sum::<f64>();
    Ok((mse, CapacityNats(info)))
}

/// Posterior-mean reconstruction for a diagonal Gaussian channel observed
/// through the noisy sample: shrink each coordinate toward the prior mean.
pub fn bayes_posterior_mean(
    noisy: &[f64],
    prior_mean: &[f64],
    prior_var: &[f64],
    noise_var: &[f64],
) -> Vec<f64> {
    noisy
        .iter()
        .zip(prior_mean)
        .zip(prior_var.iter().zip(noise_var))
        .map(|((x, m), (l, s))| m + l / (l + s) * (x - m))
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// MSE, PSNR, and cosine similarity between two matrices of the same shape.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MetricSet {
    pub mse_per_dim: f64,
    /// None encodes +infinity (exact reconstruction).
    pub psnr_db: Option<f64>,
    pub cosine: f64,
}

pub fn metrics(
    reconstructed: &DataMatrix,
    target: &DataMatrix,
    data_range: f64,
) -> Result<MetricSet> {
    if reconstructed.rows() != target.rows() || reconstructed.cols() != target.cols() {
        return Err(AttackError::ShapeMismatch);
    }
    if !(data_range > 0.0) {
        return Err(AttackError::NonPositiveRange);
    }
    let n = reconstructed.values().len() as f64;
    let mse: f64 = reconstructed
        .values()
        .iter()
        .zip(target.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    let psnr_db = if mse > 0.0 {
        Some(10.0 * (data_range * data_range / mse).log10())
    } else {
        None
    };
    Ok(MetricSet {
        mse_per_dim: mse,
        psnr_db,
        cosine: cosine(reconstructed.values(), target.values()),
    })
}

/// One reconstruction trial with everything needed to audit it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub attack: AttackKind,
    pub reconstructed: DataMatrix,
    pub target: DataMatrix,
    pub mse_per_dim: f64,
    pub psnr_db: Option<f64>,
    pub cosine: f64,
    /// Error floor this trial is compared against.
    pub bound: f64,
    pub iterations: usize,
}

impl ReconstructionReport {
    pub fn from_metrics(
        attack: AttackKind,
        reconstructed: DataMatrix,
        target: DataMatrix,
        m: MetricSet,
        bound: f64,
        iterations: usize,
    ) -> Self {
        ReconstructionReport {
            attack,
            reconstructed,
            target,
            mse_per_dim: m.mse_per_dim,
            psnr_db: m.psnr_db,
            cosine: m.cosine,
            bound,
            iterations,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BoundCheck {
    pub pass: bool,
    /// mse - bound; non-negative whenever the floor holds.
    pub margin: f64,
}

/// Check a report against its floor with relative slack:
/// pass iff `mse >= bound * (1 - slack)`.
pub fn verify_bound(report: &ReconstructionReport, slack: f64) -> BoundCheck {
    BoundCheck {
        pass: report.mse_per_dim >= report.bound * (1.0 - slack),
        margin: report.mse_per_dim - report.bound,
    }
}

/// Error floor for a reconstruction experiment: Gaussian-surrogate entropy
/// of the generator plus the information actually observed.
pub fn experiment_bound(entropy_nats: f64, dim: usize, observed_info_nats: f64) -> f64 {
    mse_lower_bound(&BoundInputs::new(entropy_nats, dim, observed_info_nats))
}
