//! Channel-capacity formulas and solvers.
//!
//! Everything here is in nats (natural logs throughout); conversion to bits
//! is display-only. The core quantity is the Gaussian-channel capacity
//!
//! ```text
//! f(sigma) = 1/2 * sum_i ln((lambda_i + sigma) / sigma)
//! ```
//!
//! together with the calibrations that invert it: isotropic noise solved by
//! bisection, per-eigenvalue whitening in closed form, and an importance-
//! weighted diagonal solved through the Schur-sequence upper bound. The
//! module also covers the capacity bounds implied by a Gaussian-mechanism DP
//! configuration, batch-size scaling, the capacity drop from compressing
//! dimensions, and the reconstruction-error floor that a capacity budget
//! buys.

use crate::spectral::{self, Covariance, CovarianceSpectrum, SchurSequence, SpectralError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Expansion cap for bisection bracketing.
const MAX_BRACKET_EXPANSIONS: usize = 200;
/// Iteration cap for the bisection itself.
const MAX_BISECTION_ITERS: usize = 10_000;

#[derive(Debug, Error)]
pub enum CapacityError {
    #[error("NonPositiveSigma: noise variance must be > 0")]
    NonPositiveSigma,
    #[error("NonPositiveKappa: capacity target must be > 0 (kappa = 0 demands infinite noise)")]
    NonPositiveKappa,
    #[error("ZeroSpectrum: all eigenvalues are zero, capacity is 0 for every sigma")]
    ZeroSpectrum,
    #[error("ZeroBatch: batch size must be >= 1")]
    ZeroBatch,
    #[error("InvalidDelta: delta must lie in (0, 1)")]
    InvalidDelta,
    #[error("NonPositiveField: DP parameter {0} must be > 0")]
    NonPositiveField(&'static str),
    #[error("EmptyCompressionSet: no dimensions selected")]
    EmptyCompressionSet,
    #[error("BadCompressionIndex: index {0} out of range for dimension {1}")]
    BadCompressionIndex(usize, usize),
    #[error("DegenerateDistribution: zero eigenvalue has no finite differential entropy")]
    DegenerateDistribution,
    #[error("NoBracket: bisection bracket not found after {0} expansions")]
    NoBracket(usize),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

type Result<T> = std::result::Result<T, CapacityError>;

/// Information quantity in nats.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct CapacityNats(pub f64);

impl CapacityNats {
    pub fn nats(self) -> f64 {
        self.0
    }

    pub fn bits(self) -> f64 {
        self.0 / std::f64::consts::LN_2
    }
}

/// Gaussian-mechanism DP configuration. `sigma` is the variance of the
/// added noise (the noise multiplier is its square root).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DpParams {
    pub epsilon: f64,
    pub delta: f64,
    pub clip: f64,
    pub batch: u64,
    pub sigma: f64,
}

impl DpParams {
    pub fn new(epsilon: f64, delta: f64, clip: f64, batch: u64, sigma: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(CapacityError::NonPositiveField("epsilon"));
        }
        if !(delta > 0.0) {
            return Err(CapacityError::NonPositiveField("delta"));
        }
        if delta >= 1.0 {
            return Err(CapacityError::InvalidDelta);
        }
        if !(clip > 0.0) {
            return Err(CapacityError::NonPositiveField("clip"));
        }
        if batch == 0 {
            return Err(CapacityError::ZeroBatch);
        }
        if !(sigma > 0.0) {
            return Err(CapacityError::NonPositiveField("sigma"));
        }
        Ok(DpParams {
            epsilon,
            delta,
            clip,
            batch,
            sigma,
        })
    }
}

/// Inputs for the reconstruction-error floor: differential entropy of the
/// data (nats), its dimension, and the information the observer holds
/// (nats).
#[derive(Clone, Copy, Debug)]
pub struct BoundInputs {
    pub entropy_nats: f64,
    pub dim: usize,
    pub info_nats: f64,
}

impl BoundInputs {
    pub fn new(entropy_nats: f64, dim: usize, info_nats: f64) -> Self {
        debug_assert!(dim >= 1);
        debug_assert!(info_nats >= 0.0);
        BoundInputs {
            entropy_nats,
            dim,
            info_nats,
        }
    }
}

// ---------------------------------------------------------------------------
// Capacity of isotropic noise and its inverse
// ---------------------------------------------------------------------------

/// Capacity of the channel `X + sqrt(sigma) * N(0, I)` against a signal with
/// the given eigenvalues: `1/2 * sum ln((lambda_i + sigma)/sigma)`.
/// Dimensions with a zero eigenvalue contribute nothing.
pub fn capacity_isotropic(spectrum: &CovarianceSpectrum, sigma: f64) -> Result<CapacityNats> {
    if !(sigma > 0.0) {
        return Err(CapacityError::NonPositiveSigma);
    }
    let total: f64 = spectrum
        .eigenvalues()
        .iter()
        .map(|&l| (l / sigma).ln_1p())
        .sum();
    Ok(CapacityNats(0.5 * total))
}

/// `expm1(2 kappa / d)` with an underflow-safe fallback for the reciprocal:
/// returns the denominator of the equal-eigenvalue closed form, or `None`
/// when even the reciprocal is unrepresentable.
fn equal_case_denominator(kappa: f64, dim: usize) -> Option<f64> {
    let x = 2.0 * kappa / dim as f64;
    let d = x.exp_m1();
    if d.is_finite() && d > 0.0 {
        Some(d)
    } else {
        None
    }
}

fn bisect_decreasing<F: Fn(f64) -> f64>(
    f: F,
    start: f64,
    target: f64,
    rel_tol: f64,
) -> Result<f64> {
    debug_assert!(start > 0.0 && start.is_finite());
    let tol = rel_tol * target;
    // Expand a multiplicative bracket around the start until f(lo) >= target
    // and f(hi) <= target; f is strictly decreasing in sigma.
    let mut lo = start;
    let mut hi = start;
    let mut expansions = 0;
    while f(lo) < target {
        lo /= 4.0;
        expansions += 1;
        if expansions > MAX_BRACKET_EXPANSIONS || lo == 0.0 {
            return Err(CapacityError::NoBracket(expansions));
        }
    }
    expansions = 0;
    while f(hi) > target {
        hi *= 4.0;
        expansions += 1;
        if expansions > MAX_BRACKET_EXPANSIONS || !hi.is_finite() {
            return Err(CapacityError::NoBracket(expansions));
        }
    }
    // Geometric-midpoint bisection: the root can sit many orders of
    // magnitude away from either bracket end.
    let mut best = lo;
    let mut best_res = (f(lo) - target).abs();
    for _ in 0..MAX_BISECTION_ITERS {
        let mid = ((lo.ln() + hi.ln()) * 0.5).exp();
        let val = f(mid);
        let res = (val - target).abs();
        if res < best_res {
            best = mid;
            best_res = res;
        }
        if res <= tol {
            return Ok(mid);
        }
        if val > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-15 {
            break;
        }
    }
    if best_res <= tol {
        Ok(best)
    } else {
        Err(CapacityError::NoBracket(MAX_BISECTION_ITERS))
    }
}

/// Solve `capacity_isotropic(spectrum, sigma) = kappa` for sigma by
/// bisection. The bracket starts at the equal-eigenvalue closed form
/// `mean(lambda) / (exp(2 kappa / d) - 1)` and expands by factors of 4.
pub fn solve_isotropic(
    spectrum: &CovarianceSpectrum,
    kappa: f64,
    rel_tol: f64,
) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(CapacityError::NonPositiveKappa);
    }
    let lambdas = spectrum.eigenvalues();
    if lambdas.iter().all(|&l| l == 0.0) {
        return Err(CapacityError::ZeroSpectrum);
    }
    let d = spectrum.dim();
    let mean: f64 = lambdas.iter().sum::<f64>() / d as f64;
    let start = match equal_case_denominator(kappa, d) {
        Some(denom) => mean / denom,
        None => mean * (-2.0 * kappa / d as f64).exp(),
    };
    if !(start > 0.0) || !start.is_finite() {
        return Err(CapacityError::NoBracket(0));
    }
    let f = |sigma: f64| -> f64 {
        lambdas.iter().map(|&l| (l / sigma).ln_1p()).sum::<f64>() * 0.5
    };
    bisect_decreasing(f, start, kappa, rel_tol)
}

// ---------------------------------------------------------------------------
// White channel
// ---------------------------------------------------------------------------

/// Per-eigenvalue noise variances that spend the budget equally across all
/// informative dimensions: `psi_i = lambda_i / (exp(2 kappa / d) - 1)`.
/// Dimensions with a zero eigenvalue get zero noise and are excluded from
/// the equal-capacity constraint.
pub fn white_noise_eigenvalues(spectrum: &CovarianceSpectrum, kappa: f64) -> Result<Vec<f64>> {
    if !(kappa > 0.0) {
        return Err(CapacityError::NonPositiveKappa);
    }
    let denom = equal_case_denominator(kappa, spectrum.dim())
        .ok_or(CapacityError::NoBracket(0))?;
    Ok(spectrum.eigenvalues().iter().map(|&l| l / denom).collect())
}

// ---------------------------------------------------------------------------
// Personalized channel
// ---------------------------------------------------------------------------

/// Upper bound on the capacity of the channel `X + N(0, sigma * diag(beta))`
/// in log-difference form:
///
/// ```text
/// U(sigma) = 1/2 * [ min( sum ln(c_ii + sigma beta_i),
///                         sum ln(u_i + sigma k_i) )
///                    - sum ln(sigma beta_i) ]
/// ```
///
/// where `u_i` and `k_i` come from the Schur sequence. The bound dominates
/// the exact log-det capacity and is tight when the covariance is diagonal.
pub fn personalized_capacity_upper(sigma: f64, schur: &SchurSequence) -> Result<CapacityNats> {
    if !(sigma > 0.0) {
        return Err(CapacityError::NonPositiveSigma);
    }
    let beta = schur.importance();
    let mut diag_branch = 0.0;
    let mut schur_branch = 0.0;
    let mut noise_term = 0.0;
    for i in 0..schur.dim() {
        diag_branch += (schur.diag()[i] + sigma * beta[i]).ln();
        schur_branch += (schur.conditional_var()[i] + sigma * schur.adjusted_importance()[i]).ln();
        noise_term += (sigma * beta[i]).ln();
    }
    Ok(CapacityNats(0.5 * (diag_branch.min(schur_branch) - noise_term)))
}

/// Solve `personalized_capacity_upper(sigma) = kappa` for sigma by
/// bisection; the bound is strictly decreasing in sigma.
pub fn solve_personalized(schur: &SchurSequence, kappa: f64, rel_tol: f64) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(CapacityError::NonPositiveKappa);
    }
    let d = schur.dim();
    let ratio_mean: f64 = schur
        .diag()
        .iter()
        .zip(schur.importance())
        .map(|(c, b)| c / b)
        .sum::<f64>()
        / d as f64;
    let start = match equal_case_denominator(kappa, d) {
        Some(denom) => ratio_mean / denom,
        None => ratio_mean * (-2.0 * kappa / d as f64).exp(),
    };
    if !(start > 0.0) || !start.is_finite() {
        return Err(CapacityError::NoBracket(0));
    }
    let f = |sigma: f64| -> f64 {
        personalized_capacity_upper(sigma, schur)
            .map(CapacityNats::nats)
            .unwrap_or(f64::NAN)
    };
    bisect_decreasing(f, start, kappa, rel_tol)
}

// ---------------------------------------------------------------------------
// DP bounds
// ---------------------------------------------------------------------------

/// Capacity bound from the noise scale alone: `B * S^2 / sigma`.
pub fn dp_noise_bound(batch: u64, clip: f64, sigma: f64) -> Result<CapacityNats> {
    if batch == 0 {
        return Err(CapacityError::ZeroBatch);
    }
    if !(clip > 0.0) {
        return Err(CapacityError::NonPositiveField("clip"));
    }
    if !(sigma > 0.0) {
        return Err(CapacityError::NonPositiveField("sigma"));
    }
    Ok(CapacityNats(batch as f64 * clip * clip / sigma))
}

/// Capacity bound from the privacy budget alone:
/// `B * epsilon^2 / (2 ln(1.25 / delta))`.
pub fn dp_epsilon_bound(batch: u64, epsilon: f64, delta: f64) -> Result<CapacityNats> {
    if batch == 0 {
        return Err(CapacityError::ZeroBatch);
    }
    if !(epsilon > 0.0) {
        return Err(CapacityError::NonPositiveField("epsilon"));
    }
    if !(delta > 0.0) {
        return Err(CapacityError::NonPositiveField("delta"));
    }
    if delta >= 1.0 {
        return Err(CapacityError::InvalidDelta);
    }
    Ok(CapacityNats(
        batch as f64 * epsilon * epsilon / (2.0 * (1.25 / delta).ln()),
    ))
}

/// The smallest Gaussian-mechanism noise variance that delivers
/// `(epsilon, delta)`-DP at clip bound `S`: `S^2 * 2 ln(1.25/delta) / eps^2`.
pub fn dp_minimal_sigma(epsilon: f64, delta: f64, clip: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(CapacityError::NonPositiveField("epsilon"));
    }
    if !(delta > 0.0) {
        return Err(CapacityError::NonPositiveField("delta"));
    }
    if delta >= 1.0 {
        return Err(CapacityError::InvalidDelta);
    }
    if !(clip > 0.0) {
        return Err(CapacityError::NonPositiveField("clip"));
    }
    Ok(clip * clip * 2.0 * (1.25 / delta).ln() / (epsilon * epsilon))
}

/// Both capacity bounds for a DP configuration; callers take the minimum
/// for the tightest guarantee.
pub fn dp_capacity_bounds(dp: &DpParams) -> Result<(CapacityNats, CapacityNats)> {
    Ok((
        dp_noise_bound(dp.batch, dp.clip, dp.sigma)?,
        dp_epsilon_bound(dp.batch, dp.epsilon, dp.delta)?,
    ))
}

// ---------------------------------------------------------------------------
// Batch scaling and compression
// ---------------------------------------------------------------------------

/// Capacity with the signal covariance scaled by `1/B` (mini-batch
/// averaging): `1/2 * sum ln((lambda_i / B + sigma) / sigma)`.
pub fn batch_scaled_capacity(
    spectrum: &CovarianceSpectrum,
    sigma: f64,
    batch: u64,
) -> Result<CapacityNats> {
    if batch == 0 {
        return Err(CapacityError::ZeroBatch);
    }
    if !(sigma > 0.0) {
        return Err(CapacityError::NonPositiveSigma);
    }
    let b = batch as f64;
    let total: f64 = spectrum
        .eigenvalues()
        .iter()
        .map(|&l| (l / (b * sigma)).ln_1p())
        .sum();
    Ok(CapacityNats(0.5 * total))
}

/// Capacity drop from zeroing out a set of dimensions.
#[derive(Clone, Copy, Debug)]
pub struct CompressionDelta {
    /// Capacity decrease in nats.
    pub nats: f64,
    /// True when every dimension was compressed; `nats` is then the full
    /// channel capacity rather than the partitioned formula.
    pub full_compression: bool,
}

/// Capacity decrease caused by compressing (dropping) the given dimensions
/// under isotropic noise `sigma`:
///
/// ```text
/// delta C = 1/2 * ln det(Q_k + sigma I - R^T (P + sigma I)^{-1} R) / sigma^k
/// ```
///
/// where `P` is the kept block, `Q_k` the compressed block, and `R` the
/// cross-covariance after permuting compressed dimensions to the end.
/// Compressing everything has no kept block; the full capacity is returned
/// with the `full_compression` flag set.
pub fn compression_delta(
    cov: &Covariance,
    compressed_dims: &[usize],
    sigma: f64,
) -> Result<CompressionDelta> {
    if !(sigma > 0.0) {
        return Err(CapacityError::NonPositiveSigma);
    }
    if compressed_dims.is_empty() {
        return Err(CapacityError::EmptyCompressionSet);
    }
    let d = cov.dim();
    let mut compressed: Vec<usize> = compressed_dims.to_vec();
    compressed.sort_unstable();
    compressed.dedup();
    if let Some(&bad) = compressed.iter().find(|&&i| i >= d) {
        return Err(CapacityError::BadCompressionIndex(bad, d));
    }
    if compressed.len() == d {
        let spectrum = spectral::eigendecompose(cov, spectral::DEFAULT_EIGEN_TOL)?;
        let full = capacity_isotropic(&spectrum, sigma)?;
        return Ok(CompressionDelta {
            nats: full.nats(),
            full_compression: true,
        });
    }

    let kept: Vec<usize> = (0..d).filter(|i| !compressed.contains(i)).collect();
    let m = kept.len();
    let k = compressed.len();

    // P + sigma I on the kept block.
    let mut p = vec![0.0; m * m];
    for (a, &ia) in kept.iter().enumerate() {
        for (b, &ib) in kept.iter().enumerate() {
            p[a * m + b] = cov.get(ia, ib);
        }
        p[a * m + a] += sigma;
    }
    let p_cov = Covariance::new(m, p)?;
    let p_spec = spectral::eigendecompose(&p_cov, spectral::DEFAULT_EIGEN_TOL)?;

    // R: kept x compressed cross block.
    let r: Vec<f64> = kept
        .iter()
        .flat_map(|&ia| compressed.iter().map(move |&ib| (ia, ib)))
        .map(|(ia, ib)| cov.get(ia, ib))
        .collect();

    // X = (P + sigma I)^{-1} R via the eigendecomposition; eigenvalues are
    // at least sigma, so the inverse is well defined.
    let mut x = vec![0.0; m * k];
    for col in 0..k {
        // project column onto the eigenbasis, scale, project back
        for eig in 0..m {
            let lambda = p_spec.eigenvalues()[eig];
            let mut proj = 0.0;
            for row in 0..m {
                proj += p_spec.basis_entry(row, eig) * r[row * k + col];
            }
            let scaled = proj / lambda;
            for row in 0..m {
                x[row * k + col] += p_spec.basis_entry(row, eig) * scaled;
            }
        }
    }

    // S = Q_k + sigma I - R^T X, symmetrized against rounding.
    let mut s = vec![0.0; k * k];
    for a in 0..k {
        for b in a..k {
            let mut acc = cov.get(compressed[a], compressed[b]);
            if a == b {
                acc += sigma;
            }
            let mut cross = 0.0;
            for row in 0..m {
                cross += r[row * k + a] * x[row * k + b];
            }
            acc -= cross;
            s[a * k + b] = acc;
            s[b * k + a] = acc;
        }
    }
    let s_cov = Covariance::new(k, s)?;
    let log_det_s = spectral::log_det(&s_cov)?;
    let raw = 0.5 * (log_det_s - k as f64 * sigma.ln());
    // The Schur complement of a PSD-plus-sigma matrix dominates sigma I, so
    // the true value is non-negative; absorb rounding-level negatives.
    let nats = if raw < 0.0 && raw > -1e-9 { 0.0 } else { raw };
    Ok(CompressionDelta {
        nats,
        full_compression: false,
    })
}

// ---------------------------------------------------------------------------
// Reconstruction-error floor and Gaussian entropy
// ---------------------------------------------------------------------------

/// Per-dimension mean-squared-error floor for reconstructing data with
/// the given entropy when the observer holds `info_nats` of information:
///
/// ```text
/// e^{2 h / d} / (2 pi e) * e^{-2 I / d}
/// ```
pub fn mse_lower_bound(inputs: &BoundInputs) -> f64 {
    let d = inputs.dim as f64;
    let log_bound = (2.0 * inputs.entropy_nats - 2.0 * inputs.info_nats) / d
        - (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    log_bound.exp()
}

/// Differential entropy of a Gaussian with the given spectrum:
/// `1/2 * (d ln(2 pi e) + sum ln lambda_i)` nats. This is the worst case
/// over all distributions with that covariance.
pub fn gaussian_entropy(spectrum: &CovarianceSpectrum) -> Result<f64> {
    if spectrum.eigenvalues().iter().any(|&l| l == 0.0) {
        return Err(CapacityError::DegenerateDistribution);
    }
    let d = spectrum.dim() as f64;
    let sum_log: f64 = spectrum.eigenvalues().iter().map(|l| l.ln()).sum();
    Ok(0.5 * (d * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + sum_log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;
    use crate::spectral::{eigendecompose, schur_sequence, DEFAULT_EIGEN_TOL};

    fn spec(lambdas: &[f64]) -> CovarianceSpectrum {
        let mut sorted = lambdas.to_vec();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        CovarianceSpectrum::from_eigenvalues(sorted).unwrap()
    }

    fn random_pd(dim: usize, seed: u64) -> Covariance {
        let mut rng = StreamRng::new(seed, 23);
        let a: Vec<f64> = (0..dim * dim).map(|_| rng.next_normal()).collect();
        let mut entries = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in i..dim {
                let mut acc = 0.0;
                for k in 0..dim {
                    acc += a[k * dim + i] * a[k * dim + j];
                }
                entries[i * dim + j] = acc / dim as f64;
                entries[j * dim + i] = entries[i * dim + j];
            }
        }
        Covariance::new(dim, entries)
            .unwrap()
            .add_scaled_identity(0.3)
    }

    #[test]
    fn equal_eigenvalue_capacity() {
        let c = capacity_isotropic(&spec(&[1.0, 1.0]), 1.0).unwrap();
        assert!((c.nats() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn one_dim_toy_capacity_in_parameter_space() {
        // gradient variance 16 with noise 16/(e^2 - 1) carries exactly 1 nat
        let sigma = 16.0 / (std::f64::consts::E.powi(2) - 1.0);
        let c = capacity_isotropic(&spec(&[16.0]), sigma).unwrap();
        assert!((c.nats() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn capacity_cross_checked_against_log_det() {
        let c = capacity_isotropic(&spec(&[3.0, 1.0]), 1.0).unwrap();
        let direct = 0.5 * (4f64.ln() + 2f64.ln());
        assert!((c.nats() - direct).abs() < 1e-15);
        // same value through log det(Sigma + sigma I) - d ln sigma
        let shifted = Covariance::diagonal(&[4.0, 2.0]);
        let via_det = 0.5 * (spectral::log_det(&shifted).unwrap() - 2.0 * 1f64.ln());
        assert!((c.nats() - via_det).abs() < 1e-12);
    }

    #[test]
    fn capacity_rejects_bad_sigma() {
        assert!(matches!(
            capacity_isotropic(&spec(&[1.0]), 0.0),
            Err(CapacityError::NonPositiveSigma)
        ));
    }

    #[test]
    fn zero_eigenvalues_contribute_nothing() {
        let with_zero = capacity_isotropic(&spec(&[2.0, 0.0]), 0.5).unwrap();
        let without = capacity_isotropic(&spec(&[2.0]), 0.5).unwrap();
        assert_eq!(with_zero.nats(), without.nats());
    }

    #[test]
    fn solve_recovers_equal_case() {
        let sigma = solve_isotropic(&spec(&[1.0, 1.0]), std::f64::consts::LN_2, 1e-12).unwrap();
        assert!((sigma - 1.0).abs() < 1e-9);
    }

    #[test]
    fn solve_matches_one_dim_toy_in_data_space() {
        let sigma = solve_isotropic(&spec(&[1.0]), 1.0, 1e-12).unwrap();
        let expect = 1.0 / (std::f64::consts::E.powi(2) - 1.0);
        assert!((sigma - expect).abs() < 1e-9 * expect);
    }

    #[test]
    fn solve_round_trip_residual() {
        let s = spec(&[4.0, 1.0]);
        let sigma = solve_isotropic(&s, 2.0, 1e-10).unwrap();
        let back = capacity_isotropic(&s, sigma).unwrap().nats();
        assert!((back - 2.0).abs() <= 1e-9 * 2.0);
    }

    #[test]
    fn solve_rejects_degenerate_inputs() {
        assert!(matches!(
            solve_isotropic(&spec(&[0.0, 0.0]), 1.0, 1e-9),
            Err(CapacityError::ZeroSpectrum)
        ));
        assert!(matches!(
            solve_isotropic(&spec(&[1.0]), 0.0, 1e-9),
            Err(CapacityError::NonPositiveKappa)
        ));
    }

    #[test]
    fn white_noise_unit_denominator() {
        // kappa = ln 2 over d = 2 makes exp(2 kappa / d) = 2
        let psi = white_noise_eigenvalues(&spec(&[4.0, 1.0]), std::f64::consts::LN_2).unwrap();
        assert!((psi[0] - 4.0).abs() < 1e-12);
        assert!((psi[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn white_noise_closed_form_and_budget_split() {
        let s = spec(&[4.0, 1.0]);
        let psi = white_noise_eigenvalues(&s, 2.0).unwrap();
        let denom = std::f64::consts::E.powi(2) - 1.0;
        assert!((psi[0] - 4.0 / denom).abs() < 1e-12);
        assert!((psi[1] - 1.0 / denom).abs() < 1e-12);
        let total: f64 = s
            .eigenvalues()
            .iter()
            .zip(&psi)
            .map(|(&l, &p)| 0.5 * (l / p).ln_1p())
            .sum();
        assert!((total - 2.0).abs() < 1e-10);
    }

    #[test]
    fn white_noise_monotone_in_kappa() {
        let s = spec(&[5.0, 2.0, 1.0]);
        let lo = white_noise_eigenvalues(&s, 1.0).unwrap();
        let hi = white_noise_eigenvalues(&s, 10.0).unwrap();
        for (a, b) in lo.iter().zip(&hi) {
            assert!(b < a);
        }
        let huge = white_noise_eigenvalues(&s, 500.0).unwrap();
        assert!(huge.iter().all(|&p| p < 1e-100));
    }

    #[test]
    fn personalized_bound_tight_on_diagonal() {
        let cov = Covariance::diagonal(&[2.0, 5.0]);
        let seq = schur_sequence(&cov, &[1.0, 1.0]).unwrap();
        let u = personalized_capacity_upper(1.0, &seq).unwrap().nats();
        assert!((u - 0.5 * 18f64.ln()).abs() < 1e-12);
        // exact capacity agrees because rho = 0 everywhere
        let exact = 0.5 * spectral::log_det(&Covariance::diagonal(&[3.0, 6.0])).unwrap();
        assert!((u - exact).abs() < 1e-12);
    }

    #[test]
    fn personalized_bound_dominates_exact() {
        let cov = Covariance::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let seq = schur_sequence(&cov, &[1.0, 1.0]).unwrap();
        let u = personalized_capacity_upper(1.0, &seq).unwrap().nats();
        let exact = 0.5 * spectral::log_det(&cov.add_scaled_identity(1.0)).unwrap();
        assert!((exact - 0.5 * 8f64.ln()).abs() < 1e-12);
        assert!(u >= exact);
        assert!(u >= 1.0397);
    }

    #[test]
    fn personalized_dominance_on_random_matrices() {
        for seed in 0..100 {
            let dim = 2 + (seed as usize % 5);
            let cov = random_pd(dim, 900 + seed);
            let mut rng = StreamRng::new(seed, 51);
            let beta: Vec<f64> = (0..dim).map(|_| 0.2 + rng.next_normal().abs()).collect();
            let seq = schur_sequence(&cov, &beta).unwrap();
            for &sigma in &[0.1, 1.0, 10.0] {
                let u = personalized_capacity_upper(sigma, &seq).unwrap().nats();
                let shifted = cov.add_scaled_diagonal(sigma, &beta).unwrap();
                let noise: f64 = beta.iter().map(|b| (sigma * b).ln()).sum();
                let exact = 0.5 * (spectral::log_det(&shifted).unwrap() - noise);
                assert!(
                    u >= exact - 1e-9 * exact.abs().max(1.0),
                    "seed {seed} sigma {sigma}: U {u} < exact {exact}"
                );
            }
        }
    }

    #[test]
    fn solve_personalized_reduces_to_isotropic_on_identity() {
        let cov = Covariance::identity(2);
        let seq = schur_sequence(&cov, &[1.0, 1.0]).unwrap();
        let sigma = solve_personalized(&seq, std::f64::consts::LN_2, 1e-12).unwrap();
        assert!((sigma - 1.0).abs() < 1e-9);
    }

    #[test]
    fn solve_personalized_proportional_importance() {
        let cov = Covariance::diagonal(&[4.0, 1.0]);
        let seq = schur_sequence(&cov, &[4.0, 1.0]).unwrap();
        let sigma = solve_personalized(&seq, std::f64::consts::LN_2, 1e-12).unwrap();
        assert!((sigma - 1.0).abs() < 1e-9);
    }

    #[test]
    fn solve_personalized_round_trip() {
        for seed in 0..20 {
            let dim = 2 + (seed as usize % 7);
            let cov = random_pd(dim, 40 + seed);
            let seq = schur_sequence(&cov, &vec![1.5; dim]).unwrap();
            let kappa = 0.7;
            let sigma = solve_personalized(&seq, kappa, 1e-10).unwrap();
            let back = personalized_capacity_upper(sigma, &seq).unwrap().nats();
            assert!((back - kappa).abs() <= 1e-8 * kappa);
        }
    }

    #[test]
    fn dp_table_first_entry() {
        let b = dp_noise_bound(64, 1.0, 0.8 * 0.8).unwrap();
        assert!((b.nats() - 100.0).abs() < 1e-10);
    }

    #[test]
    fn dp_table_last_entry_near_paper_value() {
        let b = dp_noise_bound(64, 1.0, 0.2066 * 0.2066).unwrap();
        assert!((b.nats() - 1499.5).abs() < 0.001 * 1499.5, "got {}", b.nats());
    }

    #[test]
    fn dp_unit_plug_in() {
        let dp = DpParams::new(1.0, 1.25 / std::f64::consts::E, 1.0, 1, 1.0).unwrap();
        let (noise, eps) = dp_capacity_bounds(&dp).unwrap();
        assert!((noise.nats() - 1.0).abs() < 1e-15);
        assert!((eps.nats() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dp_minimal_sigma_reproduces_epsilon_bound() {
        let (eps, delta, clip, batch) = (1.3, 1e-5, 2.0, 16);
        let sigma = dp_minimal_sigma(eps, delta, clip).unwrap();
        let via_noise = dp_noise_bound(batch, clip, sigma).unwrap().nats();
        let via_eps = dp_epsilon_bound(batch, eps, delta).unwrap().nats();
        assert!((via_noise - via_eps).abs() <= 1e-12 * via_eps);
    }

    #[test]
    fn dp_rejects_delta_out_of_range() {
        assert!(matches!(
            DpParams::new(1.0, 1.0, 1.0, 1, 1.0),
            Err(CapacityError::InvalidDelta)
        ));
    }

    #[test]
    fn batch_scaling_identity_at_one() {
        let s = spec(&[2.0, 0.5]);
        let a = batch_scaled_capacity(&s, 0.7, 1).unwrap();
        let b = capacity_isotropic(&s, 0.7).unwrap();
        assert_eq!(a.nats(), b.nats());
    }

    #[test]
    fn batch_scaling_direct_value() {
        let c = batch_scaled_capacity(&spec(&[1.0]), 1.0, 4).unwrap();
        assert!((c.nats() - 0.5 * 1.25f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn batch_scaling_strictly_decreasing() {
        let s = spec(&[3.0, 1.0, 0.2]);
        let c2 = batch_scaled_capacity(&s, 0.5, 2).unwrap().nats();
        let c8 = batch_scaled_capacity(&s, 0.5, 8).unwrap().nats();
        assert!(c8 < c2);
    }

    #[test]
    fn compression_diagonal_case() {
        let cov = Covariance::diagonal(&[2.0, 2.0]);
        let dc = compression_delta(&cov, &[1], 1.0).unwrap();
        assert!(!dc.full_compression);
        assert!((dc.nats - 0.5 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn compression_matches_capacity_difference() {
        for seed in 0..30 {
            let dim = 3 + (seed as usize % 6);
            let cov = random_pd(dim, 5_000 + seed);
            let mut rng = StreamRng::new(seed, 77);
            let k = 1 + rng.next_range(dim - 1);
            let mut dims: Vec<usize> = (0..dim).collect();
            rng.shuffle(&mut dims);
            let compressed: Vec<usize> = dims[..k].to_vec();
            let kept: Vec<usize> = dims[k..].to_vec();
            let sigma = 0.8;

            let dc = compression_delta(&cov, &compressed, sigma).unwrap();

            // oracle: full capacity minus capacity of the kept marginal block
            let full_spec = eigendecompose(&cov, DEFAULT_EIGEN_TOL).unwrap();
            let full = capacity_isotropic(&full_spec, sigma).unwrap().nats();
            let m = kept.len();
            let mut kept_block = vec![0.0; m * m];
            for (a, &ia) in kept.iter().enumerate() {
                for (b, &ib) in kept.iter().enumerate() {
                    kept_block[a * m + b] = cov.get(ia, ib);
                }
            }
            let kept_cov = Covariance::new(m, kept_block).unwrap();
            let kept_spec = eigendecompose(&kept_cov, DEFAULT_EIGEN_TOL).unwrap();
            let kept_cap = capacity_isotropic(&kept_spec, sigma).unwrap().nats();

            assert!(
                (dc.nats - (full - kept_cap)).abs() < 1e-8 * full.max(1.0),
                "seed {seed}: delta {} vs difference {}",
                dc.nats,
                full - kept_cap
            );
            assert!(dc.nats >= 0.0);
        }
    }

    #[test]
    fn compressing_large_eigenvalue_drops_more_capacity() {
        let cov = Covariance::diagonal(&[10.0, 1.0]);
        let large = compression_delta(&cov, &[0], 1.0).unwrap().nats;
        let small = compression_delta(&cov, &[1], 1.0).unwrap().nats;
        assert!(large > small);
    }

    #[test]
    fn full_compression_returns_flagged_capacity() {
        let cov = Covariance::diagonal(&[2.0, 1.0]);
        let dc = compression_delta(&cov, &[0, 1], 1.0).unwrap();
        assert!(dc.full_compression);
        let spec_ = eigendecompose(&cov, DEFAULT_EIGEN_TOL).unwrap();
        let full = capacity_isotropic(&spec_, 1.0).unwrap().nats();
        assert_eq!(dc.nats, full);
    }

    #[test]
    fn compression_rejects_empty_and_out_of_range() {
        let cov = Covariance::identity(2);
        assert!(matches!(
            compression_delta(&cov, &[], 1.0),
            Err(CapacityError::EmptyCompressionSet)
        ));
        assert!(matches!(
            compression_delta(&cov, &[5], 1.0),
            Err(CapacityError::BadCompressionIndex(5, 2))
        ));
    }

    #[test]
    fn bound_equals_prior_variance_with_no_information() {
        let two_pi_e = 2.0 * std::f64::consts::PI * std::f64::consts::E;
        let inputs = BoundInputs::new(0.5 * two_pi_e.ln(), 1, 0.0);
        assert!((mse_lower_bound(&inputs) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bound_with_one_nat() {
        let two_pi_e = 2.0 * std::f64::consts::PI * std::f64::consts::E;
        let inputs = BoundInputs::new(0.5 * two_pi_e.ln(), 1, 1.0);
        assert!((mse_lower_bound(&inputs) - (-2f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn bound_is_tight_for_scalar_gaussian_channel() {
        // sigma_D^2 = 1, sigma^2 = 1: I = ln 2 / 2, Bayes MSE = 1/2
        let entropy = gaussian_entropy(&spec(&[1.0])).unwrap();
        let info = 0.5 * 2f64.ln();
        let bound = mse_lower_bound(&BoundInputs::new(entropy, 1, info));
        assert!((bound - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gaussian_entropy_values() {
        let two_pi_e = 2.0 * std::f64::consts::PI * std::f64::consts::E;
        let h1 = gaussian_entropy(&spec(&[1.0])).unwrap();
        assert!((h1 - 0.5 * two_pi_e.ln()).abs() < 1e-15);
        let h2 = gaussian_entropy(&spec(&[1.0, 1.0])).unwrap();
        assert!((h2 - two_pi_e.ln()).abs() < 1e-15);
        let h3 = gaussian_entropy(&spec(&[std::f64::consts::E.powi(2)])).unwrap();
        assert!((h3 - (0.5 * two_pi_e.ln() + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn gaussian_entropy_rejects_degenerate() {
        assert!(matches!(
            gaussian_entropy(&spec(&[1.0, 0.0])),
            Err(CapacityError::DegenerateDistribution)
        ));
    }

    #[test]
    fn capacity_monotone_in_sigma_and_lambda() {
        let mut rng = StreamRng::new(11, 3);
        for _ in 0..50 {
            let dim = 1 + rng.next_range(16);
            let lambdas: Vec<f64> = (0..dim).map(|_| rng.next_normal().abs() + 0.01).collect();
            let s = spec(&lambdas);
            let sigma = rng.next_normal().abs() + 0.05;
            let base = capacity_isotropic(&s, sigma).unwrap().nats();
            let more_noise = capacity_isotropic(&s, sigma * 1.1).unwrap().nats();
            assert!(more_noise < base);
            let bumped: Vec<f64> = s.eigenvalues().iter().map(|&l| l + 0.1).collect();
            let more_signal = capacity_isotropic(&spec(&bumped), sigma).unwrap().nats();
            assert!(more_signal > base);
        }
    }
}
