//! Noise channels: turn a capacity budget into a concrete Gaussian noise
//! plan and produce the one-shot noisy dataset trained on instead of the
//! raw data.
//!
//! Three calibrations are supported. The natural channel adds isotropic
//! noise sized so the whole spectrum fits the budget. The white channel
//! spends the budget equally per eigen-dimension, which silences dominant
//! directions hardest. The personalized channel takes an importance vector
//! and scales a diagonal noise shape through the Schur upper bound, so the
//! realized capacity never exceeds the budget even when attributes are
//! correlated.
//!
//! Noise is drawn once per plan application: the noisy dataset is fixed for
//! the rest of training. Redrawing fresh noise every epoch would let the
//! learner average it out and the capacity accounting would no longer cover
//! the composition.

use crate::capacity::{self, CapacityError, CapacityNats};
use crate::rng::CounterRng;
use crate::spectral::{
    self, Covariance, CovarianceSpectrum, DataMatrix, SpectralError,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Stream id for plan noise draws within the plan's seed space.
const NOISE_STREAM: u64 = 0x4E4F_4953;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("DimensionMismatch: plan dimension {plan} vs data dimension {data}")]
    DimensionMismatch { plan: usize, data: usize },
    #[error("SingularNoise: zero noise variance on informative dimension {0}")]
    SingularNoise(usize),
    #[error(transparent)]
    Capacity(#[from] CapacityError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

type Result<T> = std::result::Result<T, ChannelError>;

/// Which calibration produced a plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelKind {
    Natural,
    White,
    Personalized,
}

impl std::fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ChannelKind::Natural => write!(f, "natural"),
            ChannelKind::White => write!(f, "white"),
            ChannelKind::Personalized => write!(f, "personalized"),
        }
    }
}

/// Shape of the noise covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum NoiseShape {
    /// sigma * I.
    Isotropic { sigma: f64 },
    /// Q diag(psi) Q^T in the given orthonormal basis (rows of `basis` are
    /// matrix rows; columns are the eigenvectors).
    EigenDiagonal { psi: Vec<f64>, basis: Vec<Vec<f64>> },
    /// sigma * diag(beta).
    ScaledDiagonal { sigma: f64, beta: Vec<f64> },
}

/// A calibrated Gaussian noise plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisePlan {
    pub kind: ChannelKind,
    #[serde(rename = "d")]
    pub dim: usize,
    pub kappa_nats: f64,
    pub shape: NoiseShape,
    pub seed: u64,
}

/// A dataset after one-shot noise application.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoisyDataset {
    pub data: DataMatrix,
    pub plan: NoisePlan,
    /// Digest of the original data, for provenance checks.
    pub original_checksum: u64,
}

/// Relative slack allowed between a plan's realized capacity and its budget.
pub const CALIBRATION_SLACK: f64 = 1e-8;

/// Solver tolerance used when building plans; well inside the calibration
/// slack.
const PLAN_SOLVE_TOL: f64 = 1e-10;

/// Isotropic noise sized so the spectrum's total capacity equals `kappa`.
pub fn plan_natural(
    spectrum: &CovarianceSpectrum,
    kappa: f64,
    seed: u64,
) -> Result<NoisePlan> {
    let sigma = capacity::solve_isotropic(spectrum, kappa, PLAN_SOLVE_TOL)?;
    Ok(NoisePlan {
        kind: ChannelKind::Natural,
        dim: spectrum.dim(),
        kappa_nats: kappa,
        shape: NoiseShape::Isotropic { sigma },
        seed,
    })
}

/// Per-eigenvalue noise in the spectrum's own basis, splitting the budget
/// equally across informative dimensions.
pub fn plan_white(spectrum: &CovarianceSpectrum, kappa: f64, seed: u64) -> Result<NoisePlan> {
    let psi = capacity::white_noise_eigenvalues(spectrum, kappa)?;
    Ok(NoisePlan {
        kind: ChannelKind::White,
        dim: spectrum.dim(),
        kappa_nats: kappa,
        shape: NoiseShape::EigenDiagonal {
            psi,
            basis: spectrum.basis_rows(),
        },
        seed,
    })
}

/// Importance-weighted diagonal noise `sigma * diag(beta)` with sigma from
/// the Schur upper-bound solve. The bound is conservative, so the exact
/// capacity of the resulting plan is at most `kappa`.
pub fn plan_personalized(
    cov: &Covariance,
    beta: &[f64],
    kappa: f64,
    seed: u64,
) -> Result<NoisePlan> {
    let schur = spectral::schur_sequence(cov, beta)?;
    let sigma = capacity::solve_personalized(&schur, kappa, PLAN_SOLVE_TOL)?;
    Ok(NoisePlan {
        kind: ChannelKind::Personalized,
        dim: cov.dim(),
        kappa_nats: kappa,
        shape: NoiseShape::ScaledDiagonal {
            sigma,
            beta: beta.to_vec(),
        },
        seed,
    })
}

impl NoisePlan {
    /// Per-dimension standard deviations in the shape's own basis.
    fn scales(&self) -> Vec<f64> {
        match &self.shape {
            NoiseShape::Isotropic { sigma } => vec![sigma.sqrt(); self.dim],
            NoiseShape::EigenDiagonal { psi, .. } => psi.iter().map(|p| p.sqrt()).collect(),
            NoiseShape::ScaledDiagonal { sigma, beta } => {
                beta.iter().map(|b| (sigma * b).sqrt()).collect()
            }
        }
    }

    /// The noise covariance as a dense matrix.
    pub fn noise_covariance(&self) -> Covariance {
        match &self.shape {
            NoiseShape::Isotropic { sigma } => Covariance::diagonal(&vec![*sigma; self.dim]),
            NoiseShape::ScaledDiagonal { sigma, beta } => {
                Covariance::diagonal(&beta.iter().map(|b| sigma * b).collect::<Vec<_>>())
            }
            NoiseShape::EigenDiagonal { psi, basis } => {
                let d = self.dim;
                let mut entries = vec![0.0; d * d];
                for i in 0..d {
                    for j in i..d {
                        let mut acc = 0.0;
                        for k in 0..d {
                            acc += basis[i][k] * psi[k] * basis[j][k];
                        }
                        entries[i * d + j] = acc;
                        entries[j * d + i] = acc;
                    }
                }
                Covariance::new(d, entries).expect("noise covariance is symmetric")
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<NoisePlan, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Draw `count` independent noise rows. Deterministic in `(plan.seed,
/// count)`: row `r`, dimension `c` always consumes normal index `r*d + c`,
/// so parallel callers can partition rows safely.
pub fn sample_noise(plan: &NoisePlan, count: usize) -> DataMatrix {
    let d = plan.dim;
    let rng = CounterRng::new(plan.seed, NOISE_STREAM);
    let scales = plan.scales();
    let mut values = vec![0.0; count * d];
    match &plan.shape {
        NoiseShape::Isotropic { .. } | NoiseShape::ScaledDiagonal { .. } => {
            for r in 0..count {
                for c in 0..d {
                    values[r * d + c] = scales[c] * rng.normal_at((r * d + c) as u64);
                }
            }
        }
        NoiseShape::EigenDiagonal { basis, .. } => {
            let mut z = vec![0.0; d];
            for r in 0..count {
                for (c, zc) in z.iter_mut().enumerate() {
                    *zc = scales[c] * rng.normal_at((r * d + c) as u64);
                }
                for i in 0..d {
                    let mut acc = 0.0;
                    for (k, zk) in z.iter().enumerate() {
                        acc += basis[i][k] * zk;
                    }
                    values[r * d + i] = acc;
                }
            }
        }
    }
    DataMatrix::new(count, d, values).expect("noise values are finite")
}

/// One-shot application: adds an independent noise row to every sample and
/// freezes the result.
pub fn apply(plan: &NoisePlan, data: &DataMatrix) -> Result<NoisyDataset> {
    if plan.dim != data.cols() {
        return Err(ChannelError::DimensionMismatch {
            plan: plan.dim,
            data: data.cols(),
        });
    }
    let noise = sample_noise(plan, data.rows());
    let values: Vec<f64> = data
        .values()
        .iter()
        .zip(noise.values())
        .map(|(x, n)| x + n)
        .collect();
    Ok(NoisyDataset {
        data: DataMatrix::new(data.rows(), data.cols(), values)?,
        plan: plan.clone(),
        original_checksum: data.checksum(),
    })
}

/// Exact Gaussian-channel capacity of a plan against a signal spectrum:
/// `1/2 [ln det(Sigma_D + Sigma_xi) - ln det Sigma_xi]`.
///
/// Isotropic and eigen-diagonal shapes use the simultaneous-basis shortcut
/// (the plan was calibrated in the spectrum's eigenbasis); the scaled
/// diagonal goes through the generic log-det path because it does not
/// commute with the signal covariance.
pub fn realized_capacity(
    plan: &NoisePlan,
    spectrum: &CovarianceSpectrum,
) -> Result<CapacityNats> {
    if plan.dim != spectrum.dim() {
        return Err(ChannelError::DimensionMismatch {
            plan: plan.dim,
            data: spectrum.dim(),
        });
    }
    match &plan.shape {
        NoiseShape::Isotropic { sigma } => {
            if !(*sigma > 0.0) {
                if let Some(i) = spectrum.eigenvalues().iter().position(|&l| l > 0.0) {
                    return Err(ChannelError::SingularNoise(i));
                }
                return Ok(CapacityNats(0.0));
            }
            Ok(capacity::capacity_isotropic(spectrum, *sigma)?)
        }
        NoiseShape::EigenDiagonal { psi, .. } => {
            let mut total = 0.0;
            for (i, (&l, &p)) in spectrum.eigenvalues().iter().zip(psi).enumerate() {
                if p == 0.0 {
                    if l > 0.0 {
                        return Err(ChannelError::SingularNoise(i));
                    }
                    continue;
                }
                total += 0.5 * (l / p).ln_1p();
            }
            Ok(CapacityNats(total))
        }
        NoiseShape::ScaledDiagonal { sigma, beta } => {
            if let Some(i) = beta.iter().position(|&b| !(sigma * b > 0.0)) {
                return Err(ChannelError::SingularNoise(i));
            }
            let signal = spectrum.reconstruct();
            let shifted = signal.add_scaled_diagonal(*sigma, beta)?;
            let noise_log_det: f64 = beta.iter().map(|b| (sigma * b).ln()).sum();
            Ok(CapacityNats(0.5 * (spectral::log_det(&shifted)? - noise_log_det)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{eigendecompose, estimate_covariance, DEFAULT_EIGEN_TOL};

    fn spec(lambdas: &[f64]) -> CovarianceSpectrum {
        CovarianceSpectrum::from_eigenvalues(lambdas.to_vec()).unwrap()
    }

    #[test]
    fn natural_plan_matches_one_dim_toy() {
        let plan = plan_natural(&spec(&[1.0]), 1.0, 7).unwrap();
        match plan.shape {
            NoiseShape::Isotropic { sigma } => {
                let expect = 1.0 / (std::f64::consts::E.powi(2) - 1.0);
                assert!((sigma - expect).abs() < 1e-9 * expect);
            }
            _ => panic!("natural plan must be isotropic"),
        }
    }

    #[test]
    fn natural_plan_equal_eigenvalues() {
        let plan = plan_natural(&spec(&[1.0, 1.0]), std::f64::consts::LN_2, 0).unwrap();
        match plan.shape {
            NoiseShape::Isotropic { sigma } => assert!((sigma - 1.0).abs() < 1e-9),
            _ => panic!(),
        }
    }

    #[test]
    fn realized_capacity_round_trips_for_all_kinds() {
        let s = spec(&[4.0, 2.0, 0.5]);
        let kappa = 1.3;
        let natural = plan_natural(&s, kappa, 1).unwrap();
        let white = plan_white(&s, kappa, 1).unwrap();
        let rc_n = realized_capacity(&natural, &s).unwrap().nats();
        let rc_w = realized_capacity(&white, &s).unwrap().nats();
        assert!((rc_n - kappa).abs() <= 1e-8 * kappa);
        assert!((rc_w - kappa).abs() <= 1e-10 * kappa, "white is exact: {rc_w}");

        let cov = Covariance::from_rows(&[
            vec![2.0, 0.7, 0.1],
            vec![0.7, 1.5, -0.2],
            vec![0.1, -0.2, 1.0],
        ])
        .unwrap();
        let personalized = plan_personalized(&cov, &[1.0, 2.0, 1.0], kappa, 1).unwrap();
        let s_cov = eigendecompose(&cov, DEFAULT_EIGEN_TOL).unwrap();
        let rc_p = realized_capacity(&personalized, &s_cov).unwrap().nats();
        assert!(
            rc_p <= kappa * (1.0 + CALIBRATION_SLACK),
            "personalized plan stays within budget: {rc_p}"
        );
    }

    #[test]
    fn white_plan_keeps_identity_basis_psi() {
        let plan = plan_white(&spec(&[4.0, 1.0]), std::f64::consts::LN_2, 0).unwrap();
        match &plan.shape {
            NoiseShape::EigenDiagonal { psi, basis } => {
                assert!((psi[0] - 4.0).abs() < 1e-12);
                assert!((psi[1] - 1.0).abs() < 1e-12);
                assert_eq!(basis[0][0], 1.0);
                assert_eq!(basis[1][0], 0.0);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn white_plan_equal_per_dimension_capacities() {
        let s = spec(&[9.0, 4.0, 1.0]);
        let plan = plan_white(&s, 2.5, 0).unwrap();
        let psi = match &plan.shape {
            NoiseShape::EigenDiagonal { psi, .. } => psi.clone(),
            _ => panic!(),
        };
        let per_dim: Vec<f64> = s
            .eigenvalues()
            .iter()
            .zip(&psi)
            .map(|(&l, &p)| 0.5 * (l / p).ln_1p())
            .collect();
        for w in per_dim.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn personalized_beta_ratio_scales_noise() {
        let cov = Covariance::diagonal(&[1.0, 1.0]);
        let plan = plan_personalized(&cov, &[1.0, 50.0], 1.0, 0).unwrap();
        match &plan.shape {
            NoiseShape::ScaledDiagonal { sigma, beta } => {
                let var0 = sigma * beta[0];
                let var1 = sigma * beta[1];
                assert!((var1 / var0 - 50.0).abs() < 1e-12);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn personalized_with_unit_beta_matches_natural_on_diagonal() {
        let cov = Covariance::diagonal(&[3.0, 1.0, 0.5]);
        let s = eigendecompose(&cov, DEFAULT_EIGEN_TOL).unwrap();
        let natural = plan_natural(&s, 0.9, 0).unwrap();
        let personalized = plan_personalized(&cov, &[1.0, 1.0, 1.0], 0.9, 0).unwrap();
        let sig_n = match natural.shape {
            NoiseShape::Isotropic { sigma } => sigma,
            _ => panic!(),
        };
        let sig_p = match personalized.shape {
            NoiseShape::ScaledDiagonal { sigma, .. } => sigma,
            _ => panic!(),
        };
        assert!((sig_n - sig_p).abs() <= 1e-8 * sig_n);
    }

    #[test]
    fn sampling_is_bit_deterministic() {
        let plan = plan_natural(&spec(&[2.0, 1.0]), 1.0, 99).unwrap();
        let a = sample_noise(&plan, 50);
        let b = sample_noise(&plan, 50);
        assert_eq!(a, b);
        // a longer draw shares its prefix
        let c = sample_noise(&plan, 80);
        assert_eq!(&c.values()[..a.values().len()], a.values());
    }

    #[test]
    fn sample_moments_match_plan_covariance() {
        let s = spec(&[4.0, 1.0]);
        let cov_in = Covariance::from_rows(&[vec![2.5, 1.5], vec![1.5, 2.5]]).unwrap();
        let s_corr = eigendecompose(&cov_in, DEFAULT_EIGEN_TOL).unwrap();
        for plan in [
            plan_natural(&s, 1.0, 5).unwrap(),
            plan_white(&s_corr, 1.0, 5).unwrap(),
            plan_personalized(&cov_in, &[1.0, 3.0], 1.0, 5).unwrap(),
        ] {
            let n = 100_000;
            let draws = sample_noise(&plan, n);
            let expect = plan.noise_covariance();
            // means near zero
            let d = plan.dim;
            for c in 0..d {
                let mean: f64 =
                    (0..n).map(|r| draws.get(r, c)).sum::<f64>() / n as f64;
                let max_var = (0..d).map(|i| expect.get(i, i)).fold(0.0f64, f64::max);
                assert!(mean.abs() < 4.0 * (max_var / n as f64).sqrt());
            }
            // empirical covariance within 5% relative Frobenius
            let emp = estimate_covariance(&draws).unwrap();
            let diff: f64 = emp
                .entries()
                .iter()
                .zip(expect.entries())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let norm: f64 = expect.entries().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(diff < 0.05 * norm, "kind {:?}: {diff} vs {norm}", plan.kind);
        }
    }

    #[test]
    fn apply_adds_noise_and_keeps_checksum() {
        let data = DataMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let plan = plan_natural(&spec(&[1.0, 0.5]), 2.0, 3).unwrap();
        let noisy = apply(&plan, &data).unwrap();
        assert_eq!(noisy.original_checksum, data.checksum());
        assert_eq!(noisy.data.rows(), 2);
        let again = apply(&plan, &data).unwrap();
        assert_eq!(noisy.data, again.data);
    }

    #[test]
    fn apply_rejects_dimension_mismatch() {
        let data = DataMatrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let plan = plan_natural(&spec(&[1.0]), 1.0, 0).unwrap();
        assert!(matches!(
            apply(&plan, &data),
            Err(ChannelError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn huge_budget_leaves_data_nearly_untouched() {
        // kappa -> infinity drives the noise to zero; check at kappa = 1e6
        // on a spectrum wide enough that the closed form stays representable
        let d = 4096;
        let s = spec(&vec![1.0; d]);
        let plan = plan_natural(&s, 1e6, 11).unwrap();
        let rows = 4;
        let data = DataMatrix::new(rows, d, vec![0.5; rows * d]).unwrap();
        let noisy = apply(&plan, &data).unwrap();
        let max_dev = data
            .values()
            .iter()
            .zip(noisy.data.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_dev < 1e-2, "max perturbation {max_dev}");
    }

    #[test]
    fn empirical_capacity_audit_under_plan() {
        // capacity of the data's own spectrum under each plan stays within
        // the budget
        let mut rows = Vec::new();
        let rng = CounterRng::new(21, 1);
        for r in 0..400 {
            rows.push(vec![
                2.0 * rng.normal_at(2 * r),
                0.5 * rng.normal_at(2 * r + 1),
            ]);
        }
        let data = DataMatrix::from_rows(&rows).unwrap();
        let cov = estimate_covariance(&data).unwrap();
        let s = eigendecompose(&cov, DEFAULT_EIGEN_TOL).unwrap();
        let kappa = 0.8;
        for plan in [
            plan_natural(&s, kappa, 2).unwrap(),
            plan_white(&s, kappa, 2).unwrap(),
            plan_personalized(&cov, &[1.0, 1.0], kappa, 2).unwrap(),
        ] {
            let rc = realized_capacity(&plan, &s).unwrap().nats();
            assert!(rc <= kappa * (1.0 + CALIBRATION_SLACK), "{:?}: {rc}", plan.kind);
        }
    }

    #[test]
    fn natural_sigma_scales_with_data_variance() {
        // scaling the data by c scales sigma by c^2 at fixed kappa
        let kappa = 1.7;
        let base = plan_natural(&spec(&[3.0, 1.0]), kappa, 0).unwrap();
        let scaled = plan_natural(&spec(&[12.0, 4.0]), kappa, 0).unwrap();
        let (s0, s1) = match (base.shape, scaled.shape) {
            (NoiseShape::Isotropic { sigma: a }, NoiseShape::Isotropic { sigma: b }) => (a, b),
            _ => panic!(),
        };
        assert!((s1 / s0 - 4.0).abs() < 1e-7);
    }

    #[test]
    fn larger_budget_means_less_noise_for_every_kind() {
        let cov = Covariance::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let s = eigendecompose(&cov, DEFAULT_EIGEN_TOL).unwrap();
        for (lo_plan, hi_plan) in [
            (
                plan_natural(&s, 0.5, 0).unwrap(),
                plan_natural(&s, 5.0, 0).unwrap(),
            ),
            (
                plan_white(&s, 0.5, 0).unwrap(),
                plan_white(&s, 5.0, 0).unwrap(),
            ),
            (
                plan_personalized(&cov, &[1.0, 2.0], 0.5, 0).unwrap(),
                plan_personalized(&cov, &[1.0, 2.0], 5.0, 0).unwrap(),
            ),
        ] {
            let lo = lo_plan.noise_covariance();
            let hi = hi_plan.noise_covariance();
            for i in 0..2 {
                assert!(hi.get(i, i) < lo.get(i, i));
            }
        }
    }

    #[test]
    fn plan_json_round_trip_is_exact() {
        let cov = Covariance::from_rows(&[vec![2.0, 0.7], vec![0.7, 1.1]]).unwrap();
        let s = eigendecompose(&cov, DEFAULT_EIGEN_TOL).unwrap();
        for plan in [
            plan_natural(&s, 0.123456789012345, 0xDEAD_BEEF).unwrap(),
            plan_white(&s, 2.5, 1).unwrap(),
            plan_personalized(&cov, &[1.0, 50.0], 1.0, 2).unwrap(),
        ] {
            let text = plan.to_json();
            let back = NoisePlan::from_json(&text).unwrap();
            assert_eq!(back, plan);
        }
    }

    #[test]
    fn tampered_plan_fails_audit() {
        let s = spec(&[4.0, 1.0]);
        let plan = plan_white(&s, 1.0, 0).unwrap();
        let mut tampered = plan.clone();
        if let NoiseShape::EigenDiagonal { psi, .. } = &mut tampered.shape {
            for p in psi.iter_mut() {
                *p *= 0.5;
            }
        }
        let rc = realized_capacity(&tampered, &s).unwrap().nats();
        assert!(rc > plan.kappa_nats * (1.0 + CALIBRATION_SLACK));
    }
}
