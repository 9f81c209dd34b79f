//! Covariance estimation, symmetric eigendecomposition, and the Schur
//! complement recursion used by the personalized-channel bound.
//!
//! The eigensolver is a cyclic Jacobi sweep. Data dimensions are small here
//! (the whole point of calibrating in data space is that the data dimension
//! is far below the model dimension), so a dependency-free O(d^3) solver is
//! the right tool; this is not a general LAPACK replacement.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default convergence/clipping tolerance for [`eigendecompose`].
pub const DEFAULT_EIGEN_TOL: f64 = 1e-12;

/// Maximum Jacobi sweeps before declaring the input pathological.
const MAX_SWEEPS: usize = 100;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("TooFewSamples: covariance estimation needs at least 2 rows, got {0}")]
    TooFewSamples(usize),
    #[error("NonFinite: matrix contains a non-finite value")]
    NonFinite,
    #[error("NotSymmetric: max asymmetry {0:e} exceeds tolerance")]
    NotSymmetric(f64),
    #[error("NoConvergence: Jacobi sweep did not converge after {0} sweeps")]
    NoConvergence(usize),
    #[error("NotPsd: eigenvalue {0:e} is below the clipping window")]
    NotPsd(f64),
    #[error("NonPositiveDefinite: zero eigenvalue after clipping")]
    NonPositiveDefinite,
    #[error("SingularLeadingMinor: leading {0}x{0} block is not invertible (jitter applied: {1})")]
    SingularLeadingMinor(usize, bool),
    #[error("NonPositiveBeta: importance weight at index {0} must be > 0")]
    NonPositiveBeta(usize),
    #[error("DimensionMismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("Parse: {0}")]
    Parse(String),
}

type Result<T> = std::result::Result<T, SpectralError>;

// ---------------------------------------------------------------------------
// DataMatrix
// ---------------------------------------------------------------------------

/// Row-major matrix of samples (rows) by attributes (columns).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct DataMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl TryFrom<RawMatrix> for DataMatrix {
    type Error = SpectralError;
    fn try_from(raw: RawMatrix) -> Result<Self> {
        DataMatrix::new(raw.rows, raw.cols, raw.values)
    }
}

impl From<DataMatrix> for RawMatrix {
    fn from(m: DataMatrix) -> RawMatrix {
        RawMatrix {
            rows: m.rows,
            cols: m.cols,
            values: m.values,
        }
    }
}

impl DataMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(SpectralError::DimensionMismatch {
                expected: rows * cols,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SpectralError::NonFinite);
        }
        Ok(DataMatrix { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(SpectralError::Parse("ragged rows".into()));
        }
        let values = rows.iter().flatten().copied().collect();
        DataMatrix::new(rows.len(), cols, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// FNV-1a digest over the dimensions and raw bit patterns; stable across
    /// runs on the same data.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |word: u64| {
            for byte in word.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        };
        eat(self.rows as u64);
        eat(self.cols as u64);
        for v in &self.values {
            eat(v.to_bits());
        }
        h
    }
}

// ---------------------------------------------------------------------------
// Covariance
// ---------------------------------------------------------------------------

/// Symmetric d x d covariance matrix, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCovariance", into = "RawCovariance")]
pub struct Covariance {
    dim: usize,
    entries: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawCovariance {
    dim: usize,
    entries: Vec<f64>,
}

impl TryFrom<RawCovariance> for Covariance {
    type Error = SpectralError;
    fn try_from(raw: RawCovariance) -> Result<Self> {
        Covariance::new(raw.dim, raw.entries)
    }
}

impl From<Covariance> for RawCovariance {
    fn from(c: Covariance) -> RawCovariance {
        RawCovariance {
            dim: c.dim,
            entries: c.entries,
        }
    }
}

impl Covariance {
    /// Symmetry is required within `1e-10 * max|entry|`.
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(SpectralError::DimensionMismatch {
                expected: dim * dim,
                got: entries.len(),
            });
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(SpectralError::NonFinite);
        }
        let max_abs = entries.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut worst = 0.0f64;
        for i in 0..dim {
            for j in (i + 1)..dim {
                worst = worst.max((entries[i * dim + j] - entries[j * dim + i]).abs());
            }
        }
        if worst > 1e-10 * max_abs {
            return Err(SpectralError::NotSymmetric(worst));
        }
        Ok(Covariance { dim, entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(SpectralError::Parse("covariance matrix must be square".into()));
        }
        Covariance::new(dim, rows.iter().flatten().copied().collect())
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let dim = diag.len();
        let mut entries = vec![0.0; dim * dim];
        for (i, &v) in diag.iter().enumerate() {
            entries[i * dim + i] = v;
        }
        Covariance { dim, entries }
    }

    pub fn identity(dim: usize) -> Self {
        Covariance::diagonal(&vec![1.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    /// `self + shift * I`.
    pub fn add_scaled_identity(&self, shift: f64) -> Covariance {
        let mut out = self.clone();
        for i in 0..self.dim {
            out.entries[i * self.dim + i] += shift;
        }
        out
    }

    /// `self + scale * diag(weights)`.
    pub fn add_scaled_diagonal(&self, scale: f64, weights: &[f64]) -> Result<Covariance> {
        if weights.len() != self.dim {
            return Err(SpectralError::DimensionMismatch {
                expected: self.dim,
                got: weights.len(),
            });
        }
        let mut out = self.clone();
        for i in 0..self.dim {
            out.entries[i * self.dim + i] += scale * weights[i];
        }
        Ok(out)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim)
            .map(|i| self.entries[i * self.dim..(i + 1) * self.dim].to_vec())
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Spectrum
// ---------------------------------------------------------------------------

/// Eigenvalues (descending, non-negative after clipping) and orthonormal
/// basis of a covariance matrix. Column `i` of `basis` is the eigenvector
/// for `eigenvalues[i]`.
#[derive(Clone, Debug)]
pub struct CovarianceSpectrum {
    dim: usize,
    eigenvalues: Vec<f64>,
    basis: Vec<f64>, // row-major d x d
}

impl CovarianceSpectrum {
    /// Spectrum with the identity basis. Eigenvalues must already be sorted
    /// descending and non-negative.
    pub fn from_eigenvalues(eigenvalues: Vec<f64>) -> Result<Self> {
        if eigenvalues.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SpectralError::NonFinite);
        }
        if eigenvalues.windows(2).any(|w| w[0] < w[1]) {
            return Err(SpectralError::Parse("eigenvalues must be sorted descending".into()));
        }
        let dim = eigenvalues.len();
        let mut basis = vec![0.0; dim * dim];
        for i in 0..dim {
            basis[i * dim + i] = 1.0;
        }
        Ok(CovarianceSpectrum {
            dim,
            eigenvalues,
            basis,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    #[inline]
    pub fn basis_entry(&self, row: usize, col: usize) -> f64 {
        self.basis[row * self.dim + col]
    }

    pub fn basis_rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim)
            .map(|i| self.basis[i * self.dim..(i + 1) * self.dim].to_vec())
            .collect()
    }

    /// Q diag(lambda) Q^T.
    pub fn reconstruct(&self) -> Covariance {
        let d = self.dim;
        let mut entries = vec![0.0; d * d];
        for i in 0..d {
            for j in i..d {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += self.basis[i * d + k] * self.eigenvalues[k] * self.basis[j * d + k];
                }
                entries[i * d + j] = acc;
                entries[j * d + i] = acc;
            }
        }
        Covariance { dim: d, entries }
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Unbiased sample covariance (divides by rows - 1); symmetric by
/// construction.
pub fn estimate_covariance(data: &DataMatrix) -> Result<Covariance> {
    let n = data.rows();
    let d = data.cols();
    if n < 2 {
        return Err(SpectralError::TooFewSamples(n));
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, &v) in mean.iter_mut().zip(data.row(r)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut entries = vec![0.0; d * d];
    for r in 0..n {
        let row = data.row(r);
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in i..d {
                entries[i * d + j] += di * (row[j] - mean[j]);
            }
        }
    }
    let norm = 1.0 / (n as f64 - 1.0);
    for i in 0..d {
        for j in i..d {
            entries[i * d + j] *= norm;
            entries[j * d + i] = entries[i * d + j];
        }
    }
    Ok(Covariance { dim: d, entries })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Sweeps run until the largest off-diagonal magnitude drops below
/// `tol * ||A||_F` (the Frobenius norm is rotation-invariant, so it is fixed
/// by the input). Eigenvalues in `[-tol * trace, 0)` are clipped to zero as
/// floating-point PSD repair; anything more negative is rejected.
pub fn eigendecompose(cov: &Covariance, tol: f64) -> Result<CovarianceSpectrum> {
    let d = cov.dim;
    let mut a = cov.entries.clone();
    // Symmetrize exactly so rotations see a_pq == a_qp.
    for i in 0..d {
        for j in (i + 1)..d {
            let s = 0.5 * (a[i * d + j] + a[j * d + i]);
            a[i * d + j] = s;
            a[j * d + i] = s;
        }
    }
    let fro = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let threshold = tol * fro;

    let mut q = vec![0.0; d * d];
    for i in 0..d {
        q[i * d + i] = 1.0;
    }

    let mut converged = d < 2;
    for _sweep in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut off_max = 0.0f64;
        for p in 0..d {
            for r in (p + 1)..d {
                off_max = off_max.max(a[p * d + r].abs());
            }
        }
        if off_max <= threshold {
            converged = true;
            break;
        }
        for p in 0..d {
            for r in (p + 1)..d {
                let apq = a[p * d + r];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[r * d + r] - a[p * d + p]) / (2.0 * apq);
                // tan of the rotation angle, smaller root for stability
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sign / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);
                let h = t * apq;

                a[p * d + p] -= h;
                a[r * d + r] += h;
                a[p * d + r] = 0.0;
                a[r * d + p] = 0.0;
                for k in 0..d {
                    if k != p && k != r {
                        let akp = a[k * d + p];
                        let akr = a[k * d + r];
                        let new_p = akp - s * (akr + tau * akp);
                        let new_r = akr + s * (akp - tau * akr);
                        a[k * d + p] = new_p;
                        a[p * d + k] = new_p;
                        a[k * d + r] = new_r;
                        a[r * d + k] = new_r;
                    }
                }
                for k in 0..d {
                    let qkp = q[k * d + p];
                    let qkr = q[k * d + r];
                    q[k * d + p] = qkp - s * (qkr + tau * qkp);
                    q[k * d + r] = qkr + s * (qkp - tau * qkr);
                }
            }
        }
    }
    if !converged {
        let mut off_max = 0.0f64;
        for p in 0..d {
            for r in (p + 1)..d {
                off_max = off_max.max(a[p * d + r].abs());
            }
        }
        if off_max > threshold {
            return Err(SpectralError::NoConvergence(MAX_SWEEPS));
        }
    }

    let trace: f64 = (0..d).map(|i| cov.get(i, i)).sum();
    let clip_window = tol * trace;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[j * d + j].partial_cmp(&a[i * d + i]).unwrap());

    let mut eigenvalues = Vec::with_capacity(d);
    let mut basis = vec![0.0; d * d];
    for (new_col, &old_col) in order.iter().enumerate() {
        let mut lambda = a[old_col * d + old_col];
        if lambda < 0.0 {
            if lambda >= -clip_window {
                lambda = 0.0;
            } else {
                return Err(SpectralError::NotPsd(lambda));
            }
        }
        eigenvalues.push(lambda);
        for row in 0..d {
            basis[row * d + new_col] = q[row * d + old_col];
        }
    }
    Ok(CovarianceSpectrum {
        dim: d,
        eigenvalues,
        basis,
    })
}

// ---------------------------------------------------------------------------
// Schur recursion
// ---------------------------------------------------------------------------

/// Per-dimension Schur quantities for the personalized-channel upper bound:
/// for each index `i`, the diagonal entry `c_ii`, the conditional variance
/// of dimension `i` given the earlier dimensions (the Cholesky pivot of the
/// leading block), and the importance weight inflated by cross-correlation.
#[derive(Clone, Debug)]
pub struct SchurSequence {
    dim: usize,
    diag: Vec<f64>,
    conditional_var: Vec<f64>,
    adjusted_importance: Vec<f64>,
    importance: Vec<f64>,
    jitter_applied: bool,
}

impl SchurSequence {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Diagonal entries c_ii of the covariance.
    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    /// u_i = c_ii - rho_i^T Sigma_{i-1}^{-1} rho_i.
    pub fn conditional_var(&self) -> &[f64] {
        &self.conditional_var
    }

    /// k_i = beta_i + (Sigma_{i-1}^{-1} rho_i)^T diag(beta) (Sigma_{i-1}^{-1} rho_i).
    pub fn adjusted_importance(&self) -> &[f64] {
        &self.adjusted_importance
    }

    /// The importance vector the sequence was built with.
    pub fn importance(&self) -> &[f64] {
        &self.importance
    }

    pub fn jitter_applied(&self) -> bool {
        self.jitter_applied
    }
}

/// Build the Schur sequence for `cov` under importance weights `beta`.
///
/// Runs an incremental Cholesky over the leading blocks; a non-positive
/// pivot means a singular leading minor, in which case a one-shot jitter of
/// `1e-9 * trace / d` on the diagonal is tried before giving up.
pub fn schur_sequence(cov: &Covariance, beta: &[f64]) -> Result<SchurSequence> {
    let d = cov.dim;
    if beta.len() != d {
        return Err(SpectralError::DimensionMismatch {
            expected: d,
            got: beta.len(),
        });
    }
    if let Some(i) = beta.iter().position(|b| !(*b > 0.0)) {
        return Err(SpectralError::NonPositiveBeta(i));
    }
    match schur_pass(cov, beta, false) {
        Ok(seq) => Ok(seq),
        Err(SpectralError::SingularLeadingMinor(_, _)) => {
            let jitter = 1e-9 * cov.trace() / d as f64;
            schur_pass(&cov.add_scaled_identity(jitter), beta, true)
        }
        Err(e) => Err(e),
    }
}

fn schur_pass(cov: &Covariance, beta: &[f64], jittered: bool) -> Result<SchurSequence> {
    let d = cov.dim;
    let mut chol = vec![0.0; d * d]; // lower-triangular factor of leading blocks
    let mut diag = Vec::with_capacity(d);
    let mut conditional_var = Vec::with_capacity(d);
    let mut adjusted_importance = Vec::with_capacity(d);

    for i in 0..d {
        let c_ii = cov.get(i, i);
        diag.push(c_ii);
        if i == 0 {
            if c_ii <= 0.0 {
                return Err(SpectralError::SingularLeadingMinor(1, jittered));
            }
            chol[0] = c_ii.sqrt();
            conditional_var.push(c_ii);
            adjusted_importance.push(beta[0]);
            continue;
        }
        // Row i of the Cholesky factor: L x = rho_i by forward substitution.
        let mut x = vec![0.0; i];
        for j in 0..i {
            let mut acc = cov.get(i, j);
            for k in 0..j {
                acc -= chol[i * d + k] * chol[j * d + k];
            }
            chol[i * d + j] = acc / chol[j * d + j];
            x[j] = chol[i * d + j];
        }
        let pivot_sq = c_ii - x.iter().map(|v| v * v).sum::<f64>();
        if pivot_sq <= 0.0 || !pivot_sq.is_finite() {
            return Err(SpectralError::SingularLeadingMinor(i + 1, jittered));
        }
        chol[i * d + i] = pivot_sq.sqrt();
        conditional_var.push(pivot_sq);

        // y = Sigma_{i-1}^{-1} rho_i via back substitution on L^T y = x.
        let mut y = x;
        for j in (0..i).rev() {
            let mut acc = y[j];
            for k in (j + 1)..i {
                acc -= chol[k * d + j] * y[k];
            }
            y[j] = acc / chol[j * d + j];
        }
        let cross: f64 = y.iter().zip(beta).map(|(v, b)| b * v * v).sum();
        adjusted_importance.push(beta[i] + cross);
    }

    Ok(SchurSequence {
        dim: d,
        diag,
        conditional_var,
        adjusted_importance,
        importance: beta.to_vec(),
        jitter_applied: jittered,
    })
}

/// Natural-log determinant via the eigendecomposition, so it is consistent
/// with [`eigendecompose`] by construction.
pub fn log_det(cov: &Covariance) -> Result<f64> {
    let spectrum = eigendecompose(cov, DEFAULT_EIGEN_TOL)?;
    if spectrum.eigenvalues.iter().any(|&l| l == 0.0) {
        return Err(SpectralError::NonPositiveDefinite);
    }
    Ok(spectrum.eigenvalues.iter().map(|l| l.ln()).sum())
}

// ---------------------------------------------------------------------------
// Plain-text matrix format
// ---------------------------------------------------------------------------

/// Parse the shared matrix file format: one row per line, comma-separated
/// decimal floats, no header, '.' decimal separator.
pub fn parse_matrix_text(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                SpectralError::Parse(format!("line {}: bad number {:?}", lineno + 1, field.trim()))
            })?;
            if !v.is_finite() {
                return Err(SpectralError::NonFinite);
            }
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(SpectralError::Parse("empty matrix file".into()));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(SpectralError::Parse("rows have differing lengths".into()));
    }
    Ok(rows)
}

/// Format rows in the shared matrix file format with 17 significant digits
/// and LF line endings.
pub fn format_matrix_text(rows: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for row in rows {
        let fields: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}
