//! Local linear estimation of a spatial regression function.
//!
//! At an evaluation point `x` the fit minimizes
//!
//! ```text
//! sum_j (Y_j - a0 - a1·(X_j - x))² K((X_j - x) / b)
//! ```
//!
//! over `(a0, a1)`. Working in scaled coordinates `z_j = (X_j - x) / b` with
//! `z_j0 = 1`, the normal equations are `U_n s = V_n` with
//!
//! ```text
//! (U_n)_il = (n̂ b^d)^-1 sum_j z_ji z_jl K(z_j)
//! (V_n)_i  = (n̂ b^d)^-1 sum_j Y_j z_ji K(z_j)
//! ```
//!
//! and solution `s = (â0, â1 b)`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::kernels::KernelSpec;
use crate::lattice::LatticeField;

/// Fits with a reciprocal condition number below this are rejected.
pub const RCOND_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("bandwidth must be positive and finite, got {0}")]
    InvalidBandwidth(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Scalar bandwidth `b > 0`, applied componentwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bandwidth(f64);

impl Bandwidth {
    pub fn new(b: f64) -> Result<Self, EstimatorError> {
        if b > 0.0 && b.is_finite() {
            Ok(Self(b))
        } else {
            Err(EstimatorError::InvalidBandwidth(b))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// `n̂^(-1/(d+4))`, the rate that balances squared bias and variance.
    pub fn rule_of_thumb(total: usize, d: usize, scale: f64) -> Result<Self, EstimatorError> {
        Self::new(scale * (total as f64).powf(-1.0 / (d as f64 + 4.0)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FailureReason {
    SingularSystem,
    EmptyWindow,
}

impl FailureReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureReason::SingularSystem => "singular",
            FailureReason::EmptyWindow => "empty",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("local fit failed ({}): rcond = {rcond:e}, {support_count} sites in window", reason.as_str())]
pub struct FitFailure {
    pub reason: FailureReason,
    pub rcond: f64,
    pub support_count: usize,
}

/// Result of one local linear fit.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFit {
    pub x: Vec<f64>,
    pub g_hat: f64,
    pub grad_hat: Vec<f64>,
    /// `U_n`, including the `(n̂ b^d)^-1` normalization.
    pub u_matrix: DMatrix<f64>,
    /// `V_n`, same normalization.
    pub v_vector: DVector<f64>,
    pub rcond: f64,
    pub support_count: usize,
    pub bandwidth: f64,
}

impl LocalFit {
    /// Solution of `U_n s = V_n` in scaled coordinates, `(ĝ, ĝ' b)`.
    pub fn scaled_solution(&self) -> DVector<f64> {
        let mut s = DVector::zeros(self.grad_hat.len() + 1);
        s[0] = self.g_hat;
        for (k, g) in self.grad_hat.iter().enumerate() {
            s[k + 1] = g * self.bandwidth;
        }
        s
    }
}

pub type FitResult = Result<LocalFit, FitFailure>;

fn check_point(field: &LatticeField, x: &[f64], kernel: &KernelSpec) -> Result<(), EstimatorError> {
    let d = field.covariate_dim();
    if x.len() != d {
        return Err(EstimatorError::DimensionMismatch { expected: d, got: x.len() });
    }
    if kernel.dim() != d {
        return Err(EstimatorError::DimensionMismatch { expected: d, got: kernel.dim() });
    }
    Ok(())
}

/// Reciprocal 2-norm condition number of a symmetric matrix.
pub(crate) fn symmetric_rcond(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    if max > 0.0 && min.is_finite() {
        (min / max).max(0.0)
    } else {
        0.0
    }
}

/// Local linear estimate of `g(x)` and its gradient.
///
/// The outer `Result` reports caller errors (dimensions), the inner one a
/// degenerate local design.
pub fn local_linear_fit(
    field: &LatticeField,
    x: &[f64],
    bw: Bandwidth,
    kernel: &KernelSpec,
) -> Result<FitResult, EstimatorError> {
    check_point(field, x, kernel)?;
    Ok(fit_unchecked(field, x, bw, kernel))
}

pub(crate) fn fit_unchecked(field: &LatticeField, x: &[f64], bw: Bandwidth, kernel: &KernelSpec) -> FitResult {
    let d = field.covariate_dim();
    let p = d + 1;
    let b = bw.get();
    let mut u = DMatrix::<f64>::zeros(p, p);
    let mut v = DVector::<f64>::zeros(p);
    let mut z = vec![0.0; p];
    z[0] = 1.0;
    let mut support = 0usize;

    for (j, &yj) in field.y().iter().enumerate() {
        let xj = field.x_at(j);
        for k in 0..d {
            z[k + 1] = (xj[k] - x[k]) / b;
        }
        let w = kernel.eval_unchecked(&z[1..]);
        if w <= 0.0 {
            continue;
        }
        support += 1;
        for i in 0..p {
            let wi = w * z[i];
            v[i] += yj * wi;
            for l in i..p {
                u[(i, l)] += wi * z[l];
            }
        }
    }
    if support == 0 {
        return Err(FitFailure { reason: FailureReason::EmptyWindow, rcond: 0.0, support_count: 0 });
    }

    let norm = 1.0 / (field.len() as f64 * b.powi(d as i32));
    for i in 0..p {
        v[i] *= norm;
        for l in i..p {
            u[(i, l)] *= norm;
            u[(l, i)] = u[(i, l)];
        }
    }

    let rcond = symmetric_rcond(&u);
    let singular = FitFailure { reason: FailureReason::SingularSystem, rcond, support_count: support };
    if !(rcond >= RCOND_THRESHOLD) {
        return Err(singular);
    }
    let Some(chol) = u.clone().cholesky() else {
        return Err(singular);
    };
    let s = chol.solve(&v);

    Ok(LocalFit {
        x: x.to_vec(),
        g_hat: s[0],
        grad_hat: (1..p).map(|k| s[k] / b).collect(),
        u_matrix: u,
        v_vector: v,
        rcond,
        support_count: support,
        bandwidth: b,
    })
}

/// [`local_linear_fit`] at every point of `xs`, in order.
pub fn fit_curve(
    field: &LatticeField,
    xs: &[Vec<f64>],
    bw: Bandwidth,
    kernel: &KernelSpec,
) -> Result<Vec<(Vec<f64>, FitResult)>, EstimatorError> {
    for x in xs {
        check_point(field, x, kernel)?;
    }
    Ok(xs.iter().map(|x| (x.clone(), fit_unchecked(field, x, bw, kernel))).collect())
}

/// In-sample fitted values `ĝ(X_j)` at every site, `None` where the fit failed.
pub fn fitted_at_sites(field: &LatticeField, bw: Bandwidth, kernel: &KernelSpec) -> Result<Vec<Option<f64>>, EstimatorError> {
    let d = field.covariate_dim();
    if kernel.dim() != d {
        return Err(EstimatorError::DimensionMismatch { expected: d, got: kernel.dim() });
    }
    Ok((0..field.len())
        .map(|j| fit_unchecked(field, field.x_at(j), bw, kernel).ok().map(|f| f.g_hat))
        .collect())
}

/// Kernel-weighted local mean `sum Y_j K_j / sum K_j`.
pub fn nadaraya_watson(
    field: &LatticeField,
    x: &[f64],
    bw: Bandwidth,
    kernel: &KernelSpec,
) -> Result<Result<f64, FitFailure>, EstimatorError> {
    check_point(field, x, kernel)?;
    let b = bw.get();
    let mut z = vec![0.0; x.len()];
    let (mut num, mut den, mut support) = (0.0, 0.0, 0usize);
    for (j, &yj) in field.y().iter().enumerate() {
        for (k, (xj, xk)) in field.x_at(j).iter().zip(x).enumerate() {
            z[k] = (xj - xk) / b;
        }
        let w = kernel.eval_unchecked(&z);
        if w > 0.0 {
            support += 1;
            num += w * yj;
            den += w;
        }
    }
    if support == 0 || den <= 0.0 {
        return Ok(Err(FitFailure { reason: FailureReason::EmptyWindow, rcond: 0.0, support_count: 0 }));
    }
    Ok(Ok(num / den))
}

/// Kernel density estimate `(n̂ b^d)^-1 sum_j K((X_j - x)/b)` of the covariate.
pub fn kde(field: &LatticeField, x: &[f64], bw: Bandwidth, kernel: &KernelSpec) -> Result<f64, EstimatorError> {
    check_point(field, x, kernel)?;
    let b = bw.get();
    let mut z = vec![0.0; x.len()];
    let mut sum = 0.0;
    for j in 0..field.len() {
        for (k, (xj, xk)) in field.x_at(j).iter().zip(x).enumerate() {
            z[k] = (xj - xk) / b;
        }
        sum += kernel.eval_unchecked(&z);
    }
    Ok(sum / (field.len() as f64 * b.powi(x.len() as i32)))
}
