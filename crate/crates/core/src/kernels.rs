//! Product kernels on `R^d`, the tilted kernel `K_c(u) = (c0 + c1·u) K(u)`,
//! and kernel moments `∫ u^α K(u)^p du`.
//!
//! Every family is a symmetric probability density on the line and the
//! multivariate kernel is the product of `d` copies, so a moment over `R^d`
//! factors into univariate moments. Full-line univariate moments are closed
//! form; moments over a truncated half-line (needed for boundary asymptotics)
//! use adaptive quadrature.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quadrature;

/// Absolute tolerance used for every quadrature-backed moment.
pub const MOMENT_TOL: f64 = 1e-8;

/// Gaussian support is truncated at this many standard deviations.
pub const GAUSSIAN_CUTOFF: f64 = 8.0;

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("dimension mismatch: kernel has d = {expected}, argument has length {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unsupported moment: total order {order} (max 4), power {power} (1 or 2)")]
    UnsupportedMoment { order: u32, power: u32 },
    #[error("unknown kernel `{0}` (expected gaussian, epanechnikov or uniform)")]
    UnknownFamily(String),
    #[error("kernel dimension must be >= 1")]
    ZeroDimension,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Gaussian,
    #[default]
    Epanechnikov,
    Uniform,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 3] =
        [KernelFamily::Gaussian, KernelFamily::Epanechnikov, KernelFamily::Uniform];

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Gaussian => "gaussian",
            KernelFamily::Epanechnikov => "epanechnikov",
            KernelFamily::Uniform => "uniform",
        }
    }

    /// Univariate kernel value.
    #[inline]
    pub fn eval1(self, u: f64) -> f64 {
        match self {
            KernelFamily::Gaussian => (-0.5 * u * u).exp() / (2.0 * PI).sqrt(),
            KernelFamily::Epanechnikov => {
                if u.abs() <= 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
            KernelFamily::Uniform => {
                if u.abs() <= 1.0 {
                    0.5
                } else {
                    0.0
                }
            }
        }
    }

    /// Half-width of the integration range: the support for compact kernels,
    /// the truncation point for the gaussian.
    pub fn support_radius(self) -> f64 {
        match self {
            KernelFamily::Gaussian => GAUSSIAN_CUTOFF,
            KernelFamily::Epanechnikov | KernelFamily::Uniform => 1.0,
        }
    }

    pub fn has_compact_support(self) -> bool {
        !matches!(self, KernelFamily::Gaussian)
    }

    /// `∫_R u^a K(u)^p du` in closed form.
    pub fn moment1(self, a: u32, power: u32) -> f64 {
        if a % 2 == 1 {
            return 0.0;
        }
        let af = a as f64;
        match (self, power) {
            (KernelFamily::Gaussian, 1) => double_factorial(a.saturating_sub(1)),
            // φ² = N(0, 1/2) density / (2√π)
            (KernelFamily::Gaussian, 2) => {
                double_factorial(a.saturating_sub(1)) * 0.5f64.powi(a as i32 / 2) / (2.0 * PI.sqrt())
            }
            (KernelFamily::Epanechnikov, 1) => 1.5 * (1.0 / (af + 1.0) - 1.0 / (af + 3.0)),
            (KernelFamily::Epanechnikov, 2) => {
                1.125 * (1.0 / (af + 1.0) - 2.0 / (af + 3.0) + 1.0 / (af + 5.0))
            }
            (KernelFamily::Uniform, p) => 0.5f64.powi(p as i32) * 2.0 / (af + 1.0),
            (_, p) => panic!("unsupported kernel power {p}"),
        }
    }

    /// `∫_lower^∞ u^a K(u)^p du`. Equal to [`moment1`](Self::moment1) when the
    /// truncation does not cut into the (effective) support.
    pub fn truncated_moment1(self, a: u32, power: u32, lower: f64) -> f64 {
        let r = self.support_radius();
        if lower <= -r {
            return self.moment1(a, power);
        }
        if lower >= r {
            return 0.0;
        }
        quadrature::integrate(
            |u| u.powi(a as i32) * self.eval1(u).powi(power as i32),
            lower,
            r,
            MOMENT_TOL * 1e-3,
        )
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelFamily {
    type Err = KernelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussian" => Ok(KernelFamily::Gaussian),
            "epanechnikov" => Ok(KernelFamily::Epanechnikov),
            "uniform" => Ok(KernelFamily::Uniform),
            other => Err(KernelError::UnknownFamily(other.to_string())),
        }
    }
}

fn double_factorial(n: u32) -> f64 {
    (1..=n).rev().step_by(2).map(f64::from).product()
}

/// Product kernel `K(u) = prod_k k(u_k)` on `R^d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KernelSpec {
    pub family: KernelFamily,
    dim: usize,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, dim: usize) -> Result<Self, KernelError> {
        if dim == 0 {
            return Err(KernelError::ZeroDimension);
        }
        Ok(Self { family, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn check(&self, len: usize) -> Result<(), KernelError> {
        if len != self.dim {
            return Err(KernelError::DimensionMismatch { expected: self.dim, got: len });
        }
        Ok(())
    }

    pub fn eval(&self, u: &[f64]) -> Result<f64, KernelError> {
        self.check(u.len())?;
        Ok(self.eval_unchecked(u))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, u: &[f64]) -> f64 {
        let mut k = 1.0;
        for &v in u {
            k *= self.family.eval1(v);
            if k == 0.0 {
                break;
            }
        }
        k
    }

    pub fn eval_tilted(&self, c: &TiltCoefficients, u: &[f64]) -> Result<f64, KernelError> {
        self.check(u.len())?;
        self.check(c.c1.len())?;
        let lin = c.c0 + c.c1.iter().zip(u).map(|(a, b)| a * b).sum::<f64>();
        Ok(lin * self.eval_unchecked(u))
    }

    /// `∫ u^alpha K(u)^power du` over `R^d`.
    pub fn moment(&self, alpha: &[u32], power: u32) -> Result<f64, KernelError> {
        self.check(alpha.len())?;
        let order: u32 = alpha.iter().sum();
        if order > 4 || !(1..=2).contains(&power) {
            return Err(KernelError::UnsupportedMoment { order, power });
        }
        Ok(alpha.iter().map(|&a| self.family.moment1(a, power)).product())
    }

    /// Second-moment matrix `∫ u u^T K(u)^power du`.
    pub fn second_moment_matrix(&self, power: u32) -> Result<nalgebra::DMatrix<f64>, KernelError> {
        let d = self.dim;
        let mut m = nalgebra::DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                m[(i, j)] = self.moment(&unit_pair(d, i, j), power)?;
            }
        }
        Ok(m)
    }
}

/// Multi-index with ones at positions `i` and `j` (a two at `i` when equal).
pub(crate) fn unit_pair(d: usize, i: usize, j: usize) -> Vec<u32> {
    let mut a = vec![0; d];
    a[i] += 1;
    a[j] += 1;
    a
}

/// Coefficients `(c0, c1)` of the tilted kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltCoefficients {
    pub c0: f64,
    pub c1: Vec<f64>,
}

impl TiltCoefficients {
    pub fn new(c0: f64, c1: Vec<f64>) -> Self {
        Self { c0, c1 }
    }
}
