//! Limiting quantities of the local linear estimator.
//!
//! For a symmetric product density kernel `K` and covariate density `f`,
//! with `M_p = ∫ u u^T K^p`:
//!
//! * `U = f(x) [[∫K, ∫u^T K], [∫u K, ∫u u^T K]]`
//! * `Σ = Var(Y|X=x) f(x) [[∫K², ∫u^T K²], [∫u K², ∫u u^T K²]]`
//! * `B_0 = ½ f(x) Σ_ij g_ij(x) ∫u_i u_j K`, `B_1 = ½ f(x) Σ_ij g_ij(x) ∫u_i u_j u K`
//! * `B_g = ½ Σ_i g_ii(x) ∫u_i² K`
//! * `σ_0² = Var(Y|X=x) ∫K² / f(x)`, `σ_1² = Var(Y|X=x)/f(x) · M_1⁻¹ M_2 M_1⁻¹`
//!
//! `(n̂ b^d)^½ (ĝ - g - B_g b²)` and `(n̂ b^(d+2))^½ (ĝ' - g')` are then
//! asymptotically independent normals with variances `σ_0²` and `σ_1²`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::estimator::{Bandwidth, LocalFit};
use crate::kernels::{unit_pair, KernelError, KernelSpec};
use crate::lattice::LatticeShape;

/// Eigenvalue floor applied when whitening by `σ_1^(-1/2)`.
pub const EIGEN_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum AsymptoticsError {
    #[error("covariate density is not positive at x (f = {0})")]
    ZeroDensity(f64),
    #[error("asymptotic variance is zero or negative (σ0² = {0})")]
    DegenerateVariance(f64),
    #[error("asymptotic gradient covariance is singular")]
    SingularVariance,
    #[error("boundary formulas are defined for d = 1 only (got d = {0})")]
    BoundaryDimension(usize),
    #[error("boundary offset c must be finite and >= 0, got {0}")]
    InvalidBoundaryOffset(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// Data-generating truth at the level the asymptotic formulas need.
///
/// Gradient and Hessian fall back to central finite differences of `g` when
/// not supplied.
#[derive(Clone)]
pub struct TrueModel {
    dim: usize,
    density: ScalarFn,
    regression: ScalarFn,
    gradient: Option<VectorFn>,
    hessian: Option<MatrixFn>,
    cond_var: ScalarFn,
}

impl fmt::Debug for TrueModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TrueModel")
            .field("dim", &self.dim)
            .field("analytic_gradient", &self.gradient.is_some())
            .field("analytic_hessian", &self.hessian.is_some())
            .finish_non_exhaustive()
    }
}

impl TrueModel {
    pub fn new(dim: usize, density: ScalarFn, regression: ScalarFn, cond_var: ScalarFn) -> Self {
        Self { dim, density, regression, gradient: None, hessian: None, cond_var }
    }

    pub fn with_gradient(mut self, gradient: VectorFn) -> Self {
        self.gradient = Some(gradient);
        self
    }

    pub fn with_hessian(mut self, hessian: MatrixFn) -> Self {
        self.hessian = Some(hessian);
        self
    }

    /// Replaces the covariate density, e.g. by a kernel density plug-in.
    pub fn with_density(mut self, density: ScalarFn) -> Self {
        self.density = density;
        self
    }

    /// Replaces `Var(Y | X = x)`.
    pub fn with_cond_var(mut self, cond_var: ScalarFn) -> Self {
        self.cond_var = cond_var;
        self
    }

    /// i.i.d. design `X ~ U[-a, a]`, `Y = X² + σ ε`.
    pub fn iid_quadratic(half_width: f64, noise_sd: f64) -> Self {
        let a = half_width;
        let var = noise_sd * noise_sd;
        Self::new(
            1,
            Arc::new(move |x| if x[0].abs() <= a { 0.5 / a } else { 0.0 }),
            Arc::new(|x| x[0] * x[0]),
            Arc::new(move |_| var),
        )
        .with_gradient(Arc::new(|x| vec![2.0 * x[0]]))
        .with_hessian(Arc::new(|_| DMatrix::from_element(1, 1, 2.0)))
    }

    /// Regression part of the spatial regression model
    /// `Y = (e^X + 2e^-X)/3 + u`, with `Var(u) = noise_sd²` and a caller-supplied
    /// covariate density (the covariate law has no closed form).
    pub fn model1(density: ScalarFn, noise_sd: f64) -> Self {
        let var = noise_sd * noise_sd;
        Self::new(1, density, Arc::new(|x| model1_regression(x[0])), Arc::new(move |_| var))
            .with_gradient(Arc::new(|x| vec![(x[0].exp() - 2.0 * (-x[0]).exp()) / 3.0]))
            .with_hessian(Arc::new(|x| DMatrix::from_element(1, 1, model1_regression(x[0]))))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn f(&self, x: &[f64]) -> f64 {
        (self.density)(x)
    }

    pub fn g(&self, x: &[f64]) -> f64 {
        (self.regression)(x)
    }

    pub fn cond_var(&self, x: &[f64]) -> f64 {
        (self.cond_var)(x)
    }

    pub fn g_grad(&self, x: &[f64]) -> Vec<f64> {
        if let Some(grad) = &self.gradient {
            return grad(x);
        }
        let mut p = x.to_vec();
        (0..x.len())
            .map(|i| {
                let h = 1e-5 * (1.0 + x[i].abs());
                p[i] = x[i] + h;
                let up = self.g(&p);
                p[i] = x[i] - h;
                let down = self.g(&p);
                p[i] = x[i];
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    pub fn g_hess(&self, x: &[f64]) -> DMatrix<f64> {
        if let Some(hess) = &self.hessian {
            return hess(x);
        }
        let d = x.len();
        let h: Vec<f64> = x.iter().map(|v| 1e-4 * (1.0 + v.abs())).collect();
        let g0 = self.g(x);
        let mut m = DMatrix::zeros(d, d);
        let mut p = x.to_vec();
        for i in 0..d {
            p[i] = x[i] + h[i];
            let up = self.g(&p);
            p[i] = x[i] - h[i];
            let down = self.g(&p);
            p[i] = x[i];
            m[(i, i)] = (up - 2.0 * g0 + down) / (h[i] * h[i]);
            for j in i + 1..d {
                let mut eval = |si: f64, sj: f64| {
                    p[i] = x[i] + si * h[i];
                    p[j] = x[j] + sj * h[j];
                    let v = self.g(&p);
                    p[i] = x[i];
                    p[j] = x[j];
                    v
                };
                let v = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0))
                    / (4.0 * h[i] * h[j]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }
}

pub fn model1_regression(x: f64) -> f64 {
    x.exp() / 3.0 + 2.0 * (-x).exp() / 3.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoticQuantities {
    pub u_limit: DMatrix<f64>,
    pub sigma_limit: DMatrix<f64>,
    pub b0: f64,
    pub b1: Vec<f64>,
    pub bg: f64,
    pub var0: f64,
    pub var1: DMatrix<f64>,
}

impl AsymptoticQuantities {
    /// `U⁻¹ Σ U⁻ᵀ`, the covariance of the scaled estimation error.
    pub fn sandwich(&self) -> Option<DMatrix<f64>> {
        let inv = self.u_limit.clone().try_inverse()?;
        Some(&inv * &self.sigma_limit * inv.transpose())
    }

    /// `U⁻¹ (B_0, B_1)`, the leading bias of `(ĝ, ĝ' b)` divided by `b²`.
    pub fn bias_vector(&self) -> Option<DVector<f64>> {
        let inv = self.u_limit.clone().try_inverse()?;
        let mut b = DVector::zeros(self.b1.len() + 1);
        b[0] = self.b0;
        for (k, v) in self.b1.iter().enumerate() {
            b[k + 1] = *v;
        }
        Some(inv * b)
    }
}

fn check_dims(model: &TrueModel, x: &[f64], kernel: &KernelSpec) -> Result<usize, AsymptoticsError> {
    let d = kernel.dim();
    if x.len() != d {
        return Err(AsymptoticsError::DimensionMismatch { expected: d, got: x.len() });
    }
    if model.dim() != d {
        return Err(AsymptoticsError::DimensionMismatch { expected: d, got: model.dim() });
    }
    Ok(d)
}

/// All limiting quantities at `x`.
pub fn limit_quantities(
    model: &TrueModel,
    x: &[f64],
    kernel: &KernelSpec,
) -> Result<AsymptoticQuantities, AsymptoticsError> {
    let d = check_dims(model, x, kernel)?;
    let f = model.f(x);
    if !(f > 0.0) {
        return Err(AsymptoticsError::ZeroDensity(f));
    }
    let cv = model.cond_var(x);
    let hess = model.g_hess(x);

    // Moment blocks indexed by the augmented coordinate (1, u_1, ..., u_d).
    let aug = |i: usize, l: usize| {
        let mut a = vec![0u32; d];
        if i > 0 {
            a[i - 1] += 1;
        }
        if l > 0 {
            a[l - 1] += 1;
        }
        a
    };
    let p = d + 1;
    let mut u_limit = DMatrix::zeros(p, p);
    let mut sigma_limit = DMatrix::zeros(p, p);
    for i in 0..p {
        for l in 0..p {
            let a = aug(i, l);
            u_limit[(i, l)] = f * kernel.moment(&a, 1)?;
            sigma_limit[(i, l)] = cv * f * kernel.moment(&a, 2)?;
        }
    }

    let mut b0 = 0.0;
    let mut b1 = vec![0.0; d];
    for i in 0..d {
        for j in 0..d {
            let gij = hess[(i, j)];
            let a = unit_pair(d, i, j);
            b0 += gij * kernel.moment(&a, 1)?;
            for (k, b1k) in b1.iter_mut().enumerate() {
                let mut a3 = a.clone();
                a3[k] += 1;
                *b1k += gij * kernel.moment(&a3, 1)?;
            }
        }
    }
    b0 *= 0.5 * f;
    for v in &mut b1 {
        *v *= 0.5 * f;
    }

    let mut bg = 0.0;
    for i in 0..d {
        bg += hess[(i, i)] * kernel.moment(&unit_pair(d, i, i), 1)?;
    }
    bg *= 0.5;

    let var0 = cv * kernel.moment(&vec![0; d], 2)? / f;
    let m1 = kernel.second_moment_matrix(1)?;
    let m2 = kernel.second_moment_matrix(2)?;
    let m1_inv = m1.try_inverse().ok_or(AsymptoticsError::SingularVariance)?;
    let var1 = (&m1_inv * m2 * &m1_inv) * (cv / f);

    Ok(AsymptoticQuantities { u_limit, sigma_limit, b0, b1, bg, var0, var1 })
}

/// Bias and variances at the boundary point `x = c b` of a covariate
/// supported on `[0, ∞)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryQuantities {
    pub bg: f64,
    pub var0: f64,
    pub var1: f64,
}

/// Boundary analogues of `B_g`, `σ_0²`, `σ_1²` for `d = 1`, with every kernel
/// integral restricted to `[-c, ∞)`. The model is evaluated at `0`.
pub fn boundary_quantities(
    model: &TrueModel,
    c: f64,
    kernel: &KernelSpec,
) -> Result<BoundaryQuantities, AsymptoticsError> {
    if kernel.dim() != 1 {
        return Err(AsymptoticsError::BoundaryDimension(kernel.dim()));
    }
    if model.dim() != 1 {
        return Err(AsymptoticsError::BoundaryDimension(model.dim()));
    }
    if !(c >= 0.0 && c.is_finite()) {
        return Err(AsymptoticsError::InvalidBoundaryOffset(c));
    }
    let origin = [0.0];
    let f = model.f(&origin);
    if !(f > 0.0) {
        return Err(AsymptoticsError::ZeroDensity(f));
    }
    let cv = model.cond_var(&origin);
    let g2 = model.g_hess(&origin)[(0, 0)];
    let fam = kernel.family;
    let mu2 = fam.truncated_moment1(2, 1, -c);
    let k2 = fam.truncated_moment1(0, 2, -c);
    let mu2_k2 = fam.truncated_moment1(2, 2, -c);
    Ok(BoundaryQuantities {
        bg: 0.5 * g2 * mu2,
        var0: cv * k2 / f,
        var1: cv / f * mu2_k2 / (mu2 * mu2),
    })
}

/// Standardized estimation errors of a local fit.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedError {
    pub z0: f64,
    pub z1: Vec<f64>,
}

/// `z0 = (n̂ b^d)^½ (ĝ - g - B_g b²) / σ_0` and
/// `z1 = σ_1^(-1/2) (n̂ b^(d+2))^½ (ĝ' - g')`.
pub fn standardize_error(
    fit: &LocalFit,
    model: &TrueModel,
    x: &[f64],
    bw: Bandwidth,
    shape: &LatticeShape,
    kernel: &KernelSpec,
) -> Result<StandardizedError, AsymptoticsError> {
    let q = limit_quantities(model, x, kernel)?;
    standardize_with(fit, model, x, bw, shape.total(), &q)
}

/// [`standardize_error`] with precomputed limiting quantities.
pub fn standardize_with(
    fit: &LocalFit,
    model: &TrueModel,
    x: &[f64],
    bw: Bandwidth,
    total: usize,
    q: &AsymptoticQuantities,
) -> Result<StandardizedError, AsymptoticsError> {
    let d = x.len();
    if fit.grad_hat.len() != d {
        return Err(AsymptoticsError::DimensionMismatch { expected: d, got: fit.grad_hat.len() });
    }
    if !(q.var0 > 0.0) {
        return Err(AsymptoticsError::DegenerateVariance(q.var0));
    }
    let b = bw.get();
    let n = total as f64;
    let z0 = (n * b.powi(d as i32)).sqrt() * (fit.g_hat - model.g(x) - q.bg * b * b) / q.var0.sqrt();

    let whitener = inverse_sqrt(&q.var1)?;
    let scale = (n * b.powi(d as i32 + 2)).sqrt();
    let truth = model.g_grad(x);
    let err = DVector::from_iterator(d, fit.grad_hat.iter().zip(&truth).map(|(a, t)| scale * (a - t)));
    let z1 = whitener * err;
    Ok(StandardizedError { z0, z1: z1.iter().copied().collect() })
}

/// Symmetric inverse square root with eigenvalues floored at [`EIGEN_FLOOR`].
pub fn inverse_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>, AsymptoticsError> {
    let eig = m.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(AsymptoticsError::SingularVariance);
    }
    let inv_sqrt = eig.eigenvalues.map(|l| 1.0 / l.max(EIGEN_FLOOR).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelFamily;
    use approx::assert_abs_diff_eq;

    fn gauss1() -> KernelSpec {
        KernelSpec::new(KernelFamily::Gaussian, 1).unwrap()
    }

    fn simple(f: f64, var: f64) -> TrueModel {
        TrueModel::new(1, Arc::new(move |_| f), Arc::new(|x| x[0] * x[0]), Arc::new(move |_| var))
    }

    #[test]
    fn zero_conditional_variance() {
        let q = limit_quantities(&simple(0.5, 0.0), &[0.2], &gauss1()).unwrap();
        assert_eq!(q.sigma_limit.amax(), 0.0);
        assert_eq!(q.var0, 0.0);
        assert_eq!(q.var1.amax(), 0.0);
    }

    #[test]
    fn quadratic_bias_gaussian() {
        let q = limit_quantities(&simple(0.5, 1.0), &[0.0], &gauss1()).unwrap();
        // g'' from the finite-difference fallback
        assert_abs_diff_eq!(q.bg, 1.0, epsilon = 1e-6);
        let q = limit_quantities(&TrueModel::iid_quadratic(1.0, 1.0), &[0.0], &gauss1()).unwrap();
        assert_eq!(q.bg, 1.0);
    }

    #[test]
    fn variance_example() {
        let q = limit_quantities(&simple(0.5, 1.0), &[0.0], &gauss1()).unwrap();
        assert_abs_diff_eq!(q.var0, 0.564_189_583_5, epsilon = 1e-10);
    }

    #[test]
    fn zero_density_is_an_error() {
        let model = TrueModel::iid_quadratic(1.0, 1.0);
        assert!(matches!(
            limit_quantities(&model, &[2.0], &gauss1()),
            Err(AsymptoticsError::ZeroDensity(_))
        ));
        let bad = simple(0.0, 1.0);
        assert!(matches!(boundary_quantities(&bad, 1.0, &gauss1()), Err(AsymptoticsError::ZeroDensity(_))));
    }

    #[test]
    fn finite_difference_hessian_mixed_partials() {
        let m = TrueModel::new(
            2,
            Arc::new(|_| 1.0),
            Arc::new(|x| x[0] * x[0] * x[1] + 3.0 * x[0] * x[1]),
            Arc::new(|_| 1.0),
        );
        let h = m.g_hess(&[0.5, -1.0]);
        assert_abs_diff_eq!(h[(0, 0)], -2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(h[(0, 1)], 4.0, epsilon = 1e-6);
        assert_abs_diff_eq!(h[(1, 0)], 4.0, epsilon = 1e-6);
        assert_abs_diff_eq!(h[(1, 1)], 0.0, epsilon = 1e-6);
        let g = m.g_grad(&[0.5, -1.0]);
        assert_abs_diff_eq!(g[0], -1.0 - 3.0, epsilon = 1e-8);
        assert_abs_diff_eq!(g[1], 0.25 + 1.5, epsilon = 1e-8);
    }

    #[test]
    fn boundary_examples() {
        let m = simple(1.0, 1.0).with_hessian(Arc::new(|_| DMatrix::from_element(1, 1, 2.0)));
        let b = boundary_quantities(&m, 0.0, &gauss1()).unwrap();
        assert_abs_diff_eq!(b.bg, 0.5, epsilon = 1e-9);
        let epan = KernelSpec::new(KernelFamily::Epanechnikov, 1).unwrap();
        let interior = limit_quantities(&m, &[0.0], &epan).unwrap();
        let b = boundary_quantities(&m, 1.0, &epan).unwrap();
        assert_eq!(b.bg, interior.bg);
        assert_eq!(b.var0, interior.var0);
        assert_eq!(b.var1, interior.var1[(0, 0)]);
        assert!(boundary_quantities(&m, -1.0, &epan).is_err());
        let k2 = KernelSpec::new(KernelFamily::Gaussian, 2).unwrap();
        assert_eq!(boundary_quantities(&m, 1.0, &k2), Err(AsymptoticsError::BoundaryDimension(2)));
    }

    #[test]
    fn centered_fit_standardizes_to_zero() {
        let model = TrueModel::iid_quadratic(1.0, 1.0);
        let k = gauss1();
        let bw = Bandwidth::new(0.3).unwrap();
        let x = [0.25];
        let q = limit_quantities(&model, &x, &k).unwrap();
        let fit = LocalFit {
            x: x.to_vec(),
            g_hat: model.g(&x) + q.bg * 0.09,
            grad_hat: model.g_grad(&x),
            u_matrix: DMatrix::identity(2, 2),
            v_vector: DVector::zeros(2),
            rcond: 1.0,
            support_count: 10,
            bandwidth: 0.3,
        };
        let shape = LatticeShape::new(vec![10, 10]).unwrap();
        let z = standardize_error(&fit, &model, &x, bw, &shape, &k).unwrap();
        assert_abs_diff_eq!(z.z0, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(z.z1[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn z0_squared_scales_with_sample_size() {
        let model = TrueModel::iid_quadratic(1.0, 1.0);
        let k = gauss1();
        let bw = Bandwidth::new(0.3).unwrap();
        let fit = LocalFit {
            x: vec![0.0],
            g_hat: 0.4,
            grad_hat: vec![0.1],
            u_matrix: DMatrix::identity(2, 2),
            v_vector: DVector::zeros(2),
            rcond: 1.0,
            support_count: 10,
            bandwidth: 0.3,
        };
        let s1 = LatticeShape::new(vec![10, 10]).unwrap();
        let s2 = LatticeShape::new(vec![20, 10]).unwrap();
        let a = standardize_error(&fit, &model, &[0.0], bw, &s1, &k).unwrap();
        let b = standardize_error(&fit, &model, &[0.0], bw, &s2, &k).unwrap();
        assert_abs_diff_eq!(b.z0 * b.z0, 2.0 * a.z0 * a.z0, epsilon = 1e-10);
    }

    #[test]
    fn zero_variance_rejected_in_standardization() {
        let model = simple(0.5, 0.0);
        let fit = LocalFit {
            x: vec![0.0],
            g_hat: 0.0,
            grad_hat: vec![0.0],
            u_matrix: DMatrix::identity(2, 2),
            v_vector: DVector::zeros(2),
            rcond: 1.0,
            support_count: 3,
            bandwidth: 0.5,
        };
        let shape = LatticeShape::new(vec![3]).unwrap();
        let err = standardize_error(&fit, &model, &[0.0], Bandwidth::new(0.5).unwrap(), &shape, &gauss1());
        assert_eq!(err, Err(AsymptoticsError::DegenerateVariance(0.0)));
    }

    #[test]
    fn inverse_sqrt_whitens() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let w = inverse_sqrt(&m).unwrap();
        let id = &w * &m * &w;
        assert!((id - DMatrix::<f64>::identity(2, 2)).amax() < 1e-12);
        assert!(inverse_sqrt(&DMatrix::zeros(1, 1)).is_err());
    }
}
