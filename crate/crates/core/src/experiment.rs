//! Replicated simulate-then-estimate runs.
//!
//! Replication `r` (0-based) simulates with [`replication_seed`]`(base_seed, r)`,
//! fits the local linear curve over the evaluation grid, and computes the
//! in-sample noise-to-signal ratio `Var(Y - ĝ(X)) / Var(ĝ(X))`. Replications
//! run in parallel; aggregates are reduced in replication order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asymptotics::{limit_quantities, standardize_with, AsymptoticsError, TrueModel};
use crate::estimator::{fit_curve, fitted_at_sites, local_linear_fit, Bandwidth, EstimatorError, FitResult};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::lattice::LatticeField;
use crate::simulator::{
    replication_seed, simulate, CovariatePreset, ModelKind, ModelSpec, NoiseMode, SimError, SimProtocol, SweepOrder,
};

/// Minimum successful replications for normality diagnostics.
pub const MIN_DIAGNOSTIC_REPLICATIONS: usize = 30;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment configuration: {0}")]
    InvalidConfig(String),
    #[error("fitted values are constant; noise-to-signal ratio undefined")]
    DegenerateSignal,
    #[error("length mismatch: {0} sites, {1} fitted values")]
    LengthMismatch(usize, usize),
    #[error("only {successes} successful replications, need at least {needed}")]
    InsufficientReplications { successes: usize, needed: usize },
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Asymptotics(#[from] AsymptoticsError),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    /// Model and protocol; the protocol seed is replaced per replication.
    pub model: ModelSpec,
    pub replications: usize,
    pub bandwidth: Bandwidth,
    pub kernel: KernelSpec,
    /// Evaluation points; `None` derives 101 points spanning the 1%–99%
    /// quantiles of the covariate in the first replication.
    pub x_grid: Option<Vec<f64>>,
    pub base_seed: u64,
}

impl ExperimentConfig {
    pub fn new(model: ModelSpec, kernel: KernelSpec) -> Self {
        Self {
            model,
            replications: 10,
            bandwidth: Bandwidth::new(0.5).expect("positive"),
            kernel,
            x_grid: None,
            base_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.replications == 0 {
            return Err(ExperimentError::InvalidConfig("replications must be >= 1".into()));
        }
        if let Some(g) = &self.x_grid {
            validate_grid(g)?;
        }
        if self.kernel.dim() != 1 {
            return Err(ExperimentError::InvalidConfig("simulated models have d = 1".into()));
        }
        self.model.validate()?;
        Ok(())
    }

    pub fn replication_spec(&self, r: usize) -> ModelSpec {
        self.model.with_seed(replication_seed(self.base_seed, r as u64))
    }
}

fn validate_grid(g: &[f64]) -> Result<(), ExperimentError> {
    if g.is_empty() {
        return Err(ExperimentError::InvalidConfig("x grid is empty".into()));
    }
    if g.iter().any(|v| !v.is_finite()) || g.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(ExperimentError::InvalidConfig("x grid must be finite and strictly increasing".into()));
    }
    Ok(())
}

/// Parses `lo:hi:count` into `count` equispaced points (endpoints included).
pub fn parse_grid(s: &str) -> Result<Vec<f64>, ExperimentError> {
    let bad = || ExperimentError::InvalidConfig(format!("grid `{s}` is not of the form lo:hi:count"));
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let count: usize = parts[2].trim().parse().map_err(|_| bad())?;
    let grid = equispaced(lo, hi, count);
    validate_grid(&grid)?;
    Ok(grid)
}

pub fn equispaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![lo],
        _ => (0..count)
            .map(|k| if k + 1 == count { hi } else { lo + (hi - lo) * k as f64 / (count - 1) as f64 })
            .collect(),
    }
}

/// Linear-interpolation quantile of unsorted data.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// 101 points spanning the central 98% of the covariate values.
pub fn default_grid(field: &LatticeField) -> Vec<f64> {
    let x = field.x_flat();
    equispaced(quantile(x, 0.01), quantile(x, 0.99), 101)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Two-pass sample variance with denominator `n - 1`.
pub fn sample_variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn nsr_from_pairs(y: &[f64], fitted: &[f64]) -> Result<f64, ExperimentError> {
    if fitted.len() < 2 {
        return Err(ExperimentError::DegenerateSignal);
    }
    let signal = sample_variance(fitted);
    if !(signal > 0.0) {
        return Err(ExperimentError::DegenerateSignal);
    }
    let resid: Vec<f64> = y.iter().zip(fitted).map(|(a, b)| a - b).collect();
    Ok(sample_variance(&resid) / signal)
}

/// `Var(Y - ĝ(X)) / Var(ĝ(X))` over the sites whose fitted value is present.
pub fn noise_to_signal(field: &LatticeField, fitted: &[Option<f64>]) -> Result<f64, ExperimentError> {
    if fitted.len() != field.len() {
        return Err(ExperimentError::LengthMismatch(field.len(), fitted.len()));
    }
    let (y, g): (Vec<f64>, Vec<f64>) = field
        .y()
        .iter()
        .zip(fitted)
        .filter_map(|(&y, g)| g.map(|g| (y, g)))
        .unzip();
    nsr_from_pairs(&y, &g)
}

/// Noise-to-signal ratio with the true regression function in place of the fit.
pub fn noise_to_signal_truth(field: &LatticeField, g: impl Fn(&[f64]) -> f64) -> Result<f64, ExperimentError> {
    let fitted: Vec<f64> = (0..field.len()).map(|k| g(field.x_at(k))).collect();
    nsr_from_pairs(field.y(), &fitted)
}

fn truth_regression(kind: &ModelKind) -> Option<fn(&[f64]) -> f64> {
    match kind {
        ModelKind::Model1 => Some(|x| crate::asymptotics::model1_regression(x[0])),
        ModelKind::IidQuadratic { .. } => Some(|x| x[0] * x[0]),
        // the optimal predictor of Model 2 has no closed form
        ModelKind::Model2 { .. } => None,
    }
}

#[derive(Debug, Clone)]
pub struct ReplicationOutcome {
    pub index: usize,
    pub seed: u64,
    /// One entry per grid point.
    pub curve: Vec<FitResult>,
    /// `None` when the fitted values were degenerate.
    pub nsr: Option<f64>,
    /// Ratio computed with the true regression function, when known.
    pub nsr_truth: Option<f64>,
    /// Sites whose in-sample fit failed (excluded from the ratio).
    pub nsr_failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointSummary {
    pub x: f64,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub successes: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub x_grid: Vec<f64>,
    pub replications: Vec<ReplicationOutcome>,
    pub nsr_mean: f64,
    pub nsr_truth_mean: Option<f64>,
    /// Failed curve cells over all replications.
    pub failures: usize,
    pub summary: Vec<PointSummary>,
    /// `(X, Y)` pairs of the first replication.
    pub scatter: Vec<(f64, f64)>,
}

impl ExperimentResult {
    /// Reduces replication outcomes in index order, whatever order they arrive in.
    pub fn aggregate(x_grid: Vec<f64>, mut replications: Vec<ReplicationOutcome>, scatter: Vec<(f64, f64)>) -> Self {
        replications.sort_by_key(|r| r.index);
        let nsr: Vec<f64> = replications.iter().filter_map(|r| r.nsr).collect();
        let nsr_mean = if nsr.is_empty() { f64::NAN } else { mean(&nsr) };
        let truth: Vec<f64> = replications.iter().filter_map(|r| r.nsr_truth).collect();
        let nsr_truth_mean = (!truth.is_empty()).then(|| mean(&truth));
        let failures = replications.iter().map(|r| r.curve.iter().filter(|c| c.is_err()).count()).sum();
        let summary = x_grid
            .iter()
            .enumerate()
            .map(|(k, &x)| {
                let vals: Vec<f64> = replications
                    .iter()
                    .filter_map(|r| r.curve[k].as_ref().ok().map(|f| f.g_hat))
                    .collect();
                PointSummary {
                    x,
                    mean: (!vals.is_empty()).then(|| mean(&vals)),
                    sd: (vals.len() >= 2).then(|| sample_variance(&vals).sqrt()),
                    successes: vals.len(),
                }
            })
            .collect();
        Self { x_grid, replications, nsr_mean, nsr_truth_mean, failures, summary, scatter }
    }

    /// Per-replication ratios, `NaN` where undefined.
    pub fn nsr(&self) -> Vec<f64> {
        self.replications.iter().map(|r| r.nsr.unwrap_or(f64::NAN)).collect()
    }

    /// Estimated curve of replication `r`, `None` at failed points.
    pub fn curve(&self, r: usize) -> Vec<Option<f64>> {
        self.replications[r].curve.iter().map(|c| c.as_ref().ok().map(|f| f.g_hat)).collect()
    }
}

fn in_pool<T: Send>(threads: usize, job: impl FnOnce() -> T + Send) -> Result<T, ExperimentError> {
    if threads == 0 {
        return Ok(job());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| ExperimentError::ThreadPool(e.to_string()))?;
    Ok(pool.install(job))
}

fn run_replication(cfg: &ExperimentConfig, index: usize, field: &LatticeField, grid: &[Vec<f64>]) -> Result<ReplicationOutcome, ExperimentError> {
    let curve = fit_curve(field, grid, cfg.bandwidth, &cfg.kernel)?.into_iter().map(|(_, f)| f).collect();
    let fitted = fitted_at_sites(field, cfg.bandwidth, &cfg.kernel)?;
    let nsr_failures = fitted.iter().filter(|f| f.is_none()).count();
    let nsr = noise_to_signal(field, &fitted).ok();
    let nsr_truth = truth_regression(&cfg.model.kind).and_then(|g| noise_to_signal_truth(field, g).ok());
    Ok(ReplicationOutcome {
        index,
        seed: replication_seed(cfg.base_seed, index as u64),
        curve,
        nsr,
        nsr_truth,
        nsr_failures,
    })
}

/// Runs the experiment on the ambient rayon pool.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, ExperimentError> {
    run_experiment_with_threads(cfg, 0)
}

/// Runs the experiment on `threads` worker threads (0 = ambient pool).
/// The result does not depend on `threads`.
pub fn run_experiment_with_threads(cfg: &ExperimentConfig, threads: usize) -> Result<ExperimentResult, ExperimentError> {
    cfg.validate()?;
    in_pool(threads, || {
        let fields = (0..cfg.replications)
            .into_par_iter()
            .map(|r| simulate(&cfg.replication_spec(r)))
            .collect::<Result<Vec<_>, _>>()?;
        let x_grid = cfg.x_grid.clone().unwrap_or_else(|| default_grid(&fields[0]));
        let points: Vec<Vec<f64>> = x_grid.iter().map(|&x| vec![x]).collect();
        let outcomes = fields
            .par_iter()
            .enumerate()
            .map(|(r, field)| run_replication(cfg, r, field, &points))
            .collect::<Result<Vec<_>, _>>()?;
        let scatter = fields[0].y().iter().zip(fields[0].x_flat()).map(|(&y, &x)| (x, y)).collect();
        Ok(ExperimentResult::aggregate(x_grid, outcomes, scatter))
    })?
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Kolmogorov–Smirnov statistic `sup |F_n - F|` of `sample` against `cdf`.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v = sample.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let f = cdf(x);
        d.max(f - i as f64 / n).max((i + 1) as f64 / n - f)
    })
}

/// Asymptotic p-value `P(D_n > d)` from the Kolmogorov distribution, with
/// Stephens' small-sample correction.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalityDiagnostics {
    pub successes: usize,
    pub failures: usize,
    pub mean_z0: f64,
    pub var_z0: f64,
    pub ks_stat: f64,
    pub ks_pvalue: f64,
    /// Correlation of `ĝ(x0)` with the first gradient component across replications.
    pub corr_g_grad: f64,
    pub mean_z1: f64,
    pub var_z1: f64,
    pub mean_g_hat: f64,
    pub mean_grad_hat: f64,
}

/// Per-replication standardized errors at one point.
#[derive(Debug, Clone)]
pub struct PointDraws {
    pub g_hat: Vec<f64>,
    pub grad_hat: Vec<f64>,
    pub z0: Vec<f64>,
    pub z1: Vec<f64>,
    pub failures: usize,
}

/// Fits every replication at `x0` and standardizes against `truth`.
pub fn point_draws(cfg: &ExperimentConfig, truth: &TrueModel, x0: &[f64], threads: usize) -> Result<PointDraws, ExperimentError> {
    cfg.validate()?;
    let q = limit_quantities(truth, x0, &cfg.kernel)?;
    if !(q.var0 > 0.0) {
        return Err(AsymptoticsError::DegenerateVariance(q.var0).into());
    }
    let total = cfg.model.m * cfg.model.n;
    let per_rep = in_pool(threads, || {
        (0..cfg.replications)
            .into_par_iter()
            .map(|r| -> Result<Option<(f64, f64, f64, f64)>, ExperimentError> {
                let field = simulate(&cfg.replication_spec(r))?;
                match local_linear_fit(&field, x0, cfg.bandwidth, &cfg.kernel)? {
                    Err(_) => Ok(None),
                    Ok(fit) => {
                        let z = standardize_with(&fit, truth, x0, cfg.bandwidth, total, &q)?;
                        Ok(Some((fit.g_hat, fit.grad_hat[0], z.z0, z.z1[0])))
                    }
                }
            })
            .collect::<Result<Vec<_>, _>>()
    })??;
    let mut out = PointDraws { g_hat: vec![], grad_hat: vec![], z0: vec![], z1: vec![], failures: 0 };
    for item in per_rep {
        match item {
            None => out.failures += 1,
            Some((g, gr, z0, z1)) => {
                out.g_hat.push(g);
                out.grad_hat.push(gr);
                out.z0.push(z0);
                out.z1.push(z1);
            }
        }
    }
    Ok(out)
}

/// Empirical check of the single-point limit law at `x0`.
pub fn normality_diagnostics(cfg: &ExperimentConfig, truth: &TrueModel, x0: &[f64]) -> Result<NormalityDiagnostics, ExperimentError> {
    normality_diagnostics_with_threads(cfg, truth, x0, 0)
}

pub fn normality_diagnostics_with_threads(
    cfg: &ExperimentConfig,
    truth: &TrueModel,
    x0: &[f64],
    threads: usize,
) -> Result<NormalityDiagnostics, ExperimentError> {
    let draws = point_draws(cfg, truth, x0, threads)?;
    let n = draws.z0.len();
    if n < MIN_DIAGNOSTIC_REPLICATIONS {
        return Err(ExperimentError::InsufficientReplications { successes: n, needed: MIN_DIAGNOSTIC_REPLICATIONS });
    }
    let ks_stat = ks_statistic(&draws.z0, normal_cdf);
    Ok(NormalityDiagnostics {
        successes: n,
        failures: draws.failures,
        mean_z0: mean(&draws.z0),
        var_z0: sample_variance(&draws.z0),
        ks_stat,
        ks_pvalue: ks_pvalue(ks_stat, n),
        corr_g_grad: correlation(&draws.g_hat, &draws.grad_hat),
        mean_z1: mean(&draws.z1),
        var_z1: sample_variance(&draws.z1),
        mean_g_hat: mean(&draws.g_hat),
        mean_grad_hat: mean(&draws.grad_hat),
    })
}

// ---------------------------------------------------------------------------
// JSON configuration schema

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKindName {
    Model1,
    Model2,
    Iid,
}

fn default_margin() -> usize {
    75
}
fn default_sweeps() -> usize {
    20
}
fn default_one() -> f64 {
    1.0
}
fn default_replications() -> usize {
    10
}
fn default_bandwidth() -> f64 {
    0.5
}
fn default_kernel() -> KernelFamily {
    KernelFamily::Gaussian
}

/// `model` object of the experiment config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKindName,
    #[serde(default)]
    pub covariate_preset: Option<CovariatePreset>,
    pub m: usize,
    pub n: usize,
    #[serde(default = "default_margin")]
    pub margin: usize,
    #[serde(default = "default_sweeps")]
    pub sweeps: usize,
    #[serde(default = "default_one")]
    pub noise_sd: f64,
    #[serde(default)]
    pub sweep_order: SweepOrder,
    #[serde(default)]
    pub noise_mode: NoiseMode,
    /// Half-width of the uniform covariate law (`iid` only).
    #[serde(default = "default_one")]
    pub half_width: f64,
}

impl ModelConfig {
    pub fn to_spec(&self) -> Result<ModelSpec, ExperimentError> {
        let protocol = SimProtocol {
            margin: self.margin,
            sweeps: self.sweeps,
            noise_sd: self.noise_sd,
            seed: 0,
            order: self.sweep_order,
            noise_mode: self.noise_mode,
        };
        let kind = match (self.kind, self.covariate_preset) {
            (ModelKindName::Model2, Some(p)) => ModelKind::Model2 { lags: p.lags() },
            (ModelKindName::Model2, None) => {
                return Err(ExperimentError::InvalidConfig("model2 needs a covariate_preset".into()))
            }
            (_, Some(_)) => {
                return Err(ExperimentError::InvalidConfig("covariate_preset applies to model2 only".into()))
            }
            (ModelKindName::Model1, None) => ModelKind::Model1,
            (ModelKindName::Iid, None) => ModelKind::IidQuadratic { half_width: self.half_width },
        };
        let spec = ModelSpec { kind, m: self.m, n: self.n, protocol };
        spec.validate()?;
        Ok(spec)
    }
}

/// On-disk experiment configuration. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfigFile {
    pub model: ModelConfig,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_bandwidth")]
    pub bandwidth: f64,
    #[serde(default = "default_kernel")]
    pub kernel: KernelFamily,
    /// `lo:hi:count`, or absent for the data-driven default.
    #[serde(default)]
    pub grid: Option<String>,
    #[serde(default)]
    pub base_seed: u64,
}

impl ExperimentConfigFile {
    pub fn to_config(&self) -> Result<ExperimentConfig, ExperimentError> {
        let cfg = ExperimentConfig {
            model: self.model.to_spec()?,
            replications: self.replications,
            bandwidth: Bandwidth::new(self.bandwidth)?,
            kernel: KernelSpec::new(self.kernel, 1).map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?,
            x_grid: self.grid.as_deref().map(parse_grid).transpose()?,
            base_seed: self.base_seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
