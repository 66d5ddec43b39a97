//! Synthetic random fields on a two-dimensional lattice.
//!
//! Both spatial models are generated on an extended `(m + 2·margin) × (n + 2·margin)`
//! grid. Starting from zeros, each sweep visits every site and sets
//!
//! ```text
//! F[i,j] <- sin(F[i-1,j] + F[i,j-1] + F[i+1,j] + F[i,j+1]) + e[i,j]
//! ```
//!
//! in place, with neighbours outside the grid read as 0. After the last sweep
//! the central `m × n` window is kept; the margin serves as a warm-up zone.
//!
//! * Model 1: `X` is the swept field driven by noise `e`, and
//!   `Y = (e^X + 2e^-X)/3 + u` with `u` independent noise.
//! * Model 2: `Y` is the swept field and `X` is a sum of lagged `Y` values.
//! * The i.i.d. benchmark draws `X ~ U[-a, a]` independently per site and
//!   sets `Y = X² + σ ε`.
//!
//! Randomness comes from ChaCha20 seeded with `seed_from_u64(seed)`. Draws
//! are made grid by grid in row-major order: the `e` grid first, then (Model 1)
//! the `u` grid. Replication `r` of an experiment with base seed `s` uses
//! [`replication_seed(s, r)`](replication_seed).

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asymptotics::model1_regression;
use crate::lattice::{LatticeField, LatticeShape};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("lag ({0}, {1}) exceeds the warm-up margin {2}")]
    LagOutOfMargin(i64, i64, usize),
    #[error("invalid lag set: {0}")]
    InvalidLagSet(String),
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
}

/// Dense row-major grid, 0-based.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "grid data length");
        Self { rows, cols, data }
    }

    fn normal<R: Rng>(rows: usize, cols: usize, sd: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                sd * z
            })
            .collect::<Vec<f64>>();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Value at signed coordinates, 0 outside the grid.
    pub fn get_or_zero(&self, i: i64, j: i64) -> f64 {
        if i < 0 || j < 0 || i as usize >= self.rows || j as usize >= self.cols {
            0.0
        } else {
            self.data[i as usize * self.cols + j as usize]
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepOrder {
    /// Row by row, left to right.
    #[default]
    Raster,
    /// All sites with even `i + j` in raster order, then all odd ones.
    Checkerboard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// One noise grid reused by every sweep.
    #[default]
    Fixed,
    /// Fresh noise for every sweep.
    RedrawPerSweep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimProtocol {
    pub margin: usize,
    pub sweeps: usize,
    pub noise_sd: f64,
    pub seed: u64,
    pub order: SweepOrder,
    pub noise_mode: NoiseMode,
}

impl Default for SimProtocol {
    fn default() -> Self {
        Self {
            margin: 75,
            sweeps: 20,
            noise_sd: 1.0,
            seed: 0,
            order: SweepOrder::Raster,
            noise_mode: NoiseMode::Fixed,
        }
    }
}

/// Spatial lags `(a, b)` summed into the Model 2 covariate `X[i,j] = sum Y[i+a, j+b]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LagSet(Vec<(i64, i64)>);

impl LagSet {
    pub fn new(offsets: Vec<(i64, i64)>) -> Result<Self, SimError> {
        if offsets.is_empty() {
            return Err(SimError::InvalidLagSet("empty".into()));
        }
        if offsets.contains(&(0, 0)) {
            return Err(SimError::InvalidLagSet("(0, 0) is not a lag".into()));
        }
        for (k, o) in offsets.iter().enumerate() {
            if offsets[..k].contains(o) {
                return Err(SimError::InvalidLagSet(format!("duplicate offset {o:?}")));
            }
        }
        Ok(Self(offsets))
    }

    pub fn offsets(&self) -> &[(i64, i64)] {
        &self.0
    }
}

/// The five covariate constructions used with Model 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariatePreset {
    /// First-order neighbours in all four directions.
    X0,
    /// First- and second-order neighbours in all four directions.
    Xc,
    /// Backward first-order neighbours.
    Xd,
    /// Forward first-order neighbours.
    Xe,
    /// Backward first- and second-order neighbours.
    Xf,
}

impl CovariatePreset {
    pub const ALL: [CovariatePreset; 5] =
        [CovariatePreset::X0, CovariatePreset::Xc, CovariatePreset::Xd, CovariatePreset::Xe, CovariatePreset::Xf];

    pub fn lags(self) -> LagSet {
        let v = match self {
            CovariatePreset::X0 => vec![(-1, 0), (0, -1), (1, 0), (0, 1)],
            CovariatePreset::Xc => vec![(-2, 0), (0, -2), (-1, 0), (0, -1), (1, 0), (0, 1), (2, 0), (0, 2)],
            CovariatePreset::Xd => vec![(-1, 0), (0, -1)],
            CovariatePreset::Xe => vec![(1, 0), (0, 1)],
            CovariatePreset::Xf => vec![(-2, 0), (0, -2), (-1, 0), (0, -1)],
        };
        LagSet(v)
    }

    pub fn name(self) -> &'static str {
        match self {
            CovariatePreset::X0 => "x0",
            CovariatePreset::Xc => "xc",
            CovariatePreset::Xd => "xd",
            CovariatePreset::Xe => "xe",
            CovariatePreset::Xf => "xf",
        }
    }
}

impl std::str::FromStr for CovariatePreset {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CovariatePreset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| SimError::InvalidSpec(format!("unknown covariate preset `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    Model1,
    Model2 { lags: LagSet },
    /// i.i.d. `X ~ U[-half_width, half_width]`, `Y = X² + σ ε`.
    IidQuadratic { half_width: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub m: usize,
    pub n: usize,
    pub protocol: SimProtocol,
}

impl ModelSpec {
    pub fn model1(m: usize, n: usize, protocol: SimProtocol) -> Self {
        Self { kind: ModelKind::Model1, m, n, protocol }
    }

    pub fn model2(m: usize, n: usize, preset: CovariatePreset, protocol: SimProtocol) -> Self {
        Self { kind: ModelKind::Model2 { lags: preset.lags() }, m, n, protocol }
    }

    pub fn iid_quadratic(m: usize, n: usize, half_width: f64, protocol: SimProtocol) -> Self {
        Self { kind: ModelKind::IidQuadratic { half_width }, m, n, protocol }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        s.protocol.seed = seed;
        s
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.m == 0 || self.n == 0 {
            return Err(SimError::InvalidSpec("m and n must be >= 1".into()));
        }
        if self.protocol.sweeps == 0 {
            return Err(SimError::InvalidSpec("sweeps must be >= 1".into()));
        }
        if !(self.protocol.noise_sd > 0.0 && self.protocol.noise_sd.is_finite()) {
            return Err(SimError::InvalidSpec("noise_sd must be positive and finite".into()));
        }
        match &self.kind {
            ModelKind::Model2 { lags } => {
                if let Some(&(a, b)) = lags
                    .offsets()
                    .iter()
                    .find(|&&(a, b)| a.unsigned_abs().max(b.unsigned_abs()) as usize > self.protocol.margin)
                {
                    return Err(SimError::LagOutOfMargin(a, b, self.protocol.margin));
                }
            }
            ModelKind::IidQuadratic { half_width } => {
                if !(*half_width > 0.0 && half_width.is_finite()) {
                    return Err(SimError::InvalidSpec("half_width must be positive and finite".into()));
                }
            }
            ModelKind::Model1 => {}
        }
        Ok(())
    }

    fn extended_dims(&self) -> (usize, usize) {
        let margin = self.protocol.margin;
        (self.m + 2 * margin, self.n + 2 * margin)
    }

    fn shape(&self) -> LatticeShape {
        LatticeShape::new(vec![self.m, self.n]).expect("validated dims")
    }
}

/// Seed of replication `r`: the first output word of ChaCha20 keyed by
/// `base` on stream `r`.
pub fn replication_seed(base: u64, r: u64) -> u64 {
    let mut rng = ChaCha20Rng::seed_from_u64(base);
    rng.set_stream(r);
    rng.next_u64()
}

#[inline]
fn update_site(f: &mut Grid, noise: &Grid, i: usize, j: usize) {
    let (ii, jj) = (i as i64, j as i64);
    let s = f.get_or_zero(ii - 1, jj) + f.get_or_zero(ii, jj - 1) + f.get_or_zero(ii + 1, jj) + f.get_or_zero(ii, jj + 1);
    f.data[i * f.cols + j] = s.sin() + noise.get(i, j);
}

fn one_sweep(f: &mut Grid, noise: &Grid, order: SweepOrder) {
    match order {
        SweepOrder::Raster => {
            for i in 0..f.rows {
                for j in 0..f.cols {
                    update_site(f, noise, i, j);
                }
            }
        }
        SweepOrder::Checkerboard => {
            for parity in 0..2 {
                for i in 0..f.rows {
                    for j in ((i + parity) % 2..f.cols).step_by(2) {
                        update_site(f, noise, i, j);
                    }
                }
            }
        }
    }
}

/// `sweeps` in-place raster passes of the sine autoregression from the zero
/// grid, reusing `noise` on every pass.
pub fn sweep_field(noise: &Grid, sweeps: usize) -> Grid {
    sweep_field_ordered(noise, sweeps, SweepOrder::Raster)
}

pub fn sweep_field_ordered(noise: &Grid, sweeps: usize, order: SweepOrder) -> Grid {
    let mut f = Grid::zeros(noise.rows, noise.cols);
    for _ in 0..sweeps {
        one_sweep(&mut f, noise, order);
    }
    f
}

/// Draws noise and sweeps according to the protocol.
fn generate_autoregression<R: Rng>(rows: usize, cols: usize, p: &SimProtocol, rng: &mut R) -> Grid {
    match p.noise_mode {
        NoiseMode::Fixed => {
            let e = Grid::normal(rows, cols, p.noise_sd, rng);
            sweep_field_ordered(&e, p.sweeps, p.order)
        }
        NoiseMode::RedrawPerSweep => {
            let mut f = Grid::zeros(rows, cols);
            for _ in 0..p.sweeps {
                let e = Grid::normal(rows, cols, p.noise_sd, rng);
                one_sweep(&mut f, &e, p.order);
            }
            f
        }
    }
}

/// Model 1 on the central `m × n` window.
pub fn simulate_model1(spec: &ModelSpec) -> Result<LatticeField, SimError> {
    spec.validate()?;
    if spec.kind != ModelKind::Model1 {
        return Err(SimError::InvalidSpec("simulate_model1 needs a model1 spec".into()));
    }
    let p = &spec.protocol;
    let (rows, cols) = spec.extended_dims();
    let mut rng = ChaCha20Rng::seed_from_u64(p.seed);
    let x_grid = generate_autoregression(rows, cols, p, &mut rng);
    let u = Grid::normal(rows, cols, p.noise_sd, &mut rng);

    let mut y = Vec::with_capacity(spec.m * spec.n);
    let mut x = Vec::with_capacity(spec.m * spec.n);
    for i in p.margin..p.margin + spec.m {
        for j in p.margin..p.margin + spec.n {
            let xv = x_grid.get(i, j);
            x.push(xv);
            y.push(model1_regression(xv) + u.get(i, j));
        }
    }
    Ok(LatticeField::from_dense(spec.shape(), 1, y, x).expect("finite simulated values"))
}

/// Model 2 output together with the full extended `Y` grid.
#[derive(Debug, Clone)]
pub struct Model2Sample {
    pub field: LatticeField,
    pub extended_y: Grid,
}

pub fn simulate_model2(spec: &ModelSpec) -> Result<LatticeField, SimError> {
    simulate_model2_detailed(spec).map(|s| s.field)
}

pub fn simulate_model2_detailed(spec: &ModelSpec) -> Result<Model2Sample, SimError> {
    spec.validate()?;
    let ModelKind::Model2 { lags } = &spec.kind else {
        return Err(SimError::InvalidSpec("simulate_model2 needs a model2 spec".into()));
    };
    let p = &spec.protocol;
    let (rows, cols) = spec.extended_dims();
    let mut rng = ChaCha20Rng::seed_from_u64(p.seed);
    let y_grid = generate_autoregression(rows, cols, p, &mut rng);

    let mut y = Vec::with_capacity(spec.m * spec.n);
    for i in p.margin..p.margin + spec.m {
        for j in p.margin..p.margin + spec.n {
            y.push(y_grid.get(i, j));
        }
    }
    let x = lagged_covariate(&y_grid, lags, p.margin, spec.m, spec.n)?;
    let field = LatticeField::from_dense(spec.shape(), 1, y, x).expect("finite simulated values");
    Ok(Model2Sample { field, extended_y: y_grid })
}

/// `X[i,j] = sum over lags of Y[i+a, j+b]` for the central `m × n` window
/// starting at `(margin, margin)`, read from the full grid (no zero padding).
pub fn lagged_covariate(y: &Grid, lags: &LagSet, margin: usize, m: usize, n: usize) -> Result<Vec<f64>, SimError> {
    if let Some(&(a, b)) = lags.offsets().iter().find(|&&(a, b)| {
        let (i_lo, j_lo) = (margin as i64 + a, margin as i64 + b);
        i_lo < 0 || j_lo < 0 || i_lo + m as i64 > y.rows as i64 || j_lo + n as i64 > y.cols as i64
    }) {
        return Err(SimError::LagOutOfMargin(a, b, margin));
    }
    let mut x = Vec::with_capacity(m * n);
    for i in margin..margin + m {
        for j in margin..margin + n {
            x.push(
                lags.offsets()
                    .iter()
                    .map(|&(a, b)| y.get((i as i64 + a) as usize, (j as i64 + b) as usize))
                    .sum(),
            );
        }
    }
    Ok(x)
}

pub fn simulate_iid_quadratic(spec: &ModelSpec) -> Result<LatticeField, SimError> {
    spec.validate()?;
    let ModelKind::IidQuadratic { half_width } = spec.kind else {
        return Err(SimError::InvalidSpec("simulate_iid_quadratic needs an iid spec".into()));
    };
    let total = spec.m * spec.n;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.protocol.seed);
    let x: Vec<f64> = (0..total).map(|_| rng.random_range(-half_width..half_width)).collect();
    let sd = spec.protocol.noise_sd;
    let y: Vec<f64> = x
        .iter()
        .map(|&xv| {
            let e: f64 = StandardNormal.sample(&mut rng);
            xv * xv + sd * e
        })
        .collect();
    Ok(LatticeField::from_dense(spec.shape(), 1, y, x).expect("finite simulated values"))
}

/// Dispatches on the model kind.
pub fn simulate(spec: &ModelSpec) -> Result<LatticeField, SimError> {
    match spec.kind {
        ModelKind::Model1 => simulate_model1(spec),
        ModelKind::Model2 { .. } => simulate_model2(spec),
        ModelKind::IidQuadratic { .. } => simulate_iid_quadratic(spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_is_fixed_point() {
        let noise = Grid::zeros(12, 9);
        let out = sweep_field(&noise, 20);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_bounded_by_noise() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let noise = Grid::normal(20, 20, 2.0, &mut rng);
        for order in [SweepOrder::Raster, SweepOrder::Checkerboard] {
            let out = sweep_field_ordered(&noise, 5, order);
            assert!(out.max_abs() <= 1.0 + noise.max_abs());
        }
    }

    /// Reference sweep over nested vectors, written without the Grid helpers.
    fn reference_sweep(noise: &[Vec<f64>], sweeps: usize) -> Vec<Vec<f64>> {
        let (r, c) = (noise.len(), noise[0].len());
        let mut f = vec![vec![0.0; c]; r];
        for _ in 0..sweeps {
            for i in 0..r {
                for j in 0..c {
                    let mut s = 0.0;
                    if i > 0 {
                        s += f[i - 1][j];
                    }
                    if j > 0 {
                        s += f[i][j - 1];
                    }
                    if i + 1 < r {
                        s += f[i + 1][j];
                    }
                    if j + 1 < c {
                        s += f[i][j + 1];
                    }
                    f[i][j] = f64::sin(s) + noise[i][j];
                }
            }
        }
        f
    }

    #[test]
    fn impulse_sweep_matches_reference() {
        let mut noise = Grid::zeros(3, 3);
        noise.data[4] = 1.0;
        let out = sweep_field(&noise, 1);
        let nested: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| noise.get(i, j)).collect()).collect();
        let reference = reference_sweep(&nested, 1);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(out.get(i, j), reference[i][j]);
            }
        }
        // sites after the impulse read it as an already-updated neighbour
        let s1 = 1f64.sin();
        assert_eq!(out.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, s1, 0.0, s1, (2.0 * s1).sin()]);
    }

    #[test]
    fn random_sweeps_match_reference() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let noise = Grid::normal(7, 5, 1.0, &mut rng);
        let nested: Vec<Vec<f64>> = (0..7).map(|i| (0..5).map(|j| noise.get(i, j)).collect()).collect();
        let out = sweep_field(&noise, 20);
        let reference = reference_sweep(&nested, 20);
        for i in 0..7 {
            for j in 0..5 {
                assert_eq!(out.get(i, j), reference[i][j]);
            }
        }
    }

    #[test]
    fn checkerboard_differs_from_raster() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let noise = Grid::normal(8, 8, 1.0, &mut rng);
        let a = sweep_field_ordered(&noise, 1, SweepOrder::Raster);
        let b = sweep_field_ordered(&noise, 1, SweepOrder::Checkerboard);
        assert_ne!(a, b);
    }

    #[test]
    fn presets_match_definitions() {
        assert_eq!(CovariatePreset::X0.lags().offsets(), &[(-1, 0), (0, -1), (1, 0), (0, 1)]);
        assert_eq!(CovariatePreset::Xc.lags().offsets().len(), 8);
        assert_eq!(CovariatePreset::Xd.lags().offsets(), &[(-1, 0), (0, -1)]);
        assert_eq!(CovariatePreset::Xe.lags().offsets(), &[(1, 0), (0, 1)]);
        assert_eq!(CovariatePreset::Xf.lags().offsets(), &[(-2, 0), (0, -2), (-1, 0), (0, -1)]);
        for p in CovariatePreset::ALL {
            assert!(LagSet::new(p.lags().offsets().to_vec()).is_ok());
            assert_eq!(p.name().parse::<CovariatePreset>().unwrap(), p);
        }
    }

    #[test]
    fn lag_set_validation() {
        assert!(LagSet::new(vec![]).is_err());
        assert!(LagSet::new(vec![(0, 0)]).is_err());
        assert!(LagSet::new(vec![(1, 0), (1, 0)]).is_err());
    }

    #[test]
    fn lag_beyond_margin_rejected() {
        let lags = LagSet::new(vec![(3, 0)]).unwrap();
        let spec = ModelSpec {
            kind: ModelKind::Model2 { lags },
            m: 5,
            n: 5,
            protocol: SimProtocol { margin: 2, ..SimProtocol::default() },
        };
        assert_eq!(simulate_model2(&spec).unwrap_err(), SimError::LagOutOfMargin(3, 0, 2));
    }

    #[test]
    fn constant_field_lag() {
        let y = Grid::from_vec(4, 4, vec![2.5; 16]);
        let lags = LagSet::new(vec![(-1, 0)]).unwrap();
        let x = lagged_covariate(&y, &lags, 1, 2, 2).unwrap();
        assert_eq!(x, vec![2.5; 4]);
        let far = LagSet::new(vec![(0, 2)]).unwrap();
        assert!(lagged_covariate(&y, &far, 1, 2, 2).is_err());
    }

    #[test]
    fn spec_validation() {
        let bad = ModelSpec::model1(0, 5, SimProtocol::default());
        assert!(simulate(&bad).is_err());
        let bad = ModelSpec::model1(5, 5, SimProtocol { sweeps: 0, ..SimProtocol::default() });
        assert!(simulate(&bad).is_err());
        let bad = ModelSpec::model1(5, 5, SimProtocol { noise_sd: 0.0, ..SimProtocol::default() });
        assert!(simulate(&bad).is_err());
    }

    #[test]
    fn replication_seeds_differ() {
        let a: Vec<u64> = (0..5).map(|r| replication_seed(42, r)).collect();
        for i in 0..5 {
            for j in 0..i {
                assert_ne!(a[i], a[j]);
            }
        }
        assert_eq!(replication_seed(42, 3), a[3]);
        assert_ne!(replication_seed(43, 0), a[0]);
    }

    #[test]
    fn iid_design_in_range() {
        let spec = ModelSpec::iid_quadratic(10, 10, 1.0, SimProtocol { seed: 5, ..SimProtocol::default() });
        let f = simulate(&spec).unwrap();
        assert!(f.x_flat().iter().all(|x| x.abs() <= 1.0));
    }
}
