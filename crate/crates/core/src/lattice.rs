//! Rectangular-lattice samples `{(Y_i, X_i) : i in I_n}` and their CSV form.
//!
//! Sites are 1-based, `1 <= i_k <= n_k`, and storage is dense: one record per
//! site in lexicographic order of `(i_1, ..., i_N)` with `i_N` varying fastest.
//!
//! The CSV layout is `i1,...,iN,y,x1,...,xd` with one row per site. Floats are
//! written with 17 significant digits so that a write/read cycle is bit-exact.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LatticeError {
    #[error("lattice shape must have at least one dimension, all >= 1")]
    InvalidShape,
    #[error("covariate dimension must be >= 1")]
    InvalidCovariateDim,
    #[error("site {0} lies outside the lattice")]
    SiteOutOfRange(Site),
    #[error("site {0} is missing")]
    MissingSite(Site),
    #[error("site {0} appears more than once")]
    DuplicateSite(Site),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value at site {0}")]
    NonFiniteValue(Site),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A lattice index `(i_1, ..., i_N)`, 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site(pub Vec<usize>);

impl Site {
    pub fn coords(&self) -> &[usize] {
        &self.0
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (k, c) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

impl From<Vec<usize>> for Site {
    fn from(v: Vec<usize>) -> Self {
        Site(v)
    }
}

/// Dimensions `(n_1, ..., n_N)` of the observed rectangle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatticeShape {
    dims: Vec<usize>,
}

impl LatticeShape {
    pub fn new(dims: Vec<usize>) -> Result<Self, LatticeError> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(LatticeError::InvalidShape);
        }
        Ok(Self { dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Number of lattice dimensions `N`.
    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Total sample size `n̂ = prod n_k`.
    pub fn total(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn contains(&self, site: &Site) -> bool {
        site.0.len() == self.dims.len()
            && site.0.iter().zip(&self.dims).all(|(&i, &n)| i >= 1 && i <= n)
    }

    /// Position of `site` in lexicographic storage order.
    pub fn linear_index(&self, site: &Site) -> Option<usize> {
        if !self.contains(site) {
            return None;
        }
        Some(
            site.0
                .iter()
                .zip(&self.dims)
                .fold(0, |acc, (&i, &n)| acc * n + (i - 1)),
        )
    }

    pub fn site_at(&self, mut index: usize) -> Site {
        let mut coords = vec![0; self.dims.len()];
        for k in (0..self.dims.len()).rev() {
            coords[k] = index % self.dims[k] + 1;
            index /= self.dims[k];
        }
        Site(coords)
    }

    /// All sites in lexicographic order.
    pub fn sites(&self) -> impl Iterator<Item = Site> + '_ {
        (0..self.total()).map(move |k| self.site_at(k))
    }
}

/// Fully observed field on a lattice. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeField {
    shape: LatticeShape,
    covariate_dim: usize,
    y: Vec<f64>,
    // row-major, `covariate_dim` values per site
    x: Vec<f64>,
}

impl LatticeField {
    /// Builds a field from arbitrary-order records, checking full coverage.
    pub fn from_records<I>(records: I, shape: LatticeShape, d: usize) -> Result<Self, LatticeError>
    where
        I: IntoIterator<Item = (Site, f64, Vec<f64>)>,
    {
        if d == 0 {
            return Err(LatticeError::InvalidCovariateDim);
        }
        let total = shape.total();
        let mut seen = vec![false; total];
        let mut y = vec![0.0; total];
        let mut x = vec![0.0; total * d];
        for (site, yv, xv) in records {
            if site.0.len() != shape.rank() {
                return Err(LatticeError::DimensionMismatch {
                    expected: shape.rank(),
                    got: site.0.len(),
                });
            }
            let k = shape
                .linear_index(&site)
                .ok_or_else(|| LatticeError::SiteOutOfRange(site.clone()))?;
            if xv.len() != d {
                return Err(LatticeError::DimensionMismatch { expected: d, got: xv.len() });
            }
            if !yv.is_finite() || xv.iter().any(|v| !v.is_finite()) {
                return Err(LatticeError::NonFiniteValue(site));
            }
            if seen[k] {
                return Err(LatticeError::DuplicateSite(site));
            }
            seen[k] = true;
            y[k] = yv;
            x[k * d..(k + 1) * d].copy_from_slice(&xv);
        }
        if let Some(k) = seen.iter().position(|&s| !s) {
            return Err(LatticeError::MissingSite(shape.site_at(k)));
        }
        Ok(Self { shape, covariate_dim: d, y, x })
    }

    /// Builds a field from values already in lexicographic site order.
    pub fn from_dense(
        shape: LatticeShape,
        d: usize,
        y: Vec<f64>,
        x: Vec<f64>,
    ) -> Result<Self, LatticeError> {
        if d == 0 {
            return Err(LatticeError::InvalidCovariateDim);
        }
        let total = shape.total();
        if y.len() != total {
            return Err(LatticeError::DimensionMismatch { expected: total, got: y.len() });
        }
        if x.len() != total * d {
            return Err(LatticeError::DimensionMismatch { expected: total * d, got: x.len() });
        }
        for k in 0..total {
            if !y[k].is_finite() || x[k * d..(k + 1) * d].iter().any(|v| !v.is_finite()) {
                return Err(LatticeError::NonFiniteValue(shape.site_at(k)));
            }
        }
        Ok(Self { shape, covariate_dim: d, y, x })
    }

    pub fn shape(&self) -> &LatticeShape {
        &self.shape
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariate_dim
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Covariates, flattened with `covariate_dim` values per site.
    pub fn x_flat(&self) -> &[f64] {
        &self.x
    }

    pub fn x_at(&self, k: usize) -> &[f64] {
        &self.x[k * self.covariate_dim..(k + 1) * self.covariate_dim]
    }

    /// `(site, y, x)` in lexicographic order.
    pub fn records(&self) -> impl Iterator<Item = (Site, f64, &[f64])> + '_ {
        (0..self.len()).map(move |k| (self.shape.site_at(k), self.y[k], self.x_at(k)))
    }

    /// Copy of this field with the responses replaced.
    pub fn with_y(&self, y: Vec<f64>) -> Result<Self, LatticeError> {
        Self::from_dense(self.shape.clone(), self.covariate_dim, y, self.x.clone())
    }

    pub fn write_csv_to<W: Write>(&self, mut w: W) -> Result<(), LatticeError> {
        let mut header: Vec<String> = (1..=self.shape.rank()).map(|k| format!("i{k}")).collect();
        header.push("y".into());
        header.extend((1..=self.covariate_dim).map(|k| format!("x{k}")));
        writeln!(w, "{}", header.join(","))?;
        for (site, y, x) in self.records() {
            let mut line = String::new();
            for c in &site.0 {
                line.push_str(&c.to_string());
                line.push(',');
            }
            line.push_str(&format_f64(y));
            for v in x {
                line.push(',');
                line.push_str(&format_f64(*v));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), LatticeError> {
        let mut buf = Vec::new();
        self.write_csv_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_csv_from<R: BufRead>(reader: R) -> Result<Self, LatticeError> {
        let mut lines = reader.lines().enumerate();
        let (rank, d) = loop {
            match lines.next() {
                None => {
                    return Err(LatticeError::Parse { line: 1, message: "missing header".into() })
                }
                Some((idx, line)) => {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    break parse_header(&line).map_err(|message| LatticeError::Parse {
                        line: idx + 1,
                        message,
                    })?;
                }
            }
        };

        let mut rows: Vec<(Site, f64, Vec<f64>)> = Vec::new();
        let mut max_idx = vec![0usize; rank];
        for (idx, line) in lines {
            let line = line?;
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| LatticeError::Parse { line: lineno, message };
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != rank + 1 + d {
                return Err(parse_err(format!(
                    "expected {} columns, found {}",
                    rank + 1 + d,
                    cells.len()
                )));
            }
            let mut coords = Vec::with_capacity(rank);
            for (k, cell) in cells[..rank].iter().enumerate() {
                let v: usize = cell
                    .parse()
                    .map_err(|_| parse_err(format!("invalid index i{} = {cell:?}", k + 1)))?;
                if v == 0 {
                    return Err(parse_err(format!("index i{} must be >= 1", k + 1)));
                }
                max_idx[k] = max_idx[k].max(v);
                coords.push(v);
            }
            let y = parse_f64(cells[rank]).map_err(|_| parse_err(format!("invalid y = {:?}", cells[rank])))?;
            let mut x = Vec::with_capacity(d);
            for (k, cell) in cells[rank + 1..].iter().enumerate() {
                x.push(parse_f64(cell).map_err(|_| parse_err(format!("invalid x{} = {cell:?}", k + 1)))?);
            }
            rows.push((Site(coords), y, x));
        }
        if rows.is_empty() {
            return Err(LatticeError::Parse { line: 2, message: "no data rows".into() });
        }
        let shape = LatticeShape::new(max_idx)?;
        Self::from_records(rows, shape, d)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self, LatticeError> {
        let file = fs::File::open(path)?;
        Self::read_csv_from(BufReader::new(file))
    }
}

/// Round-trip-safe text form: 17 significant digits in scientific notation.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(s: &str) -> Result<f64, ()> {
    let v: f64 = s.parse().map_err(|_| ())?;
    Ok(v)
}

fn parse_header(line: &str) -> Result<(usize, usize), String> {
    let cols: Vec<&str> = line.split(',').map(str::trim).collect();
    let y_pos = cols
        .iter()
        .position(|&c| c == "y")
        .ok_or_else(|| "header has no `y` column".to_string())?;
    if y_pos == 0 {
        return Err("header needs at least one index column before `y`".into());
    }
    for (k, c) in cols[..y_pos].iter().enumerate() {
        if *c != format!("i{}", k + 1) {
            return Err(format!("expected column `i{}`, found `{c}`", k + 1));
        }
    }
    let d = cols.len() - y_pos - 1;
    if d == 0 {
        return Err("header needs at least one covariate column after `y`".into());
    }
    for (k, c) in cols[y_pos + 1..].iter().enumerate() {
        if *c != format!("x{}", k + 1) {
            return Err(format!("expected column `x{}`, found `{c}`", k + 1));
        }
    }
    Ok((y_pos, d))
}
