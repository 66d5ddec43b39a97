//! Test-only reference implementations, independent of the library code paths.
#![allow(dead_code)]

use std::f64::consts::PI;

/// Univariate kernels written out from their textbook definitions.
pub fn ref_kernel1(name: &str, u: f64) -> f64 {
    match name {
        "gaussian" => (-(u * u) / 2.0).exp() / (2.0 * PI).sqrt(),
        "epanechnikov" => {
            if u.abs() <= 1.0 {
                3.0 / 4.0 * (1.0 - u * u)
            } else {
                0.0
            }
        }
        "uniform" => {
            if u.abs() <= 1.0 {
                0.5
            } else {
                0.0
            }
        }
        other => panic!("unknown kernel {other}"),
    }
}

pub fn ref_kernel(name: &str, u: &[f64]) -> f64 {
    u.iter().map(|&v| ref_kernel1(name, v)).product()
}

/// Gaussian elimination with full pivoting. Returns `None` for a (numerically)
/// singular system.
pub fn full_pivot_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let mut col_perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let (mut pr, mut pc, mut best) = (k, k, 0.0);
        for (i, row) in a.iter().enumerate().skip(k) {
            for (j, v) in row.iter().enumerate().skip(k) {
                if v.abs() > best {
                    best = v.abs();
                    pr = i;
                    pc = j;
                }
            }
        }
        if best < 1e-300 {
            return None;
        }
        a.swap(k, pr);
        b.swap(k, pr);
        for row in a.iter_mut() {
            row.swap(k, pc);
        }
        col_perm.swap(k, pc);
        for i in k + 1..n {
            let factor = a[i][k] / a[k][k];
            for j in k..n {
                a[i][j] -= factor * a[k][j];
            }
            b[i] -= factor * b[k];
        }
    }
    let mut y = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| a[k][j] * y[j]).sum();
        y[k] = (b[k] - s) / a[k][k];
    }
    let mut x = vec![0.0; n];
    for k in 0..n {
        x[col_perm[k]] = y[k];
    }
    Some(x)
}

/// Weighted least squares of `y` on `(1, X - x0)` via explicit normal
/// equations. Returns `(intercept, slopes)`.
pub fn wls_oracle(xs: &[Vec<f64>], ys: &[f64], x0: &[f64], weights: &[f64]) -> Option<(f64, Vec<f64>)> {
    let p = x0.len() + 1;
    let mut a = vec![vec![0.0; p]; p];
    let mut b = vec![0.0; p];
    for ((x, &y), &w) in xs.iter().zip(ys).zip(weights) {
        let mut row = vec![1.0];
        row.extend(x.iter().zip(x0).map(|(a, c)| a - c));
        for i in 0..p {
            b[i] += w * row[i] * y;
            for j in 0..p {
                a[i][j] += w * row[i] * row[j];
            }
        }
    }
    let s = full_pivot_solve(a, b)?;
    Some((s[0], s[1..].to_vec()))
}

/// Local-constant weighted least squares: the weighted mean.
pub fn weighted_mean(ys: &[f64], weights: &[f64]) -> f64 {
    let num: f64 = ys.iter().zip(weights).map(|(y, w)| y * w).sum();
    let den: f64 = weights.iter().sum();
    num / den
}

/// Midpoint Riemann sum over `[lo, hi]^d` with `points_per_axis^d` cells.
pub fn riemann(d: usize, lo: f64, hi: f64, points_per_axis: usize, f: impl Fn(&[f64]) -> f64) -> f64 {
    let h = (hi - lo) / points_per_axis as f64;
    let total = points_per_axis.pow(d as u32);
    let mut u = vec![0.0; d];
    let mut sum = 0.0;
    for k in 0..total {
        let mut idx = k;
        for v in u.iter_mut() {
            *v = lo + (idx % points_per_axis) as f64 * h + 0.5 * h;
            idx /= points_per_axis;
        }
        sum += f(&u);
    }
    sum * h.powi(d as i32)
}
