//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use hmmar::harness::ExperimentConfig;
use nalgebra::DMatrix;

/// Bundled example configuration.
pub fn example_config() -> ExperimentConfig {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/example.json");
    ExperimentConfig::from_path(&path).expect("bundled example config must parse")
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Adaptive Simpson quadrature on `[a, b]`, pre-split into `pieces` panels so
/// narrow peaks are not stepped over.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, pieces: usize) -> f64 {
    let w = (b - a) / pieces as f64;
    (0..pieces)
        .map(|k| {
            let lo = a + w * k as f64;
            let hi = lo + w;
            let (fa, fm, fb) = (f(lo), f(0.5 * (lo + hi)), f(hi));
            let whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
            simpson_step(f, lo, hi, fa, fm, fb, whole, tol / pieces as f64, 40)
        })
        .sum()
}

/// Density of `N(0, cov)` at `y`, via the matrix inverse and determinant.
pub fn mvn_pdf(y: &[f64], cov: &DMatrix<f64>) -> f64 {
    let d = y.len();
    let v = nalgebra::DVector::from_column_slice(y);
    let inv = cov
        .clone()
        .try_inverse()
        .expect("covariance must be invertible");
    let quad = (v.transpose() * inv * &v)[(0, 0)];
    (-0.5 * quad).exp() / ((2.0 * PI).powi(d as i32) * cov.determinant()).sqrt()
}

/// General UCV(H) for the normal kernel: the double sum of
/// `(K_H * K_H - 2 K_H)(Y_i - Y_j)` with `K_H * K_H = N(0, 2H)`, plus
/// `R(K) |H|^{-1/2} / N` with `R(K) = (4 pi)^{-d/2}`.
pub fn ucv_general(points: &[Vec<f64>], h_mat: &DMatrix<f64>) -> f64 {
    let n = points.len();
    let d = points[0].len();
    let two_h = h_mat * 2.0;
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let diff: Vec<f64> = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| a - b)
                .collect();
            sum += mvn_pdf(&diff, &two_h) - 2.0 * mvn_pdf(&diff, h_mat);
        }
    }
    let r_k = (4.0 * PI).powf(-(d as f64) / 2.0);
    sum / (n * (n - 1)) as f64 + r_k / (n as f64 * h_mat.determinant().sqrt())
}

/// Smallest value of `f` on the grid `hi * k / points`, `k = 1..=points`.
pub fn grid_min(f: impl Fn(f64) -> f64, hi: f64, points: usize) -> (f64, f64) {
    (1..=points)
        .map(|k| hi * k as f64 / points as f64)
        .map(|h| (h, f(h)))
        .fold((f64::NAN, f64::INFINITY), |best, cur| {
            if cur.1 < best.1 {
                cur
            } else {
                best
            }
        })
}
