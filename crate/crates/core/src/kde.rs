//! Delay embedding, normal-kernel density estimation with bandwidth `H = h^2 I_d`,
//! unbiased cross-validation bandwidth selection and the conditional kernel
//! weights used to estimate `f(x_n | x_{n-tau}^{n-1})`.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Lower end of the UCV search bracket, as a fraction of `h+`.
pub const BRACKET_LOWER_FRACTION: f64 = 1e-6;
/// Points in the coarse log-spaced scan preceding the golden-section refinement.
pub const COARSE_GRID_POINTS: usize = 32;
/// Iteration cap of the golden-section refinement.
pub const GOLDEN_MAX_ITER: usize = 200;
/// Abscissa tolerance of the golden-section refinement, as a fraction of `h+`.
pub const GOLDEN_REL_TOL: f64 = 1e-4;

/// `N` delay vectors in `R^d` built from a scalar series with stride `l`:
/// `Y_i = (x_{(i-1)l+1}, ..., x_{(i-1)l+d})` in 1-based indexing.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSample {
    data: Vec<f64>,
    dim: usize,
    stride: usize,
}

impl EmbeddedSample {
    /// Wraps explicit points, each of dimension `dim`.
    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let dim = points.first().map_or(0, Vec::len);
        if dim == 0 || points.iter().any(|p| p.len() != dim) {
            return Err(Error::InsufficientData(
                "points must be non-empty with a common positive dimension".into(),
            ));
        }
        Ok(Self {
            data: points.concat(),
            dim,
            stride: 1,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Number of vectors `N`.
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Applies `f` to every coordinate.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }
}

/// Delay-embeds `x` into `d`-dimensional vectors with stride `l`.
pub fn embed(x: &[f64], d: usize, l: usize) -> Result<EmbeddedSample> {
    if d == 0 || l == 0 {
        return Err(Error::InsufficientData(format!(
            "embedding needs d >= 1 and l >= 1, got d = {d}, l = {l}"
        )));
    }
    if x.len() < d {
        return Err(Error::InsufficientData(format!(
            "series of length {} is shorter than embedding dimension {d}",
            x.len()
        )));
    }
    let count = 1 + (x.len() - d) / l;
    let mut data = Vec::with_capacity(count * d);
    for i in 0..count {
        data.extend_from_slice(&x[i * l..i * l + d]);
    }
    Ok(EmbeddedSample {
        data,
        dim: d,
        stride: l,
    })
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// `f_hat(y; h) = 1 / (N (2 pi)^{d/2} h^d) * sum_i exp(-|y - Y_i|^2 / (2 h^2))`.
pub fn kde_eval(sample: &EmbeddedSample, h: f64, y: &[f64]) -> f64 {
    assert!(h > 0.0, "bandwidth must be positive");
    assert_eq!(y.len(), sample.dim(), "query dimension mismatch");
    let d = sample.dim() as f64;
    let norm = sample.len() as f64 * (2.0 * PI).powf(d / 2.0) * h.powf(d);
    let two_h2 = 2.0 * h * h;
    let sum: f64 = sample
        .points()
        .map(|p| (-squared_distance(y, p) / two_h2).exp())
        .sum();
    sum / norm
}

/// UCV criterion for a fixed sample, with the pairwise squared distances
/// `Delta x_ij` cached so repeated evaluations cost O(N^2 / 2) exponentials.
#[derive(Debug, Clone)]
pub struct UcvCriterion {
    count: usize,
    dim: usize,
    pair_distances: Vec<f64>,
}

impl UcvCriterion {
    pub fn new(sample: &EmbeddedSample) -> Result<Self> {
        let count = sample.len();
        if count < 2 {
            return Err(Error::InsufficientData(format!(
                "UCV needs at least 2 points, got {count}"
            )));
        }
        let mut pair_distances = Vec::with_capacity(count * (count - 1) / 2);
        for i in 0..count {
            let yi = sample.point(i);
            for j in (i + 1)..count {
                pair_distances.push(squared_distance(yi, sample.point(j)));
            }
        }
        Ok(Self {
            count,
            dim: sample.dim(),
            pair_distances,
        })
    }

    /// `UCV(h)` for the normal kernel with `H = h^2 I_d`.
    pub fn eval(&self, h: f64) -> f64 {
        let n = self.count as f64;
        let d = self.dim as f64;
        let hd = h.powf(d);
        let conv_scale = 2f64.powf(-d / 2.0);
        let inv4h2 = 1.0 / (4.0 * h * h);
        let inv2h2 = 1.0 / (2.0 * h * h);
        // each unordered pair appears twice in the i != j sum
        let half_sum: f64 = self
            .pair_distances
            .iter()
            .map(|&dx| conv_scale * (-dx * inv4h2).exp() - 2.0 * (-dx * inv2h2).exp())
            .sum();
        let cross = 2.0 * half_sum / (n * (n - 1.0) * (2.0 * PI).powf(d / 2.0) * hd);
        cross + 1.0 / (n * (4.0 * PI).powf(d / 2.0) * hd)
    }
}

/// `UCV(h)` evaluated directly.
pub fn ucv_objective(sample: &EmbeddedSample, h: f64) -> Result<f64> {
    Ok(UcvCriterion::new(sample)?.eval(h))
}

/// Oversmoothed bandwidth `h+ = (4 / (N (d + 2)))^{1/(d+4)} * max_k sigma_k`.
pub fn oversmoothed_bandwidth(sample: &EmbeddedSample) -> Result<f64> {
    let count = sample.len();
    if count < 2 {
        return Err(Error::InsufficientData(format!(
            "oversmoothed bandwidth needs at least 2 points, got {count}"
        )));
    }
    let d = sample.dim();
    let n = count as f64;
    let max_sd = (0..d)
        .map(|k| {
            let mean = sample.points().map(|p| p[k]).sum::<f64>() / n;
            let ss: f64 = sample.points().map(|p| (p[k] - mean).powi(2)).sum();
            (ss / (n - 1.0)).sqrt()
        })
        .fold(0.0, f64::max);
    if !(max_sd > 0.0) {
        return Err(Error::DegenerateSample(
            "every coordinate has zero sample standard deviation".into(),
        ));
    }
    let d = d as f64;
    Ok((4.0 / (n * (d + 2.0))).powf(1.0 / (d + 4.0)) * max_sd)
}

/// Golden-section minimization of `f` on `[lo, hi]`. Returns the abscissa.
pub fn golden_section_min(
    f: impl Fn(f64) -> f64,
    mut lo: f64,
    mut hi: f64,
    tol: f64,
    max_iter: usize,
) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..max_iter {
        if hi - lo <= tol {
            break;
        }
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
    }
    if fc <= fd {
        c
    } else {
        d
    }
}

/// Selected bandwidth together with the search bracket it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandwidthChoice {
    pub h: f64,
    pub h_plus: f64,
    pub ucv: f64,
}

/// `argmin_h UCV(h)` over `[1e-6 h+, h+]`: a 32-point log-grid scan picks the
/// sub-bracket around the best grid point, then golden section refines it.
pub fn ucv_bandwidth(sample: &EmbeddedSample) -> Result<BandwidthChoice> {
    let h_plus = oversmoothed_bandwidth(sample)?;
    let criterion = UcvCriterion::new(sample)?;
    let lo = BRACKET_LOWER_FRACTION * h_plus;
    let log_span = (h_plus / lo).ln();
    let grid: Vec<f64> = (0..COARSE_GRID_POINTS)
        .map(|k| {
            if k + 1 == COARSE_GRID_POINTS {
                h_plus
            } else {
                lo * (log_span * k as f64 / (COARSE_GRID_POINTS - 1) as f64).exp()
            }
        })
        .collect();
    let values: Vec<f64> = grid.iter().map(|&h| criterion.eval(h)).collect();
    let best = values
        .iter()
        .enumerate()
        .fold(0, |best, (k, v)| if *v < values[best] { k } else { best });

    let left = grid[best.saturating_sub(1)];
    let right = grid[(best + 1).min(COARSE_GRID_POINTS - 1)];
    let refined = golden_section_min(
        |h| criterion.eval(h),
        left,
        right,
        GOLDEN_REL_TOL * h_plus,
        GOLDEN_MAX_ITER,
    );
    let refined_ucv = criterion.eval(refined);
    let (h, ucv) = if refined_ucv <= values[best] {
        (refined, refined_ucv)
    } else {
        (grid[best], values[best])
    };
    Ok(BandwidthChoice { h, h_plus, ucv })
}

/// Kernel estimate of `f(z | x_{n-tau}^{n-1})` as a mixture
/// `sum_i beta_i phi(z; centers_i, h^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalKernel {
    pub weights: Vec<f64>,
    pub centers: Vec<f64>,
    pub bandwidth: f64,
}

/// Weights `beta_{ni}(tau)` from the prefix `x_1..x_{n-1}`.
///
/// Windows of length `tau + 1` start every `l` samples; the first `tau` values of
/// each window are compared with the query `x_{n-tau}..x_{n-1}` and the last
/// value becomes the kernel center. Normalization is done with log-sum-exp.
pub fn conditional_weights(
    prefix: &[f64],
    tau: usize,
    l: usize,
    h: f64,
) -> Result<ConditionalKernel> {
    assert!(h > 0.0, "bandwidth must be positive");
    let d = tau + 1;
    if tau == 0 || l == 0 || prefix.len() < d {
        return Err(Error::InsufficientData(format!(
            "conditional weights need tau >= 1, l >= 1 and at least {d} past values, got {}",
            prefix.len()
        )));
    }
    let query = &prefix[prefix.len() - tau..];
    let count = 1 + (prefix.len() - d) / l;
    let two_h2 = 2.0 * h * h;
    let mut log_w = Vec::with_capacity(count);
    let mut centers = Vec::with_capacity(count);
    for i in 0..count {
        let window = &prefix[i * l..i * l + d];
        log_w.push(-squared_distance(query, &window[..tau]) / two_h2);
        centers.push(window[tau]);
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = log_w.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(ConditionalKernel {
        weights,
        centers,
        bandwidth: h,
    })
}
