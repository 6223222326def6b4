//! Minimization of `F(u) = u' C u - 2 c' u` over the probability simplex.
//!
//! The primary solver enumerates the `2^M` complementary-slackness patterns of
//! the KKT system. With the objective multiplier fixed at `1/2`, stationarity
//! reads `(C u - c)_i - lambda_i + lambda_eq = 0`, so each pattern gives the
//! `(M + 1) x (M + 1)` linear system
//!
//! ```text
//! [ C_free  -I_bound  1 ] [ u_free       ]   [ c ]
//! [ 1'      0         0 ] [ lambda_bound ] = [ 1 ]
//!                         [ lambda_eq    ]
//! ```
//!
//! and the first pattern with nonnegative `u_free` and `lambda_bound` is the
//! global minimizer when `C` is positive definite.

use nalgebra::{DMatrix, DVector};

/// Accepted negative slack on primal entries before clamping.
pub const PRIMAL_TOL: f64 = 1e-9;
/// Accepted negative slack on the inequality multipliers.
pub const DUAL_TOL: f64 = 1e-10;
/// Smallest Cholesky pivot accepted as positive.
pub const PD_PIVOT_TOL: f64 = 1e-12;
/// Iteration cap of the projected-gradient fallback.
pub const FALLBACK_MAX_ITER: usize = 10_000;
/// Gradient-mapping norm at which the fallback stops.
pub const FALLBACK_TOL: f64 = 1e-10;
/// Above this many states the enumeration is not attempted.
pub const MAX_ENUMERATED_STATES: usize = 20;

/// Coefficients of `F(u) = sum_ij C_ij u_i u_j - 2 sum_m c_m u_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub quad: DMatrix<f64>,
    pub linear: DVector<f64>,
}

impl QpProblem {
    pub fn new(quad: DMatrix<f64>, linear: DVector<f64>) -> Self {
        assert!(quad.is_square(), "quadratic term must be square");
        assert_eq!(quad.nrows(), linear.len(), "dimension mismatch");
        Self { quad, linear }
    }

    pub fn from_rows(quad: &[Vec<f64>], linear: &[f64]) -> Self {
        let m = linear.len();
        Self::new(
            DMatrix::from_fn(m, m, |i, j| quad[i][j]),
            DVector::from_column_slice(linear),
        )
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, u: &[f64]) -> f64 {
        let u = DVector::from_column_slice(u);
        u.dot(&(&self.quad * &u)) - 2.0 * self.linear.dot(&u)
    }

    /// `C u - c`, half the gradient of the objective.
    pub fn half_gradient(&self, u: &[f64]) -> DVector<f64> {
        &self.quad * DVector::from_column_slice(u) - &self.linear
    }
}

/// How a [`KktSolution`] was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMethod {
    /// KKT enumeration; the mask has bit `i` set when `u_i` is held at zero.
    Kkt { mask: u32 },
    /// Projected-gradient descent, used when `C` is not positive definite or
    /// no pattern produced a feasible solution.
    ProjectedGradient { iterations: usize },
}

/// Minimizer on the simplex together with its multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct KktSolution {
    pub u: Vec<f64>,
    /// Multipliers of `u_i >= 0`.
    pub lambda: Vec<f64>,
    /// Multiplier of `sum_i u_i = 1`.
    pub lambda_eq: f64,
    pub method: SolveMethod,
}

impl KktSolution {
    pub fn is_fallback(&self) -> bool {
        matches!(self.method, SolveMethod::ProjectedGradient { .. })
    }
}

/// Residuals of the KKT conditions at a solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub complementarity: f64,
    pub dual_violation: f64,
    pub primal_violation: f64,
}

/// Evaluates stationarity `(C u - c)_i - lambda_i + lambda_eq`, complementary
/// slackness `lambda_i u_i`, dual feasibility and primal feasibility.
pub fn kkt_residuals(p: &QpProblem, sol: &KktSolution) -> KktResiduals {
    let g = p.half_gradient(&sol.u);
    let stationarity = g
        .iter()
        .zip(&sol.lambda)
        .map(|(gi, li)| (gi - li + sol.lambda_eq).abs())
        .fold(0.0, f64::max);
    let complementarity = sol
        .lambda
        .iter()
        .zip(&sol.u)
        .map(|(l, u)| (l * u).abs())
        .fold(0.0, f64::max);
    let dual_violation = sol.lambda.iter().map(|l| (-l).max(0.0)).fold(0.0, f64::max);
    let sum: f64 = sol.u.iter().sum();
    let primal_violation = sol
        .u
        .iter()
        .map(|u| (-u).max(0.0))
        .fold((sum - 1.0).abs(), f64::max);
    KktResiduals {
        stationarity,
        complementarity,
        dual_violation,
        primal_violation,
    }
}

/// Cholesky test with pivots required to exceed [`PD_PIVOT_TOL`].
pub fn is_positive_definite(c: &DMatrix<f64>) -> bool {
    let m = c.nrows();
    let mut l = DMatrix::<f64>::zeros(m, m);
    for j in 0..m {
        let mut diag = c[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > PD_PIVOT_TOL) {
            return false;
        }
        let pivot = diag.sqrt();
        l[(j, j)] = pivot;
        for i in (j + 1)..m {
            let mut v = c[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / pivot;
        }
    }
    true
}

/// Masks in the order they are tried: by number of zeroed coordinates, then by value.
fn enumeration_order(m: usize) -> Vec<u32> {
    let mut masks: Vec<u32> = (0..(1u32 << m) - 1).collect();
    masks.sort_by_key(|mask| (mask.count_ones(), *mask));
    masks
}

fn solve_pattern(p: &QpProblem, mask: u32) -> Option<KktSolution> {
    let m = p.dim();
    let mut sys = DMatrix::<f64>::zeros(m + 1, m + 1);
    for col in 0..m {
        if mask & (1 << col) == 0 {
            for row in 0..m {
                sys[(row, col)] = p.quad[(row, col)];
            }
            sys[(m, col)] = 1.0;
        } else {
            sys[(col, col)] = -1.0;
        }
    }
    for row in 0..m {
        sys[(row, m)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(m + 1);
    rhs.rows_mut(0, m).copy_from(&p.linear);
    rhs[m] = 1.0;

    let rho = sys.clone().lu().solve(&rhs)?;
    if rho.iter().any(|v| !v.is_finite()) {
        return None;
    }
    // a nearly singular pattern can produce a garbage solve; reject on residual
    let scale = 1.0 + rhs.amax() + sys.amax() * rho.amax();
    if (&sys * &rho - &rhs).amax() > 1e-9 * scale {
        return None;
    }

    let mut u = vec![0.0; m];
    let mut lambda = vec![0.0; m];
    for i in 0..m {
        if mask & (1 << i) == 0 {
            if rho[i] < -PRIMAL_TOL {
                return None;
            }
            u[i] = rho[i].max(0.0);
        } else {
            if rho[i] < -DUAL_TOL {
                return None;
            }
            lambda[i] = rho[i];
        }
    }
    let total: f64 = u.iter().sum();
    u.iter_mut().for_each(|v| *v /= total);
    Some(KktSolution {
        u,
        lambda,
        lambda_eq: rho[m],
        method: SolveMethod::Kkt { mask },
    })
}

/// Euclidean projection onto the probability simplex.
pub fn project_onto_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &s) in sorted.iter().enumerate() {
        cumsum += s;
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if s - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Projected-gradient descent from the barycenter, step `1 / (2 ||C||_inf)`.
pub fn projected_gradient(p: &QpProblem) -> KktSolution {
    let m = p.dim();
    let norm_inf = p
        .quad
        .row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let step = if norm_inf > 0.0 {
        1.0 / (2.0 * norm_inf)
    } else {
        1.0
    };
    let mut u = vec![1.0 / m as f64; m];
    let mut iterations = 0;
    while iterations < FALLBACK_MAX_ITER {
        iterations += 1;
        let g = p.half_gradient(&u);
        let trial: Vec<f64> = u
            .iter()
            .zip(g.iter())
            .map(|(x, gi)| x - step * 2.0 * gi)
            .collect();
        let next = project_onto_simplex(&trial);
        let mapping_norm = next
            .iter()
            .zip(&u)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
            / step;
        u = next;
        if mapping_norm < FALLBACK_TOL {
            break;
        }
    }
    let g = p.half_gradient(&u);
    let lambda_eq = -g.iter().copied().fold(f64::INFINITY, f64::min);
    let lambda = g.iter().map(|gi| gi + lambda_eq).collect();
    KktSolution {
        u,
        lambda,
        lambda_eq,
        method: SolveMethod::ProjectedGradient { iterations },
    }
}

/// Minimizes the objective over the simplex.
///
/// For positive-definite `C` the KKT patterns are tried in order of increasing
/// number of zeroed coordinates, starting with the interior pattern, and the
/// first feasible one is returned. Otherwise, or if every pattern fails
/// numerically, [`projected_gradient`] is used.
pub fn solve_kkt(p: &QpProblem) -> KktSolution {
    let m = p.dim();
    if m == 1 {
        let g = p.half_gradient(&[1.0]);
        return KktSolution {
            u: vec![1.0],
            lambda: vec![0.0],
            lambda_eq: -g[0],
            method: SolveMethod::Kkt { mask: 0 },
        };
    }
    if m <= MAX_ENUMERATED_STATES && is_positive_definite(&p.quad) {
        if let Some(sol) = enumeration_order(m)
            .into_iter()
            .find_map(|mask| solve_pattern(p, mask))
        {
            return sol;
        }
    }
    projected_gradient(p)
}

/// Exhaustive minimization over the lattice `{u in simplex : u_i in {0, 1/K, ..., 1}}`
/// with `K = round(1 / step)`. Ties go to the lexicographically smallest point.
pub fn brute_force_solve(p: &QpProblem, step: f64) -> Vec<f64> {
    assert!(step > 0.0 && step <= 0.5, "step must lie in (0, 0.5]");
    let m = p.dim();
    let k_total = (1.0 / step).round() as usize;
    let quad: Vec<Vec<f64>> = (0..m)
        .map(|i| (0..m).map(|j| p.quad[(i, j)]).collect())
        .collect();
    let linear: Vec<f64> = p.linear.iter().copied().collect();

    struct Search<'a> {
        quad: &'a [Vec<f64>],
        linear: &'a [f64],
        k_total: usize,
        counts: Vec<usize>,
        best_counts: Vec<usize>,
        best_value: f64,
    }

    impl Search<'_> {
        // partial = objective restricted to the assigned prefix;
        // cross[j] = sum over assigned i of C_ij u_i
        fn visit(&mut self, depth: usize, remaining: usize, partial: f64, cross: &[f64]) {
            let m = self.linear.len();
            let k = self.k_total as f64;
            if depth + 1 == m {
                let t = remaining as f64 / k;
                let value = partial + 2.0 * t * cross[depth] + self.quad[depth][depth] * t * t
                    - 2.0 * self.linear[depth] * t;
                if value < self.best_value {
                    self.best_value = value;
                    self.counts[depth] = remaining;
                    self.best_counts.copy_from_slice(&self.counts);
                }
                return;
            }
            let mut next_cross = vec![0.0; m];
            for units in 0..=remaining {
                let t = units as f64 / k;
                let value = partial + 2.0 * t * cross[depth] + self.quad[depth][depth] * t * t
                    - 2.0 * self.linear[depth] * t;
                for (j, nc) in next_cross.iter_mut().enumerate() {
                    *nc = cross[j] + t * self.quad[depth][j];
                }
                self.counts[depth] = units;
                self.visit(depth + 1, remaining - units, value, &next_cross);
            }
        }
    }

    let mut search = Search {
        quad: &quad,
        linear: &linear,
        k_total,
        counts: vec![0; m],
        best_counts: vec![0; m],
        best_value: f64::INFINITY,
    };
    search.visit(0, k_total, 0.0, &vec![0.0; m]);
    search
        .best_counts
        .iter()
        .map(|&c| c as f64 / k_total as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn identity(m: usize) -> Vec<Vec<f64>> {
        (0..m)
            .map(|i| (0..m).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn symmetric_interior() {
        let p = QpProblem::from_rows(&identity(2), &[0.3, 0.3]);
        let sol = solve_kkt(&p);
        assert_close(&sol.u, &[0.5, 0.5], 1e-14);
        assert_eq!(sol.method, SolveMethod::Kkt { mask: 0 });
    }

    #[test]
    fn vertex_solution() {
        let p = QpProblem::from_rows(&identity(2), &[1.0, 0.0]);
        let sol = solve_kkt(&p);
        assert_close(&sol.u, &[1.0, 0.0], 1e-14);
        assert_close(&brute_force_solve(&p, 0.001), &[1.0, 0.0], 1e-12);
    }

    #[test]
    fn interior_asymmetric() {
        let p = QpProblem::from_rows(&identity(2), &[0.6, 0.4]);
        let sol = solve_kkt(&p);
        assert_close(&sol.u, &[0.6, 0.4], 1e-14);
        assert_close(&brute_force_solve(&p, 0.001), &[0.6, 0.4], 1e-12);
    }

    #[test]
    fn brute_force_symmetric_third() {
        let third = 1.0 / 3.0;
        let p = QpProblem::from_rows(&identity(3), &[third; 3]);
        assert_close(&brute_force_solve(&p, third), &[third; 3], 1e-15);
    }

    #[test]
    fn brute_force_tie_goes_lexicographic() {
        // F is constant on the simplex edge when C = 0 and c = 0
        let p = QpProblem::from_rows(&[vec![0.0; 2], vec![0.0; 2]], &[0.0, 0.0]);
        assert_eq!(brute_force_solve(&p, 0.25), vec![0.0, 1.0]);
    }

    #[test]
    fn positive_definite_checks() {
        assert!(is_positive_definite(&DMatrix::identity(4, 4)));
        assert!(!is_positive_definite(&DMatrix::from_element(3, 3, 1.0)));
        assert!(!is_positive_definite(&DMatrix::from_row_slice(
            2,
            2,
            &[1.0, 2.0, 2.0, 1.0]
        )));
    }

    #[test]
    fn duplicated_rows_use_symmetric_fallback() {
        let p = QpProblem::from_rows(
            &[
                vec![2.0, 2.0, 0.5],
                vec![2.0, 2.0, 0.5],
                vec![0.5, 0.5, 3.0],
            ],
            &[1.0, 1.0, 0.8],
        );
        assert!(!is_positive_definite(&p.quad));
        let sol = solve_kkt(&p);
        assert!(sol.is_fallback());
        assert_eq!(sol.u[0], sol.u[1]);
        let brute = brute_force_solve(&p, 0.01);
        assert!(p.objective(&sol.u) <= p.objective(&brute) + 1e-9);
        let r = kkt_residuals(&p, &sol);
        assert!(r.stationarity < 1e-6 && r.dual_violation < 1e-10, "{r:?}");
    }

    #[test]
    fn projection_cases() {
        assert_close(&project_onto_simplex(&[0.2, 0.8]), &[0.2, 0.8], 1e-15);
        assert_close(&project_onto_simplex(&[2.0, 0.0]), &[1.0, 0.0], 1e-15);
        assert_close(
            &project_onto_simplex(&[1.0, 1.0, 1.0]),
            &[1.0 / 3.0; 3],
            1e-15,
        );
        assert_close(
            &project_onto_simplex(&[-5.0, 0.5, 0.7]),
            &[0.0, 0.4, 0.6],
            1e-15,
        );
    }

    #[test]
    fn enumeration_starts_with_interior() {
        let order = enumeration_order(3);
        assert_eq!(order, vec![0, 1, 2, 4, 3, 5, 6]);
    }

    #[test]
    fn single_state_is_trivial() {
        let p = QpProblem::from_rows(&[vec![2.0]], &[0.7]);
        assert_eq!(solve_kkt(&p).u, vec![1.0]);
    }

    fn pd_problem() -> impl Strategy<Value = QpProblem> {
        (2usize..=4).prop_flat_map(|m| {
            (
                proptest::collection::vec(-1.0f64..1.0, m * m),
                proptest::collection::vec(0.01f64..2.0, m),
            )
                .prop_map(move |(a, c)| {
                    let a = DMatrix::from_row_slice(m, m, &a);
                    let quad = &a * a.transpose() + DMatrix::identity(m, m) * 0.1;
                    QpProblem::new(quad, DVector::from_vec(c))
                })
        })
    }

    proptest! {
        #[test]
        fn kkt_output_is_certified_minimizer(p in pd_problem(), seeds in proptest::collection::vec(0.0f64..1.0, 40)) {
            let sol = solve_kkt(&p);
            prop_assert!(!sol.is_fallback());
            prop_assert!(sol.u.iter().all(|v| *v >= 0.0));
            prop_assert!((sol.u.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            let r = kkt_residuals(&p, &sol);
            prop_assert!(r.stationarity < 1e-8, "{:?}", r);
            prop_assert!(r.complementarity < 1e-10, "{:?}", r);
            prop_assert!(r.dual_violation < 1e-10, "{:?}", r);
            let best = p.objective(&sol.u);
            let m = p.dim();
            for chunk in seeds.chunks(m) {
                if chunk.len() < m { continue; }
                let total: f64 = chunk.iter().sum::<f64>() + 1e-12;
                let v: Vec<f64> = chunk.iter().map(|x| (x + 1e-12 / m as f64) / total).collect();
                prop_assert!(best <= p.objective(&v) + 1e-8);
            }
        }

        #[test]
        fn fallback_agrees_with_kkt(p in pd_problem()) {
            let exact = solve_kkt(&p);
            let pg = projected_gradient(&p);
            prop_assert!((p.objective(&pg.u) - p.objective(&exact.u)).abs() < 1e-7);
        }
    }
}
