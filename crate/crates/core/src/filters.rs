//! Optimal and nonparametric filtering/prediction of the hidden state.
//!
//! Both methods produce the one-step predictive vector `u_n = P(S_n = . | x_1^{n-1})`
//! first and then the posterior `P(S_n = . | x_1^n) ∝ f_m(x_n) u_n(m)`. They only
//! differ in how `u_n` is obtained:
//!
//! * optimal: `u_n = posterior_{n-1} P` with the known transition matrix;
//! * nonparametric: `u_n` minimizes `|f_hat(. | x_{n-tau}^{n-1}) - sum_m u_m f_m|_2`
//!   over the simplex, where `f_hat` is a kernel estimate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{emission_gaussian, product_integral, Gaussian1};
use crate::kde::{conditional_weights, embed, ucv_bandwidth};
use crate::model::{stationary_distribution, ArStateParams, SwitchingArModel, Trajectory};
use crate::simplex_qp::{solve_kkt, QpProblem, SolveMethod};

/// Steps beyond `max(p, tau + 1)` during which the nonparametric predictive is uniform.
pub const WARM_UP_MARGIN: usize = 20;

/// Predictive and posterior vectors at index `n` (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub n: usize,
    pub predictive: Vec<f64>,
    pub posterior: Vec<f64>,
}

impl FilterState {
    pub fn decisions(&self) -> EstimatorOutput {
        EstimatorOutput {
            filtered_state: argmax(&self.posterior),
            predicted_state: argmax(&self.predictive),
        }
    }
}

/// Argmax decisions (0-based states) under 0-1 loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EstimatorOutput {
    pub filtered_state: usize,
    pub predicted_state: usize,
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |best, (i, x)| if *x > v[best] { i } else { best })
}

/// History `x_{n-1}, ..., x_{n-p}` (most recent first) for 1-based index `n`.
pub fn history_at(x: &[f64], n: usize, p: usize) -> Vec<f64> {
    assert!(
        n > p && n <= x.len() + 1,
        "need p past values before index {n}"
    );
    (1..=p).map(|k| x[n - 1 - k]).collect()
}

/// Emission Gaussians of every state given the history.
pub fn emission_gaussians(history: &[f64], states: &[ArStateParams]) -> Vec<Gaussian1> {
    states
        .iter()
        .map(|s| emission_gaussian(history, s))
        .collect()
}

/// `posterior(m) ∝ predictive(m) f_m(x_n)`, computed from log emissions.
pub fn posterior_update(predictive: &[f64], ln_emissions: &[f64]) -> Vec<f64> {
    let log_joint: Vec<f64> = predictive
        .iter()
        .zip(ln_emissions)
        .map(|(u, lf)| {
            if *u > 0.0 {
                u.ln() + lf
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let max = log_joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // no state carries mass with a finite likelihood
        return predictive.to_vec();
    }
    let mut post: Vec<f64> = log_joint.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = post.iter().sum();
    post.iter_mut().for_each(|v| *v /= total);
    post
}

fn renormalized(mut v: Vec<f64>) -> Vec<f64> {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
    let total: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= total);
    v
}

/// One step of the optimal recursion.
///
/// `prev_posterior` is `P(S_{n-1} = . | x_1^{n-1})`; `history` holds
/// `x_{n-1}, ..., x_{n-p}`.
pub fn optimal_step(
    prev_posterior: &[f64],
    n: usize,
    x_n: f64,
    history: &[f64],
    model: &SwitchingArModel,
) -> FilterState {
    let predictive = renormalized(model.transition().propagate(prev_posterior));
    let ln_f: Vec<f64> = emission_gaussians(history, model.states())
        .iter()
        .map(|g| g.ln_pdf(x_n))
        .collect();
    let posterior = posterior_update(&predictive, &ln_f);
    FilterState {
        n,
        predictive,
        posterior,
    }
}

/// Builds the simplex QP at index `n` from the prefix `x_1..x_n`.
///
/// `C_ij = int f_i f_j`, `c_m = sum_i beta_i int phi(.; center_i, h^2) f_m`.
pub fn projection_problem(
    x: &[f64],
    n: usize,
    states: &[ArStateParams],
    tau: usize,
    stride: usize,
    h: f64,
) -> Result<QpProblem> {
    let p = states[0].order();
    if n <= p.max(tau + 1) || n > x.len() {
        return Err(Error::InsufficientData(format!(
            "index {n} needs more than max(p = {p}, tau + 1 = {}) past values",
            tau + 1
        )));
    }
    let gaussians = emission_gaussians(&history_at(x, n, p), states);
    let kernel = conditional_weights(&x[..n - 1], tau, stride, h)?;
    let m = states.len();
    let quad = DMatrix::from_fn(m, m, |i, j| product_integral(gaussians[i], gaussians[j]));
    let h2 = h * h;
    let linear = DVector::from_iterator(
        m,
        gaussians.iter().map(|g| {
            kernel
                .weights
                .iter()
                .zip(&kernel.centers)
                .map(|(beta, center)| beta * product_integral(Gaussian1::new(*center, h2), *g))
                .sum::<f64>()
        }),
    );
    Ok(QpProblem::new(quad, linear))
}

/// Nonparametric step output.
#[derive(Debug, Clone, PartialEq)]
pub struct NonparametricStep {
    pub state: FilterState,
    pub method: SolveMethod,
}

/// Posterior update shared by both methods, with emissions evaluated at `x_n`.
pub fn posterior_from_predictive(
    predictive: &[f64],
    x: &[f64],
    n: usize,
    states: &[ArStateParams],
) -> Vec<f64> {
    let p = states[0].order();
    let ln_f: Vec<f64> = emission_gaussians(&history_at(x, n, p), states)
        .iter()
        .map(|g| g.ln_pdf(x[n - 1]))
        .collect();
    posterior_update(predictive, &ln_f)
}

/// One nonparametric step at 1-based index `n` using the prefix `x_1..x_n`.
pub fn nonparametric_step(
    x: &[f64],
    n: usize,
    states: &[ArStateParams],
    tau: usize,
    stride: usize,
    h: f64,
) -> Result<NonparametricStep> {
    let qp = projection_problem(x, n, states, tau, stride, h)?;
    let sol = solve_kkt(&qp);
    let posterior = posterior_from_predictive(&sol.u, x, n, states);
    Ok(NonparametricStep {
        state: FilterState {
            n,
            predictive: sol.u,
            posterior,
        },
        method: sol.method,
    })
}

/// Which estimators to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Methods {
    Optimal,
    Nonparametric,
    #[default]
    Both,
}

impl Methods {
    pub fn optimal(self) -> bool {
        matches!(self, Methods::Optimal | Methods::Both)
    }

    pub fn nonparametric(self) -> bool {
        matches!(self, Methods::Nonparametric | Methods::Both)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub tau: usize,
    pub stride: usize,
    /// First 1-based index recorded.
    pub eval_start: usize,
    /// Fixed bandwidth; `None` selects it by UCV on the whole series.
    pub bandwidth: Option<f64>,
    pub methods: Methods,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            tau: 2,
            stride: 1,
            eval_start: 1,
            bandwidth: None,
            methods: Methods::Both,
        }
    }
}

/// Index up to which the nonparametric predictive is held uniform.
pub fn warm_up_end(p: usize, tau: usize) -> usize {
    p.max(tau + 1) + WARM_UP_MARGIN
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodRecord {
    pub state: FilterState,
    pub output: EstimatorOutput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonparametricRecord {
    pub state: FilterState,
    pub output: EstimatorOutput,
    /// `None` during warm-up, when no QP is solved.
    pub method: Option<SolveMethod>,
}

impl NonparametricRecord {
    pub fn is_warm_up(&self) -> bool {
        self.method.is_none()
    }

    pub fn is_fallback(&self) -> bool {
        matches!(self.method, Some(SolveMethod::ProjectedGradient { .. }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub n: usize,
    pub optimal: Option<MethodRecord>,
    pub nonparametric: Option<NonparametricRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterRun {
    /// Bandwidth used by the nonparametric method, if it ran.
    pub bandwidth: Option<f64>,
    pub records: Vec<StepRecord>,
}

impl FilterRun {
    pub fn fallback_count(&self) -> usize {
        self.records
            .iter()
            .filter_map(|r| r.nonparametric.as_ref())
            .filter(|r| r.is_fallback())
            .count()
    }
}

/// Selects the bandwidth on the `(tau + 1)`-dimensional embedding of the whole series.
pub fn select_bandwidth(x: &[f64], tau: usize, stride: usize) -> Result<f64> {
    let sample = embed(x, tau + 1, stride)?;
    Ok(ucv_bandwidth(&sample)?.h)
}

/// Runs the selected filters over a trajectory and records every index in
/// `[max(eval_start, p + 1), len]`.
///
/// The optimal recursion starts at `n = p + 1` from the stationary distribution.
/// Decisions at `n` depend on `x_1..x_n` only, apart from the bandwidth when it
/// is selected from the whole series.
pub fn run_filters(
    trajectory: &Trajectory,
    model: &SwitchingArModel,
    config: &FilterConfig,
) -> Result<FilterRun> {
    let x = &trajectory.x;
    let len = x.len();
    let p = model.order();
    let m = model.num_states();
    let first = config.eval_start.max(p + 1);
    if config.tau == 0 || config.stride == 0 {
        return Err(Error::InvalidConfig {
            field: "tau",
            reason: "tau and stride must be positive".into(),
        });
    }

    let bandwidth = if config.methods.nonparametric() && first <= len {
        Some(match config.bandwidth {
            Some(h) => h,
            None => select_bandwidth(x, config.tau, config.stride)?,
        })
    } else {
        None
    };
    let warm_up = warm_up_end(p, config.tau);

    let mut records = Vec::with_capacity(len.saturating_sub(first - 1));
    let mut posterior = if m == 1 {
        vec![1.0]
    } else {
        stationary_distribution(model.transition())?
    };
    for n in (p + 1)..=len {
        let optimal = if config.methods.optimal() {
            let state = optimal_step(&posterior, n, x[n - 1], &history_at(x, n, p), model);
            posterior.clone_from(&state.posterior);
            Some(state)
        } else {
            None
        };
        if n < first {
            continue;
        }
        let nonparametric = match bandwidth {
            Some(_) if n <= warm_up => {
                let predictive = vec![1.0 / m as f64; m];
                let posterior = posterior_from_predictive(&predictive, x, n, model.states());
                let state = FilterState {
                    n,
                    predictive,
                    posterior,
                };
                Some(NonparametricRecord {
                    output: state.decisions(),
                    state,
                    method: None,
                })
            }
            Some(h) => {
                let step =
                    nonparametric_step(&x[..n], n, model.states(), config.tau, config.stride, h)?;
                Some(NonparametricRecord {
                    output: step.state.decisions(),
                    state: step.state,
                    method: Some(step.method),
                })
            }
            None => None,
        };
        records.push(StepRecord {
            n,
            optimal: optimal.map(|state| MethodRecord {
                output: state.decisions(),
                state,
            }),
            nonparametric,
        });
    }
    Ok(FilterRun { bandwidth, records })
}
