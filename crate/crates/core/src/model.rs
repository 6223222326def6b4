//! The two-component process `(S_n, X_n)`: a finite Markov chain switching the
//! coefficients of an AR(p) observation equation
//!
//! `X_n = mu(S_n) + sum_i a_i(S_n) (X_{n-i} - mu(S_n)) + b(S_n) xi_n`,  `xi_n ~ N(0, 1)`.
//!
//! States are 0-based inside the library. External interfaces (trace files,
//! CLI output) print them 1-based.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-12;
const STATIONARY_MAX_ITER: usize = 1_000_000;
const STATIONARY_TOL: f64 = 1e-15;

/// RNG sub-stream driving the hidden chain.
pub const CHAIN_STREAM: u64 = 0;
/// RNG sub-stream driving the innovations `xi_n`.
pub const NOISE_STREAM: u64 = 1;

/// Row-stochastic transition matrix, `p[i][j] = Pr(S_n = j | S_{n-1} = i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    rows: Vec<Vec<f64>>,
}

impl TransitionMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = rows.len();
        if m < 2 {
            return Err(Error::InvalidModel(format!(
                "transition matrix needs at least 2 states, got {m}"
            )));
        }
        Self::validate_rows(&rows)?;
        Ok(Self { rows })
    }

    /// The degenerate one-state chain. Only useful for tests of edge cases.
    pub fn single_state() -> Self {
        Self {
            rows: vec![vec![1.0]],
        }
    }

    fn validate_rows(rows: &[Vec<f64>]) -> Result<()> {
        let m = rows.len();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != m {
                return Err(Error::InvalidModel(format!(
                    "transition row {} has {} entries, expected {m}",
                    i + 1,
                    row.len()
                )));
            }
            if let Some(bad) = row.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(Error::InvalidModel(format!(
                    "transition row {} has entry {bad} outside [0, 1]",
                    i + 1
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidModel(format!(
                    "transition row {} sums to {sum}, expected 1",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.rows[from][to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.rows[from]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// One step of the chain applied to a distribution: `(q P)_j = sum_i q_i p_ij`.
    pub fn propagate(&self, dist: &[f64]) -> Vec<f64> {
        let m = self.num_states();
        let mut out = vec![0.0; m];
        for (i, &qi) in dist.iter().enumerate() {
            for (o, &p) in out.iter_mut().zip(&self.rows[i]) {
                *o += qi * p;
            }
        }
        out
    }

    fn is_irreducible(&self) -> bool {
        let m = self.num_states();
        (0..m).all(|start| {
            let mut seen = vec![false; m];
            seen[start] = true;
            let mut queue = VecDeque::from([start]);
            while let Some(i) = queue.pop_front() {
                for j in 0..m {
                    if !seen[j] && self.rows[i][j] > 0.0 {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
            seen.into_iter().all(|s| s)
        })
    }
}

/// Stationary distribution `pi` with `pi P = pi`.
///
/// Power iteration on the lazy chain `(I + P) / 2`, which shares the stationary
/// law of `P` and is aperiodic whenever `P` is irreducible.
pub fn stationary_distribution(t: &TransitionMatrix) -> Result<Vec<f64>> {
    if !t.is_irreducible() {
        return Err(Error::NotErgodic { iterations: 0 });
    }
    let m = t.num_states();
    let mut pi = vec![1.0 / m as f64; m];
    for _ in 0..STATIONARY_MAX_ITER {
        let stepped = t.propagate(&pi);
        let mut next: Vec<f64> = pi
            .iter()
            .zip(&stepped)
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= total);
        let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if diff < STATIONARY_TOL {
            return Ok(pi);
        }
    }
    Err(Error::NotErgodic {
        iterations: STATIONARY_MAX_ITER,
    })
}

/// Per-state AR(p) coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArStateParams {
    pub mu: f64,
    pub a: Vec<f64>,
    pub b: f64,
}

impl ArStateParams {
    pub fn new(mu: f64, a: Vec<f64>, b: f64) -> Result<Self> {
        let params = Self { mu, a, b };
        params.validate()?;
        Ok(params)
    }

    fn validate(&self) -> Result<()> {
        if !(self.b > 0.0 && self.b.is_finite()) {
            return Err(Error::InvalidModel(format!(
                "noise scale b must be positive and finite, got {}",
                self.b
            )));
        }
        if !self.mu.is_finite() || self.a.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidModel("non-finite AR coefficient".into()));
        }
        Ok(())
    }

    pub fn order(&self) -> usize {
        self.a.len()
    }
}

/// JSON form of a [`SwitchingArModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub transition: Vec<Vec<f64>>,
    pub states: Vec<ArStateParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_dist: Option<Vec<f64>>,
}

/// Markov-switching AR(p) model.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchingArModel {
    transition: TransitionMatrix,
    states: Vec<ArStateParams>,
    initial_dist: Vec<f64>,
}

impl SwitchingArModel {
    /// Builds a model; `initial_dist = None` means the stationary distribution.
    pub fn new(
        transition: TransitionMatrix,
        states: Vec<ArStateParams>,
        initial_dist: Option<Vec<f64>>,
    ) -> Result<Self> {
        let m = transition.num_states();
        if states.len() != m {
            return Err(Error::InvalidModel(format!(
                "{} state parameter sets for a {m}-state chain",
                states.len()
            )));
        }
        for s in &states {
            s.validate()?;
        }
        let p = states[0].order();
        if states.iter().any(|s| s.order() != p) {
            return Err(Error::InvalidModel(
                "all states must share the same AR order".into(),
            ));
        }
        let initial_dist = match initial_dist {
            Some(d) => {
                if d.len() != m {
                    return Err(Error::InvalidModel(format!(
                        "initial_dist has {} entries, expected {m}",
                        d.len()
                    )));
                }
                if d.iter().any(|v| !(*v >= 0.0)) {
                    return Err(Error::InvalidModel(
                        "initial_dist has a negative entry".into(),
                    ));
                }
                let sum: f64 = d.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::InvalidModel(format!(
                        "initial_dist sums to {sum}, expected 1"
                    )));
                }
                d
            }
            None if m == 1 => vec![1.0],
            None => stationary_distribution(&transition)?,
        };
        Ok(Self {
            transition,
            states,
            initial_dist,
        })
    }

    pub fn from_spec(spec: ModelSpec) -> Result<Self> {
        let transition = TransitionMatrix::new(spec.transition)?;
        Self::new(transition, spec.states, spec.initial_dist)
    }

    pub fn to_spec(&self) -> ModelSpec {
        ModelSpec {
            transition: self.transition.rows().to_vec(),
            states: self.states.clone(),
            initial_dist: Some(self.initial_dist.clone()),
        }
    }

    pub fn transition(&self) -> &TransitionMatrix {
        &self.transition
    }

    pub fn states(&self) -> &[ArStateParams] {
        &self.states
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    /// AR order `p`.
    pub fn order(&self) -> usize {
        self.states[0].order()
    }
}

/// A simulated path: hidden states (0-based) and observations, aligned by index.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub s: Vec<usize>,
    pub x: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// The first `n` pairs.
    pub fn truncated(&self, n: usize) -> Trajectory {
        Trajectory {
            s: self.s[..n].to_vec(),
            x: self.x[..n].to_vec(),
        }
    }
}

fn sample_categorical(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the cumulative sum
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

/// RNG for one sub-stream of a seeded simulation.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Simulates `burn_in + n` steps and returns the last `n`.
///
/// The `p` pre-sample observations are set to `mu(S_1)` where `S_1` is the
/// first simulated state. The chain draws from [`CHAIN_STREAM`] and the
/// innovations from [`NOISE_STREAM`] of the same seed.
pub fn simulate(model: &SwitchingArModel, n: usize, burn_in: usize, seed: u64) -> Trajectory {
    assert!(n >= 1, "simulate needs n >= 1");
    let mut chain_rng = stream_rng(seed, CHAIN_STREAM);
    let mut noise_rng = stream_rng(seed, NOISE_STREAM);
    let p = model.order();
    let total = burn_in + n;

    let mut state = sample_categorical(&mut chain_rng, model.initial_dist());
    // most recent first
    let mut lags: VecDeque<f64> = std::iter::repeat_n(model.states[state].mu, p).collect();
    let mut s = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);

    for step in 0..total {
        if step > 0 {
            state = sample_categorical(&mut chain_rng, model.transition.row(state));
        }
        let params = &model.states[state];
        let xi: f64 = noise_rng.sample(StandardNormal);
        let ar: f64 = params
            .a
            .iter()
            .zip(&lags)
            .map(|(a, lag)| a * (lag - params.mu))
            .sum();
        let value = params.mu + ar + params.b * xi;
        if p > 0 {
            lags.pop_back();
            lags.push_front(value);
        }
        if step >= burn_in {
            s.push(state);
            x.push(value);
        }
    }
    Trajectory { s, x }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn example_transition() -> TransitionMatrix {
        TransitionMatrix::new(vec![
            vec![0.8, 0.1, 0.1],
            vec![0.05, 0.9, 0.05],
            vec![0.1, 0.05, 0.85],
        ])
        .unwrap()
    }

    fn example_model() -> SwitchingArModel {
        let states = vec![
            ArStateParams::new(0.0, vec![0.3, 0.2], 0.1).unwrap(),
            ArStateParams::new(0.5, vec![0.2, 0.3], 0.2).unwrap(),
            ArStateParams::new(1.0, vec![0.1, 0.4], 0.1).unwrap(),
        ];
        SwitchingArModel::new(example_transition(), states, None).unwrap()
    }

    #[test]
    fn stationary_uniform_rows() {
        let m = 4;
        let t = TransitionMatrix::new(vec![vec![0.25; m]; m]).unwrap();
        let pi = stationary_distribution(&t).unwrap();
        for v in pi {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn stationary_example_matrix() {
        let t = example_transition();
        let pi = stationary_distribution(&t).unwrap();
        let expected = [5.0 / 19.0, 8.0 / 19.0, 6.0 / 19.0];
        for (a, b) in pi.iter().zip(expected) {
            assert!((a - b).abs() < 1e-10, "{pi:?}");
        }
        let stepped = t.propagate(&pi);
        let resid: f64 = stepped.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        assert!(resid < 1e-10);
        assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn stationary_periodic_chain() {
        let t = TransitionMatrix::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let pi = stationary_distribution(&t).unwrap();
        assert!((pi[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn stationary_reducible_is_error() {
        let t = TransitionMatrix::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            stationary_distribution(&t),
            Err(Error::NotErgodic { .. })
        ));
    }

    #[test]
    fn transition_validation() {
        assert!(TransitionMatrix::new(vec![vec![1.0]]).is_err());
        assert!(TransitionMatrix::new(vec![vec![0.5, 0.6], vec![0.5, 0.5]]).is_err());
        assert!(TransitionMatrix::new(vec![vec![1.5, -0.5], vec![0.5, 0.5]]).is_err());
        assert!(TransitionMatrix::new(vec![vec![0.5, 0.5], vec![1.0]]).is_err());
    }

    #[test]
    fn model_validation() {
        let t = example_transition();
        let s = ArStateParams {
            mu: 0.0,
            a: vec![0.1],
            b: 1.0,
        };
        assert!(SwitchingArModel::new(t.clone(), vec![s.clone(); 2], None).is_err());
        let mixed = vec![
            s.clone(),
            s.clone(),
            ArStateParams {
                mu: 0.0,
                a: vec![0.1, 0.2],
                b: 1.0,
            },
        ];
        assert!(SwitchingArModel::new(t.clone(), mixed, None).is_err());
        assert!(ArStateParams::new(0.0, vec![], 0.0).is_err());
        assert!(
            SwitchingArModel::new(t.clone(), vec![s.clone(); 3], Some(vec![0.5, 0.5, 0.5]))
                .is_err()
        );
        let ok = SwitchingArModel::new(t, vec![s; 3], Some(vec![1.0, 0.0, 0.0])).unwrap();
        assert_eq!(ok.initial_dist(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn spec_rejects_unknown_keys() {
        let json = r#"{"transition": [[0.5,0.5],[0.5,0.5]],
            "states": [{"mu":0,"a":[],"b":1},{"mu":1,"a":[],"b":1}], "extra": 1}"#;
        assert!(serde_json::from_str::<ModelSpec>(json).is_err());
        let json = r#"{"transition": [[0.5,0.5],[0.5,0.5]],
            "states": [{"mu":0,"a":[],"b":1,"c":2},{"mu":1,"a":[],"b":1}]}"#;
        assert!(serde_json::from_str::<ModelSpec>(json).is_err());
    }

    #[test]
    fn noise_free_limit_tracks_levels() {
        let t = example_transition();
        let states = (1..=3)
            .map(|m| ArStateParams::new(m as f64, vec![0.0, 0.0], 1e-12).unwrap())
            .collect();
        let model = SwitchingArModel::new(t, states, None).unwrap();
        let traj = simulate(&model, 500, 10, 3);
        for (s, x) in traj.s.iter().zip(&traj.x) {
            assert!((x - (*s as f64 + 1.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn white_noise_sample_mean() {
        let model = SwitchingArModel::new(
            TransitionMatrix::single_state(),
            vec![ArStateParams::new(0.0, vec![0.0], 1.0).unwrap()],
            None,
        )
        .unwrap();
        let n = 100_000;
        let traj = simulate(&model, n, 0, 11);
        let mean = traj.x.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn example_occupancy_matches_stationary() {
        let model = example_model();
        let n = 100_000;
        let traj = simulate(&model, n, 100, 5);
        assert_eq!(traj.s.len(), n);
        assert_eq!(traj.x.len(), n);
        let mut counts = [0usize; 3];
        traj.s.iter().for_each(|&s| counts[s] += 1);
        let expected = [5.0 / 19.0, 8.0 / 19.0, 6.0 / 19.0];
        for (c, e) in counts.iter().zip(expected) {
            assert!((*c as f64 / n as f64 - e).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let model = example_model();
        assert_eq!(
            simulate(&model, 300, 100, 42),
            simulate(&model, 300, 100, 42)
        );
        assert_ne!(
            simulate(&model, 300, 100, 42),
            simulate(&model, 300, 100, 43)
        );
    }

    #[test]
    fn residuals_are_standard_normal_under_constant_state() {
        let state = ArStateParams::new(0.5, vec![0.2, 0.3], 0.2).unwrap();
        let model =
            SwitchingArModel::new(TransitionMatrix::single_state(), vec![state.clone()], None)
                .unwrap();
        let n = 100_000;
        let traj = simulate(&model, n, 100, 8);
        let resid: Vec<f64> = (2..n)
            .map(|k| {
                let pred = state.mu
                    + state.a[0] * (traj.x[k - 1] - state.mu)
                    + state.a[1] * (traj.x[k - 2] - state.mu);
                (traj.x[k] - pred) / state.b
            })
            .collect();
        let len = resid.len() as f64;
        let mean = resid.iter().sum::<f64>() / len;
        let var = resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (len - 1.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
