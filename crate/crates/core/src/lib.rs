//! Hidden-state estimation for Markov-switching autoregressive processes.
//!
//! A finite Markov chain `S_n` selects the coefficients `(mu, a_1..a_p, b)` of an
//! AR(p) observation process `X_n`. Two estimators of `S_n` are provided:
//!
//! * the optimal Bayes filter/predictor, which knows the transition matrix;
//! * a nonparametric filter/predictor, which replaces the unknown one-step
//!   predictive distribution by the L2 projection of a kernel estimate of
//!   `f(x_n | x_{n-tau}^{n-1})` onto the mixture family `sum_m u_m f_m`,
//!   solved as a simplex-constrained QP.
//!
//! The [`harness`] module runs Monte-Carlo experiments comparing both.

pub mod error;
pub mod filters;
pub mod gaussian;
pub mod harness;
pub mod kde;
pub mod model;
pub mod simplex_qp;

pub use error::{Error, Result};
pub use filters::{EstimatorOutput, FilterConfig, FilterState, StepRecord};
pub use gaussian::Gaussian1;
pub use model::{ArStateParams, SwitchingArModel, Trajectory, TransitionMatrix};
pub use simplex_qp::{KktSolution, QpProblem};
