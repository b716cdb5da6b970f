//! Learning governing equations of chaotic dynamical systems from noisy,
//! partially observed trajectories.
//!
//! The library couples a neural parametrization of an ODE right-hand side
//! (a bilinear network integrated with Runge–Kutta 4) with state-inference
//! machinery (an ensemble Kalman smoother or a bidirectional LSTM posterior)
//! and trains both jointly from observation sequences under deterministic,
//! MAP, or variational objectives.
//!
//! Module layout:
//! - [`adcore`]: reverse-mode automatic differentiation over dense `f64`
//!   arrays, plus the seedable RNG used everywhere.
//! - [`nn`]: small neural building blocks (MLPs, LSTM stacks, Adam) shared by
//!   the generative and inference sides.
//! - [`systems`]: reference chaotic systems (Lorenz-63, Lorenz-96, stochastic
//!   Lorenz-63), integrators, and dataset synthesis.
//! - [`observation`]: observation operators, noise/masking, dataset files.
//! - [`prior`]: the learned dynamical prior (bilinear drift network, flow
//!   maps, state-dependent transition variance, emission model).
//! - [`inference`]: ensemble Kalman smoothing and the LSTM posterior.
//! - [`training`]: objectives and the two training drivers (stochastic
//!   gradient with random multi-step horizons, EM with smoother E-steps).
//! - [`metrics`]: forecast/reconstruction scores, side-switch horizon,
//!   largest Lyapunov exponent, and test-set evaluation.
//! - [`checkpoint`]: model (de)serialization.

pub mod adcore;
pub mod checkpoint;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod nn;
pub mod observation;
pub mod prior;
pub mod systems;
pub mod training;

pub use error::{Error, Result};
