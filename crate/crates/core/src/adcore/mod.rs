//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! The engine is a classic tape: forward calls append nodes (operation +
//! operand ids + forward value) to a [`Tape`], and [`Tape::backward`] replays
//! the tape in reverse topological order, accumulating adjoints. Nodes are
//! identified by insertion index, so the graph is acyclic by construction and
//! replay is bitwise deterministic.
//!
//! Also hosted here: [`Rng`], the seedable counter-based random generator
//! used across the crate so that every experiment is reproducible from a
//! single integer seed, and [`check`], finite-difference gradient
//! verification utilities used heavily by the test suites.

mod array;
pub mod check;
mod rng;
mod tape;

pub use array::Array;
pub use rng::Rng;
pub use tape::{sample_gaussian, Gradients, Tape, Var};

/// Floor added to every learned variance after the exponential transform.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Clamp bounds applied to raw (pre-exponential) variance outputs.
pub const RAW_VARIANCE_CLAMP: (f64, f64) = (-10.0, 10.0);
