//! Multi-agent fitted Q-iteration with additive value decomposition.
//!
//! The crate is organized around five modules:
//!
//! * [`game`]: cooperative Markov games on `[0,1]^d` per-agent state boxes,
//!   including decomposable and reverse-engineered constructions.
//! * [`oracle`]: midpoint-grid discretization, value iteration, policy
//!   evaluation and exact projections onto additive tables.
//! * [`approx`]: two-layer ReLU networks with path-norm accounting, the
//!   additive critic, least-squares fitting, Monte-Carlo projection and the
//!   random-feature construction for cosine mixtures.
//! * [`fqi`]: the fitted Q-iteration loop.
//! * [`analysis`]: checkers for the error-propagation, approximation and
//!   generalization inequalities.
//!
//! Numeric containers are generic over [`Real`] (`f32` or `f64`); the
//! aliases below fix the scalar for common use.

pub mod analysis;
pub mod approx;
pub mod error;
pub mod fqi;
pub mod game;
pub mod oracle;
pub mod quad;
pub mod scalar;

pub use error::{Error, Result};
pub use game::{Game, GameKind, GameSpec};
pub use scalar::Real;

pub type TabularGameF64 = oracle::TabularGame<f64>;
pub type TabularGameF32 = oracle::TabularGame<f32>;
pub type QTableF64 = oracle::QTable<f64>;
pub type QTableF32 = oracle::QTable<f32>;
pub type TwoLayerNetF64 = approx::TwoLayerNet<f64>;
pub type TwoLayerNetF32 = approx::TwoLayerNet<f32>;
pub type DecomposedQF64 = approx::DecomposedQ<f64>;
pub type DecomposedQF32 = approx::DecomposedQ<f32>;
