//! Tabular off-policy evaluation toolkit.
//!
//! Exact multi-step and marginalized evaluation operators over finite MDPs,
//! trace-to-weight conversion with residual/contraction analysis, stochastic
//! estimators with TD-weight learning, LP-based policy evaluation backed by
//! an embedded simplex solver, and the two benchmark environments used by
//! the experiment harness.
//!
//! Everything numeric is generic over [`Scalar`] (`f64` or `f32`); the
//! `*64` aliases below pick the default precision.

pub mod envs;
pub mod error;
pub mod estimation;
pub mod linalg;
pub mod lp;
pub mod mdp;
pub mod operators;
pub mod saddle;
pub mod scalar;
pub mod vtrace;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type TabularMdp64 = mdp::TabularMdp<f64>;
pub type Policy64 = mdp::Policy<f64>;
pub type QFunction64 = mdp::QFunction<f64>;
pub type ValueFunction64 = mdp::ValueFunction<f64>;
pub type StateActionDist64 = mdp::StateActionDist<f64>;
pub type Trajectory64 = mdp::Trajectory<f64>;
pub type TraceScheme64 = operators::TraceScheme<f64>;
pub type TdWeights64 = operators::TdWeights<f64>;
pub type ResidualReport64 = operators::ResidualReport<f64>;
pub type Mat64 = linalg::Mat<f64>;
