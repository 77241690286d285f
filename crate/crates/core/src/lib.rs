//! Trajectory valuation for policy-gradient LQR control.
//!
//! The crate simulates a linear-Gaussian controller on a discrete-time LQR plant,
//! measures per-trajectory excitation, values trajectories with Shapley and
//! leave-one-out scores under several REINFORCE variants, and ships the statistics,
//! curation and first-exit tooling used to study why those values differ.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix
//! it to `f64`, which is what the statistics and reports use.

pub mod curation;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod lqr;
pub mod mechanism;
pub mod metrics;
pub mod policy_gradient;
pub mod saddle;
pub mod scalar;
pub mod seed;
pub mod shapley;

pub use error::{LabError, Result};
pub use scalar::Scalar;

pub type Matrix = linalg::Matrix<f64>;
pub type SystemSpec = lqr::SystemSpec<f64>;
pub type PolicySpec = lqr::PolicySpec<f64>;
pub type InitialState = lqr::InitialState<f64>;
pub type Excitation = lqr::Excitation<f64>;
pub type RolloutConfig = lqr::RolloutConfig<f64>;
pub type Trajectory = lqr::Trajectory<f64>;
pub type Dataset = lqr::Dataset<f64>;
pub type CostEstimate = lqr::CostEstimate<f64>;
pub type InfoSummary = metrics::InfoSummary<f64>;
pub type AgentVariant = policy_gradient::AgentVariant<f64>;
pub type Whitener = policy_gradient::Whitener<f64>;
pub type CharFnConfig = policy_gradient::CharFnConfig<f64>;
pub type LqrGame<'a> = policy_gradient::LqrGame<'a, f64>;

pub use saddle::SaddleProblem;
