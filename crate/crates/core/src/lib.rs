//! Cross-domain imitation from unpaired, state-only demonstrations.
//!
//! The pipeline learns state maps between an expert arm and an agent arm
//! from proxy-task demonstrations, transfers expert demonstrations of a new
//! task into the agent domain, labels them with an inverse dynamics model and
//! trains a behavioral-cloning policy.

pub mod arm_env;
pub mod baselines;
pub mod bco;
pub mod correspond;
pub mod error;
pub mod expert;
pub mod numcore;
pub mod pipeline;
pub mod seeding;
pub mod temporal;
pub mod traj;

pub use error::{Error, Result};

pub type Real = f64;
pub type Matrix = numcore::Matrix<Real>;
pub type Mlp = numcore::Mlp<Real>;
pub type Adam = numcore::Adam<Real>;
pub type Gradients = numcore::Gradients<Real>;
