//! Offline evaluation toolkit for mechanical-ventilation control policies.
//!
//! The crate covers the full pipeline: cohort ingestion and cleaning,
//! propensity scoring, a kernel-regression transition model, counterfactual
//! trajectory simulation, policy learners (behavior cloning, conservative
//! Q-iteration, conservative fitted-Q), off-policy value estimators, and a
//! synthetic environment for end-to-end validation.

pub mod cli;
pub mod config;
pub mod error;
pub mod ingest;
pub mod mdp;
pub mod nwe;
pub mod ope;
pub mod policies;
pub mod propensity;
pub mod rng;
pub mod schema;
pub mod simulator;
pub mod synthetic;

pub use error::{Result, VentError};
