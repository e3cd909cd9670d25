//! Generalized Disparate Impact (GeDI) fairness indicators.
//!
//! The crate measures how well a user-chosen basis of a protected attribute
//! explains a target, and enforces bounds on that dependency either by
//! projecting targets ([`projection`]) or while training a model
//! ([`training`]).

pub mod cli;
pub mod constraints;
pub mod error;
pub mod indicators;
pub mod io;
pub mod kernel;
pub mod learners;
pub mod projection;
pub mod stats;
pub mod training;

pub use error::{GediError, Result};
