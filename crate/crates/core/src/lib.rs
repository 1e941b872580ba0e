//! Sequential deconfounding for longitudinal treatment data.
//!
//! The pipeline simulates confounded patient trajectories, infers a time-invariant
//! substitute confounder from the treatment-assignment process with a sequential
//! GP latent-variable model, checks the fit with predictive p-values over time, and
//! measures how much the substitute improves one-step-ahead outcome models.

pub mod checks;
pub mod error;
pub mod experiments;
pub mod kernel;
pub mod math;
pub mod optim;
pub mod outcome;
pub mod rng;
pub mod seqgplvm;
pub mod simulator;
pub mod trajectories;

pub use error::{Error, Result};
