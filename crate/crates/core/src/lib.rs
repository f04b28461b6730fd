//! Two-stage screening system: a per-view multi-task network, a multi-view
//! fusion classifier, and a constrained triage policy that decides which
//! patients the machine may diagnose without a human reader.
//!
//! Everything runs on synthetic cohorts of procedurally generated phantom
//! views, so every component can be checked against a known ground truth.

pub mod cohort;
pub mod config;
pub mod error;
pub mod fusion;
pub mod imageproc;
pub mod loss;
pub mod metrics;
pub mod mtlnet;
pub mod nn;
pub mod persist;
pub mod pipeline;
pub mod plot;
pub mod report;
pub mod rng;
pub mod triage;

pub use error::{Error, Result};
