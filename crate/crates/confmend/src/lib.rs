//! Confidence-monitored inference orchestration.
//!
//! `confmend` drives a streaming language-model backend, watches the
//! per-token confidence signal of each generation, and intervenes when
//! confidence dips below a threshold calibrated from warmup traces.
//! Instead of throwing a faltering reasoning path away, the `reflect`
//! policy interrupts it, asks the model to critique and correct its own
//! partial output, splices the correction in, and resumes — so a path
//! that would have been wasted can still contribute a vote.
//!
//! The crate is organised around six concerns:
//!
//! - [`confidence`]: token confidence, sliding-window smoothing, and
//!   nearest-rank percentile threshold calibration.
//! - [`backend`]: the streaming backend abstraction with a deterministic
//!   scripted implementation and an HTTP client for logprob-capable
//!   completion endpoints.
//! - [`orchestrator`]: warmup calibration, monitored path execution, and
//!   the discard / restart / reflect intervention policies.
//! - [`eval`]: datasets, answer extraction, majority voting, salvage.
//! - [`report`]: benchmark aggregation and table rendering.
//! - [`trace`]: persistent run archives, replay verification, export.
//!
//! Everything is deterministic given a scripted backend and a seed: the
//! same inputs produce byte-identical reports and archives.

#![forbid(unsafe_code)]

pub mod backend;
pub mod confidence;
pub mod config;
pub mod error;
pub mod eval;
pub mod orchestrator;
pub mod reflection;
pub mod report;
pub mod trace;

pub use error::{Error, Result};
