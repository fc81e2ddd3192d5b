//! Action-conditional recurrent session models for next-item recommendation.
//!
//! A user session is a sequence of visited items; at some steps a production
//! recommender has shown a slate of recommended items. The models here predict
//! the next visited item from the navigation history, optionally conditioned
//! on the current slate through a multiplicative state-action fusion:
//!
//! * `navigation` — plain GRU over visited items, slates ignored,
//! * `early`      — the slate representation gates the hidden state *before*
//!   the recurrent transition,
//! * `late`       — the slate gates the hidden state *after* the transition,
//!   for the output only; the recurrent state itself stays untouched,
//! * `clicks`     — the late architecture trained only on clicked-slate steps.
//!
//! The crate is organized as a small pipeline: [`synth`] generates logs,
//! [`datapipe`] parses/encodes/batches them, [`model`] holds parameters and
//! the forward pass, [`grad`] computes exact BPTT gradients (checked against a
//! finite-difference oracle), [`train`] runs the optimization loop, and
//! [`eval`] reports Precision@K with bootstrap confidence intervals.
//! Everything is deterministic given the seeds in the configs.

pub mod datapipe;
pub mod error;
pub mod eval;
pub mod grad;
pub mod model;
pub mod numkernel;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
