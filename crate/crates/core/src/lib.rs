//! Survival models of email time-to-open and per-recipient send-time ranking.
//!
//! The pipeline runs from raw logs ([`event_log`]) through weekly
//! equal-count send bins ([`virtual_time`]) and per-message features
//! ([`features`]) to four classical baselines ([`baselines`]) and an LSTM
//! survival model ([`rnn`]) trained on the Efron partial likelihood
//! ([`survival`]). [`send_time`] ranks bins by predicted hazard ratio and
//! [`synth`] generates populations with known hazards for testing.

pub mod baselines;
pub mod error;
pub mod event_log;
pub mod experiment;
pub mod features;
pub mod model;
pub mod numerics;
pub mod rnn;
pub mod send_time;
pub mod survival;
pub mod synth;
pub mod training;
pub mod virtual_time;

pub use error::{Error, Result};
