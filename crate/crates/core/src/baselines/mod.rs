//! Baseline survival models over averaged feature vectors.

mod cox;
mod mixture;
mod weibull;

pub use cox::{fit_cox_linear, fit_cox_nonlinear, CoxLinear, CoxNonlinear, SEPARATION_LIMIT};
pub use mixture::{fit_cox_mixture, mixture_log_likelihood, CoxMixture};
pub use weibull::{fit_weibull, weibull_log_likelihood, WeibullPH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::MessageObservation;
use crate::numerics::Minimum;

/// Rows of covariates with right-censored outcomes (durations in hours).
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalData {
    pub x: Vec<Vec<f64>>,
    pub durations: Vec<f64>,
    pub events: Vec<bool>,
}

impl SurvivalData {
    pub fn new(x: Vec<Vec<f64>>, durations: Vec<f64>, events: Vec<bool>) -> Result<Self> {
        if x.len() != durations.len() || x.len() != events.len() {
            return Err(Error::ShapeMismatch {
                op: "survival_data",
                detail: format!("{} rows, {} durations, {} events", x.len(), durations.len(), events.len()),
            });
        }
        if let Some(first) = x.first() {
            if x.iter().any(|r| r.len() != first.len()) {
                return Err(Error::ShapeMismatch {
                    op: "survival_data",
                    detail: "ragged feature rows".into(),
                });
            }
        }
        if let Some(d) = durations.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
            return Err(Error::InvalidParameter(format!("duration must be positive, got {d}")));
        }
        if x.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature value".into()));
        }
        Ok(Self { x, durations, events })
    }

    /// Averaged-history rows paired with each observation's outcome.
    pub fn from_averaged(rows: Vec<Vec<f64>>, observations: &[MessageObservation]) -> Result<Self> {
        let durations = observations.iter().map(|o| o.outcome.hours()).collect();
        let events = observations.iter().map(|o| o.outcome.event).collect();
        Self::new(rows, durations, events)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    pub fn event_count(&self) -> usize {
        self.events.iter().filter(|e| **e).count()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: idx.iter().map(|&i| self.x[i].clone()).collect(),
            durations: idx.iter().map(|&i| self.durations[i]).collect(),
            events: idx.iter().map(|&i| self.events[i]).collect(),
        }
    }
}

/// Outcome of a deterministic fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub log_likelihood: f64,
    /// Set when a coefficient exceeded the separation limit.
    #[serde(default)]
    pub separation: bool,
}

impl FitReport {
    pub(crate) fn from_minimum(m: &Minimum, log_likelihood: f64, what: &str) -> Self {
        if !m.converged {
            log::warn!(
                "{what}: no convergence after {} iterations (gradient norm {:.3e})",
                m.iterations,
                m.gradient_norm
            );
        }
        Self {
            converged: m.converged,
            iterations: m.iterations,
            gradient_norm: m.gradient_norm,
            log_likelihood,
            separation: false,
        }
    }
}

pub(crate) fn require_events(data: &SurvivalData) -> Result<()> {
    if data.event_count() == 0 {
        return Err(Error::NoEvents);
    }
    Ok(())
}
