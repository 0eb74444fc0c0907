use serde::{Deserialize, Serialize};

use super::{FitReport, SurvivalData};
use crate::error::{Error, Result};
use crate::numerics::{minimize, LbfgsOptions};
use crate::survival::{weibull_hazard, weibull_survival};

/// Weibull proportional-hazards model with scale `lambda(x) = exp(b0 + beta.x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeibullPH {
    pub gamma: f64,
    pub beta0: f64,
    pub beta: Vec<f64>,
}

impl WeibullPH {
    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.beta.len() {
            return Err(Error::ShapeMismatch {
                op: "weibull_score",
                detail: format!("model dimension {}, features {}", self.beta.len(), x.len()),
            });
        }
        Ok(())
    }

    pub fn log_lambda(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.beta0 + dot(&self.beta, x))
    }

    pub fn lambda(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_lambda(x)?.exp())
    }

    pub fn hazard(&self, t: f64, x: &[f64]) -> Result<f64> {
        weibull_hazard(t, self.lambda(x)?, self.gamma)
    }

    pub fn survival(&self, t: f64, x: &[f64]) -> Result<f64> {
        weibull_survival(t, self.lambda(x)?, self.gamma)
    }

    pub(crate) fn to_theta(&self) -> Vec<f64> {
        let mut theta = vec![self.gamma.ln(), self.beta0];
        theta.extend_from_slice(&self.beta);
        theta
    }

    pub(crate) fn from_theta(theta: &[f64]) -> Self {
        Self {
            gamma: theta[0].exp(),
            beta0: theta[1],
            beta: theta[2..].to_vec(),
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Log-density and log-survivor pieces of one observation, with gradients
/// with respect to the linear predictor and log shape.
pub(crate) struct WeibullTerms {
    /// `log f(t)` for events.
    pub log_density: f64,
    /// `lambda t^gamma`, i.e. `-log S(t)`.
    pub cum_hazard: f64,
    /// `d cum_hazard / d log gamma`.
    pub cum_hazard_dlog_gamma: f64,
    pub log_t: f64,
}

pub(crate) fn weibull_terms(eta: f64, log_gamma: f64, t: f64) -> WeibullTerms {
    let gamma = log_gamma.exp();
    let log_t = t.ln();
    let cum_hazard = (eta + gamma * log_t).exp();
    WeibullTerms {
        log_density: eta + log_gamma + (gamma - 1.0) * log_t - cum_hazard,
        cum_hazard,
        cum_hazard_dlog_gamma: cum_hazard * gamma * log_t,
        log_t,
    }
}

/// Censored log-likelihood and its gradient in `(log gamma, b0, beta)`.
pub(crate) fn weibull_loglik(theta: &[f64], data: &SurvivalData) -> (f64, Vec<f64>) {
    let (log_gamma, b0, beta) = (theta[0], theta[1], &theta[2..]);
    let gamma = log_gamma.exp();
    let mut ll = 0.0;
    let mut grad = vec![0.0; theta.len()];
    for i in 0..data.len() {
        let x = &data.x[i];
        let eta = b0 + dot(beta, x);
        let w = weibull_terms(eta, log_gamma, data.durations[i]);
        let (d_eta, d_lg) = if data.events[i] {
            ll += w.log_density;
            (1.0 - w.cum_hazard, 1.0 + gamma * w.log_t - w.cum_hazard_dlog_gamma)
        } else {
            ll -= w.cum_hazard;
            (-w.cum_hazard, -w.cum_hazard_dlog_gamma)
        };
        grad[0] += d_lg;
        grad[1] += d_eta;
        for (g, xi) in grad[2..].iter_mut().zip(x) {
            *g += d_eta * xi;
        }
    }
    (ll, grad)
}

/// Censored log-likelihood of `model` on `data`.
pub fn weibull_log_likelihood(model: &WeibullPH, data: &SurvivalData) -> Result<f64> {
    if model.dim() != data.dim() {
        return Err(Error::ShapeMismatch {
            op: "weibull_log_likelihood",
            detail: format!("model dimension {}, data {}", model.dim(), data.dim()),
        });
    }
    Ok(weibull_loglik(&model.to_theta(), data).0)
}

/// Maximum-likelihood fit with exponential starting values.
pub fn fit_weibull(data: &SurvivalData, opts: &LbfgsOptions) -> Result<(WeibullPH, FitReport)> {
    let events = data.event_count();
    if events == 0 {
        return Err(Error::AllCensored);
    }
    let n = data.len() as f64;
    let exposure: f64 = data.durations.iter().sum();
    let mut theta0 = vec![0.0; data.dim() + 2];
    theta0[1] = (events as f64 / exposure).ln();
    let m = minimize(
        |theta| {
            let (ll, g) = weibull_loglik(theta, data);
            Ok((-ll / n, g.iter().map(|v| -v / n).collect()))
        },
        theta0,
        opts,
    )?;
    let model = WeibullPH::from_theta(&m.x);
    let report = FitReport::from_minimum(&m, -m.value * n, "weibull");
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Exp};

    #[test]
    fn three_observation_hand_evaluation() {
        let data = SurvivalData::new(
            vec![vec![1.0], vec![0.0], vec![-1.0]],
            vec![0.5, 2.0, 1.5],
            vec![true, false, true],
        )
        .unwrap();
        let m = WeibullPH {
            gamma: 1.5,
            beta0: -0.2,
            beta: vec![0.7],
        };
        let lam = |x: f64| (-0.2f64 + 0.7 * x).exp();
        let event = |t: f64, l: f64| l.ln() + 1.5f64.ln() + 0.5 * t.ln() - l * t.powf(1.5);
        let expected = event(0.5, lam(1.0)) - lam(0.0) * 2.0f64.powf(1.5) + event(1.5, lam(-1.0));
        assert!((weibull_log_likelihood(&m, &data).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let data = SurvivalData::new(
            vec![vec![1.0, 0.2], vec![0.0, -0.4], vec![-1.0, 0.9], vec![0.3, 0.3]],
            vec![0.5, 2.0, 1.5, 0.7],
            vec![true, false, true, true],
        )
        .unwrap();
        let theta = [0.3, -0.2, 0.7, -0.4];
        let (_, g) = weibull_loglik(&theta, &data);
        for k in 0..theta.len() {
            let (mut up, mut dn) = (theta, theta);
            up[k] += 1e-6;
            dn[k] -= 1e-6;
            let fd = (weibull_loglik(&up, &data).0 - weibull_loglik(&dn, &data).0) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-7, "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn recovers_exponential_rate() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let exp = Exp::new(2.0).unwrap();
        let n = 10_000;
        let durations: Vec<f64> = (0..n).map(|_| exp.sample(&mut rng)).collect();
        let data = SurvivalData::new(vec![vec![]; n], durations, vec![true; n]).unwrap();
        let (m, report) = fit_weibull(&data, &LbfgsOptions::default()).unwrap();
        assert!(report.converged);
        assert!((0.95..=1.05).contains(&m.gamma), "gamma {}", m.gamma);
        assert!((1.9..=2.1).contains(&m.beta0.exp()), "lambda {}", m.beta0.exp());
    }

    #[test]
    fn all_censored_is_an_error() {
        let data = SurvivalData::new(vec![vec![]; 3], vec![1.0, 2.0, 3.0], vec![false; 3]).unwrap();
        assert!(matches!(fit_weibull(&data, &LbfgsOptions::default()), Err(Error::AllCensored)));
    }

    #[test]
    fn hazard_monotone_in_shape() {
        let inc = WeibullPH { gamma: 1.8, beta0: 0.0, beta: vec![] };
        let dec = WeibullPH { gamma: 0.6, ..inc.clone() };
        let ts = [0.1, 0.5, 1.0, 3.0, 9.0];
        for w in ts.windows(2) {
            assert!(inc.hazard(w[1], &[]).unwrap() > inc.hazard(w[0], &[]).unwrap());
            assert!(dec.hazard(w[1], &[]).unwrap() < dec.hazard(w[0], &[]).unwrap());
        }
        let s = WeibullPH { gamma: 2.0, beta0: 0.5f64.ln(), beta: vec![] };
        assert!((s.survival(2.0, &[]).unwrap() - (-2.0f64).exp()).abs() < 1e-15);
    }
}
