use serde::{Deserialize, Serialize};

use super::weibull::{dot, weibull_terms, WeibullPH};
use super::{require_events, FitReport, SurvivalData};
use crate::error::{Error, Result};
use crate::numerics::{minimize, LbfgsOptions};

/// Cure model: a logistic incidence `w(x)` for belonging to the group that
/// can open at all, and a Weibull-PH latency for that group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxMixture {
    pub incidence0: f64,
    pub incidence: Vec<f64>,
    pub susceptible: WeibullPH,
}

fn log_sigmoid(z: f64) -> f64 {
    -softplus(-z)
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl CoxMixture {
    pub fn dim(&self) -> usize {
        self.incidence.len()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.incidence.len() {
            return Err(Error::ShapeMismatch {
                op: "cph_mm_score",
                detail: format!("model dimension {}, features {}", self.incidence.len(), x.len()),
            });
        }
        Ok(())
    }

    /// Probability of belonging to the susceptible group.
    pub fn incidence_prob(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(log_sigmoid(self.incidence0 + dot(&self.incidence, x)).exp())
    }

    pub fn survival(&self, t: f64, x: &[f64]) -> Result<f64> {
        let w = self.incidence_prob(x)?;
        Ok(w * self.susceptible.survival(t, x)? + (1.0 - w))
    }

    /// Population hazard `w h S / S_mix`.
    pub fn hazard(&self, t: f64, x: &[f64]) -> Result<f64> {
        let w = self.incidence_prob(x)?;
        let s = self.susceptible.survival(t, x)?;
        Ok(w * self.susceptible.hazard(t, x)? * s / (w * s + 1.0 - w))
    }

    /// Ranking score `w(x) lambda(x)`.
    pub fn ranking_score(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_ranking_score(x)?.exp())
    }

    pub fn log_ranking_score(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(log_sigmoid(self.incidence0 + dot(&self.incidence, x)) + self.susceptible.log_lambda(x)?)
    }

    fn to_theta(&self) -> Vec<f64> {
        let mut theta = vec![self.incidence0];
        theta.extend_from_slice(&self.incidence);
        theta.extend(self.susceptible.to_theta());
        theta
    }

    fn from_theta(theta: &[f64], dim: usize) -> Self {
        Self {
            incidence0: theta[0],
            incidence: theta[1..=dim].to_vec(),
            susceptible: WeibullPH::from_theta(&theta[dim + 1..]),
        }
    }
}

/// Log-likelihood and gradient in `(a0, a, log gamma, b0, beta)`. With
/// `fixed_incidence` every observation uses that `w` and the incidence
/// gradient is zero.
fn loglik(theta: &[f64], data: &SurvivalData, fixed_incidence: Option<f64>) -> (f64, Vec<f64>) {
    let d = data.dim();
    let (a0, a) = (theta[0], &theta[1..=d]);
    let (log_gamma, b0, beta) = (theta[d + 1], theta[d + 2], &theta[d + 3..]);
    let gamma = log_gamma.exp();
    let mut ll = 0.0;
    let mut grad = vec![0.0; theta.len()];
    for i in 0..data.len() {
        let x = &data.x[i];
        let (log_w, log_1mw, w) = match fixed_incidence {
            Some(w) => (w.ln(), (1.0 - w).ln(), w),
            None => {
                let z = a0 + dot(a, x);
                (log_sigmoid(z), log_sigmoid(-z), log_sigmoid(z).exp())
            }
        };
        let terms = weibull_terms(b0 + dot(beta, x), log_gamma, data.durations[i]);
        let (d_z, d_eta, d_lg) = if data.events[i] {
            ll += log_w + terms.log_density;
            (
                1.0 - w,
                1.0 - terms.cum_hazard,
                1.0 + gamma * terms.log_t - terms.cum_hazard_dlog_gamma,
            )
        } else {
            let log_ws = log_w - terms.cum_hazard;
            let log_m = log_add_exp(log_ws, log_1mw);
            ll += log_m;
            // posterior probability of being susceptible given no open
            let p = (log_ws - log_m).exp();
            (p - w, -p * terms.cum_hazard, -p * terms.cum_hazard_dlog_gamma)
        };
        if fixed_incidence.is_none() {
            grad[0] += d_z;
            for (g, xi) in grad[1..=d].iter_mut().zip(x) {
                *g += d_z * xi;
            }
        }
        grad[d + 1] += d_lg;
        grad[d + 2] += d_eta;
        for (g, xi) in grad[d + 3..].iter_mut().zip(x) {
            *g += d_eta * xi;
        }
    }
    (ll, grad)
}

/// Cure-model log-likelihood; `fixed_incidence` overrides `w(x)` for every
/// observation (with `Some(1.0)` it is the plain Weibull likelihood).
pub fn mixture_log_likelihood(model: &CoxMixture, data: &SurvivalData, fixed_incidence: Option<f64>) -> Result<f64> {
    if model.dim() != data.dim() || model.susceptible.dim() != data.dim() {
        return Err(Error::ShapeMismatch {
            op: "mixture_log_likelihood",
            detail: format!("model dimension {}, data {}", model.dim(), data.dim()),
        });
    }
    if let Some(w) = fixed_incidence {
        if !(w > 0.0 && w <= 1.0) {
            return Err(Error::InvalidParameter(format!("incidence must be in (0, 1], got {w}")));
        }
    }
    Ok(loglik(&model.to_theta(), data, fixed_incidence).0)
}

/// Direct maximum likelihood over incidence and latency parameters.
pub fn fit_cox_mixture(data: &SurvivalData, opts: &LbfgsOptions) -> Result<(CoxMixture, FitReport)> {
    require_events(data)?;
    let events = data.event_count();
    if events == data.len() {
        return Err(Error::MixtureUnidentified);
    }
    let d = data.dim();
    let n = data.len() as f64;
    let share = (events as f64 / n).clamp(0.05, 0.95);
    let event_time: f64 = data
        .durations
        .iter()
        .zip(&data.events)
        .filter(|(_, e)| **e)
        .map(|(t, _)| t)
        .sum();
    let mut theta0 = vec![0.0; 2 * d + 3];
    theta0[0] = (share / (1.0 - share)).ln();
    theta0[d + 2] = (events as f64 / event_time).ln();
    let m = minimize(
        |theta| {
            let (ll, g) = loglik(theta, data, None);
            Ok((-ll / n, g.iter().map(|v| -v / n).collect()))
        },
        theta0,
        opts,
    )?;
    let report = FitReport::from_minimum(&m, -m.value * n, "cph_mm");
    Ok((CoxMixture::from_theta(&m.x, d), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::weibull_log_likelihood;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> CoxMixture {
        CoxMixture {
            incidence0: 0.4,
            incidence: vec![-0.8],
            susceptible: WeibullPH {
                gamma: 1.3,
                beta0: -0.1,
                beta: vec![0.6],
            },
        }
    }

    #[test]
    fn two_observation_hand_evaluation() {
        let data = SurvivalData::new(vec![vec![1.0], vec![-0.5]], vec![0.7, 3.0], vec![true, false]).unwrap();
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let (w1, w2) = (sig(0.4 - 0.8), sig(0.4 + 0.4));
        let (l1, l2) = ((-0.1f64 + 0.6).exp(), (-0.1f64 - 0.3).exp());
        let f1 = l1 * 1.3 * 0.7f64.powf(0.3) * (-l1 * 0.7f64.powf(1.3)).exp();
        let s2 = (-l2 * 3.0f64.powf(1.3)).exp();
        let expected = (w1 * f1).ln() + (w2 * s2 + 1.0 - w2).ln();
        let got = mixture_log_likelihood(&model(), &data, None).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn unit_incidence_is_the_weibull_likelihood() {
        let data = SurvivalData::new(
            vec![vec![1.0], vec![-0.5], vec![0.2]],
            vec![0.7, 3.0, 1.1],
            vec![true, false, false],
        )
        .unwrap();
        let m = model();
        let a = mixture_log_likelihood(&m, &data, Some(1.0)).unwrap();
        let b = weibull_log_likelihood(&m.susceptible, &data).unwrap();
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let data = SurvivalData::new(
            vec![vec![1.0], vec![-0.5], vec![0.2], vec![0.9]],
            vec![0.7, 3.0, 1.1, 0.2],
            vec![true, false, false, true],
        )
        .unwrap();
        let theta = model().to_theta();
        let (_, g) = loglik(&theta, &data, None);
        for k in 0..theta.len() {
            let (mut up, mut dn) = (theta.clone(), theta.clone());
            up[k] += 1e-6;
            dn[k] -= 1e-6;
            let fd = (loglik(&up, &data, None).0 - loglik(&dn, &data, None).0) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-7, "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn survivor_never_drops_below_cure_fraction() {
        let m = model();
        for x in [-2.0, 0.0, 1.5] {
            let w = m.incidence_prob(&[x]).unwrap();
            for t in [0.01, 1.0, 10.0, 1e3] {
                assert!(m.survival(t, &[x]).unwrap() >= 1.0 - w - 1e-15);
            }
        }
    }

    #[test]
    fn no_censoring_is_unidentified() {
        let data = SurvivalData::new(vec![vec![]; 2], vec![1.0, 2.0], vec![true, true]).unwrap();
        assert!(matches!(
            fit_cox_mixture(&data, &LbfgsOptions::default()),
            Err(Error::MixtureUnidentified)
        ));
    }

    #[test]
    fn recovers_cure_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 10_000;
        let window = 12.0;
        let mut durations = Vec::new();
        let mut events = Vec::new();
        for _ in 0..n {
            let t = if rng.random_bool(0.6) {
                f64::INFINITY
            } else {
                -rng.random_range(f64::EPSILON..1.0f64).ln()
            };
            durations.push(t.min(window));
            events.push(t <= window);
        }
        let data = SurvivalData::new(vec![vec![]; n], durations, events).unwrap();
        let (m, report) = fit_cox_mixture(&data, &LbfgsOptions::default()).unwrap();
        assert!(report.converged);
        let w = m.incidence_prob(&[]).unwrap();
        assert!((0.35..=0.45).contains(&w), "w {w}");
    }
}
