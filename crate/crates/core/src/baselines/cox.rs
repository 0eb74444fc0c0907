use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::weibull::dot;
use super::{require_events, FitReport, SurvivalData};
use crate::error::{Error, Result};
use crate::numerics::{forward_backward, init_uniform, minimize, Graph, LbfgsOptions, ParamStore, Tensor, Var};
use crate::survival::{c_index, efron_nll_log, SurvivalBatch};
use crate::training::{split_indices, EarlyStopping, TrainConfig, TrainReport};

/// Coefficients beyond this magnitude indicate (quasi-)separation.
pub const SEPARATION_LIMIT: f64 = 50.0;

fn check_dim(expected: usize, x: &[f64], op: &'static str) -> Result<()> {
    if x.len() != expected {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("model dimension {expected}, features {}", x.len()),
        });
    }
    Ok(())
}

/// Cox model with `phi(x) = exp(beta.x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxLinear {
    pub beta: Vec<f64>,
}

impl CoxLinear {
    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    pub fn log_phi(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.beta.len(), x, "cph_l_score")?;
        Ok(dot(&self.beta, x))
    }

    pub fn phi(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_phi(x)?.exp())
    }
}

fn linear_objective(beta: &[f64], data: &SurvivalData) -> Result<(f64, Vec<f64>)> {
    let eta: Vec<f64> = data.x.iter().map(|x| dot(beta, x)).collect();
    let (nll, g) = efron_nll_log(&eta, &data.durations, &data.events)?;
    let n = data.len() as f64;
    let mut grad = vec![0.0; beta.len()];
    for (x, gi) in data.x.iter().zip(&g) {
        if *gi == 0.0 {
            continue;
        }
        for (a, xi) in grad.iter_mut().zip(x) {
            *a += gi * xi;
        }
    }
    Ok((nll / n, grad.into_iter().map(|v| v / n).collect()))
}

/// Full-batch fit of the Efron partial likelihood, starting from zero.
pub fn fit_cox_linear(data: &SurvivalData, opts: &LbfgsOptions) -> Result<(CoxLinear, FitReport)> {
    require_events(data)?;
    let m = minimize(|b| linear_objective(b, data), vec![0.0; data.dim()], opts)?;
    let mut report = FitReport::from_minimum(&m, -m.value * data.len() as f64, "cph_l");
    if m.x.iter().any(|b| b.abs() > SEPARATION_LIMIT) {
        log::warn!("cph_l: coefficient beyond {SEPARATION_LIMIT}, data may be separated");
        report.separation = true;
    }
    Ok((CoxLinear { beta: m.x }, report))
}

/// Cox model with a one-hidden-layer tanh network for `log phi`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoxNonlinear {
    params: ParamStore,
    dim: usize,
    hidden: usize,
}

impl CoxNonlinear {
    pub const DEFAULT_HIDDEN: usize = 32;

    pub fn init(dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = TrainConfig { seed, ..Default::default() }.rng();
        let mut params = ParamStore::new();
        params.insert("w1", init_uniform(&mut rng, dim, hidden, dim));
        params.insert("b1", Tensor::zeros(1, hidden));
        params.insert("w2", init_uniform(&mut rng, hidden, 1, hidden));
        Self { params, dim, hidden }
    }

    pub fn from_params(params: ParamStore) -> Result<Self> {
        let w1 = params.require("w1")?;
        let (dim, hidden) = (w1.rows(), w1.cols());
        let ok = params.require("b1")?.shape() == [1, hidden] && params.require("w2")?.shape() == [hidden, 1];
        if !ok {
            return Err(Error::InvalidParameter("inconsistent cph_g parameter shapes".into()));
        }
        Ok(Self { params, dim, hidden })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn log_phi(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x, "cph_g_score")?;
        let w1 = &self.params.require("w1")?;
        let b1 = self.params.require("b1")?.values();
        let w2 = self.params.require("w2")?.values();
        let mut h = b1.to_vec();
        for (p, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                for (hj, w) in h.iter_mut().zip(w1.row(p)) {
                    *hj += xi * w;
                }
            }
        }
        Ok(h.iter().zip(w2).map(|(a, w)| a.tanh() * w).sum())
    }

    pub fn phi(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_phi(x)?.exp())
    }

    /// Graph node holding the column of log hazard ratios for `rows`.
    pub(crate) fn log_phi_graph(g: &mut Graph<'_>, rows: &[&[f64]]) -> Result<Var> {
        let dim = rows.first().map_or(0, |r| r.len());
        let x = g.input(Tensor::matrix(rows.len(), dim, rows.concat())?)?;
        let (w1, b1, w2) = (g.param("w1")?, g.param("b1")?, g.param("w2")?);
        let a = g.matmul(x, w1)?;
        let a = g.add_row(a, b1)?;
        let h = g.tanh(a)?;
        g.matmul(h, w2)
    }
}

/// Efron loss of one minibatch, normalised by its event count.
pub(crate) fn batch_loss(params: &ParamStore, data: &SurvivalData, idx: &[usize]) -> Result<(f64, crate::numerics::Gradients)> {
    let rows: Vec<&[f64]> = idx.iter().map(|&i| data.x[i].as_slice()).collect();
    let durations: Vec<f64> = idx.iter().map(|&i| data.durations[i]).collect();
    let events: Vec<bool> = idx.iter().map(|&i| data.events[i]).collect();
    let n_events = events.iter().filter(|e| **e).count().max(1) as f64;
    forward_backward(params, |g| {
        let eta = CoxNonlinear::log_phi_graph(g, &rows)?;
        let nll = g.efron_nll(eta, &durations, &events)?;
        g.scale(nll, 1.0 / n_events)
    })
}

fn cindex_of(model: &CoxNonlinear, data: &SurvivalData) -> Result<f64> {
    let scores = data.x.iter().map(|x| model.phi(x)).collect::<Result<Vec<_>>>()?;
    c_index(&SurvivalBatch::new(scores, data.durations.clone(), data.events.clone())?)
}

/// Minibatch Adam on the Efron loss with risk sets inside each batch and
/// early stopping on validation C-index.
pub fn fit_cox_nonlinear(data: &SurvivalData, hidden: usize, cfg: &TrainConfig) -> Result<(CoxNonlinear, TrainReport)> {
    require_events(data)?;
    let mut rng = cfg.rng();
    let (train, val) = split_indices(data.len(), cfg.val_fraction, &mut rng);
    let val_data = data.subset(&val);
    let use_val = val_data.event_count() > 0 && val_data.len() > 1;
    let mut model = CoxNonlinear::init(data.dim(), hidden, cfg.seed);
    let adam = cfg.adam();
    let mut report = TrainReport::default();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut order = train;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            if chunk.iter().all(|&i| !data.events[i]) {
                report.skipped_batches += 1;
                continue;
            }
            let (loss, grads) = batch_loss(&model.params, data, chunk)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: batches,
                    detail: format!("loss {loss}"),
                });
            }
            adam.step(&mut model.params, &grads)?;
            total += loss;
            batches += 1;
        }
        report.loss_curve.push(total / batches.max(1) as f64);
        if use_val {
            let c = cindex_of(&model, &val_data)?;
            report.val_cindex.push(c);
            if stopper.record(epoch, c, &model.params) {
                report.stopped_early = true;
                break;
            }
        }
    }
    if let Some((epoch, best)) = stopper.into_best() {
        report.best_epoch = epoch;
        model.params = best;
    } else {
        report.best_epoch = report.loss_curve.len().saturating_sub(1);
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ph_sample(n: usize, beta: &[f64], seed: u64) -> SurvivalData {
        // exponential baseline, Bernoulli/normal covariates, inverse-CDF draws
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut durations = Vec::new();
        let mut events = Vec::new();
        for _ in 0..n {
            let row: Vec<f64> = (0..beta.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let lam = dot(beta, &row).exp();
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            let t = -u.ln() / lam;
            let c = rng.random_range(0.0..2.0);
            durations.push(t.min(c));
            events.push(t <= c);
            x.push(row);
        }
        SurvivalData::new(x, durations, events).unwrap()
    }

    #[test]
    fn zero_beta_scores_one() {
        let m = CoxLinear { beta: vec![0.0; 4] };
        assert_eq!(m.phi(&[1.0, -2.0, 3.0, 0.5]).unwrap(), 1.0);
        let m = CoxLinear { beta: vec![2f64.ln(), 0.0, 0.0] };
        assert!((m.phi(&[1.0, 0.0, 0.0]).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(m.phi(&[1.0]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn objective_gradient_matches_differences() {
        let data = ph_sample(60, &[0.8, -0.3], 3);
        let beta = [0.2, 0.1];
        let (_, g) = linear_objective(&beta, &data).unwrap();
        for k in 0..2 {
            let (mut up, mut dn) = (beta, beta);
            up[k] += 1e-6;
            dn[k] -= 1e-6;
            let fd = (linear_objective(&up, &data).unwrap().0 - linear_objective(&dn, &data).unwrap().0) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn linear_fit_recovers_coefficients() {
        let data = ph_sample(4000, &[1.0, -0.5], 5);
        let (m, report) = fit_cox_linear(&data, &LbfgsOptions::default()).unwrap();
        assert!(report.converged && !report.separation);
        assert!((m.beta[0] - 1.0).abs() < 0.1, "{:?}", m.beta);
        assert!((m.beta[1] + 0.5).abs() < 0.1, "{:?}", m.beta);
    }

    #[test]
    fn intercept_shift_is_flat() {
        // a constant column acts as an intercept: the NLL cannot see it
        let mut data = ph_sample(200, &[0.5], 9);
        for r in &mut data.x {
            r.push(1.0);
        }
        let a = linear_objective(&[0.4, 0.0], &data).unwrap().0;
        let b = linear_objective(&[0.4, 3.7], &data).unwrap().0;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn no_events_is_an_error() {
        let data = SurvivalData::new(vec![vec![1.0]; 3], vec![1.0; 3], vec![false; 3]).unwrap();
        assert!(matches!(fit_cox_linear(&data, &LbfgsOptions::default()), Err(Error::NoEvents)));
    }

    #[test]
    fn nonlinear_forward_paths_agree() {
        let m = CoxNonlinear::init(3, 4, 7);
        let rows = [[0.3, 0.0, -1.0], [1.0, 2.0, 0.5]];
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let mut g = Graph::new(m.params());
        let v = CoxNonlinear::log_phi_graph(&mut g, &refs).unwrap();
        for (i, r) in rows.iter().enumerate() {
            assert!((g.value(v).values()[i] - m.log_phi(r).unwrap()).abs() < 1e-14);
        }
    }

    #[test]
    fn nonlinear_training_is_deterministic_and_learns() {
        let data = ph_sample(600, &[1.0, -0.5], 12);
        let cfg = TrainConfig {
            lr: 0.01,
            batch_size: 64,
            epochs: 8,
            seed: 4,
            ..Default::default()
        };
        let (a, ra) = fit_cox_nonlinear(&data, 8, &cfg).unwrap();
        let (b, rb) = fit_cox_nonlinear(&data, 8, &cfg).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        assert!(cindex_of(&a, &data).unwrap() > 0.6);
    }
}
