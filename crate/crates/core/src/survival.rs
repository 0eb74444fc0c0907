//! Cox partial likelihood with Efron's tie correction, Harrell's C-index and
//! the Weibull survivor/hazard pair.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hazard ratios with censored durations.
///
/// Durations are compared with exact equality when grouping tied event
/// times; they come from integer seconds so equal inputs stay equal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalBatch {
    scores: Vec<f64>,
    durations: Vec<f64>,
    events: Vec<bool>,
}

impl SurvivalBatch {
    pub fn new(scores: Vec<f64>, durations: Vec<f64>, events: Vec<bool>) -> Result<Self> {
        if scores.len() != durations.len() || scores.len() != events.len() {
            return Err(Error::ShapeMismatch {
                op: "survival_batch",
                detail: format!(
                    "{} scores, {} durations, {} events",
                    scores.len(),
                    durations.len(),
                    events.len()
                ),
            });
        }
        if let Some(s) = scores.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::NonFinite(format!("hazard ratio {s} is not positive and finite")));
        }
        if let Some(d) = durations.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
            return Err(Error::InvalidParameter(format!("duration {d} is not positive")));
        }
        Ok(Self {
            scores,
            durations,
            events,
        })
    }

    /// Builds a batch from log hazard ratios.
    pub fn from_log_scores(log_scores: &[f64], durations: Vec<f64>, events: Vec<bool>) -> Result<Self> {
        Self::new(log_scores.iter().map(|x| x.exp()).collect(), durations, events)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn durations(&self) -> &[f64] {
        &self.durations
    }

    pub fn events(&self) -> &[bool] {
        &self.events
    }

    pub fn event_count(&self) -> usize {
        self.events.iter().filter(|&&e| e).count()
    }
}

/// Negative log partial likelihood (Efron ties) and its gradient with
/// respect to the log hazard ratios.
///
/// Risk sums are accumulated relative to the largest log score so large
/// batches cannot overflow.
pub fn efron_nll_log(log_scores: &[f64], durations: &[f64], events: &[bool]) -> Result<(f64, Vec<f64>)> {
    let n = log_scores.len();
    if durations.len() != n || events.len() != n {
        return Err(Error::ShapeMismatch {
            op: "efron_nll",
            detail: format!("{n} scores, {} durations, {} events", durations.len(), events.len()),
        });
    }
    if let Some(x) = log_scores.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("log hazard ratio {x}")));
    }
    if !events.iter().any(|&e| e) {
        return Err(Error::NoEvents);
    }
    let shift = log_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_scores.iter().map(|x| (x - shift).exp()).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| durations[b].total_cmp(&durations[a]));

    // (duration, sum of 1/denominator, sum of (m/d)/denominator), descending
    let mut groups: Vec<(f64, f64, f64)> = Vec::new();
    let mut risk = 0.0;
    let mut nll = 0.0;
    let mut i = 0;
    while i < n {
        let t = durations[order[i]];
        let mut j = i;
        let (mut tied_w, mut tied_eta, mut d) = (0.0, 0.0, 0usize);
        while j < n && durations[order[j]] == t {
            let k = order[j];
            risk += w[k];
            if events[k] {
                tied_w += w[k];
                tied_eta += log_scores[k];
                d += 1;
            }
            j += 1;
        }
        if d > 0 {
            let (mut inv, mut frac) = (0.0, 0.0);
            for m in 0..d {
                let c = m as f64 / d as f64;
                let denom = risk - c * tied_w;
                nll += denom.ln() + shift;
                inv += 1.0 / denom;
                frac += c / denom;
            }
            nll -= tied_eta;
            groups.push((t, inv, frac));
        }
        i = j;
    }

    // cumulative sum of 1/denominator over event times up to each duration
    groups.reverse();
    let mut cumulative = Vec::with_capacity(groups.len());
    let mut acc = 0.0;
    for g in &groups {
        acc += g.1;
        cumulative.push(acc);
    }
    let grad = (0..n)
        .map(|k| {
            let t = durations[k];
            let upto = groups.partition_point(|g| g.0 <= t);
            let mut g = if upto > 0 { w[k] * cumulative[upto - 1] } else { 0.0 };
            if events[k] {
                g -= 1.0;
                g -= w[k] * groups[upto - 1].2;
            }
            g
        })
        .collect();
    if !nll.is_finite() {
        return Err(Error::NonFinite(format!("efron_nll evaluated to {nll}")));
    }
    Ok((nll, grad))
}

pub fn efron_nll(batch: &SurvivalBatch) -> Result<f64> {
    let logs: Vec<f64> = batch.scores.iter().map(|s| s.ln()).collect();
    efron_nll_log(&logs, &batch.durations, &batch.events).map(|(v, _)| v)
}

/// Gradient of [`efron_nll`] with respect to each log hazard ratio.
pub fn efron_nll_gradient(batch: &SurvivalBatch) -> Result<Vec<f64>> {
    let logs: Vec<f64> = batch.scores.iter().map(|s| s.ln()).collect();
    efron_nll_log(&logs, &batch.durations, &batch.events).map(|(_, g)| g)
}

/// Gradient of [`efron_nll`] with respect to each hazard ratio.
pub fn efron_nll_gradient_phi(batch: &SurvivalBatch) -> Result<Vec<f64>> {
    Ok(efron_nll_gradient(batch)?
        .into_iter()
        .zip(&batch.scores)
        .map(|(g, s)| g / s)
        .collect())
}

struct Fenwick(Vec<u64>);

impl Fenwick {
    fn new(n: usize) -> Self {
        Self(vec![0; n + 1])
    }

    fn add(&mut self, idx: usize) {
        let mut i = idx + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks `< idx`.
    fn below(&self, idx: usize) -> u64 {
        let mut i = idx;
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Concordant/tied/admissible pair counts for Harrell's C-index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PairCounts {
    pub concordant: u64,
    pub tied_scores: u64,
    pub admissible: u64,
}

impl PairCounts {
    pub fn c_index(&self) -> Result<f64> {
        if self.admissible == 0 {
            return Err(Error::NoAdmissiblePairs);
        }
        Ok((self.concordant as f64 + 0.5 * self.tied_scores as f64) / self.admissible as f64)
    }
}

/// Pair counts in O(n log n).
///
/// A pair is admissible when the shorter duration ends in an event. With
/// equal durations the pair is admissible only if exactly one is an event;
/// the event is then taken as the earlier one. A higher score for the
/// earlier event is concordant; equal scores earn half credit.
pub fn concordance_counts(scores: &[f64], durations: &[f64], events: &[bool]) -> PairCounts {
    let n = scores.len();
    let mut ranked: Vec<f64> = scores.to_vec();
    ranked.sort_by(f64::total_cmp);
    ranked.dedup();
    let rank = |s: f64| ranked.partition_point(|&r| r < s);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| durations[b].total_cmp(&durations[a]));

    let mut tree = Fenwick::new(ranked.len());
    let mut inserted = 0u64;
    let mut counts = PairCounts::default();
    let mut i = 0;
    while i < n {
        let t = durations[order[i]];
        let mut j = i;
        while j < n && durations[order[j]] == t {
            j += 1;
        }
        let group = &order[i..j];
        for &k in group.iter().filter(|&&k| !events[k]) {
            tree.add(rank(scores[k]));
            inserted += 1;
        }
        for &k in group.iter().filter(|&&k| events[k]) {
            let r = rank(scores[k]);
            let below = tree.below(r);
            let at = tree.below(r + 1) - below;
            counts.concordant += below;
            counts.tied_scores += at;
            counts.admissible += inserted;
        }
        for &k in group.iter().filter(|&&k| events[k]) {
            tree.add(rank(scores[k]));
            inserted += 1;
        }
        i = j;
    }
    counts
}

pub fn c_index(batch: &SurvivalBatch) -> Result<f64> {
    concordance_counts(&batch.scores, &batch.durations, &batch.events).c_index()
}

fn check_weibull(t: f64, lambda: f64, gamma: f64) -> Result<()> {
    if !(lambda > 0.0 && gamma > 0.0 && lambda.is_finite() && gamma.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "Weibull parameters must be positive: lambda={lambda}, gamma={gamma}"
        )));
    }
    if t.is_nan() || t < 0.0 {
        return Err(Error::InvalidParameter(format!("time {t} must be non-negative")));
    }
    Ok(())
}

/// `S(t) = exp(-lambda t^gamma)`.
pub fn weibull_survival(t: f64, lambda: f64, gamma: f64) -> Result<f64> {
    check_weibull(t, lambda, gamma)?;
    Ok((-lambda * t.powf(gamma)).exp())
}

/// `h(t) = lambda gamma t^(gamma - 1)`.
pub fn weibull_hazard(t: f64, lambda: f64, gamma: f64) -> Result<f64> {
    check_weibull(t, lambda, gamma)?;
    Ok(lambda * gamma * t.powf(gamma - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct evaluation of the tied partial likelihood as products.
    fn efron_oracle(phi: &[f64], t: &[f64], e: &[bool]) -> f64 {
        let mut times: Vec<f64> = (0..t.len()).filter(|&i| e[i]).map(|i| t[i]).collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        let mut lik = 1.0f64;
        for &tl in &times {
            let tied: Vec<usize> = (0..t.len()).filter(|&i| e[i] && t[i] == tl).collect();
            let risk: f64 = (0..t.len()).filter(|&i| t[i] >= tl).map(|i| phi[i]).sum();
            let tied_sum: f64 = tied.iter().map(|&i| phi[i]).sum();
            let d = tied.len() as f64;
            let num: f64 = tied.iter().map(|&i| phi[i]).product();
            let den: f64 = (0..tied.len()).map(|m| risk - m as f64 / d * tied_sum).product();
            lik *= num / den;
        }
        -lik.ln()
    }

    fn brute_cindex(s: &[f64], t: &[f64], e: &[bool]) -> Option<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        for a in 0..s.len() {
            for b in 0..s.len() {
                let earlier_event = e[a] && (t[a] < t[b] || (t[a] == t[b] && !e[b]));
                if earlier_event {
                    den += 1.0;
                    if s[a] > s[b] {
                        num += 1.0;
                    } else if s[a] == s[b] {
                        num += 0.5;
                    }
                }
            }
        }
        (den > 0.0).then(|| num / den)
    }

    #[test]
    fn single_earliest_event_with_equal_scores_is_log_n() {
        for n in 1..10 {
            let durations: Vec<f64> = (1..=n).map(|i| i as f64).collect();
            let mut events = vec![false; n];
            events[0] = true;
            let batch = SurvivalBatch::new(vec![1.7; n], durations, events).unwrap();
            assert!((efron_nll(&batch).unwrap() - (n as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn tied_fixture_matches_hand_evaluation() {
        // t=1: events {0,1}, risk all four: sum 5, tied sum 3 -> denominators 5 and 3.5
        // t=2: event {2}, risk {2,3}: sum 2
        let expected = -((2.0f64 * 1.0).ln() - 5.0f64.ln() - 3.5f64.ln() + 1.0f64.ln() - 2.0f64.ln());
        let batch = SurvivalBatch::new(
            vec![2.0, 1.0, 1.0, 1.0],
            vec![1.0, 1.0, 2.0, 3.0],
            vec![true, true, true, false],
        )
        .unwrap();
        assert!((efron_nll(&batch).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 2.862_200_880_929_468_6).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let no_events = SurvivalBatch::new(vec![1.0; 3], vec![1.0, 2.0, 3.0], vec![false; 3]).unwrap();
        assert!(matches!(efron_nll(&no_events), Err(Error::NoEvents)));
        assert!(SurvivalBatch::new(vec![f64::NAN], vec![1.0], vec![true]).is_err());
        assert!(SurvivalBatch::new(vec![1.0], vec![0.0], vec![true]).is_err());
        assert!(SurvivalBatch::new(vec![1.0, 2.0], vec![1.0], vec![true]).is_err());
    }

    #[test]
    fn censored_before_all_events_has_zero_gradient() {
        let batch = SurvivalBatch::new(
            vec![1.3, 0.4, 2.2, 0.9],
            vec![0.5, 1.0, 2.0, 2.0],
            vec![false, true, true, false],
        )
        .unwrap();
        let g = efron_nll_gradient(&batch).unwrap();
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn gradient_matches_central_differences_with_ties() {
        let logs = [0.3, -0.7, 1.1, 0.05, -0.2, 0.6, -1.4];
        let durations = vec![2.0, 1.0, 2.0, 3.0, 1.0, 2.0, 4.0];
        let events = vec![true, true, true, false, true, false, true];
        let (_, g) = efron_nll_log(&logs, &durations, &events).unwrap();
        let h = 1e-5;
        for k in 0..logs.len() {
            let mut up = logs;
            let mut dn = logs;
            up[k] += h;
            dn[k] -= h;
            let fd = (efron_nll_log(&up, &durations, &events).unwrap().0
                - efron_nll_log(&dn, &durations, &events).unwrap().0)
                / (2.0 * h);
            let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-8);
            assert!(rel <= 1e-6, "coordinate {k}: analytic {} fd {fd}", g[k]);
        }
    }

    #[test]
    fn phi_gradient_is_chain_rule_of_log_gradient() {
        let batch = SurvivalBatch::new(vec![2.0, 1.0, 0.5], vec![1.0, 2.0, 3.0], vec![true, true, false]).unwrap();
        let gl = efron_nll_gradient(&batch).unwrap();
        let gp = efron_nll_gradient_phi(&batch).unwrap();
        for i in 0..3 {
            assert!((gp[i] * batch.scores()[i] - gl[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn cindex_conventions() {
        let durations = vec![1.0, 2.0, 3.0, 4.0];
        let perfect = SurvivalBatch::new(vec![4.0, 3.0, 2.0, 1.0], durations.clone(), vec![true; 4]).unwrap();
        assert_eq!(c_index(&perfect).unwrap(), 1.0);
        let tied = SurvivalBatch::new(vec![1.0; 4], durations.clone(), vec![true; 4]).unwrap();
        assert_eq!(c_index(&tied).unwrap(), 0.5);
        let reversed = SurvivalBatch::new(vec![1.0, 2.0, 3.0, 4.0], durations, vec![true; 4]).unwrap();
        assert_eq!(c_index(&reversed).unwrap(), 0.0);
    }

    #[test]
    fn cindex_three_point_example() {
        // pairs (0,1) and (0,2) are admissible; (2,1) is not since the
        // shorter duration (1) is censored
        let batch = SurvivalBatch::new(vec![3.0, 1.0, 2.0], vec![2.0, 3.0, 5.0], vec![true, false, true]).unwrap();
        let counts = concordance_counts(batch.scores(), batch.durations(), batch.events());
        assert_eq!(counts.admissible, 2);
        assert_eq!(c_index(&batch).unwrap(), 1.0);
        assert_eq!(brute_cindex(batch.scores(), batch.durations(), batch.events()), Some(1.0));
    }

    #[test]
    fn cindex_tied_durations() {
        // equal durations: event vs censored admissible, both events not
        let batch = SurvivalBatch::new(vec![2.0, 1.0, 3.0], vec![1.0, 1.0, 1.0], vec![true, false, true]).unwrap();
        let counts = concordance_counts(batch.scores(), batch.durations(), batch.events());
        assert_eq!(counts.admissible, 2);
        assert_eq!(counts.concordant, 2);
        let all_censored = SurvivalBatch::new(vec![1.0, 2.0], vec![1.0, 2.0], vec![false, false]).unwrap();
        assert!(matches!(c_index(&all_censored), Err(Error::NoAdmissiblePairs)));
    }

    #[test]
    fn weibull_pair() {
        assert_eq!(weibull_survival(0.0, 0.7, 1.3).unwrap(), 1.0);
        assert!((weibull_survival(2.0, 0.5, 2.0).unwrap() - (-2.0f64).exp()).abs() < 1e-15);
        assert!((weibull_survival(2.0, 0.5, 2.0).unwrap() - 0.135_335_283_236_612_7).abs() < 1e-12);
        for t in [0.1, 1.0, 7.5] {
            assert_eq!(weibull_hazard(t, 0.8, 1.0).unwrap(), 0.8);
        }
        assert!(weibull_hazard(1.0, 0.0, 1.0).is_err());
        assert!(weibull_survival(1.0, 1.0, -2.0).is_err());
        assert!(weibull_survival(-1.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn weibull_hazard_is_minus_log_survival_derivative() {
        let (lambda, gamma) = (0.3, 1.7);
        let h = 1e-5;
        for t in [0.2, 1.0, 2.5, 6.0] {
            let up = weibull_survival(t + h, lambda, gamma).unwrap().ln();
            let dn = weibull_survival(t - h, lambda, gamma).unwrap().ln();
            let fd = -(up - dn) / (2.0 * h);
            assert!((fd - weibull_hazard(t, lambda, gamma).unwrap()).abs() < 1e-8);
        }
    }

    fn batch_strategy(max: usize, distinct_times: bool) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
        (2..=max).prop_flat_map(move |n| {
            let times = if distinct_times {
                Just((1..=n).map(|i| i as f64).collect::<Vec<_>>()).prop_shuffle().boxed()
            } else {
                proptest::collection::vec((1u8..6).prop_map(f64::from), n).boxed()
            };
            (
                proptest::collection::vec(-2.0f64..2.0, n),
                times,
                proptest::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn tie_free_efron_equals_exact_cox((logs, t, mut e) in batch_strategy(10, true)) {
            e[0] = true;
            let phi: Vec<f64> = logs.iter().map(|x| x.exp()).collect();
            let (nll, _) = efron_nll_log(&logs, &t, &e).unwrap();
            prop_assert!((nll - efron_oracle(&phi, &t, &e)).abs() < 1e-12);
        }

        #[test]
        fn tied_efron_matches_product_oracle((logs, t, mut e) in batch_strategy(10, false)) {
            e[0] = true;
            let phi: Vec<f64> = logs.iter().map(|x| x.exp()).collect();
            let (nll, _) = efron_nll_log(&logs, &t, &e).unwrap();
            prop_assert!((nll - efron_oracle(&phi, &t, &e)).abs() < 1e-10);
        }

        #[test]
        fn efron_scale_and_order_invariance((logs, t, mut e) in batch_strategy(12, false), c in -3.0f64..3.0) {
            e[0] = true;
            let base = efron_nll_log(&logs, &t, &e).unwrap().0;
            let shifted: Vec<f64> = logs.iter().map(|x| x + c).collect();
            prop_assert!((efron_nll_log(&shifted, &t, &e).unwrap().0 - base).abs() < 1e-10);
            let rev = |v: &Vec<f64>| v.iter().rev().copied().collect::<Vec<_>>();
            let er: Vec<bool> = e.iter().rev().copied().collect();
            prop_assert!((efron_nll_log(&rev(&logs), &rev(&t), &er).unwrap().0 - base).abs() < 1e-10);
        }

        #[test]
        fn gradient_sums_to_zero((logs, t, mut e) in batch_strategy(12, false)) {
            e[0] = true;
            let (_, g) = efron_nll_log(&logs, &t, &e).unwrap();
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-10);
        }

        #[test]
        fn cindex_matches_pair_enumeration(
            (logs, t, e) in batch_strategy(50, false),
            quantize in any::<bool>(),
        ) {
            let s: Vec<f64> = if quantize { logs.iter().map(|x| x.round()).collect() } else { logs };
            let fast = concordance_counts(&s, &t, &e).c_index().ok();
            prop_assert_eq!(fast, brute_cindex(&s, &t, &e));
        }

        #[test]
        fn cindex_monotone_transform_invariance((logs, t, e) in batch_strategy(30, false)) {
            prop_assume!(brute_cindex(&logs, &t, &e).is_some());
            let a = concordance_counts(&logs, &t, &e).c_index().unwrap();
            let exp: Vec<f64> = logs.iter().map(|x| (3.0 * x).exp()).collect();
            prop_assert_eq!(a, concordance_counts(&exp, &t, &e).c_index().unwrap());
        }
    }
}
