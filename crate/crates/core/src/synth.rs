//! Synthetic recipient populations with known hazards.
//!
//! Each message's open delay follows a Weibull proportional-hazards law
//! whose log hazard ratio combines the message's features, a per-bin
//! offset, a carryover bonus when the previous message was opened and a
//! recipient frailty. Never-openers are recipients who open nothing.

use std::fs::File;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::baselines::SurvivalData;
use crate::error::{Error, Result};
use crate::event_log::{
    window_seconds, write_emails_csv, write_purchases_csv, Channel, PurchaseRecord, RawRecord,
    RecipientHistory, TimeWindow, SECONDS_PER_DAY, SECONDS_PER_HOUR,
};
use crate::features::{features_at, ExtractContext, DENSE_DIM};
use crate::survival::{c_index, SurvivalBatch};
use crate::virtual_time::{week_start, BinScheme, SECONDS_PER_WEEK};

/// Monday 2024-01-01 00:00 UTC.
pub const DEFAULT_START: i64 = 1_704_067_200;

/// Distribution of send offsets within the week.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OffsetDistribution {
    Uniform,
    /// Gaussian bumps (hours from Monday 00:00), wrapped onto the week.
    Peaks { peaks: Vec<OffsetPeak> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetPeak {
    pub center_hours: f64,
    pub sd_hours: f64,
    pub weight: f64,
}

impl OffsetDistribution {
    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<i64> {
        match self {
            OffsetDistribution::Uniform => Ok(rng.random_range(0..SECONDS_PER_WEEK)),
            OffsetDistribution::Peaks { peaks } => {
                let total: f64 = peaks.iter().map(|p| p.weight).sum();
                if peaks.is_empty() || total.is_nan() || total <= 0.0 {
                    return Err(Error::Config("offset peaks need positive total weight".into()));
                }
                let mut u = rng.random_range(0.0..total);
                let peak = peaks
                    .iter()
                    .find(|p| {
                        u -= p.weight;
                        u < 0.0
                    })
                    .unwrap_or(&peaks[peaks.len() - 1]);
                let normal = Normal::new(peak.center_hours, peak.sd_hours.max(1e-9))
                    .map_err(|e| Error::Config(format!("offset peak: {e}")))?;
                let hours = normal.sample(rng);
                Ok(((hours * SECONDS_PER_HOUR as f64) as i64).rem_euclid(SECONDS_PER_WEEK))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub n_recipients: usize,
    pub messages_per_recipient: usize,
    pub start_time: i64,
    pub days: i64,
    pub send_offsets: OffsetDistribution,
    /// Baseline Weibull scale, per hour.
    pub lambda0: f64,
    pub gamma0: f64,
    /// Coefficients on the eight scaled dense features.
    pub beta: Vec<f64>,
    /// Log-hazard offsets on equal-width weekly bins; empty means none.
    pub bin_effects: Vec<f64>,
    /// Log-hazard bonus when the previous message was opened.
    pub carryover: f64,
    /// Probability that a recipient never opens.
    pub p_never: f64,
    /// Standard deviation of the recipient's log-normal frailty.
    pub frailty_sd: f64,
    /// Share of campaign slots mailed to every recipient.
    pub mass_share: f64,
    /// Audience groups of a targeted campaign.
    pub target_groups: usize,
    pub click_prob: f64,
    pub purchase_rate_per_day: f64,
    pub web_share: f64,
    pub direct_mail_rate_per_day: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            n_recipients: 1000,
            messages_per_recipient: 24,
            start_time: DEFAULT_START,
            days: 150,
            send_offsets: OffsetDistribution::Uniform,
            lambda0: 0.05,
            gamma0: 0.8,
            beta: vec![0.0; DENSE_DIM],
            bin_effects: Vec::new(),
            carryover: 0.0,
            p_never: 0.0,
            frailty_sd: 0.0,
            mass_share: 0.5,
            target_groups: 2,
            click_prob: 0.2,
            purchase_rate_per_day: 0.02,
            web_share: 0.6,
            direct_mail_rate_per_day: 0.01,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("generator spec: {m}")));
        if !(self.lambda0 > 0.0 && self.lambda0.is_finite()) || !(self.gamma0 > 0.0 && self.gamma0.is_finite()) {
            return bad("lambda0 and gamma0 must be positive");
        }
        if !(0.0..1.0).contains(&self.p_never) {
            return bad("p_never must lie in [0, 1)");
        }
        if self.beta.len() != DENSE_DIM {
            return bad("beta needs one coefficient per dense feature");
        }
        if self.n_recipients == 0 || self.messages_per_recipient == 0 || self.days <= 0 {
            return bad("population, message count and days must be positive");
        }
        if !(0.0..=1.0).contains(&self.mass_share) || !(0.0..=1.0).contains(&self.click_prob) {
            return bad("shares must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.web_share) || self.target_groups == 0 {
            return bad("web_share must lie in [0, 1] and target_groups be positive");
        }
        if self.purchase_rate_per_day < 0.0 || self.direct_mail_rate_per_day < 0.0 || self.frailty_sd < 0.0 {
            return bad("rates and frailty spread must be non-negative");
        }
        if self.start_time.rem_euclid(SECONDS_PER_DAY) != 0 || week_start(self.start_time) != self.start_time {
            return bad("start_time must be a Monday 00:00 UTC");
        }
        Ok(())
    }

    pub fn window(&self) -> TimeWindow {
        TimeWindow {
            start: self.start_time,
            end: self.start_time + self.days * SECONDS_PER_DAY,
        }
    }

    fn bin_scheme(&self) -> Result<Option<BinScheme>> {
        if self.bin_effects.is_empty() {
            return Ok(None);
        }
        BinScheme::uniform(self.bin_effects.len()).map(Some)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthMessage {
    pub recipient_id: String,
    pub campaign_id: String,
    pub send_time: i64,
    /// Generator bin of the send time, when bin effects are planted.
    pub bin: Option<usize>,
    /// Log hazard ratio relative to the baseline.
    pub log_phi: f64,
    pub never_opener: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: GeneratorSpec,
    pub window: TimeWindow,
    pub messages: Vec<TruthMessage>,
}

impl GroundTruth {
    /// True hazard ratio; zero for never-openers.
    pub fn phi(&self, m: &TruthMessage) -> f64 {
        if m.never_opener {
            0.0
        } else {
            m.log_phi.exp()
        }
    }

    /// Closed-form probability of opening within `window_hours`.
    pub fn open_probability(&self, m: &TruthMessage, window_hours: f64) -> f64 {
        let s = &self.spec;
        1.0 - (-s.lambda0 * window_hours.powf(s.gamma0) * self.phi(m)).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub emails: Vec<RawRecord>,
    pub purchases: Vec<PurchaseRecord>,
    pub truth: GroundTruth,
}

pub const EMAILS_FILE: &str = "emails.csv";
pub const PURCHASES_FILE: &str = "purchases.csv";
pub const TRUTH_FILE: &str = "ground_truth.json";

impl SynthOutput {
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| {
            let p = dir.join(name);
            File::create(&p).map_err(|e| Error::io(&p, e))
        };
        write_emails_csv(open(EMAILS_FILE)?, &self.emails)?;
        write_purchases_csv(open(PURCHASES_FILE)?, &self.purchases)?;
        let p = dir.join(TRUTH_FILE);
        std::fs::write(&p, serde_json::to_string_pretty(&self.truth)?).map_err(|e| Error::io(&p, e))
    }
}

fn recipient_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn recipient_id(i: usize) -> String {
    format!("r{i:06}")
}

/// Poisson event times on `[from, to)`.
fn poisson_times(rng: &mut ChaCha8Rng, rate_per_day: f64, from: i64, to: i64) -> Vec<i64> {
    if rate_per_day <= 0.0 {
        return Vec::new();
    }
    let days = (to - from) as f64 / SECONDS_PER_DAY as f64;
    let n = Poisson::new(rate_per_day * days).map_or(0.0, |p| p.sample(rng)) as usize;
    let mut ts: Vec<i64> = (0..n).map(|_| rng.random_range(from..to)).collect();
    ts.sort_unstable();
    ts
}

/// Weibull-PH delay in hours by inverse CDF; infinite when `phi` is zero.
fn sample_delay(rng: &mut ChaCha8Rng, lambda0: f64, gamma0: f64, phi: f64) -> f64 {
    if phi <= 0.0 {
        return f64::INFINITY;
    }
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    (-u.ln() / (lambda0 * phi)).powf(1.0 / gamma0)
}

/// Generates a population according to `spec`.
pub fn generate(spec: &GeneratorSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let window = spec.window();
    let scheme = spec.bin_scheme()?;
    let m = spec.messages_per_recipient;
    let n = spec.n_recipients;

    // campaign slots: mass slots reach everyone, targeted slots one group
    let mut slot_rng = recipient_rng(spec.seed, u64::MAX);
    let mass: Vec<bool> = (0..m).map(|_| slot_rng.random_bool(spec.mass_share)).collect();
    let groups: Vec<usize> = (0..n).map(|_| slot_rng.random_range(0..spec.target_groups)).collect();
    let mut group_sizes = vec![0u64; spec.target_groups];
    for &g in &groups {
        group_sizes[g] += 1;
    }

    // features need some bin; without planted effects any scheme will do
    let feature_scheme = match &scheme {
        Some(s) => s.clone(),
        None => BinScheme::uniform(2)?,
    };
    let ctx = ExtractContext {
        scheme: &feature_scheme,
        window_hours: 0.0,
        population: n,
    };
    let weeks = ((window.end - window.start) / SECONDS_PER_WEEK).max(1);
    let mut emails = Vec::with_capacity(n * m);
    let mut purchases = Vec::new();
    let mut truth = Vec::with_capacity(n * m);

    for (i, &group) in groups.iter().enumerate() {
        let mut rng = recipient_rng(spec.seed, i as u64);
        let id = recipient_id(i);
        let never = rng.random_bool(spec.p_never);
        let frailty = if spec.frailty_sd > 0.0 {
            Normal::new(0.0, spec.frailty_sd)
                .map_err(|e| Error::Config(format!("frailty: {e}")))?
                .sample(&mut rng)
        } else {
            0.0
        };

        let mut sends = Vec::with_capacity(m);
        while sends.len() < m {
            let week = rng.random_range(0..weeks);
            let t = window.start + week * SECONDS_PER_WEEK + spec.send_offsets.sample(&mut rng)?;
            if t < window.end && !sends.contains(&t) {
                sends.push(t);
            }
        }
        sends.sort_unstable();

        let lookback = window.start - 60 * SECONDS_PER_DAY;
        let mut own_purchases: Vec<PurchaseRecord> = poisson_times(&mut rng, spec.purchase_rate_per_day, lookback, window.end)
            .into_iter()
            .map(|t| PurchaseRecord {
                recipient_id: id.clone(),
                purchase_time: Some(t),
                channel: Some(if rng.random_bool(spec.web_share) { Channel::Web } else { Channel::Offline }),
                direct_mail_time: None,
            })
            .collect();
        own_purchases.extend(
            poisson_times(&mut rng, spec.direct_mail_rate_per_day, lookback, window.end)
                .into_iter()
                .map(|t| PurchaseRecord {
                    recipient_id: id.clone(),
                    purchase_time: None,
                    channel: None,
                    direct_mail_time: Some(t),
                }),
        );

        let mut history = RecipientHistory {
            recipient_id: id.clone(),
            messages: Vec::with_capacity(m),
            purchases: own_purchases,
        };
        for (j, &send) in sends.iter().enumerate() {
            let (campaign_id, size) = if mass[j] {
                (format!("c{j:03}"), n as u64)
            } else {
                (format!("c{j:03}g{group}"), group_sizes[group])
            };
            let bin = scheme.as_ref().map(|s| s.bin_of(send));
            let f = features_at(&history, j.checked_sub(1), send, bin.unwrap_or(0), &ctx);
            let dense = f.dense();
            let mut log_phi: f64 = spec.beta.iter().zip(dense).map(|(b, x)| b * x).sum();
            log_phi += bin.map_or(0.0, |b| spec.bin_effects[b]);
            if f.last_opened {
                log_phi += spec.carryover;
            }
            log_phi += frailty;
            let phi = if never { 0.0 } else { log_phi.exp() };
            let delay_h = sample_delay(&mut rng, spec.lambda0, spec.gamma0, phi);
            let open_time = (delay_h.is_finite() && delay_h < 1e7)
                .then(|| send + ((delay_h * SECONDS_PER_HOUR as f64).round() as i64).max(1));
            let click_time = match open_time {
                Some(o) if rng.random_bool(spec.click_prob) => Some(o + rng.random_range(1..600)),
                _ => None,
            };
            let open_count = match open_time {
                Some(_) => 1 + rng.random_range(0..3),
                None => 0,
            };
            truth.push(TruthMessage {
                recipient_id: id.clone(),
                campaign_id: campaign_id.clone(),
                send_time: send,
                bin,
                log_phi,
                never_opener: never,
            });
            history.messages.push(RawRecord {
                recipient_id: id.clone(),
                campaign_id,
                send_time: send,
                open_time,
                click_time,
                campaign_recipient_count: size,
                open_count,
            });
        }
        emails.extend(history.messages);
        purchases.extend(history.purchases);
    }
    Ok(SynthOutput {
        emails,
        purchases,
        truth: GroundTruth {
            spec: spec.clone(),
            window,
            messages: truth,
        },
    })
}

/// C-index of the true hazard ratios (zero for never-openers) on
/// `messages`, censored at `window_hours`.
pub fn true_cindex_ceiling(truth: &GroundTruth, emails: &[RawRecord], window_hours: f64) -> Result<f64> {
    let w = window_seconds(window_hours);
    let (mut scores, mut durations, mut events) = (Vec::new(), Vec::new(), Vec::new());
    for (m, e) in truth.messages.iter().zip(emails) {
        let open = e.open_time.map(|o| (o - e.send_time).max(1)).filter(|d| *d <= w);
        scores.push(truth.phi(m));
        durations.push(open.unwrap_or(w) as f64 / SECONDS_PER_HOUR as f64);
        events.push(open.is_some());
    }
    // a zero score is allowed here: never-openers carry no hazard
    let floor = f64::MIN_POSITIVE;
    let scores = scores.into_iter().map(|s| s.max(floor)).collect();
    c_index(&SurvivalBatch::new(scores, durations, events)?)
}

/// Proportional-hazards sample with standard normal covariates and a
/// Weibull baseline; administrative censoring at the quantile giving the
/// requested censored share.
pub fn sample_ph(n: usize, beta: &[f64], lambda0: f64, gamma0: f64, censored_share: f64, seed: u64) -> Result<SurvivalData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut x = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = beta.iter().map(|_| normal.sample(&mut rng)).collect();
        let phi = beta.iter().zip(&row).map(|(b, v)| b * v).sum::<f64>().exp();
        t.push(sample_delay(&mut rng, lambda0, gamma0, phi));
        x.push(row);
    }
    let mut sorted = t.clone();
    sorted.sort_by(f64::total_cmp);
    let k = (((1.0 - censored_share) * n as f64) as usize).clamp(1, n) - 1;
    let cut = sorted[k];
    let events = t.iter().map(|v| *v <= cut).collect();
    let durations = t.iter().map(|v| v.min(cut)).collect();
    SurvivalData::new(x, durations, events)
}

/// Covariate-free exponential sample with rate `rate`, fully observed.
pub fn sample_exponential(n: usize, rate: f64, seed: u64) -> Result<SurvivalData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exp = Exp::new(rate).map_err(|e| Error::InvalidParameter(format!("rate: {e}")))?;
    let durations = (0..n).map(|_| exp.sample(&mut rng).max(f64::MIN_POSITIVE)).collect();
    SurvivalData::new(vec![vec![]; n], durations, vec![true; n])
}

/// Two-group sample: a share `p_never` never opens, the rest open after an
/// exponential delay with rate `rate`; censored at `window`.
pub fn sample_cure(n: usize, p_never: f64, rate: f64, window: f64, seed: u64) -> Result<SurvivalData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exp = Exp::new(rate).map_err(|e| Error::InvalidParameter(format!("rate: {e}")))?;
    let (mut durations, mut events) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let t = if rng.random_bool(p_never) {
            f64::INFINITY
        } else {
            exp.sample(&mut rng).max(f64::MIN_POSITIVE)
        };
        durations.push(t.min(window));
        events.push(t <= window);
    }
    SurvivalData::new(vec![vec![]; n], durations, events)
}
