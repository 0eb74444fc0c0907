//! Per-message features, baseline averaging and fixed-length sequences.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_log::{censor, CensoredOutcome, Channel, RecipientHistory, SECONDS_PER_DAY};
use crate::virtual_time::{one_hot, BinScheme};

/// Number of dense (non one-hot) features per message.
pub const DENSE_DIM: usize = 8;
/// Day counts are capped at this value and divided by it for model input.
pub const DAY_CAP: f64 = 30.0;
/// A campaign is mass-mailed when it reaches more than this share of recipients.
pub const MASS_MAIL_SHARE: f64 = 0.75;

pub const DENSE_NAMES: [&str; DENSE_DIM] = [
    "last_opened",
    "last_clicked",
    "last_mass_mailed",
    "days_since_last_email",
    "days_since_last_purchase",
    "web_purchase_since_last",
    "offline_purchase_since_last",
    "direct_mail_since_last",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageFeatures {
    pub last_opened: bool,
    pub last_clicked: bool,
    pub last_mass_mailed: bool,
    /// Raw, uncapped day counts.
    pub days_since_last_email: f64,
    pub days_since_last_purchase: f64,
    pub web_purchase_since_last: bool,
    pub offline_purchase_since_last: bool,
    pub direct_mail_since_last: bool,
    pub send_bin: usize,
    pub bin_count: usize,
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn scale_days(days: f64) -> f64 {
    days.clamp(0.0, DAY_CAP) / DAY_CAP
}

impl MessageFeatures {
    /// Defaults for a message with no predecessor.
    pub fn cold_start(send_bin: usize, bin_count: usize) -> Self {
        Self {
            last_opened: false,
            last_clicked: false,
            last_mass_mailed: false,
            days_since_last_email: DAY_CAP,
            days_since_last_purchase: DAY_CAP,
            web_purchase_since_last: false,
            offline_purchase_since_last: false,
            direct_mail_since_last: false,
            send_bin,
            bin_count,
        }
    }

    /// Model-scale dense features: indicators, and day counts in `[0, 1]`.
    pub fn dense(&self) -> [f64; DENSE_DIM] {
        [
            flag(self.last_opened),
            flag(self.last_clicked),
            flag(self.last_mass_mailed),
            scale_days(self.days_since_last_email),
            scale_days(self.days_since_last_purchase),
            flag(self.web_purchase_since_last),
            flag(self.offline_purchase_since_last),
            flag(self.direct_mail_since_last),
        ]
    }

    pub fn dim(&self) -> usize {
        DENSE_DIM + self.bin_count
    }

    /// Dense features followed by the send-bin one-hot.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.dense());
        v.resize(self.dim(), 0.0);
        v[DENSE_DIM + self.send_bin] = 1.0;
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageObservation {
    pub recipient_id: String,
    /// Index of the message within the recipient's history.
    pub position: usize,
    pub send_time: i64,
    pub features: MessageFeatures,
    pub outcome: CensoredOutcome,
    /// Whether the message was opened within the censoring window; same as
    /// `outcome.event`, kept for reporting.
    pub opened: bool,
}

/// What feature extraction needs besides the history itself.
#[derive(Debug, Clone, Copy)]
pub struct ExtractContext<'a> {
    pub scheme: &'a BinScheme,
    pub window_hours: f64,
    /// Number of recipients in the filtered population.
    pub population: usize,
}

/// Features of a message sent at `send_time` after `prev` (the most recent
/// earlier message, if any). Only data stamped before `send_time` is read.
pub fn features_at(
    history: &RecipientHistory,
    prev: Option<usize>,
    send_time: i64,
    send_bin: usize,
    ctx: &ExtractContext<'_>,
) -> MessageFeatures {
    let bin_count = ctx.scheme.bin_count();
    let last_purchase = history
        .purchases
        .iter()
        .filter_map(|p| p.purchase_time)
        .filter(|&t| t < send_time)
        .max();
    let days_since_last_purchase = last_purchase
        .map(|t| (send_time - t) as f64 / SECONDS_PER_DAY as f64)
        .unwrap_or(DAY_CAP);
    let Some(prev) = prev else {
        return MessageFeatures {
            days_since_last_purchase,
            ..MessageFeatures::cold_start(send_bin, bin_count)
        };
    };
    let p = &history.messages[prev];
    let since = |t: i64| t >= p.send_time && t < send_time;
    let purchased = |channel: Channel| {
        history
            .purchases
            .iter()
            .any(|r| r.channel == Some(channel) && r.purchase_time.is_some_and(since))
    };
    MessageFeatures {
        last_opened: p.open_time.is_some_and(|t| t < send_time),
        last_clicked: p.click_time.is_some_and(|t| t < send_time),
        last_mass_mailed: ctx.population > 0
            && p.campaign_recipient_count as f64 / ctx.population as f64 > MASS_MAIL_SHARE,
        days_since_last_email: (send_time - p.send_time) as f64 / SECONDS_PER_DAY as f64,
        days_since_last_purchase,
        web_purchase_since_last: purchased(Channel::Web),
        offline_purchase_since_last: purchased(Channel::Offline),
        direct_mail_since_last: history
            .purchases
            .iter()
            .any(|r| r.direct_mail_time.is_some_and(since)),
        send_bin,
        bin_count,
    }
}

/// One observation per message of an ordered history.
pub fn extract(history: &RecipientHistory, ctx: &ExtractContext<'_>) -> Vec<MessageObservation> {
    history
        .messages
        .iter()
        .enumerate()
        .map(|(j, m)| {
            let send_bin = ctx.scheme.bin_of(m.send_time);
            let outcome = censor(m, ctx.window_hours);
            MessageObservation {
                recipient_id: history.recipient_id.clone(),
                position: j,
                send_time: m.send_time,
                features: features_at(history, j.checked_sub(1), m.send_time, send_bin, ctx),
                outcome,
                opened: outcome.event,
            }
        })
        .collect()
}

/// Element-wise mean of the dense features over `prefix`, followed by the
/// one-hot of `current_bin`. An empty prefix yields the cold-start vector.
pub fn average_features(prefix: &[MessageObservation], current_bin: usize, bin_count: usize) -> Result<Vec<f64>> {
    let mut v = Vec::with_capacity(DENSE_DIM + bin_count);
    if prefix.is_empty() {
        v.extend_from_slice(&MessageFeatures::cold_start(current_bin, bin_count).dense());
    } else {
        let mut sum = [0.0; DENSE_DIM];
        for o in prefix {
            for (s, x) in sum.iter_mut().zip(o.features.dense()) {
                *s += x;
            }
        }
        v.extend(sum.iter().map(|s| s / prefix.len() as f64));
    }
    v.extend(one_hot(current_bin, bin_count)?);
    Ok(v)
}

/// Averaged baseline rows for every observation of one recipient: row `j`
/// averages observations `0..=j` (all of whose features precede message
/// `j`'s send time) and carries message `j`'s own bin.
pub fn averaged_rows(observations: &[MessageObservation]) -> Vec<Vec<f64>> {
    let mut sum = [0.0; DENSE_DIM];
    observations
        .iter()
        .enumerate()
        .map(|(j, o)| {
            for (s, x) in sum.iter_mut().zip(o.features.dense()) {
                *s += x;
            }
            let n = (j + 1) as f64;
            let mut row: Vec<f64> = sum.iter().map(|s| s / n).collect();
            row.resize(DENSE_DIM + o.features.bin_count, 0.0);
            row[DENSE_DIM + o.features.send_bin] = 1.0;
            row
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqStep {
    pub input: Vec<f64>,
    pub outcome: CensoredOutcome,
    pub position: usize,
    pub valid: bool,
}

/// A recipient's most recent messages, front-padded to a fixed length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceExample {
    pub recipient_id: String,
    pub steps: Vec<SeqStep>,
}

impl SequenceExample {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.steps.iter().map(|s| s.valid).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.steps.iter().filter(|s| s.valid).count()
    }

    pub fn input_dim(&self) -> usize {
        self.steps.first().map_or(0, |s| s.input.len())
    }

    /// Adds `k` leading pad slots.
    pub fn padded(&self, k: usize) -> Self {
        let dim = self.input_dim();
        let mut steps: Vec<SeqStep> = (0..k).map(|_| pad_step(dim)).collect();
        steps.extend(self.steps.iter().cloned());
        Self {
            recipient_id: self.recipient_id.clone(),
            steps,
        }
    }
}

fn pad_step(dim: usize) -> SeqStep {
    SeqStep {
        input: vec![0.0; dim],
        outcome: CensoredOutcome::default(),
        position: 0,
        valid: false,
    }
}

/// Keeps the `length` most recent observations, front-padding short ones.
pub fn make_sequence(observations: &[MessageObservation], length: usize) -> Result<SequenceExample> {
    if length == 0 {
        return Err(Error::InvalidParameter("sequence length must be positive".into()));
    }
    let recipient_id = observations
        .first()
        .map(|o| o.recipient_id.clone())
        .unwrap_or_default();
    let dim = observations.first().map_or(0, |o| o.features.dim());
    let kept = &observations[observations.len().saturating_sub(length)..];
    let mut steps: Vec<SeqStep> = (kept.len()..length).map(|_| pad_step(dim)).collect();
    steps.extend(kept.iter().map(|o| SeqStep {
        input: o.features.to_vec(),
        outcome: o.outcome,
        position: o.position,
        valid: true,
    }));
    Ok(SequenceExample { recipient_id, steps })
}

pub fn make_sequences(per_recipient: &[Vec<MessageObservation>], length: usize) -> Result<Vec<SequenceExample>> {
    per_recipient
        .iter()
        .filter(|obs| !obs.is_empty())
        .map(|obs| make_sequence(obs, length))
        .collect()
}

/// Column names of the exported feature matrix.
pub fn matrix_columns(bin_count: usize) -> Vec<String> {
    let mut cols: Vec<String> = ["recipient_id", "position", "send_ts", "duration_h", "event"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    cols.extend(DENSE_NAMES.iter().map(|s| s.to_string()));
    cols.extend((0..bin_count).map(|b| format!("bin_{b:03}")));
    cols
}

/// Writes observations as CSV in the column order of [`matrix_columns`].
pub fn write_feature_matrix<W: Write>(out: W, observations: &[MessageObservation], bin_count: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(matrix_columns(bin_count))?;
    for o in observations {
        let mut row = vec![
            o.recipient_id.clone(),
            o.position.to_string(),
            o.send_time.to_string(),
            format!("{}", o.outcome.hours()),
            (o.outcome.event as u8).to_string(),
        ];
        row.extend(o.features.to_vec().iter().map(|x| format!("{x}")));
        w.write_record(row)?;
    }
    w.flush().map_err(|e| Error::io("<features.csv>", e))?;
    Ok(())
}

/// JSON schema description accompanying the feature matrix export.
pub fn matrix_schema(bin_count: usize) -> serde_json::Value {
    serde_json::json!({
        "format": "sendtime-features",
        "version": 1,
        "columns": matrix_columns(bin_count),
        "dense_scaling": {
            "days_since_last_email": "min(days, 30) / 30",
            "days_since_last_purchase": "min(days, 30) / 30",
        },
        "bin_count": bin_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_log::{PurchaseRecord, RawRecord};

    const DAY: i64 = SECONDS_PER_DAY;

    fn msg(send: i64, open: Option<i64>, click: Option<i64>, size: u64) -> RawRecord {
        RawRecord {
            recipient_id: "r".into(),
            campaign_id: format!("c{send}"),
            send_time: send,
            open_time: open,
            click_time: click,
            campaign_recipient_count: size,
            open_count: open.map_or(0, |_| 1),
        }
    }

    fn purchase(t: i64, channel: Channel) -> PurchaseRecord {
        PurchaseRecord {
            recipient_id: "r".into(),
            purchase_time: Some(t),
            channel: Some(channel),
            direct_mail_time: None,
        }
    }

    fn ctx(scheme: &BinScheme) -> ExtractContext<'_> {
        ExtractContext {
            scheme,
            window_hours: 12.0,
            population: 1000,
        }
    }

    #[test]
    fn second_message_sees_first() {
        let scheme = BinScheme::uniform(100).unwrap();
        let h = RecipientHistory {
            recipient_id: "r".into(),
            messages: vec![
                msg(10 * DAY, Some(10 * DAY + 60), Some(10 * DAY + 120), 800),
                msg(12 * DAY, None, None, 500),
            ],
            purchases: vec![],
        };
        let obs = extract(&h, &ctx(&scheme));
        let f = &obs[1].features;
        assert!(f.last_opened && f.last_clicked && f.last_mass_mailed);
        assert_eq!(f.days_since_last_email, 2.0);
        assert_eq!(obs[0].features, MessageFeatures::cold_start(obs[0].features.send_bin, 100));
        assert_eq!(f.dim(), 108);
    }

    #[test]
    fn purchase_between_messages_manual_trace() {
        let scheme = BinScheme::uniform(100).unwrap();
        let h = RecipientHistory {
            recipient_id: "r".into(),
            messages: (0..4).map(|i| msg((10 + 3 * i) * DAY, None, None, 500)).collect(),
            purchases: vec![purchase(14 * DAY, Channel::Web)],
        };
        let obs = extract(&h, &ctx(&scheme));
        let web: Vec<bool> = obs.iter().map(|o| o.features.web_purchase_since_last).collect();
        // messages at days 10, 13, 16, 19; purchase on day 14
        assert_eq!(web, vec![false, false, true, false]);
        assert_eq!(obs[2].features.days_since_last_purchase, 2.0);
        assert_eq!(obs[3].features.days_since_last_purchase, 5.0);
        assert_eq!(obs[1].features.days_since_last_purchase, DAY_CAP);
        assert!(obs.iter().all(|o| !o.features.offline_purchase_since_last));
    }

    #[test]
    fn open_after_next_send_is_not_visible() {
        let scheme = BinScheme::uniform(100).unwrap();
        let h = RecipientHistory {
            recipient_id: "r".into(),
            messages: vec![msg(0, Some(3 * DAY), None, 500), msg(DAY, None, None, 500)],
            purchases: vec![],
        };
        let obs = extract(&h, &ctx(&scheme));
        assert!(!obs[1].features.last_opened);
    }

    #[test]
    fn day_counts_are_capped_and_scaled() {
        let mut f = MessageFeatures::cold_start(0, 4);
        f.days_since_last_email = 45.0;
        f.days_since_last_purchase = 15.0;
        let d = f.dense();
        assert_eq!(d[3], 1.0);
        assert_eq!(d[4], 0.5);
        assert_eq!(f.to_vec().len(), 12);
    }

    fn obs_with(last_opened: bool, bin: usize) -> MessageObservation {
        let mut features = MessageFeatures::cold_start(bin, 4);
        features.last_opened = last_opened;
        MessageObservation {
            recipient_id: "r".into(),
            position: 0,
            send_time: 0,
            features,
            outcome: CensoredOutcome::default(),
            opened: false,
        }
    }

    #[test]
    fn averaging() {
        let two = [obs_with(true, 0), obs_with(false, 1)];
        let v = average_features(&two, 2, 4).unwrap();
        assert_eq!(v[0], 0.5);
        assert_eq!(&v[DENSE_DIM..], &[0.0, 0.0, 1.0, 0.0]);

        let same = [obs_with(true, 0), obs_with(true, 0)];
        let v = average_features(&same, 0, 4).unwrap();
        assert_eq!(&v[..DENSE_DIM], &same[0].features.dense());

        let five: Vec<_> = [true, false, true, false, false].iter().map(|&o| obs_with(o, 0)).collect();
        let v = average_features(&five, 0, 4).unwrap();
        assert!((v[0] - 0.4).abs() < 1e-15);

        let cold = average_features(&[], 1, 4).unwrap();
        assert_eq!(&cold[..DENSE_DIM], &MessageFeatures::cold_start(1, 4).dense());
    }

    #[test]
    fn averaged_rows_match_prefix_averages() {
        let obs: Vec<_> = [true, false, true, true].iter().enumerate().map(|(i, &o)| obs_with(o, i)).collect();
        let rows = averaged_rows(&obs);
        for j in 0..obs.len() {
            let expected = average_features(&obs[..=j], obs[j].features.send_bin, 4).unwrap();
            assert_eq!(rows[j], expected);
        }
    }

    fn numbered(n: usize) -> Vec<MessageObservation> {
        (0..n)
            .map(|i| MessageObservation { position: i, ..obs_with(i % 2 == 0, i % 4) })
            .collect()
    }

    #[test]
    fn truncation_keeps_most_recent() {
        let obs = numbered(20);
        let seq = make_sequence(&obs, 16).unwrap();
        assert_eq!(seq.len(), 16);
        assert!(seq.valid_mask().iter().all(|&m| m));
        let positions: Vec<usize> = seq.steps.iter().map(|s| s.position).collect();
        assert_eq!(positions, (4..20).collect::<Vec<_>>());
    }

    #[test]
    fn short_sequences_are_front_padded() {
        let obs = numbered(3);
        let seq = make_sequence(&obs, 4).unwrap();
        assert_eq!(seq.valid_mask(), vec![false, true, true, true]);
        assert!(seq.steps[0].input.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn exact_length_matches_slice_oracle() {
        let obs = numbered(16);
        let seq = make_sequence(&obs, 16).unwrap();
        for (step, o) in seq.steps.iter().zip(&obs) {
            assert_eq!(step.input, o.features.to_vec());
            assert_eq!(step.position, o.position);
        }
    }

    #[test]
    fn feature_matrix_has_stable_columns() {
        let obs = numbered(2);
        let mut buf = Vec::new();
        write_feature_matrix(&mut buf, &obs, 4).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let header = text.lines().next().unwrap();
        assert!(header.starts_with("recipient_id,position,send_ts,duration_h,event,last_opened"));
        assert!(header.ends_with("bin_003"));
        assert_eq!(text.lines().count(), 3);
    }
}
