//! Per-recipient bin rankings and the open-rate reports built on them.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_log::{censor, RecipientHistory};
use crate::features::{extract, features_at, ExtractContext, MessageFeatures};
use crate::model::FittedModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRanking {
    pub recipient_id: String,
    /// `(bin, phi)` by descending score, ties by ascending bin.
    pub ranked: Vec<(usize, f64)>,
}

impl BinRanking {
    pub fn from_scores(recipient_id: &str, scores: &[f64]) -> Result<Self> {
        if let Some((b, s)) = scores.iter().enumerate().find(|(_, s)| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::NonFinite(format!("score {s} for bin {b} of {recipient_id}")));
        }
        let mut ranked: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(Self {
            recipient_id: recipient_id.to_string(),
            ranked,
        })
    }

    pub fn bin_count(&self) -> usize {
        self.ranked.len()
    }

    pub fn top(&self, k: usize) -> Vec<usize> {
        self.ranked.iter().take(k).map(|r| r.0).collect()
    }

    /// Zero-based rank of each bin.
    pub fn ranks(&self) -> Vec<usize> {
        let mut r = vec![0; self.ranked.len()];
        for (i, (b, _)) in self.ranked.iter().enumerate() {
            r[*b] = i;
        }
        r
    }
}

/// Features of a hypothetical next message after the whole history: it is
/// placed one mean inter-send gap after the last send (one day when there
/// is a single message).
pub fn next_message_features(history: &RecipientHistory, ctx: &ExtractContext<'_>) -> MessageFeatures {
    let msgs = &history.messages;
    let Some(last) = msgs.last() else {
        return MessageFeatures::cold_start(0, ctx.scheme.bin_count());
    };
    let gap = if msgs.len() > 1 {
        (last.send_time - msgs[0].send_time) / (msgs.len() as i64 - 1)
    } else {
        crate::event_log::SECONDS_PER_DAY
    };
    let t = last.send_time + gap.max(1);
    features_at(history, Some(msgs.len() - 1), t, 0, ctx)
}

/// Scores all bins for the next message of `history` and ranks them.
pub fn rank_bins(model: &FittedModel, history: &RecipientHistory, ctx: &ExtractContext<'_>, seq_len: usize) -> Result<BinRanking> {
    let obs = extract(history, ctx);
    let next = next_message_features(history, ctx);
    let scores = model.next_scores(&obs, &next.dense(), ctx.scheme.bin_count(), seq_len)?;
    BinRanking::from_scores(&history.recipient_id, &scores)
}

/// A message used to evaluate a ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutMessage {
    pub recipient_id: String,
    pub bin: usize,
    pub opened: bool,
}

/// Holdout messages of `histories`, opened meaning within `window_hours`.
pub fn holdout_messages(histories: &[RecipientHistory], ctx: &ExtractContext<'_>) -> Vec<HoldoutMessage> {
    histories
        .iter()
        .flat_map(|h| {
            h.messages.iter().map(|m| HoldoutMessage {
                recipient_id: h.recipient_id.clone(),
                bin: ctx.scheme.bin_of(m.send_time),
                opened: censor(m, ctx.window_hours).event,
            })
        })
        .collect()
}

/// Opens and sends of one message group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RateCount {
    pub sent: u64,
    pub opened: u64,
}

impl RateCount {
    fn add(&mut self, opened: bool) {
        self.sent += 1;
        self.opened += u64::from(opened);
    }

    /// Percent; zero when nothing was sent.
    pub fn rate(&self) -> f64 {
        if self.sent == 0 {
            0.0
        } else {
            100.0 * self.opened as f64 / self.sent as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKReport {
    pub k: usize,
    pub seed: u64,
    pub topk: RateCount,
    pub topk_rate: f64,
    /// `k` bins drawn without replacement from all bins.
    pub uniform: RateCount,
    pub uniform_rate: f64,
    /// `k` bins drawn from the bins outside the top `k`.
    pub uniform_excluding_topk: RateCount,
    pub uniform_excluding_topk_rate: f64,
    pub evaluated_recipients: usize,
    /// Recipients with a ranking but no holdout message, or the reverse.
    pub excluded_recipients: usize,
}

fn group_holdout(holdout: &[HoldoutMessage]) -> BTreeMap<&str, Vec<&HoldoutMessage>> {
    let mut by: BTreeMap<&str, Vec<&HoldoutMessage>> = BTreeMap::new();
    for m in holdout {
        by.entry(m.recipient_id.as_str()).or_default().push(m);
    }
    by
}

/// Open rates of holdout messages whose bin is in each recipient's top `k`
/// against `k` bins sampled uniformly per recipient.
pub fn evaluate_topk(rankings: &[BinRanking], holdout: &[HoldoutMessage], k: usize, seed: u64) -> Result<TopKReport> {
    let by = group_holdout(holdout);
    let ranked_ids: HashMap<&str, ()> = rankings.iter().map(|r| (r.recipient_id.as_str(), ())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut topk, mut uniform, mut excl) = (RateCount::default(), RateCount::default(), RateCount::default());
    let mut evaluated = 0;
    let mut excluded = by.keys().filter(|id| !ranked_ids.contains_key(*id)).count();
    for r in rankings {
        let n = r.bin_count();
        if k == 0 || k > n {
            return Err(Error::InvalidParameter(format!("k = {k} with {n} bins")));
        }
        let Some(msgs) = by.get(r.recipient_id.as_str()) else {
            excluded += 1;
            continue;
        };
        evaluated += 1;
        let mut in_top = vec![false; n];
        for b in r.top(k) {
            in_top[b] = true;
        }
        let mut in_uniform = vec![false; n];
        for b in sample(&mut rng, n, k) {
            in_uniform[b] = true;
        }
        let rest: Vec<usize> = (0..n).filter(|b| !in_top[*b]).collect();
        let mut in_excl = vec![false; n];
        for i in sample(&mut rng, rest.len(), k.min(rest.len())) {
            in_excl[rest[i]] = true;
        }
        for m in msgs {
            if m.bin >= n {
                return Err(Error::InvalidBin { bin: m.bin, bin_count: n });
            }
            if in_top[m.bin] {
                topk.add(m.opened);
            }
            if in_uniform[m.bin] {
                uniform.add(m.opened);
            }
            if in_excl[m.bin] {
                excl.add(m.opened);
            }
        }
    }
    Ok(TopKReport {
        k,
        seed,
        topk_rate: topk.rate(),
        topk,
        uniform_rate: uniform.rate(),
        uniform,
        uniform_excluding_topk_rate: excl.rate(),
        uniform_excluding_topk: excl,
        evaluated_recipients: evaluated,
        excluded_recipients: excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileRow {
    pub decile: usize,
    pub emails_sent: u64,
    pub emails_opened: u64,
    pub open_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileReport {
    pub deciles: Vec<DecileRow>,
}

impl DecileReport {
    pub fn total_sent(&self) -> u64 {
        self.deciles.iter().map(|d| d.emails_sent).sum()
    }

    pub fn rates(&self) -> Vec<f64> {
        self.deciles.iter().map(|d| d.open_rate).collect()
    }
}

/// Open rates by the decile of each holdout message's bin within its
/// recipient's ranking.
pub fn decile_report(rankings: &[BinRanking], holdout: &[HoldoutMessage]) -> Result<DecileReport> {
    let by = group_holdout(holdout);
    let mut counts = [RateCount::default(); 10];
    for r in rankings {
        let Some(msgs) = by.get(r.recipient_id.as_str()) else {
            continue;
        };
        let n = r.bin_count();
        let ranks = r.ranks();
        for m in msgs {
            if m.bin >= n {
                return Err(Error::InvalidBin { bin: m.bin, bin_count: n });
            }
            counts[ranks[m.bin] * 10 / n].add(m.opened);
        }
    }
    Ok(DecileReport {
        deciles: counts
            .iter()
            .enumerate()
            .map(|(d, c)| DecileRow {
                decile: d + 1,
                emails_sent: c.sent,
                emails_opened: c.opened,
                open_rate: c.rate(),
            })
            .collect(),
    })
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Recipient x bin open-rate matrix; empty cells had no message.
pub fn write_open_rate_matrix<W: Write>(out: W, holdout: &[HoldoutMessage], bin_count: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["recipient_id".to_string()];
    header.extend((0..bin_count).map(|b| format!("bin_{b}")));
    w.write_record(&header)?;
    for (id, msgs) in group_holdout(holdout) {
        let mut cells = vec![RateCount::default(); bin_count];
        for m in msgs {
            if m.bin >= bin_count {
                return Err(Error::InvalidBin { bin: m.bin, bin_count });
            }
            cells[m.bin].add(m.opened);
        }
        let mut rec = vec![id.to_string()];
        rec.extend(cells.iter().map(|c| {
            if c.sent == 0 {
                String::new()
            } else {
                format!("{:.4}", c.opened as f64 / c.sent as f64)
            }
        }));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<open-rate matrix>", e))
}

#[derive(Debug, Serialize, Deserialize)]
struct RankingRow {
    recipient_id: String,
    rank: usize,
    bin: usize,
    phi: f64,
}

/// Long-format rankings: `recipient_id, rank, bin, phi` with 1-based ranks.
pub fn write_rankings<W: Write>(out: W, rankings: &[BinRanking]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rankings {
        for (i, (bin, phi)) in r.ranked.iter().enumerate() {
            w.serialize(RankingRow {
                recipient_id: r.recipient_id.clone(),
                rank: i + 1,
                bin: *bin,
                phi: *phi,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io("<rankings>", e))
}

pub fn read_rankings<R: Read>(input: R) -> Result<Vec<BinRanking>> {
    let mut rd = csv::Reader::from_reader(input);
    let mut out: Vec<BinRanking> = Vec::new();
    for row in rd.deserialize() {
        let row: RankingRow = row?;
        match out.last_mut() {
            Some(r) if r.recipient_id == row.recipient_id => r.ranked.push((row.bin, row.phi)),
            _ => out.push(BinRanking {
                recipient_id: row.recipient_id,
                ranked: vec![(row.bin, row.phi)],
            }),
        }
    }
    for r in &out {
        let mut bins: Vec<usize> = r.ranked.iter().map(|x| x.0).collect();
        bins.sort_unstable();
        if bins.iter().enumerate().any(|(i, b)| i != *b) {
            return Err(Error::Schema {
                file: "rankings".into(),
                message: format!("ranking of {} is not a permutation of bins", r.recipient_id),
            });
        }
    }
    Ok(out)
}
