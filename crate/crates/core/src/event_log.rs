//! Ingestion of raw email and purchase logs into per-recipient histories.
//!
//! Timestamps are integer Unix seconds throughout this module. Durations
//! handed to models are converted to hours by [`CensoredOutcome::hours`].

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMAILS_HEADER: [&str; 7] = [
    "recipient_id",
    "campaign_id",
    "send_ts",
    "open_ts",
    "click_ts",
    "campaign_size",
    "open_count",
];
pub const PURCHASES_HEADER: [&str; 4] = ["recipient_id", "purchase_ts", "channel", "direct_mail_ts"];

pub const SECONDS_PER_DAY: i64 = 86_400;
pub const SECONDS_PER_HOUR: i64 = 3_600;

const SNAPSHOT_FORMAT: &str = "sendtime-histories";
const SNAPSHOT_VERSION: u32 = 1;

/// One email delivered to one recipient.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    pub recipient_id: String,
    pub campaign_id: String,
    pub send_time: i64,
    pub open_time: Option<i64>,
    pub click_time: Option<i64>,
    pub campaign_recipient_count: u64,
    pub open_count: u32,
}

impl RawRecord {
    /// Checks the record-level invariants, returning a diagnostic on failure.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.campaign_recipient_count == 0 {
            return Err("campaign_size must be positive".into());
        }
        if let Some(open) = self.open_time {
            if open < self.send_time {
                return Err(format!(
                    "open_ts {open} precedes send_ts {}",
                    self.send_time
                ));
            }
        }
        if let Some(click) = self.click_time {
            match self.open_time {
                None => return Err("click_ts present without open_ts".into()),
                Some(open) if click < open => {
                    return Err(format!("click_ts {click} precedes open_ts {open}"))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Web,
    Offline,
}

impl Channel {
    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Web => "web",
            Channel::Offline => "offline",
        }
    }
}

impl std::str::FromStr for Channel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "web" => Ok(Channel::Web),
            "offline" => Ok(Channel::Offline),
            other => Err(format!("unknown channel {other:?}")),
        }
    }
}

/// A purchase and/or a direct-mail delivery for one recipient.
///
/// A row carries at least one of the two events; a purchase always has a
/// channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PurchaseRecord {
    pub recipient_id: String,
    pub purchase_time: Option<i64>,
    pub channel: Option<Channel>,
    pub direct_mail_time: Option<i64>,
}

impl PurchaseRecord {
    fn sort_key(&self) -> i64 {
        match (self.purchase_time, self.direct_mail_time) {
            (Some(p), Some(d)) => p.min(d),
            (Some(p), None) => p,
            (None, Some(d)) => d,
            (None, None) => i64::MIN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecipientHistory {
    pub recipient_id: String,
    pub messages: Vec<RawRecord>,
    pub purchases: Vec<PurchaseRecord>,
}

impl RecipientHistory {
    /// Sorts messages by (send_time, campaign_id) and purchases by time.
    pub fn normalize(&mut self) {
        self.messages
            .sort_by(|a, b| (a.send_time, &a.campaign_id).cmp(&(b.send_time, &b.campaign_id)));
        self.purchases.sort_by_key(|p| p.sort_key());
    }
}

/// Time-to-open clipped at the censoring window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CensoredOutcome {
    /// Seconds; equals the window exactly when `event` is false.
    pub duration_s: i64,
    pub event: bool,
}

impl CensoredOutcome {
    pub fn hours(&self) -> f64 {
        self.duration_s as f64 / SECONDS_PER_HOUR as f64
    }
}

pub fn window_seconds(window_hours: f64) -> i64 {
    (window_hours * SECONDS_PER_HOUR as f64).round() as i64
}

/// Applies the censoring window to the first open of a record.
///
/// An open at the send instant counts as an event one second after send.
pub fn censor(record: &RawRecord, window_hours: f64) -> CensoredOutcome {
    let window = window_seconds(window_hours).max(1);
    match record.open_time {
        Some(open) if open - record.send_time <= window => CensoredOutcome {
            duration_s: (open - record.send_time).max(1),
            event: true,
        },
        _ => CensoredOutcome {
            duration_s: window,
            event: false,
        },
    }
}

/// Half-open observation window `[start, end)` in Unix seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: i64,
    pub end: i64,
}

impl TimeWindow {
    pub fn new(start: i64, end: i64) -> Result<Self> {
        if start >= end {
            return Err(Error::Config(format!(
                "window start {start} must precede end {end}"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, ts: i64) -> bool {
        ts >= self.start && ts < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedRow {
    pub file: String,
    /// 1-based line number including the header.
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct IngestReport {
    pub window: TimeWindow,
    pub histories: Vec<RecipientHistory>,
    pub rejected: Vec<RejectedRow>,
    /// Well-formed email rows whose send time falls outside the window.
    pub outside_window: usize,
    pub email_rows: usize,
}

impl IngestReport {
    pub fn message_count(&self) -> usize {
        self.histories.iter().map(|h| h.messages.len()).sum()
    }
}

fn check_header(file: &str, found: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let found: Vec<&str> = found.iter().map(str::trim).collect();
    if found != expected {
        return Err(Error::Schema {
            file: file.to_string(),
            message: format!("expected header {:?}, found {:?}", expected, found),
        });
    }
    Ok(())
}

fn opt_i64(field: &str, name: &str) -> std::result::Result<Option<i64>, String> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<i64>()
        .map(Some)
        .map_err(|_| format!("{name}: not an integer timestamp: {field:?}"))
}

fn req_i64(field: &str, name: &str) -> std::result::Result<i64, String> {
    opt_i64(field, name)?.ok_or_else(|| format!("{name}: missing"))
}

fn parse_email(row: &csv::StringRecord) -> std::result::Result<RawRecord, String> {
    if row.len() != EMAILS_HEADER.len() {
        return Err(format!("expected {} fields, found {}", EMAILS_HEADER.len(), row.len()));
    }
    let recipient_id = row[0].trim().to_string();
    if recipient_id.is_empty() {
        return Err("recipient_id: missing".into());
    }
    let campaign_size = row[5].trim();
    let campaign_recipient_count = campaign_size
        .parse::<u64>()
        .map_err(|_| format!("campaign_size: not a positive integer: {campaign_size:?}"))?;
    let open_count = row[6].trim();
    let open_count = if open_count.is_empty() {
        0
    } else {
        open_count
            .parse::<u32>()
            .map_err(|_| format!("open_count: not a non-negative integer: {open_count:?}"))?
    };
    let record = RawRecord {
        recipient_id,
        campaign_id: row[1].trim().to_string(),
        send_time: req_i64(&row[2], "send_ts")?,
        open_time: opt_i64(&row[3], "open_ts")?,
        click_time: opt_i64(&row[4], "click_ts")?,
        campaign_recipient_count,
        open_count,
    };
    record.validate()?;
    Ok(record)
}

fn parse_purchase(row: &csv::StringRecord) -> std::result::Result<PurchaseRecord, String> {
    if row.len() != PURCHASES_HEADER.len() {
        return Err(format!(
            "expected {} fields, found {}",
            PURCHASES_HEADER.len(),
            row.len()
        ));
    }
    let recipient_id = row[0].trim().to_string();
    if recipient_id.is_empty() {
        return Err("recipient_id: missing".into());
    }
    let purchase_time = opt_i64(&row[1], "purchase_ts")?;
    let channel = match row[2].trim() {
        "" => None,
        s => Some(s.parse::<Channel>()?),
    };
    let direct_mail_time = opt_i64(&row[3], "direct_mail_ts")?;
    if purchase_time.is_some() != channel.is_some() {
        return Err("purchase_ts and channel must be given together".into());
    }
    if purchase_time.is_none() && direct_mail_time.is_none() {
        return Err("row carries neither a purchase nor a direct mail".into());
    }
    Ok(PurchaseRecord {
        recipient_id,
        purchase_time,
        channel,
        direct_mail_time,
    })
}

/// Parses both logs and groups rows by recipient.
///
/// Malformed or invariant-violating rows are returned in
/// [`IngestReport::rejected`]; a bad header is fatal. Purchases are kept when
/// they happen before the window end, since features look back from the
/// first message.
pub fn ingest<E: Read, P: Read>(emails: E, purchases: P, window: TimeWindow) -> Result<IngestReport> {
    let mut by_recipient: BTreeMap<String, RecipientHistory> = BTreeMap::new();
    let mut rejected = Vec::new();
    let mut outside_window = 0;
    let mut email_rows = 0;

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(emails);
    check_header("emails.csv", reader.headers()?, &EMAILS_HEADER)?;
    for (idx, row) in reader.records().enumerate() {
        let line = idx as u64 + 2;
        email_rows += 1;
        let parsed = row
            .map_err(|e| e.to_string())
            .and_then(|r| parse_email(&r));
        match parsed {
            Ok(record) if window.contains(record.send_time) => {
                by_recipient
                    .entry(record.recipient_id.clone())
                    .or_insert_with(|| RecipientHistory {
                        recipient_id: record.recipient_id.clone(),
                        messages: Vec::new(),
                        purchases: Vec::new(),
                    })
                    .messages
                    .push(record);
            }
            Ok(_) => outside_window += 1,
            Err(reason) => rejected.push(RejectedRow {
                file: "emails.csv".into(),
                line,
                reason,
            }),
        }
    }

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(purchases);
    check_header("purchases.csv", reader.headers()?, &PURCHASES_HEADER)?;
    for (idx, row) in reader.records().enumerate() {
        let line = idx as u64 + 2;
        let parsed = row
            .map_err(|e| e.to_string())
            .and_then(|r| parse_purchase(&r));
        match parsed {
            Ok(p) => {
                if p.sort_key() >= window.end {
                    continue;
                }
                // purchases of recipients without messages are irrelevant
                if let Some(h) = by_recipient.get_mut(&p.recipient_id) {
                    h.purchases.push(p);
                }
            }
            Err(reason) => rejected.push(RejectedRow {
                file: "purchases.csv".into(),
                line,
                reason,
            }),
        }
    }

    let mut histories: Vec<RecipientHistory> = by_recipient.into_values().collect();
    for h in &mut histories {
        h.normalize();
    }
    for r in &rejected {
        log::warn!("{}:{}: rejected row: {}", r.file, r.line, r.reason);
    }
    Ok(IngestReport {
        window,
        histories,
        rejected,
        outside_window,
        email_rows,
    })
}

pub fn ingest_paths(emails: &Path, purchases: &Path, window: TimeWindow) -> Result<IngestReport> {
    let e = File::open(emails).map_err(|e| Error::io(emails, e))?;
    let p = File::open(purchases).map_err(|e| Error::io(purchases, e))?;
    ingest(BufReader::new(e), BufReader::new(p), window)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub min_messages: usize,
    /// Length of the spans that must each contain a message.
    pub rate_span_days: i64,
    pub min_bulk_size: u64,
    pub max_open_count: u32,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_messages: 10,
            rate_span_days: 30,
            min_bulk_size: 400,
            max_open_count: 10,
        }
    }
}

fn meets_rate(messages: &[RawRecord], window: TimeWindow, span_days: i64) -> bool {
    let span = span_days * SECONDS_PER_DAY;
    let full_spans = ((window.end - window.start) / span).max(1);
    let mut covered = vec![false; full_spans as usize];
    for m in messages {
        let idx = (m.send_time - window.start) / span;
        if (0..full_spans).contains(&idx) {
            covered[idx as usize] = true;
        }
    }
    covered.iter().all(|&c| c)
}

/// Drops bot-like and small-campaign records, then keeps recipients that
/// received enough messages or received them regularly.
///
/// The recipient rule is evaluated on the record set that survives the
/// record-level rules.
pub fn filter(
    histories: &[RecipientHistory],
    config: &FilterConfig,
    window: TimeWindow,
) -> Result<Vec<RecipientHistory>> {
    let kept: Vec<RecipientHistory> = histories
        .iter()
        .filter_map(|h| {
            let messages: Vec<RawRecord> = h
                .messages
                .iter()
                .filter(|m| {
                    m.open_count <= config.max_open_count
                        && m.campaign_recipient_count >= config.min_bulk_size
                })
                .cloned()
                .collect();
            let enough = messages.len() >= config.min_messages;
            let regular =
                !messages.is_empty() && meets_rate(&messages, window, config.rate_span_days);
            (enough || regular).then(|| RecipientHistory {
                recipient_id: h.recipient_id.clone(),
                messages,
                purchases: h.purchases.clone(),
            })
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::NoRecipients);
    }
    Ok(kept)
}

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    format: String,
    version: u32,
    window: TimeWindow,
    recipients: usize,
}

/// JSON-lines snapshot: a header line followed by one history per line.
pub fn write_snapshot<W: Write>(out: W, window: TimeWindow, histories: &[RecipientHistory]) -> Result<()> {
    let mut out = BufWriter::new(out);
    let header = SnapshotHeader {
        format: SNAPSHOT_FORMAT.into(),
        version: SNAPSHOT_VERSION,
        window,
        recipients: histories.len(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n").map_err(|e| Error::io("<snapshot>", e))?;
    for h in histories {
        serde_json::to_writer(&mut out, h)?;
        out.write_all(b"\n").map_err(|e| Error::io("<snapshot>", e))?;
    }
    out.flush().map_err(|e| Error::io("<snapshot>", e))?;
    Ok(())
}

pub fn read_snapshot<R: Read>(input: R) -> Result<(TimeWindow, Vec<RecipientHistory>)> {
    let mut lines = BufReader::new(input).lines();
    let schema_err = |message: String| Error::Schema {
        file: "snapshot".into(),
        message,
    };
    let first = lines
        .next()
        .ok_or_else(|| schema_err("empty snapshot".into()))?
        .map_err(|e| Error::io("<snapshot>", e))?;
    let header: SnapshotHeader = serde_json::from_str(&first)?;
    if header.format != SNAPSHOT_FORMAT || header.version != SNAPSHOT_VERSION {
        return Err(schema_err(format!(
            "unsupported snapshot {} v{}",
            header.format, header.version
        )));
    }
    let mut histories = Vec::with_capacity(header.recipients);
    for line in lines {
        let line = line.map_err(|e| Error::io("<snapshot>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        histories.push(serde_json::from_str(&line)?);
    }
    if histories.len() != header.recipients {
        return Err(schema_err(format!(
            "header announces {} recipients, found {}",
            header.recipients,
            histories.len()
        )));
    }
    Ok((header.window, histories))
}

pub fn save_snapshot(path: &Path, window: TimeWindow, histories: &[RecipientHistory]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_snapshot(f, window, histories)
}

pub fn load_snapshot(path: &Path) -> Result<(TimeWindow, Vec<RecipientHistory>)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_snapshot(f)
}

/// Writes records in the `emails.csv` layout.
pub fn write_emails_csv<W: Write>(out: W, records: &[RawRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EMAILS_HEADER)?;
    let opt = |v: Option<i64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        w.write_record([
            r.recipient_id.clone(),
            r.campaign_id.clone(),
            r.send_time.to_string(),
            opt(r.open_time),
            opt(r.click_time),
            r.campaign_recipient_count.to_string(),
            r.open_count.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<emails.csv>", e))?;
    Ok(())
}

pub fn write_purchases_csv<W: Write>(out: W, records: &[PurchaseRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PURCHASES_HEADER)?;
    let opt = |v: Option<i64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        w.write_record([
            r.recipient_id.clone(),
            opt(r.purchase_time),
            r.channel.map(|c| c.as_str().to_string()).unwrap_or_default(),
            opt(r.direct_mail_time),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<purchases.csv>", e))?;
    Ok(())
}
