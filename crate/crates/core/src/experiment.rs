//! Reproducible experiments: the model x window x length C-index grid and
//! the end-to-end send-time report.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{fit_cox_linear, fit_cox_mixture, fit_cox_nonlinear, fit_weibull, SurvivalData};
use crate::error::{Error, Result};
use crate::event_log::{
    filter, ingest, ingest_paths, load_snapshot, write_emails_csv, write_purchases_csv, FilterConfig,
    RecipientHistory, TimeWindow,
};
use crate::features::{averaged_rows, extract, make_sequence, ExtractContext, MessageObservation, SequenceExample};
use crate::model::{FittedModel, ModelKind};
use crate::numerics::LbfgsOptions;
use crate::rnn;
use crate::send_time::{
    decile_report, evaluate_topk, holdout_messages, rank_bins, spearman, write_open_rate_matrix, write_rankings,
    BinRanking, DecileReport, TopKReport,
};
use crate::survival::concordance_counts;
use crate::synth::{generate, GeneratorSpec};
use crate::training::TrainConfig;
use crate::virtual_time::{fit_bins, BinScheme};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synth { spec: GeneratorSpec },
    Files { emails: PathBuf, purchases: PathBuf, window: TimeWindow },
    /// A snapshot of already filtered histories.
    Snapshot { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    pub model: String,
    pub window_hours: f64,
    pub seq_len: usize,
    /// Messages per test recipient used to score; the rest are evaluated.
    pub score_prefix: usize,
    pub k: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            model: "rnn_s".into(),
            window_hours: 12.0,
            seq_len: 16,
            score_prefix: 16,
            k: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub output_dir: Option<PathBuf>,
    pub windows_hours: Vec<f64>,
    pub sequence_lengths: Vec<usize>,
    pub models: Vec<String>,
    /// Share of recipients used for training.
    pub train_fraction: f64,
    pub bins: usize,
    pub filter: FilterConfig,
    pub hidden: usize,
    pub rnn: TrainConfig,
    pub cph_g: TrainConfig,
    pub report: ReportConfig,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synth {
                spec: GeneratorSpec::default(),
            },
            output_dir: None,
            windows_hours: vec![3.0, 6.0, 12.0],
            sequence_lengths: vec![4, 8, 16],
            models: ModelKind::ALL.iter().map(|k| k.as_str().to_string()).collect(),
            train_fraction: 0.8,
            bins: 100,
            filter: FilterConfig::default(),
            hidden: rnn::DEFAULT_HIDDEN,
            rnn: TrainConfig::default(),
            cph_g: TrainConfig {
                batch_size: 256,
                ..TrainConfig::default()
            },
            report: ReportConfig::default(),
            seed: 0,
        }
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Self = serde_json::from_str(&s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn model_kinds(&self) -> Result<Vec<ModelKind>> {
        self.models.iter().map(|m| m.parse()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model_kinds()?;
        self.report.model.parse::<ModelKind>()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction)));
        }
        if self.windows_hours.is_empty() || self.windows_hours.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::Config("censoring windows must be positive".into()));
        }
        if self.sequence_lengths.is_empty() || self.sequence_lengths.contains(&0) {
            return Err(Error::Config("sequence lengths must be positive".into()));
        }
        if self.bins < 2 || self.hidden == 0 || self.report.k == 0 || self.report.seq_len == 0 {
            return Err(Error::Config("bins must be at least 2; hidden, k and seq_len positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, leaving out the output directory.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(&Self {
            output_dir: None,
            ..self.clone()
        })
        .expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Filtered histories, their bin scheme and the recipient-level split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub window: TimeWindow,
    pub histories: Vec<RecipientHistory>,
    pub scheme: BinScheme,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Loads or generates raw histories (unfiltered, except for snapshots).
pub fn load_histories(source: &DataSource) -> Result<(TimeWindow, Vec<RecipientHistory>)> {
    match source {
        DataSource::Synth { spec } => {
            let out = stage("synth", generate(spec))?;
            let (mut e, mut p) = (Vec::new(), Vec::new());
            write_emails_csv(&mut e, &out.emails)?;
            write_purchases_csv(&mut p, &out.purchases)?;
            let report = stage("ingest", ingest(e.as_slice(), p.as_slice(), out.truth.window))?;
            Ok((report.window, report.histories))
        }
        DataSource::Files {
            emails,
            purchases,
            window,
        } => {
            let report = stage("ingest", ingest_paths(emails, purchases, *window))?;
            Ok((report.window, report.histories))
        }
        DataSource::Snapshot { path } => stage("ingest", load_snapshot(path)),
    }
}

/// Shuffled recipient-level split of `0..n`.
pub fn split_recipients(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0005_9117));
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1.min(n), n.saturating_sub(1).max(1));
    let test = idx.split_off(n_train.min(n));
    let (mut train, mut test) = (idx, test);
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

impl Dataset {
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (window, raw) = load_histories(&config.data)?;
        let histories = match config.data {
            DataSource::Snapshot { .. } => raw,
            _ => stage("filter", filter(&raw, &config.filter, window))?,
        };
        let (train, test) = split_recipients(histories.len(), config.train_fraction, config.seed);
        // bins see training sends only
        let sends: Vec<i64> = train
            .iter()
            .flat_map(|&i| histories[i].messages.iter().map(|m| m.send_time))
            .collect();
        let scheme = stage("bin", fit_bins(&sends, config.bins))?;
        Ok(Self {
            window,
            histories,
            scheme,
            train,
            test,
        })
    }

    pub fn context(&self, window_hours: f64) -> ExtractContext<'_> {
        ExtractContext {
            scheme: &self.scheme,
            window_hours,
            population: self.histories.len(),
        }
    }

    pub fn observations(&self, window_hours: f64) -> Vec<Vec<MessageObservation>> {
        let ctx = self.context(window_hours);
        self.histories.iter().map(|h| extract(h, &ctx)).collect()
    }

    pub fn cell(&self, window_hours: f64, seq_len: usize) -> Result<CellData> {
        let obs = self.observations(window_hours);
        CellData::build(&obs, &self.train, &self.test, seq_len)
    }
}

/// Training and test views of one (window, sequence length) cell. Both
/// views cover the same messages: each recipient's last `seq_len`.
#[derive(Debug, Clone)]
pub struct CellData {
    pub seq_len: usize,
    pub train_seqs: Vec<SequenceExample>,
    pub test_seqs: Vec<SequenceExample>,
    pub train_rows: SurvivalData,
    pub test_rows: SurvivalData,
}

fn rows_of(obs: &[Vec<MessageObservation>], idx: &[usize], seq_len: usize) -> Result<SurvivalData> {
    let (mut x, mut kept) = (Vec::new(), Vec::new());
    for &i in idx {
        let o = &obs[i];
        let window = &o[o.len().saturating_sub(seq_len)..];
        x.extend(averaged_rows(window));
        kept.extend(window.iter().cloned());
    }
    SurvivalData::from_averaged(x, &kept)
}

impl CellData {
    pub fn build(obs: &[Vec<MessageObservation>], train: &[usize], test: &[usize], seq_len: usize) -> Result<Self> {
        let seqs = |idx: &[usize]| -> Result<Vec<SequenceExample>> {
            idx.iter()
                .filter(|&&i| !obs[i].is_empty())
                .map(|&i| make_sequence(&obs[i], seq_len))
                .collect()
        };
        Ok(Self {
            seq_len,
            train_seqs: seqs(train)?,
            test_seqs: seqs(test)?,
            train_rows: rows_of(obs, train, seq_len)?,
            test_rows: rows_of(obs, test, seq_len)?,
        })
    }
}

/// Fits one model kind on a cell's training view.
pub fn fit_model(kind: ModelKind, cell: &CellData, config: &ExperimentConfig) -> Result<FittedModel> {
    let lbfgs = LbfgsOptions::default();
    let with_seed = |c: &TrainConfig| TrainConfig { seed: config.seed, ..*c };
    Ok(match kind {
        ModelKind::Weibull => FittedModel::Weibull(fit_weibull(&cell.train_rows, &lbfgs)?.0),
        ModelKind::CphL => FittedModel::CoxLinear(fit_cox_linear(&cell.train_rows, &lbfgs)?.0),
        ModelKind::CphG => {
            FittedModel::CoxNonlinear(fit_cox_nonlinear(&cell.train_rows, config.hidden, &with_seed(&config.cph_g))?.0)
        }
        ModelKind::CphMm => FittedModel::CoxMixture(fit_cox_mixture(&cell.train_rows, &lbfgs)?.0),
        ModelKind::RnnS => FittedModel::Rnn(rnn::train(&cell.train_seqs, config.hidden, &with_seed(&config.rnn))?.0),
    })
}

/// Test-set C-index of a fitted model on a cell.
pub fn test_cindex(model: &FittedModel, cell: &CellData) -> Result<f64> {
    match model {
        FittedModel::Rnn(m) => m.c_index(&cell.test_seqs),
        other => {
            let d = &cell.test_rows;
            // ordering is all that matters, so stay in log space
            let scores = d.x.iter().map(|x| other.log_score_row(x)).collect::<Result<Vec<_>>>()?;
            if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
                return Err(Error::NonFinite(format!("log score {s}")));
            }
            concordance_counts(&scores, &d.durations, &d.events).c_index()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub model: String,
    pub window_hours: f64,
    pub seq_len: usize,
    pub c_index: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub config_hash: String,
    pub cells: Vec<CellResult>,
}

impl ExperimentResults {
    pub fn get(&self, model: ModelKind, window_hours: f64, seq_len: usize) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.model == model.as_str() && c.window_hours == window_hours && c.seq_len == seq_len)
    }

    /// Wide table: one row per model, one column per (window, length).
    pub fn to_csv(&self, config: &ExperimentConfig) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["model".to_string()];
        for wh in &config.windows_hours {
            for l in &config.sequence_lengths {
                header.push(format!("{wh}h_L{l}"));
            }
        }
        w.write_record(&header)?;
        for m in &config.models {
            let mut rec = vec![m.clone()];
            for &wh in &config.windows_hours {
                for &l in &config.sequence_lengths {
                    let cell = self
                        .cells
                        .iter()
                        .find(|c| &c.model == m && c.window_hours == wh && c.seq_len == l);
                    rec.push(match cell.and_then(|c| c.c_index) {
                        Some(v) => format!("{v:.6}"),
                        None => "failed".into(),
                    });
                }
            }
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Serialize)]
struct Provenance<'a> {
    config_hash: &'a str,
    config: &'a ExperimentConfig,
    seed: u64,
    version: &'static str,
    generated_at_unix: u64,
    cells: &'a [CellResult],
}

pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_JSON: &str = "results.json";
pub const REPORT_JSON: &str = "report.json";
pub const RANKINGS_CSV: &str = "rankings.csv";
pub const OPEN_RATE_MATRIX_CSV: &str = "open_rate_matrix.csv";

/// Trains every requested model in every (window, length) cell. A failing
/// cell is recorded and the others proceed.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResults> {
    let kinds = config.model_kinds()?;
    config.validate()?;
    let data = Dataset::prepare(config)?;
    let mut cells = Vec::new();
    for &wh in &config.windows_hours {
        for &l in &config.sequence_lengths {
            let cell = stage("features", data.cell(wh, l));
            for &kind in &kinds {
                let outcome = cell.as_ref().map_err(|e| e.to_string()).and_then(|c| {
                    fit_model(kind, c, config)
                        .and_then(|m| test_cindex(&m, c))
                        .map_err(|e| e.to_string())
                });
                if let Err(e) = &outcome {
                    log::warn!("{kind} at {wh} h, L={l} failed: {e}");
                } else {
                    log::info!("{kind} at {wh} h, L={l}: C = {:.4}", outcome.as_ref().unwrap());
                }
                cells.push(CellResult {
                    model: kind.as_str().into(),
                    window_hours: wh,
                    seq_len: l,
                    c_index: outcome.as_ref().ok().copied(),
                    error: outcome.err(),
                });
            }
        }
    }
    let results = ExperimentResults {
        config_hash: config.hash(),
        cells,
    };
    if let Some(dir) = &config.output_dir {
        write_experiment(dir, config, &results)?;
    }
    Ok(results)
}

pub fn write_experiment(dir: &Path, config: &ExperimentConfig, results: &ExperimentResults) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(RESULTS_CSV);
    std::fs::write(&csv_path, results.to_csv(config)?).map_err(|e| Error::io(&csv_path, e))?;
    let prov = Provenance {
        config_hash: &results.config_hash,
        config,
        seed: config.seed,
        version: env!("CARGO_PKG_VERSION"),
        generated_at_unix: now_unix(),
        cells: &results.cells,
    };
    let json_path = dir.join(RESULTS_JSON);
    std::fs::write(&json_path, serde_json::to_string_pretty(&prov)?).map_err(|e| Error::io(&json_path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndToEndReport {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub model: String,
    pub window_hours: f64,
    pub seq_len: usize,
    pub scheme_hash: String,
    pub recipients: usize,
    pub train_recipients: usize,
    pub test_recipients: usize,
    pub test_c_index: f64,
    pub topk: TopKReport,
    pub deciles: DecileReport,
    /// Spearman correlation of decile index with decile open rate.
    pub decile_spearman: f64,
    pub generated_at_unix: u64,
}

/// Rankings from each test recipient's first `score_prefix` messages and
/// the holdout of their remaining messages.
pub fn rank_test_recipients(
    model: &FittedModel,
    data: &Dataset,
    window_hours: f64,
    seq_len: usize,
    score_prefix: usize,
) -> Result<(Vec<BinRanking>, Vec<RecipientHistory>)> {
    let ctx = data.context(window_hours);
    let mut rankings = Vec::new();
    let mut holdout = Vec::new();
    for &i in &data.test {
        let h = &data.histories[i];
        if h.messages.len() <= score_prefix {
            continue;
        }
        let prefix = RecipientHistory {
            recipient_id: h.recipient_id.clone(),
            messages: h.messages[..score_prefix].to_vec(),
            purchases: h.purchases.clone(),
        };
        rankings.push(rank_bins(model, &prefix, &ctx, seq_len)?);
        holdout.push(RecipientHistory {
            recipient_id: h.recipient_id.clone(),
            messages: h.messages[score_prefix..].to_vec(),
            purchases: Vec::new(),
        });
    }
    Ok((rankings, holdout))
}

/// ingest -> filter -> bin -> features -> train -> rank -> report.
pub fn end_to_end(config: &ExperimentConfig) -> Result<EndToEndReport> {
    config.validate()?;
    let rc = &config.report;
    let kind: ModelKind = rc.model.parse()?;
    let data = Dataset::prepare(config)?;
    let cell = stage("features", data.cell(rc.window_hours, rc.seq_len))?;
    let model = stage("train", fit_model(kind, &cell, config))?;
    let test_c = stage("eval", test_cindex(&model, &cell))?;
    let (rankings, holdout_h) = stage(
        "rank",
        rank_test_recipients(&model, &data, rc.window_hours, rc.seq_len, rc.score_prefix),
    )?;
    let holdout = holdout_messages(&holdout_h, &data.context(rc.window_hours));
    let topk = stage("report", evaluate_topk(&rankings, &holdout, rc.k, config.seed))?;
    let deciles = stage("report", decile_report(&rankings, &holdout))?;
    let idx: Vec<f64> = (1..=deciles.deciles.len()).map(|d| d as f64).collect();
    let report = EndToEndReport {
        config_hash: config.hash(),
        seed: config.seed,
        version: env!("CARGO_PKG_VERSION").into(),
        model: kind.as_str().into(),
        window_hours: rc.window_hours,
        seq_len: rc.seq_len,
        scheme_hash: data.scheme.hash(),
        recipients: data.histories.len(),
        train_recipients: data.train.len(),
        test_recipients: data.test.len(),
        test_c_index: test_c,
        decile_spearman: spearman(&idx, &deciles.rates()),
        topk,
        deciles,
        generated_at_unix: now_unix(),
    };
    if let Some(dir) = &config.output_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(REPORT_JSON);
        std::fs::write(&p, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&p, e))?;
        let p = dir.join(RANKINGS_CSV);
        write_rankings(std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?, &rankings)?;
        let p = dir.join(OPEN_RATE_MATRIX_CSV);
        write_open_rate_matrix(
            std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?,
            &holdout,
            data.scheme.bin_count(),
        )?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            data: DataSource::Synth {
                spec: GeneratorSpec {
                    n_recipients: 120,
                    messages_per_recipient: 20,
                    beta: vec![1.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0],
                    frailty_sd: 0.5,
                    seed: 2,
                    ..Default::default()
                },
            },
            windows_hours: vec![12.0],
            sequence_lengths: vec![4],
            models: vec!["cph_l".into(), "rnn_s".into()],
            bins: 10,
            filter: FilterConfig {
                min_bulk_size: 1,
                ..Default::default()
            },
            hidden: 4,
            rnn: TrainConfig {
                epochs: 2,
                ..Default::default()
            },
            report: ReportConfig {
                seq_len: 4,
                score_prefix: 12,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn unknown_model_rejected_before_training() {
        let c = ExperimentConfig {
            models: vec!["cph_l".into(), "xgboost".into()],
            ..tiny()
        };
        assert!(matches!(run_experiment(&c), Err(Error::Config(_))));
        assert!(ExperimentConfig { train_fraction: 1.0, ..tiny() }.validate().is_err());
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let (a, b) = split_recipients(101, 0.8, 3);
        assert_eq!(a.len(), 81);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
    }

    #[test]
    fn cell_views_cover_the_same_messages() {
        let data = Dataset::prepare(&tiny()).unwrap();
        let cell = data.cell(12.0, 4).unwrap();
        let slots: usize = cell.test_seqs.iter().map(|s| s.valid_count()).sum();
        assert_eq!(slots, cell.test_rows.len());
        let events: usize = cell
            .test_seqs
            .iter()
            .flat_map(|s| &s.steps)
            .filter(|s| s.valid && s.outcome.event)
            .count();
        assert_eq!(events, cell.test_rows.event_count());
    }

    #[test]
    fn grid_writes_table_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let c = ExperimentConfig {
            output_dir: Some(dir.path().to_path_buf()),
            ..tiny()
        };
        let a = run_experiment(&c).unwrap();
        let first = std::fs::read_to_string(dir.path().join(RESULTS_CSV)).unwrap();
        let b = run_experiment(&c).unwrap();
        let second = std::fs::read_to_string(dir.path().join(RESULTS_CSV)).unwrap();
        assert_eq!(a, b);
        assert_eq!(first, second);
        assert!(first.starts_with("model,12h_L4\ncph_l,0."), "{first}");
        assert!(a.cells.iter().all(|c| c.c_index.is_some_and(|v| v > 0.5)));
    }

    #[test]
    fn end_to_end_report_is_consistent() {
        let dir = tempfile::tempdir().unwrap();
        let c = ExperimentConfig {
            output_dir: Some(dir.path().to_path_buf()),
            ..tiny()
        };
        let r = end_to_end(&c).unwrap();
        assert_eq!(r.deciles.total_sent() as usize, r.topk.evaluated_recipients * 8);
        assert!(dir.path().join(RANKINGS_CSV).exists());
        assert!(dir.path().join(OPEN_RATE_MATRIX_CSV).exists());
        let again = end_to_end(&c).unwrap();
        assert_eq!(
            EndToEndReport { generated_at_unix: 0, ..r },
            EndToEndReport { generated_at_unix: 0, ..again }
        );
    }

    #[test]
    fn missing_input_names_the_stage_and_path() {
        let c = ExperimentConfig {
            data: DataSource::Files {
                emails: "/nonexistent/emails.csv".into(),
                purchases: "/nonexistent/purchases.csv".into(),
                window: TimeWindow { start: 0, end: 10 },
            },
            ..tiny()
        };
        let e = Dataset::prepare(&c).unwrap_err().to_string();
        assert!(e.contains("ingest") && e.contains("/nonexistent/emails.csv"), "{e}");
    }
}
