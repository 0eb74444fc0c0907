use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use sendtime::event_log::{filter, ingest_paths, load_snapshot, save_snapshot, TimeWindow};
use sendtime::experiment::{
    end_to_end, fit_model, run_experiment, split_recipients, test_cindex, CellData, ExperimentConfig,
    OPEN_RATE_MATRIX_CSV,
};
use sendtime::features::{extract, matrix_schema, write_feature_matrix, ExtractContext};
use sendtime::model::{FittedModel, ModelKind};
use sendtime::send_time::{
    decile_report, evaluate_topk, holdout_messages, rank_bins, read_rankings, write_open_rate_matrix, write_rankings,
};
use sendtime::survival::{c_index, efron_nll, SurvivalBatch};
use sendtime::synth::{generate, GeneratorSpec};
use sendtime::virtual_time::{fit_bins, BinScheme};

/// Time-to-open survival models and send-time ranking.
#[derive(Debug, Parser)]
#[command(name = "sendtime", version, about)]
struct Cli {
    /// Experiment config (JSON); flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Read emails.csv and purchases.csv into a history snapshot.
    Ingest {
        #[arg(long)]
        emails: PathBuf,
        #[arg(long)]
        purchases: PathBuf,
        #[arg(long)]
        window_start: i64,
        #[arg(long)]
        window_end: i64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply the recipient eligibility rules to a snapshot.
    Filter {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        min_messages: Option<usize>,
        #[arg(long)]
        min_bulk: Option<u64>,
        #[arg(long)]
        max_opens: Option<u32>,
    },
    /// Split a snapshot by recipient into train and test snapshots.
    Split {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        train_out: PathBuf,
        #[arg(long)]
        test_out: PathBuf,
        #[arg(long)]
        train_fraction: Option<f64>,
    },
    /// Fit equal-count weekly send-time bins.
    Bin {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the per-message feature matrix as CSV (plus a schema JSON).
    Features {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on every recipient in a snapshot.
    Train {
        #[arg(long)]
        model: String,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// C-index of a trained model on a snapshot.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Rank every send-time bin for each recipient's next message.
    Rank {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-k and decile open rates of rankings against a holdout snapshot.
    Report {
        #[arg(long)]
        rankings: PathBuf,
        #[arg(long)]
        holdout: PathBuf,
        #[arg(long)]
        scheme: PathBuf,
        #[arg(long)]
        window_hours: Option<f64>,
        #[arg(long)]
        population: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Recipient x bin open-rate matrix; defaults next to --out.
        #[arg(long)]
        matrix_out: Option<PathBuf>,
    },
    /// Generate a synthetic population with known hazards.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train and evaluate the model x window x length grid.
    Experiment {
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Run ingest through report in one go and write report.json.
    Pipeline {
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Efron NLL and C-index of a CSV with columns phi,duration,event.
    LossCheck {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    histories: PathBuf,
    #[arg(long)]
    scheme: PathBuf,
    #[arg(long)]
    window_hours: Option<f64>,
    /// Filtered population size used for the mass-mail flag; defaults to
    /// the number of recipients in the snapshot.
    #[arg(long)]
    population: Option<usize>,
}

#[derive(Debug, Args)]
struct GridArgs {
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Comma separated model names.
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    windows: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    lengths: Option<Vec<usize>>,
    #[arg(long)]
    epochs: Option<usize>,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut c = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    Ok(c)
}

fn window_of(data: &DataArgs, config: &ExperimentConfig) -> f64 {
    data.window_hours.unwrap_or(config.report.window_hours)
}

struct Loaded {
    histories: Vec<sendtime::event_log::RecipientHistory>,
    scheme: BinScheme,
    population: usize,
}

impl Loaded {
    fn read(data: &DataArgs) -> Result<Self> {
        let (_, histories) = load_snapshot(&data.histories)?;
        let scheme = BinScheme::load(&data.scheme)?;
        let population = data.population.unwrap_or(histories.len());
        Ok(Self {
            histories,
            scheme,
            population,
        })
    }

    fn ctx(&self, window_hours: f64) -> ExtractContext<'_> {
        ExtractContext {
            scheme: &self.scheme,
            window_hours,
            population: self.population,
        }
    }

    fn cell(&self, window_hours: f64, seq_len: usize, as_train: bool) -> Result<CellData> {
        let ctx = self.ctx(window_hours);
        let obs: Vec<_> = self.histories.iter().map(|h| extract(h, &ctx)).collect();
        let all: Vec<usize> = (0..obs.len()).collect();
        let (train, test) = if as_train { (&all[..], &[][..]) } else { (&[][..], &all[..]) };
        Ok(CellData::build(&obs, train, test, seq_len)?)
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}

fn apply_grid(config: &mut ExperimentConfig, g: GridArgs) {
    if let Some(d) = g.out_dir {
        config.output_dir = Some(d);
    }
    if let Some(m) = g.models {
        config.models = m;
    }
    if let Some(w) = g.windows {
        config.windows_hours = w;
    }
    if let Some(l) = g.lengths {
        config.sequence_lengths = l;
    }
    if let Some(e) = g.epochs {
        config.rnn.epochs = e;
        config.cph_g.epochs = e;
    }
}

#[derive(Deserialize)]
struct LossRow {
    phi: f64,
    duration: f64,
    event: u8,
}

fn run(cli: Cli) -> Result<()> {
    let mut config = load_config(&cli)?;
    match cli.command {
        Command::Ingest {
            emails,
            purchases,
            window_start,
            window_end,
            out,
        } => {
            let report = ingest_paths(&emails, &purchases, TimeWindow::new(window_start, window_end)?)?;
            for r in report.rejected.iter().take(20) {
                log::warn!("{}:{}: {}", r.file, r.line, r.reason);
            }
            save_snapshot(&out, report.window, &report.histories)?;
            println!(
                "{} recipients, {} messages, {} rejected rows, {} outside window",
                report.histories.len(),
                report.message_count(),
                report.rejected.len(),
                report.outside_window
            );
        }
        Command::Filter {
            input,
            out,
            min_messages,
            min_bulk,
            max_opens,
        } => {
            let mut fc = config.filter;
            fc.min_messages = min_messages.unwrap_or(fc.min_messages);
            fc.min_bulk_size = min_bulk.unwrap_or(fc.min_bulk_size);
            fc.max_open_count = max_opens.unwrap_or(fc.max_open_count);
            let (window, histories) = load_snapshot(&input)?;
            let kept = filter(&histories, &fc, window)?;
            save_snapshot(&out, window, &kept)?;
            println!("kept {} of {} recipients", kept.len(), histories.len());
        }
        Command::Split {
            input,
            train_out,
            test_out,
            train_fraction,
        } => {
            let frac = train_fraction.unwrap_or(config.train_fraction);
            if !(frac > 0.0 && frac < 1.0) {
                bail!("train fraction must lie in (0, 1), got {frac}");
            }
            let (window, histories) = load_snapshot(&input)?;
            let (train, test) = split_recipients(histories.len(), frac, config.seed);
            let pick = |idx: &[usize]| idx.iter().map(|&i| histories[i].clone()).collect::<Vec<_>>();
            save_snapshot(&train_out, window, &pick(&train))?;
            save_snapshot(&test_out, window, &pick(&test))?;
            println!("{} train, {} test recipients", train.len(), test.len());
        }
        Command::Bin { input, bins, out } => {
            let (_, histories) = load_snapshot(&input)?;
            let sends: Vec<i64> = histories
                .iter()
                .flat_map(|h| h.messages.iter().map(|m| m.send_time))
                .collect();
            let scheme = fit_bins(&sends, bins.unwrap_or(config.bins))?;
            scheme.save(&out)?;
            println!("{} bins, hash {}", scheme.bin_count(), scheme.hash());
        }
        Command::Features { data, out } => {
            let loaded = Loaded::read(&data)?;
            let ctx = loaded.ctx(window_of(&data, &config));
            let obs: Vec<_> = loaded.histories.iter().flat_map(|h| extract(h, &ctx)).collect();
            let f = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            write_feature_matrix(f, &obs, loaded.scheme.bin_count())?;
            write_json(&out.with_extension("schema.json"), &matrix_schema(loaded.scheme.bin_count()))?;
            println!("{} rows", obs.len());
        }
        Command::Train {
            model,
            data,
            seq_len,
            epochs,
            lr,
            batch_size,
            hidden,
            out,
        } => {
            let kind: ModelKind = model.parse()?;
            for tc in [&mut config.rnn, &mut config.cph_g] {
                tc.epochs = epochs.unwrap_or(tc.epochs);
                tc.lr = lr.unwrap_or(tc.lr);
                tc.batch_size = batch_size.unwrap_or(tc.batch_size);
            }
            config.hidden = hidden.unwrap_or(config.hidden);
            let seq_len = seq_len.unwrap_or(config.report.seq_len);
            let loaded = Loaded::read(&data)?;
            let cell = loaded.cell(window_of(&data, &config), seq_len, true)?;
            let fitted = fit_model(kind, &cell, &config)?;
            fitted.save(&out, Some(&loaded.scheme), seq_len)?;
            println!("trained {kind} on {} observations", cell.train_rows.len());
        }
        Command::Eval { model, data } => {
            let loaded_model = FittedModel::load(&model)?;
            let loaded = Loaded::read(&data)?;
            loaded_model.check_scheme(&loaded.scheme)?;
            let cell = loaded.cell(window_of(&data, &config), loaded_model.seq_len, false)?;
            let c = test_cindex(&loaded_model.model, &cell)?;
            println!(
                "{}",
                serde_json::json!({ "model": loaded_model.model.kind().as_str(), "c_index": c, "observations": cell.test_rows.len() })
            );
        }
        Command::Rank { model, data, out } => {
            let m = FittedModel::load(&model)?;
            let loaded = Loaded::read(&data)?;
            m.check_scheme(&loaded.scheme)?;
            let ctx = loaded.ctx(window_of(&data, &config));
            let rankings = loaded
                .histories
                .iter()
                .map(|h| rank_bins(&m.model, h, &ctx, m.seq_len))
                .collect::<sendtime::Result<Vec<_>>>()?;
            let f = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            write_rankings(f, &rankings)?;
            println!("ranked {} recipients", rankings.len());
        }
        Command::Report {
            rankings,
            holdout,
            scheme,
            window_hours,
            population,
            k,
            out,
            matrix_out,
        } => {
            let rankings = read_rankings(File::open(&rankings).with_context(|| format!("opening {}", rankings.display()))?)?;
            let (_, histories) = load_snapshot(&holdout)?;
            let scheme = BinScheme::load(&scheme)?;
            let ctx = ExtractContext {
                scheme: &scheme,
                window_hours: window_hours.unwrap_or(config.report.window_hours),
                population: population.unwrap_or(histories.len()),
            };
            let holdout = holdout_messages(&histories, &ctx);
            let topk = evaluate_topk(&rankings, &holdout, k.unwrap_or(config.report.k), config.seed)?;
            let deciles = decile_report(&rankings, &holdout)?;
            write_json(
                &out,
                &serde_json::json!({ "config_hash": config.hash(), "topk": topk, "deciles": deciles }),
            )?;
            let matrix = matrix_out.unwrap_or_else(|| out.with_file_name(OPEN_RATE_MATRIX_CSV));
            let f = File::create(&matrix).with_context(|| format!("creating {}", matrix.display()))?;
            write_open_rate_matrix(f, &holdout, scheme.bin_count())?;
            println!(
                "top-{} {:.2}% vs uniform {:.2}%",
                topk.k, topk.topk_rate, topk.uniform_rate
            );
        }
        Command::Synth { spec, out_dir } => {
            let mut spec: GeneratorSpec = match spec {
                Some(p) => {
                    let s = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&s)?
                }
                None => GeneratorSpec::default(),
            };
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            let out = generate(&spec)?;
            out.write_to_dir(&out_dir)?;
            println!(
                "{} messages, window {}..{}",
                out.emails.len(),
                out.truth.window.start,
                out.truth.window.end
            );
        }
        Command::Experiment { grid } => {
            apply_grid(&mut config, grid);
            let results = run_experiment(&config)?;
            print!("{}", results.to_csv(&config)?);
            let failed = results.cells.iter().filter(|c| c.error.is_some()).count();
            if failed > 0 {
                log::warn!("{failed} cells failed");
            }
        }
        Command::Pipeline { grid } => {
            apply_grid(&mut config, grid);
            let r = end_to_end(&config)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::LossCheck { input } => {
            let mut rdr = csv::Reader::from_path(&input).with_context(|| format!("opening {}", input.display()))?;
            let (mut phi, mut dur, mut ev) = (Vec::new(), Vec::new(), Vec::new());
            for row in rdr.deserialize() {
                let r: LossRow = row?;
                phi.push(r.phi);
                dur.push(r.duration);
                ev.push(r.event != 0);
            }
            let batch = SurvivalBatch::new(phi, dur, ev)?;
            let nll = efron_nll(&batch)?;
            let c = c_index(&batch).ok();
            println!("{}", serde_json::json!({ "efron_nll": nll, "c_index": c, "n": batch.len() }));
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
