//! The four pipeline stages (ingest, train, backtest, explain) driven by a
//! flat `key = value` run configuration. Every stage reads its inputs from and
//! writes its artifacts to the configured output directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;

use crate::dqn::{evaluate, train, BacktestRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::explainer::{
    condense, training_background, DecisionLabel, ExplainContext, ExplainMethod, DEFAULT_TOP_K,
};
use crate::market_data::{
    clean_and_sort, parse_csv, split_by_date, PriceSeries, SplitSpec, DATE_FORMAT,
};
use crate::neural_net::{load_weights, save_weights, QNetwork};
use crate::plot::{render_ohlc, render_waterfall, OhlcPlotSpec, WaterfallSpec};
use crate::trading_env::{Action, EnvConfig, Normalizer, DEFAULT_WINDOW};

pub const DEFAULT_SAMPLES: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodChoice {
    Exact,
    Permutation,
}

impl MethodChoice {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(MethodChoice::Exact),
            "perm" | "permutation" => Ok(MethodChoice::Permutation),
            other => Err(Error::Config(format!(
                "unknown method `{other}`, expected exact or perm"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: PathBuf,
    pub output_dir: PathBuf,
    pub ticker: String,
    pub split: SplitSpec,
    pub window_size: usize,
    pub train: TrainConfig,
    pub method: MethodChoice,
    pub samples: usize,
    pub top_k: usize,
}

impl RunConfig {
    /// Defaults everywhere except the data file; the ticker is the file stem.
    pub fn with_data(data: impl Into<PathBuf>) -> Self {
        let data = data.into();
        let ticker = data
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "SERIES".into());
        RunConfig {
            data,
            output_dir: PathBuf::from("out"),
            ticker,
            split: SplitSpec::default(),
            window_size: DEFAULT_WINDOW,
            train: TrainConfig::default(),
            method: MethodChoice::Permutation,
            samples: DEFAULT_SAMPLES,
            top_k: DEFAULT_TOP_K,
        }
    }

    /// Parses config text; relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if pairs
                .iter()
                .any(|(seen, _, _): &(&str, &str, usize)| *seen == k)
            {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{k}`",
                    i + 1
                )));
            }
            pairs.push((k, v, i + 1));
        }
        let data = pairs
            .iter()
            .find(|p| p.0 == "data")
            .map(|p| base_dir.join(p.1))
            .ok_or_else(|| Error::Config("missing required key `data`".into()))?;
        let mut cfg = RunConfig::with_data(data);
        cfg.output_dir = base_dir.join(&cfg.output_dir);

        for (k, v, line) in pairs {
            let ctx = |e: Error| match e {
                Error::Config(m) => Error::Config(format!("line {line}: {m}")),
                other => other,
            };
            cfg.set(k, v, base_dir).map_err(ctx)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::parse(&text, base)
    }

    fn set(&mut self, key: &str, value: &str, base_dir: &Path) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("`{key}` has invalid value `{v}`")))
        }
        let date = |v: &str| {
            NaiveDate::parse_from_str(v, DATE_FORMAT)
                .map_err(|_| Error::Config(format!("`{key}` is not a YYYY-MM-DD date: `{v}`")))
        };
        let t = &mut self.train;
        match key {
            "data" => {}
            "output_dir" => self.output_dir = base_dir.join(value),
            "ticker" => {
                if value.is_empty() || value.contains(['/', '\\']) {
                    return Err(Error::Config(format!("invalid ticker `{value}`")));
                }
                self.ticker = value.to_string();
            }
            "train_start" => self.split.train_start = date(value)?,
            "train_end" => self.split.train_end = date(value)?,
            "test_start" => self.split.test_start = date(value)?,
            "test_end" => self.split.test_end = date(value)?,
            "window_size" => self.window_size = num(key, value)?,
            "gamma" => t.gamma = num(key, value)?,
            "epsilon_start" => t.epsilon_start = num(key, value)?,
            "epsilon_min" => t.epsilon_min = num(key, value)?,
            "epsilon_decay" => t.epsilon_decay = num(key, value)?,
            "learning_rate" => t.learning_rate = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "hidden_width" => t.hidden_width = num(key, value)?,
            "epochs" => t.epochs = num(key, value)?,
            "episodes" => t.episodes = num(key, value)?,
            "target_sync" => t.target_sync = num(key, value)?,
            "replay_capacity" => t.replay_capacity = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "method" => self.method = MethodChoice::parse(value)?,
            "samples" => self.samples = num(key, value)?,
            "top_k" => self.top_k = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.train.validate()?;
        if self.window_size == 0 {
            return Err(Error::Config("window_size must be positive".into()));
        }
        if self.samples == 0 {
            return Err(Error::Config("samples must be positive".into()));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be positive".into()));
        }
        Ok(())
    }

    pub fn explain_method(&self) -> ExplainMethod {
        match self.method {
            MethodChoice::Exact => ExplainMethod::ExactReduced,
            MethodChoice::Permutation => ExplainMethod::Permutation {
                samples: self.samples,
                seed: self.train.seed,
            },
        }
    }

    pub fn artifact(&self, suffix: &str) -> PathBuf {
        self.output_dir.join(format!("{}{suffix}", self.ticker))
    }

    pub fn train_csv(&self) -> PathBuf {
        self.artifact("_train.csv")
    }

    pub fn test_csv(&self) -> PathBuf {
        self.artifact("_test.csv")
    }

    pub fn weights(&self) -> PathBuf {
        self.artifact(".qnet")
    }

    pub fn train_log(&self) -> PathBuf {
        self.artifact("_train_log.csv")
    }

    pub fn backtest_csv(&self) -> PathBuf {
        self.artifact("_backtest.csv")
    }

    pub fn explanations(&self) -> PathBuf {
        self.artifact("_explanations.jsonl")
    }

    pub fn waterfall(&self, date: NaiveDate) -> PathBuf {
        self.artifact(&format!("_{}_waterfall.svg", date.format(DATE_FORMAT)))
    }

    pub fn ohlc(&self, range_label: &str) -> PathBuf {
        self.artifact(&format!("_{range_label}_ohlc.svg"))
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Reads an artifact an earlier stage should have produced.
fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Usage(format!(
            "{} not found; run `{stage}` first",
            path.display()
        )))
    }
}

fn load_series(ticker: &str, path: &Path) -> Result<PriceSeries> {
    let raw = parse_csv(ticker, &read_text(path)?)?;
    let (series, _) = clean_and_sort(&raw)?;
    Ok(series)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestSummary {
    pub ticker: String,
    pub rows_read: usize,
    pub missing_dropped: usize,
    pub invalid_dropped: usize,
    pub clean_rows: usize,
    pub train_rows: usize,
    pub test_rows: usize,
}

impl fmt::Display for IngestSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: read {} rows, dropped {} missing and {} invalid, kept {}; train {} rows, test {} rows",
            self.ticker,
            self.rows_read,
            self.missing_dropped,
            self.invalid_dropped,
            self.clean_rows,
            self.train_rows,
            self.test_rows
        )
    }
}

/// parse → clean → split, persisting both partitions.
pub fn cmd_ingest(config: &RunConfig) -> Result<IngestSummary> {
    let raw = parse_csv(&config.ticker, &read_text(&config.data)?)?;
    let (series, report) = clean_and_sort(&raw)?;
    if series.is_empty() {
        return Err(Error::Data(format!(
            "{}: empty series",
            config.data.display()
        )));
    }
    let (train, test) = split_by_date(&series, &config.split)?;
    write_file(&config.train_csv(), train.to_csv())?;
    write_file(&config.test_csv(), test.to_csv())?;
    Ok(IngestSummary {
        ticker: config.ticker.clone(),
        rows_read: raw.rows.len(),
        missing_dropped: report.missing_dropped,
        invalid_dropped: report.invalid_dropped,
        clean_rows: series.len(),
        train_rows: train.len(),
        test_rows: test.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub episodes: usize,
    pub final_epsilon: f64,
    /// Last episode's exploratory and greedy rewards, if any episode ran.
    pub final_reward: Option<f64>,
    pub final_greedy_reward: Option<f64>,
}

impl fmt::Display for TrainSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "trained {} episodes, final epsilon {:.6}",
            self.episodes, self.final_epsilon
        )?;
        if let (Some(r), Some(g)) = (self.final_reward, self.final_greedy_reward) {
            write!(f, ", final episode reward {r:.4} (greedy {g:.4})")?;
        }
        Ok(())
    }
}

pub fn cmd_train(config: &RunConfig) -> Result<TrainSummary> {
    require(&config.train_csv(), "ingest")?;
    let series = load_series(&config.ticker, &config.train_csv())?;
    let env = EnvConfig::full(config.window_size, series.len());
    env.validate(series.len())?;
    let agent = train(&series, env, &config.train)?;
    write_file(
        &config.weights(),
        save_weights(&agent.net, &agent.normalizer),
    )?;
    write_file(&config.train_log(), agent.log.to_csv())?;
    Ok(TrainSummary {
        episodes: agent.log.episodes.len(),
        final_epsilon: agent.final_epsilon,
        final_reward: agent.log.episodes.last().map(|e| e.cumulative_reward),
        final_greedy_reward: agent.log.episodes.last().map(|e| e.greedy_reward),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestSummary {
    pub days: usize,
    pub buys: usize,
    pub cumulative_reward: f64,
    pub plot: PathBuf,
}

impl fmt::Display for BacktestSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "backtested {} days ({} buys), cumulative reward {:.4}, chart {}",
            self.days,
            self.buys,
            self.cumulative_reward,
            self.plot.display()
        )
    }
}

fn backtest_record(
    config: &RunConfig,
) -> Result<(QNetwork, Normalizer, PriceSeries, BacktestRecord)> {
    require(&config.weights(), "train")?;
    require(&config.test_csv(), "ingest")?;
    let (net, normalizer) = load_weights(&read_bytes(&config.weights())?)?;
    let test = load_series(&config.ticker, &config.test_csv())?;
    let env = EnvConfig::full(config.window_size, test.len());
    env.validate(test.len())?;
    let record = evaluate(&net, Some(&normalizer), &test, env)?;
    Ok((net, normalizer, test, record))
}

/// Greedy evaluation on the test partition plus the OHLC action chart.
pub fn cmd_backtest(config: &RunConfig) -> Result<BacktestSummary> {
    let (_, _, test, record) = backtest_record(config)?;
    let first = record
        .first_index()
        .ok_or_else(|| Error::Data("backtest produced no trading days".into()))?;
    let bars = test.bars()[first..first + record.days.len()].to_vec();
    let actions = record.days.iter().map(|d| (d.date, d.action)).collect();
    if record
        .days
        .windows(2)
        .all(|w| w[0].q_values == w[1].q_values)
    {
        log::warn!("{}: Q-values do not depend on the observation; the network has collapsed, try another seed", config.ticker);
    }
    let svg = render_ohlc(&OhlcPlotSpec::new(config.ticker.clone(), bars, actions))?;
    let plot = config.ohlc(&record.date_range_label());
    write_file(&config.backtest_csv(), record.to_csv())?;
    write_file(&plot, svg)?;
    Ok(BacktestSummary {
        days: record.days.len(),
        buys: record
            .days
            .iter()
            .filter(|d| d.action == Action::Buy)
            .count(),
        cumulative_reward: record.cumulative_reward,
        plot,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainedDay {
    pub date: NaiveDate,
    pub label: DecisionLabel,
    pub guidance: String,
    pub waterfall: PathBuf,
    /// The JSON line written for this date.
    pub json: String,
}

/// Explains every eligible test date in `[from, to]`.
///
/// Nothing is written unless every explanation passes the additivity check
/// and renders.
pub fn cmd_explain(
    config: &RunConfig,
    from: NaiveDate,
    to: NaiveDate,
) -> Result<Vec<ExplainedDay>> {
    require(&config.backtest_csv(), "backtest")?;
    require(&config.train_csv(), "ingest")?;
    let (net, normalizer, test, record) = backtest_record(config)?;
    if read_text(&config.backtest_csv())? != record.to_csv() {
        return Err(Error::Data(format!(
            "{} does not match the current weights; rerun `backtest`",
            config.backtest_csv().display()
        )));
    }
    let train_series = load_series(&config.ticker, &config.train_csv())?;
    let background = training_background(&train_series, &normalizer, config.window_size)?;
    let ctx = ExplainContext {
        predictor: &net,
        series: &test,
        normalizer: &normalizer,
        background: &background,
        backtest: &record,
    };
    let explanations = ctx.explain_range(from, to, config.explain_method())?;

    let mut days = Vec::with_capacity(explanations.len());
    let mut svgs = Vec::with_capacity(explanations.len());
    for e in &explanations {
        e.check_additivity(1e-9 * e.explained_value.abs().max(1.0))?;
        svgs.push(render_waterfall(&WaterfallSpec::new(condense(
            e,
            config.top_k,
        )))?);
        days.push(ExplainedDay {
            date: e.instance_date,
            label: e.label,
            guidance: e.guidance(),
            waterfall: config.waterfall(e.instance_date),
            json: serde_json::to_string(&e.to_json())
                .map_err(|err| Error::Format(err.to_string()))?,
        });
    }
    let jsonl: String = days.iter().map(|d| format!("{}\n", d.json)).collect();
    write_file(&config.explanations(), jsonl)?;
    for (d, svg) in days.iter().zip(svgs) {
        write_file(&d.waterfall, svg)?;
    }
    Ok(days)
}
