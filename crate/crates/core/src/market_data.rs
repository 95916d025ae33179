//! OHLCV ingestion: Yahoo-layout CSV parsing, cleaning, and date splitting.

use std::fmt::Write as _;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATE_FORMAT: &str = "%Y-%m-%d";

/// One trading day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OhlcvBar {
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: u64,
}

impl OhlcvBar {
    /// Prices positive and finite, `low <= min(open, close)`, `high >= max(open, close)`.
    pub fn is_valid(&self) -> bool {
        let prices = [self.open, self.high, self.low, self.close];
        prices.iter().all(|p| p.is_finite() && *p > 0.0)
            && self.low <= self.open.min(self.close)
            && self.high >= self.open.max(self.close)
    }

    /// Price channels in observation order.
    pub fn ohlc(&self) -> [f64; 4] {
        [self.open, self.high, self.low, self.close]
    }
}

/// A cleaned, strictly date-ascending series of bars for one ticker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSeries {
    ticker: String,
    bars: Vec<OhlcvBar>,
}

impl PriceSeries {
    /// Builds a series, rejecting out-of-order dates, duplicates and invalid bars.
    pub fn new(ticker: impl Into<String>, bars: Vec<OhlcvBar>) -> Result<Self> {
        for pair in bars.windows(2) {
            if pair[1].date <= pair[0].date {
                return Err(Error::Data(format!(
                    "dates not strictly increasing at {} -> {}",
                    pair[0].date, pair[1].date
                )));
            }
        }
        if let Some(bad) = bars.iter().find(|b| !b.is_valid()) {
            return Err(Error::Data(format!("invalid prices on {}", bad.date)));
        }
        Ok(Self {
            ticker: ticker.into(),
            bars,
        })
    }

    pub fn ticker(&self) -> &str {
        &self.ticker
    }

    pub fn bars(&self) -> &[OhlcvBar] {
        &self.bars
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    pub fn dates(&self) -> impl Iterator<Item = NaiveDate> + '_ {
        self.bars.iter().map(|b| b.date)
    }

    /// Index of the bar on `date`, if any.
    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        self.bars.binary_search_by(|b| b.date.cmp(&date)).ok()
    }

    /// Back to the raw form, every row present.
    pub fn to_raw(&self) -> RawSeries {
        RawSeries {
            ticker: self.ticker.clone(),
            rows: self
                .bars
                .iter()
                .enumerate()
                .map(|(i, bar)| RawRow {
                    line: i as u64 + 2,
                    date: bar.date,
                    bar: Some(*bar),
                })
                .collect(),
        }
    }

    /// Serializes in the Yahoo layout without the Adj Close column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("Date,Open,High,Low,Close,Volume\n");
        for b in &self.bars {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                b.date.format(DATE_FORMAT),
                b.open,
                b.high,
                b.low,
                b.close,
                b.volume
            );
        }
        out
    }
}

/// A parsed CSV row. `bar` is `None` when a numeric cell was empty or `null`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRow {
    pub line: u64,
    pub date: NaiveDate,
    pub bar: Option<OhlcvBar>,
}

impl RawRow {
    pub fn is_missing(&self) -> bool {
        self.bar.is_none()
    }
}

/// File-order rows straight out of [`parse_csv`], not yet cleaned.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub ticker: String,
    pub rows: Vec<RawRow>,
}

impl RawSeries {
    pub fn missing_count(&self) -> usize {
        self.rows.iter().filter(|r| r.is_missing()).count()
    }
}

struct Columns {
    date: usize,
    open: usize,
    high: usize,
    low: usize,
    close: usize,
    volume: usize,
}

impl Columns {
    fn from_header(header: &csv::StringRecord) -> Result<Self> {
        let find = |name: &str| {
            header
                .iter()
                .position(|h| {
                    h.trim()
                        .trim_start_matches('\u{feff}')
                        .eq_ignore_ascii_case(name)
                })
                .ok_or_else(|| Error::Format(format!("header is missing the {name} column")))
        };
        Ok(Self {
            date: find("Date")?,
            open: find("Open")?,
            high: find("High")?,
            low: find("Low")?,
            close: find("Close")?,
            volume: find("Volume")?,
        })
    }
}

fn cell(record: &csv::StringRecord, idx: usize) -> Option<&str> {
    record
        .get(idx)
        .map(str::trim)
        .filter(|s| !s.is_empty() && !s.eq_ignore_ascii_case("null"))
}

fn parse_price(text: &str, line: u64, column: &str) -> Result<f64> {
    text.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Row {
            line,
            message: format!("cannot parse {column} value {text:?}"),
        })
}

fn parse_volume(text: &str, line: u64) -> Result<u64> {
    if let Ok(v) = text.parse::<u64>() {
        return Ok(v);
    }
    // Some exports write volume as a float ("1200.0").
    match text.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v < u64::MAX as f64 => {
            Ok(v as u64)
        }
        _ => Err(Error::Row {
            line,
            message: format!("cannot parse Volume value {text:?}"),
        }),
    }
}

/// Parses a Yahoo Finance CSV export.
///
/// Rows come back in file order. A row with an empty or `null` numeric cell is
/// kept but flagged missing; an unparseable date or number is an error carrying
/// the line number.
pub fn parse_csv(ticker: &str, text: &str) -> Result<RawSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::Format(format!("unreadable header: {e}")))?
        .clone();
    if header.is_empty() || (header.len() == 1 && header[0].trim().is_empty()) {
        return Err(Error::Format("empty header".into()));
    }
    let cols = Columns::from_header(&header)?;

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Row {
                line,
                message: e.to_string(),
            }
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.iter().all(|c| c.trim().is_empty()) {
            continue;
        }
        let date_text = record.get(cols.date).map(str::trim).unwrap_or("");
        let date = NaiveDate::parse_from_str(date_text, DATE_FORMAT).map_err(|_| Error::Row {
            line,
            message: format!("cannot parse date {date_text:?}"),
        })?;

        let cells = [
            cell(&record, cols.open),
            cell(&record, cols.high),
            cell(&record, cols.low),
            cell(&record, cols.close),
            cell(&record, cols.volume),
        ];
        let bar = match cells {
            [Some(o), Some(h), Some(l), Some(c), Some(v)] => Some(OhlcvBar {
                date,
                open: parse_price(o, line, "Open")?,
                high: parse_price(h, line, "High")?,
                low: parse_price(l, line, "Low")?,
                close: parse_price(c, line, "Close")?,
                volume: parse_volume(v, line)?,
            }),
            _ => None,
        };
        rows.push(RawRow { line, date, bar });
    }
    Ok(RawSeries {
        ticker: ticker.to_string(),
        rows,
    })
}

/// What [`clean_and_sort`] dropped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CleanReport {
    pub missing_dropped: usize,
    pub invalid_dropped: usize,
}

/// Drops missing and price-inconsistent rows, then sorts ascending by date.
///
/// Two surviving rows on the same date is an error.
pub fn clean_and_sort(raw: &RawSeries) -> Result<(PriceSeries, CleanReport)> {
    let mut report = CleanReport::default();
    let mut bars = Vec::with_capacity(raw.rows.len());
    for row in &raw.rows {
        match row.bar {
            None => report.missing_dropped += 1,
            Some(bar) if !bar.is_valid() => report.invalid_dropped += 1,
            Some(bar) => bars.push(bar),
        }
    }
    if report.invalid_dropped > 0 {
        log::warn!(
            "{}: dropped {} rows with inconsistent prices",
            raw.ticker,
            report.invalid_dropped
        );
    }
    bars.sort_by_key(|b| b.date);
    if let Some(dup) = bars.windows(2).find(|w| w[0].date == w[1].date) {
        return Err(Error::Data(format!("duplicate date {}", dup[0].date)));
    }
    Ok((PriceSeries::new(raw.ticker.clone(), bars)?, report))
}

/// Inclusive train and test date ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_start: NaiveDate,
    pub train_end: NaiveDate,
    pub test_start: NaiveDate,
    pub test_end: NaiveDate,
}

impl SplitSpec {
    pub fn new(
        train_start: NaiveDate,
        train_end: NaiveDate,
        test_start: NaiveDate,
        test_end: NaiveDate,
    ) -> Result<Self> {
        let spec = Self {
            train_start,
            train_end,
            test_start,
            test_end,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_start <= self.train_end
            && self.train_end < self.test_start
            && self.test_start <= self.test_end
        {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "split dates must satisfy train_start <= train_end < test_start <= test_end, got {} {} {} {}",
                self.train_start, self.train_end, self.test_start, self.test_end
            )))
        }
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        let d = |y, m, day| NaiveDate::from_ymd_opt(y, m, day).expect("valid date");
        Self {
            train_start: d(2014, 1, 1),
            train_end: d(2021, 5, 31),
            test_start: d(2021, 6, 1),
            test_end: d(2022, 6, 21),
        }
    }
}

/// Partitions a cleaned series into (train, test). Bars outside both ranges are dropped.
pub fn split_by_date(series: &PriceSeries, spec: &SplitSpec) -> Result<(PriceSeries, PriceSeries)> {
    spec.validate()?;
    let pick = |from: NaiveDate, to: NaiveDate| -> Vec<OhlcvBar> {
        series
            .bars()
            .iter()
            .filter(|b| b.date >= from && b.date <= to)
            .copied()
            .collect()
    };
    let train = pick(spec.train_start, spec.train_end);
    let test = pick(spec.test_start, spec.test_end);
    if train.is_empty() {
        return Err(Error::Config(format!(
            "no bars between {} and {} for the training partition",
            spec.train_start, spec.train_end
        )));
    }
    if test.is_empty() {
        return Err(Error::Config(format!(
            "no bars between {} and {} for the test partition",
            spec.test_start, spec.test_end
        )));
    }
    Ok((
        PriceSeries::new(series.ticker(), train)?,
        PriceSeries::new(series.ticker(), test)?,
    ))
}
