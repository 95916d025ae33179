//! Two-action trading MDP over a daily price series.
//!
//! At bar `t` the agent sees the `window_size` bars before it (oldest first,
//! `[t - window_size, t)`) and trades at `close[t]`. Action 0 sells, action 1
//! buys. Profit is realized only when a long position is closed, as the
//! close-price difference since entry.

use std::fmt::Write as _;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::{PriceSeries, DATE_FORMAT};

pub const DEFAULT_WINDOW: usize = 30;
pub const CHANNELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Sell = 0,
    Buy = 1,
}

impl Action {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Action::Sell),
            1 => Ok(Action::Buy),
            _ => Err(Error::Usage(format!("action must be 0 or 1, got {i}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Sell => "sell",
            Action::Buy => "buy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Position {
    Short,
    Long,
}

impl Position {
    fn for_action(action: Action) -> Self {
        match action {
            Action::Sell => Position::Short,
            Action::Buy => Position::Long,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Position::Short => "short",
            Position::Long => "long",
        }
    }
}

/// Per-channel min-max scaling fitted on the training partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: [f64; CHANNELS],
    pub max: [f64; CHANNELS],
}

impl Normalizer {
    pub fn fit(series: &PriceSeries) -> Result<Self> {
        if series.is_empty() {
            return Err(Error::Config(
                "cannot fit normalization on an empty series".into(),
            ));
        }
        let mut min = [f64::INFINITY; CHANNELS];
        let mut max = [f64::NEG_INFINITY; CHANNELS];
        for bar in series.bars() {
            for (c, v) in bar.ohlc().into_iter().enumerate() {
                min[c] = min[c].min(v);
                max[c] = max[c].max(v);
            }
        }
        Ok(Self { min, max })
    }

    /// Constant channels map to 0.5.
    pub fn scale(&self, channel: usize, value: f64) -> f64 {
        let span = self.max[channel] - self.min[channel];
        if span > 0.0 {
            (value - self.min[channel]) / span
        } else {
            0.5
        }
    }

    pub fn is_finite(&self) -> bool {
        self.min.iter().chain(&self.max).all(|v| v.is_finite())
    }
}

/// Flattened `(open, high, low, close)` window, oldest bar first.
pub fn observation_at(
    series: &PriceSeries,
    normalizer: &Normalizer,
    t: usize,
    window_size: usize,
) -> Result<Vec<f64>> {
    if t < window_size || t > series.len() {
        return Err(Error::Usage(format!(
            "observation at bar {t} needs {window_size} earlier bars within a series of {}",
            series.len()
        )));
    }
    let mut obs = Vec::with_capacity(CHANNELS * window_size);
    for bar in &series.bars()[t - window_size..t] {
        for (c, v) in bar.ohlc().into_iter().enumerate() {
            obs.push(normalizer.scale(c, v));
        }
    }
    Ok(obs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub window_size: usize,
    pub start_index: usize,
    pub end_index: usize,
}

impl EnvConfig {
    /// Whole-series episode: starts at the first bar with a full window.
    pub fn full(window_size: usize, series_len: usize) -> Self {
        Self {
            window_size,
            start_index: window_size,
            end_index: series_len,
        }
    }

    pub fn validate(&self, series_len: usize) -> Result<()> {
        if self.window_size == 0 {
            return Err(Error::Config("window_size must be at least 1".into()));
        }
        if series_len < self.window_size + 1 {
            return Err(Error::Config(format!(
                "series of {series_len} bars is too short for a window of {} (need at least {})",
                self.window_size,
                self.window_size + 1
            )));
        }
        if self.start_index < self.window_size {
            return Err(Error::Config(format!(
                "start_index {} precedes the first full window at {}",
                self.start_index, self.window_size
            )));
        }
        if self.end_index > series_len || self.start_index >= self.end_index {
            return Err(Error::Config(format!(
                "episode range [{}, {}) invalid for a series of {series_len} bars",
                self.start_index, self.end_index
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        CHANNELS * self.window_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvState {
    pub t: usize,
    pub position: Position,
    pub last_trade_index: usize,
    pub cumulative_reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: EnvState,
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Immutable environment definition; states are passed in and out by value.
#[derive(Debug, Clone, Copy)]
pub struct TradingEnv<'a> {
    series: &'a PriceSeries,
    config: EnvConfig,
    normalizer: &'a Normalizer,
}

impl<'a> TradingEnv<'a> {
    pub fn new(
        series: &'a PriceSeries,
        config: EnvConfig,
        normalizer: &'a Normalizer,
    ) -> Result<Self> {
        config.validate(series.len())?;
        Ok(Self {
            series,
            config,
            normalizer,
        })
    }

    pub fn series(&self) -> &'a PriceSeries {
        self.series
    }

    pub fn config(&self) -> EnvConfig {
        self.config
    }

    pub fn observation(&self, t: usize) -> Result<Vec<f64>> {
        observation_at(self.series, self.normalizer, t, self.config.window_size)
    }

    pub fn reset(&self) -> Result<(EnvState, Vec<f64>)> {
        let t = self.config.start_index;
        let state = EnvState {
            t,
            position: Position::Short,
            last_trade_index: t,
            cumulative_reward: 0.0,
            done: false,
        };
        Ok((state, self.observation(t)?))
    }

    pub fn step(&self, state: &EnvState, action: Action) -> Result<Step> {
        if state.done {
            return Err(Error::Usage("step called on a finished episode".into()));
        }
        let t = state.t;
        let bars = self.series.bars();
        let mut next = *state;
        let target = Position::for_action(action);
        let mut reward = 0.0;
        if target != state.position {
            if state.position == Position::Long {
                reward = bars[t].close - bars[state.last_trade_index].close;
            }
            next.position = target;
            next.last_trade_index = t;
        }
        next.t = t + 1;
        next.done = next.t == self.config.end_index;
        next.cumulative_reward += reward;
        Ok(Step {
            observation: self.observation(next.t)?,
            state: next,
            reward,
            done: next.done,
        })
    }
}

/// One executed trading day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub date: NaiveDate,
    pub action: Action,
    pub position: Position,
    pub reward: f64,
    pub cumulative_reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub steps: Vec<StepRecord>,
    pub cumulative_reward: f64,
}

impl Rollout {
    pub fn actions(&self) -> Vec<Action> {
        self.steps.iter().map(|s| s.action).collect()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    /// Record for bar `index`, if it was stepped.
    pub fn at(&self, index: usize) -> Option<&StepRecord> {
        let first = self.steps.first()?.index;
        self.steps.get(index.checked_sub(first)?)
    }

    /// `date,action,position,reward,cumulative_reward`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("date,action,position,reward,cumulative_reward\n");
        for s in &self.steps {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                s.date.format(DATE_FORMAT),
                s.action.index(),
                s.position.name(),
                s.reward,
                s.cumulative_reward
            );
        }
        out
    }
}

/// Runs one full episode under `policy`.
pub fn run_policy<F>(env: &TradingEnv<'_>, mut policy: F) -> Result<Rollout>
where
    F: FnMut(&[f64]) -> Result<Action>,
{
    let (mut state, mut obs) = env.reset()?;
    let mut steps = Vec::with_capacity(env.config.end_index - env.config.start_index);
    while !state.done {
        let action = policy(&obs)?;
        let index = state.t;
        let step = env.step(&state, action)?;
        steps.push(StepRecord {
            index,
            date: env.series.bars()[index].date,
            action,
            position: step.state.position,
            reward: step.reward,
            cumulative_reward: step.state.cumulative_reward,
        });
        state = step.state;
        obs = step.observation;
    }
    Ok(Rollout {
        steps,
        cumulative_reward: state.cumulative_reward,
    })
}

/// Replays a fixed action script from the episode start.
pub fn replay(env: &TradingEnv<'_>, actions: &[Action]) -> Result<Rollout> {
    let mut it = actions.iter();
    run_policy(env, |_| {
        it.next()
            .copied()
            .ok_or_else(|| Error::Usage("action script shorter than the episode".into()))
    })
}
