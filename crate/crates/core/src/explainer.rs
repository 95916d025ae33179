//! Per-day explanations of the agent's predicted reward.
//!
//! For a day `t` the explained value is `Q(s_t, a_t)`, the Q-value of the
//! action the agent actually took. Players are the `window_size` days of the
//! observation window; masking a day swaps all four of its prices for the
//! background (mean training observation). Feature `i` is window day `i`,
//! oldest first, i.e. the `(window_size - i)`-th most recent day.

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dqn::{BacktestRecord, QFunction};
use crate::error::{Error, Result};
use crate::market_data::{PriceSeries, DATE_FORMAT};
use crate::shapley::{
    exact_shapley, make_masking_oracle, permutation_shapley, Method, MAX_EXACT_PLAYERS,
};
use crate::trading_env::{observation_at, Action, Normalizer, CHANNELS};

pub const DEFAULT_TOP_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExplainMethod {
    /// Full enumeration; only for windows of at most 20 days.
    ExactReduced,
    Permutation {
        samples: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionLabel {
    Profit,
    Loss,
    Neutral,
}

impl DecisionLabel {
    pub fn name(self) -> &'static str {
        match self {
            DecisionLabel::Profit => "profit",
            DecisionLabel::Loss => "loss",
            DecisionLabel::Neutral => "neutral",
        }
    }
}

/// Profit when the prediction beats the base value, loss when below it.
pub fn label_decision(explained_value: f64, base_value: f64) -> DecisionLabel {
    if explained_value > base_value {
        DecisionLabel::Profit
    } else if explained_value < base_value {
        DecisionLabel::Loss
    } else {
        DecisionLabel::Neutral
    }
}

/// Trader-facing sentence for an explained day.
pub fn guidance(ticker: &str, date: NaiveDate, action: Action, label: DecisionLabel) -> String {
    let verb = match action {
        Action::Buy => "buying",
        Action::Sell => "selling",
    };
    let date = date.format(DATE_FORMAT);
    match label {
        DecisionLabel::Profit => format!(
            "profit: f(x) > E(f(x)), the {} action is expected to result in profit for the current day; the trader should consider {verb} {ticker} on {date}",
            action.name()
        ),
        DecisionLabel::Loss => format!(
            "loss: f(x) < E(f(x)), the {} action is expected to result in loss for the current day; the trader should reconsider {verb} {ticker} on {date}",
            action.name()
        ),
        DecisionLabel::Neutral => format!(
            "neutral: f(x) = E(f(x)), no profit or loss is indicated for {verb} {ticker} on {date}"
        ),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DayAttribution {
    pub feature_index: usize,
    pub date: NaiveDate,
    /// What the agent did that day.
    pub action: Action,
    /// Reward the environment paid that day.
    pub reward: f64,
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub ticker: String,
    pub instance_index: usize,
    pub instance_date: NaiveDate,
    pub explained_action: Action,
    /// `Q(s_t, a_t)`
    pub explained_value: f64,
    /// Predictor at the background observation.
    pub base_value: f64,
    /// Mean of `Q(s, a)` over the backtest, for comparison with `base_value`.
    pub mean_prediction: f64,
    pub label: DecisionLabel,
    pub days: Vec<DayAttribution>,
    pub method: Method,
}

impl Explanation {
    pub fn phi_sum(&self) -> f64 {
        self.days.iter().map(|d| d.phi).sum()
    }

    pub fn guidance(&self) -> String {
        guidance(
            &self.ticker,
            self.instance_date,
            self.explained_action,
            self.label,
        )
    }

    /// Fails unless `base + Σ φ` reproduces the explained value within `tolerance`.
    pub fn check_additivity(&self, tolerance: f64) -> Result<()> {
        let gap = self.base_value + self.phi_sum() - self.explained_value;
        if gap.abs() <= tolerance {
            Ok(())
        } else {
            Err(Error::Numeric(format!(
                "explanation for {} does not add up: base {} + sum {} != {} (gap {gap:e})",
                self.instance_date,
                self.base_value,
                self.phi_sum(),
                self.explained_value
            )))
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let entries: Vec<_> = self
            .days
            .iter()
            .map(|d| {
                serde_json::json!({
                    "feature": d.feature_index,
                    "date": d.date.format(DATE_FORMAT).to_string(),
                    "action": d.action.index(),
                    "reward": d.reward,
                    "phi": d.phi,
                })
            })
            .collect();
        serde_json::json!({
            "ticker": self.ticker,
            "date": self.instance_date.format(DATE_FORMAT).to_string(),
            "action": self.explained_action.index(),
            "f": self.explained_value,
            "base": self.base_value,
            "mean_prediction": self.mean_prediction,
            "label": self.label.name(),
            "method": self.method.name(),
            "samples": self.method.samples(),
            "seed": self.method.seed(),
            "entries": entries,
        })
    }
}

/// Everything needed to explain days of one backtest.
pub struct ExplainContext<'a, Q: ?Sized> {
    pub predictor: &'a Q,
    /// The series the backtest ran on.
    pub series: &'a PriceSeries,
    pub normalizer: &'a Normalizer,
    pub background: &'a [f64],
    pub backtest: &'a BacktestRecord,
}

/// Per-coordinate mean of every full observation window in the training partition.
pub fn training_background(
    train: &PriceSeries,
    normalizer: &Normalizer,
    window_size: usize,
) -> Result<Vec<f64>> {
    if train.len() < window_size {
        return Err(Error::Config(format!(
            "training partition of {} bars is shorter than the window {window_size}",
            train.len()
        )));
    }
    let mut sum = vec![0.0; CHANNELS * window_size];
    let mut count = 0usize;
    for t in window_size..=train.len() {
        for (s, v) in sum
            .iter_mut()
            .zip(observation_at(train, normalizer, t, window_size)?)
        {
            *s += v;
        }
        count += 1;
    }
    sum.iter_mut().for_each(|s| *s /= count as f64);
    Ok(sum)
}

impl<Q: QFunction + Sync + ?Sized> ExplainContext<'_, Q> {
    pub fn window_size(&self) -> usize {
        self.backtest.window_size
    }

    /// First bar index whose whole window lies inside the backtest.
    pub fn earliest_index(&self) -> Option<usize> {
        let idx = self.backtest.first_index()? + self.window_size();
        self.backtest.at(idx).map(|_| idx)
    }

    fn mean_prediction(&self) -> f64 {
        let days = &self.backtest.days;
        days.iter()
            .map(|d| d.q_values[d.action.index()])
            .sum::<f64>()
            / days.len().max(1) as f64
    }

    fn insufficient_history(&self, t: usize) -> Error {
        match self.earliest_index() {
            Some(e) => Error::Usage(format!(
                "bar {t} lacks a full {}-day history of agent actions; earliest explainable date is {}",
                self.window_size(),
                self.series.bars()[e].date
            )),
            None => Error::Usage(format!(
                "backtest is too short to explain any day with a {}-day window",
                self.window_size()
            )),
        }
    }

    /// Explains the agent's prediction on bar `t`.
    pub fn explain_instance(&self, t: usize, method: ExplainMethod) -> Result<Explanation> {
        let w = self.window_size();
        let earliest = self
            .earliest_index()
            .ok_or_else(|| self.insufficient_history(t))?;
        let today = match self.backtest.at(t) {
            Some(day) if t >= earliest => *day,
            _ => return Err(self.insufficient_history(t)),
        };
        if w > MAX_EXACT_PLAYERS && method == ExplainMethod::ExactReduced {
            return Err(Error::Capacity(format!(
                "exact attribution is limited to windows of {MAX_EXACT_PLAYERS} days, this one has {w}; use permutation sampling"
            )));
        }
        let instance = observation_at(self.series, self.normalizer, t, w)?;
        if self.background.len() != instance.len() {
            return Err(Error::Dimension {
                expected: instance.len(),
                found: self.background.len(),
            });
        }
        let head = today.action.index();
        self.predictor.q_values(&instance)?;
        let predictor = |x: &[f64]| self.predictor.q_values(x).map_or(f64::NAN, |q| q[head]);
        let groups = (0..w)
            .map(|d| (d * CHANNELS..(d + 1) * CHANNELS).collect())
            .collect();
        let oracle = make_masking_oracle(predictor, instance, self.background.to_vec(), groups)?;
        let result = match method {
            ExplainMethod::ExactReduced => exact_shapley(&oracle)?,
            ExplainMethod::Permutation { samples, seed } => {
                permutation_shapley(&oracle, samples, seed)?
            }
        };
        if !result.base_value.is_finite() || result.phis.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric(format!("non-finite attribution on bar {t}")));
        }

        let days = result
            .phis
            .iter()
            .enumerate()
            .map(|(i, &phi)| {
                let idx = t - w + i;
                let rec = self
                    .backtest
                    .at(idx)
                    .ok_or_else(|| self.insufficient_history(t))?;
                Ok(DayAttribution {
                    feature_index: i,
                    date: rec.date,
                    action: rec.action,
                    reward: rec.reward,
                    phi,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Explanation {
            ticker: self.series.ticker().to_string(),
            instance_index: t,
            instance_date: today.date,
            explained_action: today.action,
            explained_value: result.explained_value,
            base_value: result.base_value,
            mean_prediction: self.mean_prediction(),
            label: label_decision(result.explained_value, result.base_value),
            days,
            method: result.method,
        })
    }

    /// Bar indices with dates in `[from, to]` that can be explained.
    pub fn eligible_indices(&self, from: NaiveDate, to: NaiveDate) -> Vec<usize> {
        let Some(earliest) = self.earliest_index() else {
            return Vec::new();
        };
        self.backtest
            .days
            .iter()
            .filter(|d| d.index >= earliest && d.date >= from && d.date <= to)
            .map(|d| d.index)
            .collect()
    }

    /// One explanation per eligible date, window advancing a day at a time.
    pub fn explain_range(
        &self,
        from: NaiveDate,
        to: NaiveDate,
        method: ExplainMethod,
    ) -> Result<Vec<Explanation>> {
        let indices = self.eligible_indices(from, to);
        if indices.is_empty() {
            let hint = self
                .earliest_index()
                .map(|e| {
                    format!(
                        "; earliest explainable date is {}",
                        self.series.bars()[e].date
                    )
                })
                .unwrap_or_default();
            return Err(Error::Usage(format!(
                "no explainable dates between {from} and {to}{hint}"
            )));
        }
        indices
            .into_par_iter()
            .map(|t| self.explain_instance(t, method))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergedRemainder {
    pub count: usize,
    pub phi: f64,
}

/// Top-k days by |φ| plus everything else merged into one entry.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensedExplanation {
    pub ticker: String,
    pub instance_date: NaiveDate,
    pub explained_action: Action,
    pub explained_value: f64,
    pub base_value: f64,
    pub label: DecisionLabel,
    pub top: Vec<DayAttribution>,
    pub remainder: MergedRemainder,
}

impl CondensedExplanation {
    pub fn phi_sum(&self) -> f64 {
        self.top.iter().map(|d| d.phi).sum::<f64>() + self.remainder.phi
    }
}

pub fn condense(explanation: &Explanation, k: usize) -> CondensedExplanation {
    let mut ranked = explanation.days.clone();
    ranked.sort_by(|a, b| {
        b.phi
            .abs()
            .total_cmp(&a.phi.abs())
            .then(a.feature_index.cmp(&b.feature_index))
    });
    let rest = ranked.split_off(k.min(ranked.len()));
    CondensedExplanation {
        ticker: explanation.ticker.clone(),
        instance_date: explanation.instance_date,
        explained_action: explanation.explained_action,
        explained_value: explanation.explained_value,
        base_value: explanation.base_value,
        label: explanation.label,
        top: ranked,
        remainder: MergedRemainder {
            count: rest.len(),
            phi: rest.iter().map(|d| d.phi).sum(),
        },
    }
}
