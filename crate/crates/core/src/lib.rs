//! Deep Q-network trading agent on daily OHLCV data, with Shapley-value
//! explanations of each day's predicted reward.
//!
//! The pipeline runs ingest → train → backtest → explain → plot:
//!
//! * [`market_data`] parses Yahoo-style CSV exports, cleans them and splits by date.
//! * [`trading_env`] is the sell/buy trading MDP over a price series.
//! * [`neural_net`] is the Q-network with hand-written backprop and Adam.
//! * [`dqn`] trains it with replay memory and a frozen target network.
//! * [`shapley`] computes exact and sampled Shapley attributions.
//! * [`explainer`] attributes the agent's predicted reward to the days of its window.
//! * [`plot`] renders waterfall and OHLC charts as SVG.
//! * [`pipeline`] wires everything behind a flat config file for the CLI.

pub mod dqn;
pub mod error;
pub mod explainer;
pub mod market_data;
pub mod neural_net;
pub mod pipeline;
pub mod plot;
pub mod shapley;
pub mod trading_env;

pub use error::{Error, Result};
