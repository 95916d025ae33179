//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use chrono::NaiveDate;
use xrltrade::market_data::{OhlcvBar, PriceSeries};

pub fn day(s: &str) -> NaiveDate {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
}

/// Closes alternating 100, 101, 100, ...; each bar opens at the previous close.
pub fn alternating_series(n: usize) -> PriceSeries {
    let start = day("2018-01-01");
    let bars = (0..n)
        .map(|i| {
            let close: f64 = if i % 2 == 0 { 100.0 } else { 101.0 };
            let open = if i % 2 == 0 { 101.0 } else { 100.0 };
            OhlcvBar {
                date: start + chrono::Days::new(i as u64),
                open,
                high: close.max(open),
                low: close.min(open),
                close,
                volume: 1000,
            }
        })
        .collect();
    PriceSeries::new("ALT", bars).unwrap()
}

/// Best achievable realized reward when trading at `closes[from..]`, starting
/// flat. Dynamic program over (flat, long-with-entry-cost) states.
pub fn optimal_reward(closes: &[f64], from: usize) -> f64 {
    let mut flat = 0.0f64;
    let mut long = f64::NEG_INFINITY; // realized so far minus entry price
    for &c in &closes[from..] {
        let next_flat = flat.max(long + c);
        let next_long = long.max(flat - c);
        flat = next_flat;
        long = next_long;
    }
    flat
}

/// Exhaustive search over every sell/buy script, for short horizons.
pub fn brute_force_reward(closes: &[f64], from: usize) -> f64 {
    let n = closes.len() - from;
    assert!(n <= 20);
    let mut best = f64::NEG_INFINITY;
    for mask in 0u32..(1 << n) {
        let mut long = false;
        let mut entry = 0.0;
        let mut total = 0.0;
        for k in 0..n {
            let buy = mask >> k & 1 == 1;
            let c = closes[from + k];
            if buy && !long {
                long = true;
                entry = c;
            } else if !buy && long {
                long = false;
                total += c - entry;
            }
        }
        best = best.max(total);
    }
    best
}
