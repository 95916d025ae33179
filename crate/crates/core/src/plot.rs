//! Standalone SVG rendering for waterfall explanations and OHLC charts.
//!
//! Rendering is a pure function of its spec. All geometry is printed with
//! three decimals so output is byte-stable.

use std::fmt::Write as _;

use chrono::NaiveDate;

use crate::error::{Error, Result};
use crate::explainer::CondensedExplanation;
use crate::market_data::{OhlcvBar, DATE_FORMAT};
use crate::trading_env::Action;

pub const DEFAULT_WIDTH: f64 = 800.0;
pub const DEFAULT_HEIGHT: f64 = 600.0;

pub const BUY_COLOR: &str = "#ff0051";
pub const SELL_COLOR: &str = "#008bfb";
pub const REST_COLOR: &str = "#999999";
const UP_COLOR: &str = "#2e7d32";
const DOWN_COLOR: &str = "#212121";
const FONT: &str = "font-family=\"sans-serif\"";

fn action_color(a: Action) -> &'static str {
    match a {
        Action::Buy => BUY_COLOR,
        Action::Sell => SELL_COLOR,
    }
}

/// Fixed three-decimal coordinate, never printed as `-0.000`.
fn n(v: f64) -> String {
    let s = format!("{v:.3}");
    if s == "-0.000" {
        "0.000".into()
    } else {
        s
    }
}

fn value_label(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

fn signed_label(v: f64) -> String {
    let s = value_label(v);
    if s.starts_with('-') {
        s
    } else {
        format!("+{s}")
    }
}

fn esc(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(c),
        }
    }
    out
}

fn header(out: &mut String, width: f64, height: f64) {
    let _ = writeln!(out, "<?xml version=\"1.0\" encoding=\"UTF-8\"?>");
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">",
        w = n(width),
        h = n(height)
    );
}

/// Maps `[lo, hi]` onto `[a, b]`, widening a degenerate interval.
#[derive(Clone, Copy)]
struct Scale {
    lo: f64,
    hi: f64,
    a: f64,
    b: f64,
}

impl Scale {
    fn padded(lo: f64, hi: f64, a: f64, b: f64) -> Self {
        let (lo, hi) = if hi > lo {
            let pad = 0.05 * (hi - lo);
            (lo - pad, hi + pad)
        } else {
            (lo - 1.0, hi + 1.0)
        };
        Scale { lo, hi, a, b }
    }

    fn map(&self, v: f64) -> f64 {
        self.a + (v - self.lo) / (self.hi - self.lo) * (self.b - self.a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaterfallSpec {
    pub explanation: CondensedExplanation,
    pub width: f64,
    pub height: f64,
}

impl WaterfallSpec {
    pub fn new(explanation: CondensedExplanation) -> Self {
        WaterfallSpec {
            explanation,
            width: DEFAULT_WIDTH,
            height: DEFAULT_HEIGHT,
        }
    }
}

/// One drawn waterfall row, top to bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct WaterfallRow {
    pub label: String,
    pub color: &'static str,
    pub phi: f64,
    /// Running total before and after this bar.
    pub start: f64,
    pub end: f64,
}

/// Row geometry in value space: the remainder sits at the bottom and the
/// running total climbs from the base value to the final prediction at the top.
pub fn waterfall_rows(e: &CondensedExplanation) -> Vec<WaterfallRow> {
    let mut rows = Vec::with_capacity(e.top.len() + 1);
    let mut acc = e.base_value;
    if e.remainder.count > 0 {
        rows.push(WaterfallRow {
            label: format!("{} other features", e.remainder.count),
            color: REST_COLOR,
            phi: e.remainder.phi,
            start: acc,
            end: acc + e.remainder.phi,
        });
        acc += e.remainder.phi;
    }
    for d in e.top.iter().rev() {
        rows.push(WaterfallRow {
            label: format!(
                "Feature {} = {} ({})",
                d.feature_index,
                d.date.format(DATE_FORMAT),
                d.action.name()
            ),
            color: action_color(d.action),
            phi: d.phi,
            start: acc,
            end: acc + d.phi,
        });
        acc += d.phi;
    }
    rows.reverse();
    rows
}

pub fn render_waterfall(spec: &WaterfallSpec) -> Result<String> {
    let e = &spec.explanation;
    if e.top.is_empty() && e.remainder.count == 0 {
        return Err(Error::DegeneratePlot("waterfall has no entries".into()));
    }
    if !(spec.width > 0.0 && spec.height > 0.0) {
        return Err(Error::Usage(format!(
            "invalid canvas {}x{}",
            spec.width, spec.height
        )));
    }
    let rows = waterfall_rows(e);
    let total = rows.first().map_or(e.base_value, |r| r.end);
    let tol = 1e-9 * e.explained_value.abs().max(1.0);
    if (total - e.explained_value).abs() > tol {
        return Err(Error::Numeric(format!(
            "waterfall ends at {total} but the prediction is {}",
            e.explained_value
        )));
    }

    let (left, right, top, bottom) = (300.0, 70.0, 60.0, 70.0);
    let lo = rows
        .iter()
        .flat_map(|r| [r.start, r.end])
        .fold(f64::INFINITY, f64::min);
    let hi = rows
        .iter()
        .flat_map(|r| [r.start, r.end])
        .fold(f64::NEG_INFINITY, f64::max);
    let xs = Scale::padded(lo, hi, left, spec.width - right);
    let row_h = (spec.height - top - bottom) / rows.len() as f64;
    let bar_h = 0.7 * row_h;

    let mut out = String::new();
    header(&mut out, spec.width, spec.height);
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" {FONT} font-size=\"16\" text-anchor=\"middle\">{} {}: {} ({})</text>",
        n(spec.width / 2.0),
        n(top / 2.0),
        esc(&e.ticker),
        e.instance_date.format(DATE_FORMAT),
        e.explained_action.name(),
        e.label.name()
    );

    let fx = xs.map(total);
    let ex = xs.map(e.base_value);
    let _ = writeln!(
        out,
        "<line class=\"final\" x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{}\" stroke=\"#333333\" stroke-dasharray=\"4,3\"/>",
        n(top - 8.0),
        n(top + row_h),
        x = n(fx)
    );
    let _ = writeln!(
        out,
        "<text class=\"final\" x=\"{}\" y=\"{}\" {FONT} font-size=\"12\" text-anchor=\"middle\">f(x) = {}</text>",
        n(fx),
        n(top - 12.0),
        value_label(e.explained_value)
    );
    let base_y = spec.height - bottom;
    let _ = writeln!(
        out,
        "<line class=\"base\" x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{}\" stroke=\"#333333\" stroke-dasharray=\"4,3\"/>",
        n(base_y - row_h),
        n(base_y + 8.0),
        x = n(ex)
    );
    let _ = writeln!(
        out,
        "<text class=\"base\" x=\"{}\" y=\"{}\" {FONT} font-size=\"12\" text-anchor=\"middle\">E(f(x)) = {}</text>",
        n(ex),
        n(base_y + 24.0),
        value_label(e.base_value)
    );

    for (i, r) in rows.iter().enumerate() {
        let y = top + i as f64 * row_h + (row_h - bar_h) / 2.0;
        let (x0, x1) = (xs.map(r.start), xs.map(r.end));
        let kind = match r.color {
            BUY_COLOR => "buy",
            SELL_COLOR => "sell",
            _ => "rest",
        };
        let _ = writeln!(
            out,
            "<rect class=\"bar {kind}\" x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"/>",
            n(x0.min(x1)),
            n(y),
            n((x1 - x0).abs()),
            n(bar_h),
            r.color
        );
        let mid = y + bar_h / 2.0 + 4.0;
        let _ = writeln!(
            out,
            "<text class=\"feature\" x=\"{}\" y=\"{}\" {FONT} font-size=\"12\" text-anchor=\"end\">{}</text>",
            n(left - 10.0),
            n(mid),
            esc(&r.label)
        );
        let (vx, anchor) = if r.phi < 0.0 {
            (x0.min(x1) - 4.0, "end")
        } else {
            (x0.max(x1) + 4.0, "start")
        };
        let _ = writeln!(
            out,
            "<text class=\"phi\" x=\"{}\" y=\"{}\" {FONT} font-size=\"11\" text-anchor=\"{anchor}\" fill=\"{}\">{}</text>",
            n(vx),
            n(mid),
            r.color,
            signed_label(r.phi)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OhlcPlotSpec {
    pub ticker: String,
    pub bars: Vec<OhlcvBar>,
    /// Executed actions; every date must be one of the bars.
    pub actions: Vec<(NaiveDate, Action)>,
    pub width: f64,
    pub height: f64,
}

impl OhlcPlotSpec {
    pub fn new(
        ticker: impl Into<String>,
        bars: Vec<OhlcvBar>,
        actions: Vec<(NaiveDate, Action)>,
    ) -> Self {
        OhlcPlotSpec {
            ticker: ticker.into(),
            bars,
            actions,
            width: DEFAULT_WIDTH,
            height: DEFAULT_HEIGHT,
        }
    }
}

const MAX_DATE_TICKS: usize = 8;
const PRICE_TICKS: usize = 5;

pub fn render_ohlc(spec: &OhlcPlotSpec) -> Result<String> {
    let (first, last) = match (spec.bars.first(), spec.bars.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::Usage("OHLC plot needs at least one bar".into())),
    };
    if !(spec.width > 0.0 && spec.height > 0.0) {
        return Err(Error::Usage(format!(
            "invalid canvas {}x{}",
            spec.width, spec.height
        )));
    }
    let mut marker_slots = Vec::with_capacity(spec.actions.len());
    for (date, action) in &spec.actions {
        let i = spec
            .bars
            .binary_search_by_key(date, |b| b.date)
            .map_err(|_| {
                Error::Usage(format!("action on {date} has no bar in the plotted range"))
            })?;
        marker_slots.push((i, *action));
    }

    let (left, right, top, bottom) = (70.0, 20.0, 50.0, 60.0);
    let lo = spec
        .bars
        .iter()
        .map(|b| b.low)
        .fold(f64::INFINITY, f64::min);
    let hi = spec
        .bars
        .iter()
        .map(|b| b.high)
        .fold(f64::NEG_INFINITY, f64::max);
    // markers need headroom above and below the wicks
    let ys = Scale::padded(lo, hi, spec.height - bottom - 16.0, top + 16.0);
    let slot = (spec.width - left - right) / spec.bars.len() as f64;
    let cx = |i: usize| left + slot * (i as f64 + 0.5);
    let body_w = 0.6 * slot;
    let tri = (0.4 * slot).clamp(2.0, 7.0);

    let mut out = String::new();
    header(&mut out, spec.width, spec.height);
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" {FONT} font-size=\"16\" text-anchor=\"middle\">{} {} to {}</text>",
        n(spec.width / 2.0),
        n(top / 2.0),
        esc(&spec.ticker),
        first.date.format(DATE_FORMAT),
        last.date.format(DATE_FORMAT)
    );
    let axis_y = spec.height - bottom;
    let _ = writeln!(
        out,
        "<path class=\"axis\" d=\"M{l} {t} L{l} {b} L{r} {b}\" fill=\"none\" stroke=\"#333333\"/>",
        l = n(left),
        t = n(top),
        b = n(axis_y),
        r = n(spec.width - right)
    );
    for k in 0..PRICE_TICKS {
        let v = ys.lo + (ys.hi - ys.lo) * k as f64 / (PRICE_TICKS - 1) as f64;
        let _ = writeln!(
            out,
            "<text class=\"tick price\" x=\"{}\" y=\"{}\" {FONT} font-size=\"10\" text-anchor=\"end\">{}</text>",
            n(left - 6.0),
            n(ys.map(v) + 3.0),
            value_label(v)
        );
    }
    let step = spec.bars.len().div_ceil(MAX_DATE_TICKS);
    for (i, b) in spec.bars.iter().enumerate().step_by(step) {
        let _ = writeln!(
            out,
            "<text class=\"tick date\" x=\"{}\" y=\"{}\" {FONT} font-size=\"10\" text-anchor=\"middle\">{}</text>",
            n(cx(i)),
            n(axis_y + 16.0),
            b.date.format(DATE_FORMAT)
        );
    }

    for (i, b) in spec.bars.iter().enumerate() {
        let x = cx(i);
        let color = if b.close >= b.open {
            UP_COLOR
        } else {
            DOWN_COLOR
        };
        let _ = writeln!(
            out,
            "<line class=\"wick\" x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{}\" stroke=\"{color}\"/>",
            n(ys.map(b.high)),
            n(ys.map(b.low)),
            x = n(x)
        );
        if b.close == b.open {
            let _ = writeln!(
                out,
                "<line class=\"body doji\" x1=\"{}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
                n(x - body_w / 2.0),
                n(x + body_w / 2.0),
                y = n(ys.map(b.close))
            );
        } else {
            let (y0, y1) = (ys.map(b.open), ys.map(b.close));
            let kind = if b.close > b.open { "up" } else { "down" };
            let _ = writeln!(
                out,
                "<rect class=\"body {kind}\" x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{color}\"/>",
                n(x - body_w / 2.0),
                n(y0.min(y1)),
                n(body_w),
                n((y1 - y0).abs())
            );
        }
    }

    for (i, action) in marker_slots {
        let b = &spec.bars[i];
        let x = cx(i);
        let points = match action {
            // upward triangle under the low
            Action::Buy => {
                let y = ys.map(b.low) + 4.0;
                format!(
                    "{},{} {},{} {},{}",
                    n(x),
                    n(y),
                    n(x - tri),
                    n(y + 1.5 * tri),
                    n(x + tri),
                    n(y + 1.5 * tri)
                )
            }
            // downward triangle over the high
            Action::Sell => {
                let y = ys.map(b.high) - 4.0;
                format!(
                    "{},{} {},{} {},{}",
                    n(x),
                    n(y),
                    n(x - tri),
                    n(y - 1.5 * tri),
                    n(x + tri),
                    n(y - 1.5 * tri)
                )
            }
        };
        let _ = writeln!(
            out,
            "<polygon class=\"marker {}\" points=\"{points}\" fill=\"{}\"/>",
            action.name(),
            action_color(action)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}
