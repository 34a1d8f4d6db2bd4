//! Report artifacts: per-phase CSVs, SVG charts and a plain-text summary.
//!
//! The SVG writers emit static, self-contained documents. Long and short
//! weight bars use different fills; the cumulative chart overlays the
//! portfolio on the benchmark when one is available.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;

use crate::backtest::{BacktestPhaseResult, BacktestReport, PermutationResult};
use crate::metrics;
use crate::optimizer::PortfolioWeights;

pub const LONG_COLOR: &str = "#1f5fbf";
pub const SHORT_COLOR: &str = "#c8102e";
const PORTFOLIO_COLOR: &str = "#1f5fbf";
const BENCHMARK_COLOR: &str = "#7a7a7a";

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
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

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    s
}

/// Padded value range that always contains zero and has positive width.
fn value_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = values
        .filter(|v| v.is_finite())
        .fold((0.0f64, 0.0f64), |(a, b), v| (a.min(v), b.max(v)));
    if hi - lo < 1e-12 {
        lo -= 0.01;
        hi += 0.01;
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

struct Frame {
    lo: f64,
    hi: f64,
}

impl Frame {
    fn y(&self, v: f64) -> f64 {
        let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
        MARGIN_TOP + plot_h * (self.hi - v) / (self.hi - self.lo)
    }

    fn x(&self, i: usize, n: usize) -> f64 {
        let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        if n <= 1 {
            MARGIN_LEFT + plot_w / 2.0
        } else {
            MARGIN_LEFT + plot_w * i as f64 / (n - 1) as f64
        }
    }

    /// Axes, zero line and five y ticks formatted as percentages.
    fn axes(&self, s: &mut String) {
        let x0 = MARGIN_LEFT;
        let x1 = WIDTH - MARGIN_RIGHT;
        let _ = writeln!(s, r#"<g stroke="black" stroke-width="1">"#);
        let _ = writeln!(
            s,
            r#"<line x1="{x0}" y1="{MARGIN_TOP}" x2="{x0}" y2="{}"/>"#,
            HEIGHT - MARGIN_BOTTOM
        );
        let _ = writeln!(
            s,
            r#"<line x1="{x0}" y1="{}" x2="{x1}" y2="{}"/>"#,
            HEIGHT - MARGIN_BOTTOM,
            HEIGHT - MARGIN_BOTTOM
        );
        let _ = writeln!(s, "</g>");
        let zero = self.y(0.0);
        let _ = writeln!(
            s,
            r##"<line x1="{x0}" y1="{zero:.2}" x2="{x1}" y2="{zero:.2}" stroke="#999999" stroke-dasharray="4 3"/>"##
        );
        for k in 0..=4 {
            let v = self.lo + (self.hi - self.lo) * k as f64 / 4.0;
            let y = self.y(v);
            let _ = writeln!(
                s,
                r#"<line x1="{}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="black"/>"#,
                x0 - 4.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{:.2}" text-anchor="end">{:.1}%</text>"#,
                x0 - 7.0,
                y + 4.0,
                100.0 * v
            );
        }
    }
}

fn polyline(s: &mut String, frame: &Frame, values: &[f64], color: &str) {
    let pts: Vec<String> = values
        .iter()
        .enumerate()
        .map(|(i, v)| format!("{:.2},{:.2}", frame.x(i, values.len()), frame.y(*v)))
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
        pts.join(" ")
    );
}

fn legend(s: &mut String, entries: &[(&str, &str)]) {
    for (i, (label, color)) in entries.iter().enumerate() {
        let x = MARGIN_LEFT + 10.0 + 150.0 * i as f64;
        let y = MARGIN_TOP + 8.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="14" height="10" fill="{color}"/>"#,
            y - 9.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{y}">{}</text>"#,
            x + 20.0,
            escape(label)
        );
    }
}

fn date_labels(s: &mut String, frame: &Frame, dates: &[NaiveDate]) {
    let n = dates.len();
    if n == 0 {
        return;
    }
    let step = n.div_ceil(6).max(1);
    let mut idx: Vec<usize> = (0..n).step_by(step).collect();
    if idx.last() != Some(&(n - 1)) {
        idx.push(n - 1);
    }
    for i in idx {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            frame.x(i, n),
            HEIGHT - MARGIN_BOTTOM + 18.0,
            dates[i].format("%Y-%m")
        );
    }
}

/// Cumulative return of the portfolio, overlaid on the benchmark over their
/// common months when a comparison exists.
pub fn cumulative_svg(result: &BacktestPhaseResult) -> String {
    let (dates, port, bench): (Vec<NaiveDate>, Vec<f64>, Option<Vec<f64>>) = match &result.benchmark
    {
        Some(c) => (
            c.dates.clone(),
            c.portfolio_cumulative.clone(),
            Some(c.benchmark_cumulative.clone()),
        ),
        None => {
            let r: Vec<f64> = result.monthly_returns.values().copied().collect();
            (
                result.monthly_returns.keys().copied().collect(),
                metrics::cumulative_returns(&r),
                None,
            )
        }
    };
    let frame = {
        let (lo, hi) = value_range(port.iter().chain(bench.iter().flatten()).copied());
        Frame { lo, hi }
    };
    let title = format!(
        "Cumulative return, {} phase ({} to {})",
        result.phase.name,
        result.phase.eval_start.format("%Y-%m"),
        result.phase.eval_end.format("%Y-%m")
    );
    let mut s = svg_open(&title);
    frame.axes(&mut s);
    date_labels(&mut s, &frame, &dates);
    let mut entries = vec![("portfolio", PORTFOLIO_COLOR)];
    if let Some(b) = &bench {
        polyline(&mut s, &frame, b, BENCHMARK_COLOR);
        entries.push(("benchmark", BENCHMARK_COLOR));
    }
    polyline(&mut s, &frame, &port, PORTFOLIO_COLOR);
    legend(&mut s, &entries);
    s.push_str("</svg>\n");
    s
}

/// One bar per security, sorted by weight, longs and shorts in distinct
/// colors.
pub fn weights_svg(weights: &PortfolioWeights) -> String {
    let mut pairs: Vec<(i64, f64)> = weights
        .ids
        .iter()
        .copied()
        .zip(weights.w.iter().copied())
        .collect();
    pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let frame = {
        let (lo, hi) = value_range(pairs.iter().map(|p| p.1));
        Frame { lo, hi }
    };
    let title = format!(
        "Portfolio weights at {} ({} names)",
        weights.date,
        pairs.len()
    );
    let mut s = svg_open(&title);
    frame.axes(&mut s);
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let bar_w = plot_w / pairs.len().max(1) as f64;
    let zero = frame.y(0.0);
    for (i, (id, w)) in pairs.iter().enumerate() {
        let y = frame.y(*w);
        let (top, h) = if *w >= 0.0 {
            (y, zero - y)
        } else {
            (zero, y - zero)
        };
        let (color, side) = if *w >= 0.0 {
            (LONG_COLOR, "long")
        } else {
            (SHORT_COLOR, "short")
        };
        let _ = writeln!(
            s,
            r#"<rect class="{side}" x="{:.3}" y="{top:.3}" width="{:.3}" height="{:.3}" fill="{color}"><title>{id}: {w:.6}</title></rect>"#,
            MARGIN_LEFT + bar_w * i as f64,
            bar_w.max(0.2),
            h.max(0.0)
        );
    }
    legend(&mut s, &[("long", LONG_COLOR), ("short", SHORT_COLOR)]);
    s.push_str("</svg>\n");
    s
}

/// Monthly returns with benchmark and cumulative columns.
pub fn write_returns_csv<W: Write>(result: &BacktestPhaseResult, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "date",
        "portfolio_return",
        "portfolio_cumulative",
        "benchmark_return",
    ])?;
    let series: Vec<f64> = result.monthly_returns.values().copied().collect();
    let cumulative = metrics::cumulative_returns(&series);
    let bench = result.benchmark.as_ref();
    for ((date, r), c) in result.monthly_returns.iter().zip(&cumulative) {
        let b = bench
            .and_then(|b| {
                b.dates
                    .iter()
                    .position(|d| d == date)
                    .map(|i| b.benchmark[i].to_string())
            })
            .unwrap_or_default();
        w.write_record([date.to_string(), r.to_string(), c.to_string(), b])?;
    }
    w.flush()?;
    Ok(())
}

/// Long-format weight history: one row per rebalance date and security.
pub fn write_weights_csv<W: Write>(result: &BacktestPhaseResult, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["date", "permno", "weight"])?;
    for (date, pw) in &result.weights_history {
        for (id, x) in pw.ids.iter().zip(&pw.w) {
            w.write_record([date.to_string(), id.to_string(), x.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn fmt_pct(x: f64) -> String {
    format!("{:+.2}%", 100.0 * x)
}

/// Human-readable digest of a report and, optionally, a permutation test.
pub fn summary_text(report: &BacktestReport, permutation: Option<&PermutationResult>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Mid-cap dollar-neutral backtest");
    if let (Some(a), Some(b)) = (report.panel_first_date, report.panel_last_date) {
        let _ = writeln!(s, "panel: {a} to {b}");
    }
    let _ = writeln!(
        s,
        "mu model: {}, risk aversion {}, gross target {}",
        report.settings.mu_model,
        report.settings.optimizer.risk_aversion,
        report.settings.optimizer.gross_target
    );
    for p in &report.phases {
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "[{}] fit {}..{}, eval {}..{}{}",
            p.phase.name,
            p.phase.fit_start,
            p.phase.fit_end,
            p.phase.eval_start,
            p.phase.eval_end,
            if p.in_sample { " (in-sample)" } else { "" }
        );
        let _ = writeln!(
            s,
            "  months held: {}, gaps: {}",
            p.monthly_returns.len(),
            p.gaps.len()
        );
        let _ = writeln!(
            s,
            "  Sharpe: {:.3} annualized, {:.3} monthly",
            p.sharpe_annualized, p.sharpe_monthly
        );
        let _ = writeln!(
            s,
            "  mean monthly {}, std {}, cumulative {}",
            fmt_pct(p.mean_monthly_return),
            fmt_pct(p.std_monthly_return),
            fmt_pct(p.cumulative_return)
        );
        let _ = writeln!(s, "  turnover: {:.3} per rebalance", p.turnover);
        match (&p.benchmark, &p.benchmark_notice) {
            (Some(b), _) => {
                let _ = writeln!(
                    s,
                    "  benchmark cumulative {} over {} months",
                    fmt_pct(b.benchmark_cumulative.last().copied().unwrap_or(0.0)),
                    b.dates.len()
                );
            }
            (None, Some(n)) => {
                let _ = writeln!(s, "  {n}");
            }
            (None, None) => {}
        }
        let _ = writeln!(s, "  features kept: {}", p.surviving_features.join(", "));
        if !p.delist_log.is_empty() {
            let _ = writeln!(
                s,
                "  positions without a realized return: {}",
                p.delist_log.len()
            );
        }
    }
    if let Some(t) = permutation {
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "permutation test ({} phase, {} draws, seed {}): observed {:.3}, null 2.5%/97.5% {:.3}/{:.3}, p = {:.4}",
            t.phase, t.permutations, t.seed, t.observed_sharpe, t.quantile_025, t.quantile_975, t.p_value
        );
    }
    s
}

fn write_file(
    dir: &Path,
    name: String,
    bytes: Vec<u8>,
    files: &mut Vec<PathBuf>,
) -> std::io::Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, bytes)?;
    files.push(path);
    Ok(())
}

/// Writes `<phase>_returns.csv` and `<phase>_weights.csv` for every phase.
pub fn write_phase_csvs(report: &BacktestReport, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for p in &report.phases {
        let mut buf = Vec::new();
        write_returns_csv(p, &mut buf).map_err(std::io::Error::other)?;
        write_file(
            dir,
            format!("{}_returns.csv", p.phase.name),
            buf,
            &mut files,
        )?;
        let mut buf = Vec::new();
        write_weights_csv(p, &mut buf).map_err(std::io::Error::other)?;
        write_file(
            dir,
            format!("{}_weights.csv", p.phase.name),
            buf,
            &mut files,
        )?;
    }
    Ok(files)
}

/// Writes the cumulative and weight charts of every phase plus `summary.txt`.
/// The weight chart shows the last rebalance of the phase.
pub fn write_charts(
    report: &BacktestReport,
    permutation: Option<&PermutationResult>,
    dir: &Path,
) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for p in &report.phases {
        let name = p.phase.name;
        write_file(
            dir,
            format!("{name}_cumulative.svg"),
            cumulative_svg(p).into_bytes(),
            &mut files,
        )?;
        if let Some(last) = p.weights_history.values().next_back() {
            write_file(
                dir,
                format!("{name}_weights.svg"),
                weights_svg(last).into_bytes(),
                &mut files,
            )?;
        }
    }
    write_file(
        dir,
        "summary.txt".into(),
        summary_text(report, permutation).into_bytes(),
        &mut files,
    )?;
    Ok(files)
}
