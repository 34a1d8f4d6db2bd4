//! Three-phase walk-forward backtest on the default synthetic universe.
//!
//! Run with `cargo run --release --example walk_forward_backtest`.

use std::time::Instant;

use midcap_neutral::backtest::{run_protocol, BacktestSettings};
use midcap_neutral::synth::{generate, SynthParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let started = Instant::now();
    let data = generate(&SynthParams::default());
    let ingested = data.raw_inputs()?.build(2e9, 10e9, None)?;
    println!(
        "panel: {} rows, {} mid-cap rows, {} securities ({:.1}s)",
        ingested.report.panel_rows,
        ingested.report.midcap_rows,
        ingested.report.securities,
        started.elapsed().as_secs_f64()
    );

    let settings = BacktestSettings::default();
    let report = run_protocol(&ingested.panel, &settings, ingested.benchmark.as_ref())?;
    for phase in &report.phases {
        let weights: Vec<f64> = phase
            .weights_history
            .values()
            .flat_map(|w| w.w.iter().copied())
            .collect();
        let small = weights.iter().filter(|w| w.abs() <= 0.01).count();
        println!(
            "{:<8} fit {}..{} eval {}..{}  months {:>3}  gaps {:>2}  sharpe {:>6.3} (monthly {:.3})  cum {:>7.3}  turnover {:.3}  |w|<=1%: {:.1}%",
            phase.phase.name.to_string(),
            phase.phase.fit_start,
            phase.phase.fit_end,
            phase.phase.eval_start,
            phase.phase.eval_end,
            phase.monthly_returns.len(),
            phase.gaps.len(),
            phase.sharpe_annualized,
            phase.sharpe_monthly,
            phase.cumulative_return,
            phase.turnover,
            100.0 * small as f64 / weights.len().max(1) as f64,
        );
        println!(
            "         features kept: {}",
            phase.surviving_features.join(", ")
        );
    }
    println!("total {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}
