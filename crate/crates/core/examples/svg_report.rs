//! Runs the three-phase protocol and writes CSVs, SVG charts and a text
//! summary into a directory (first argument, default `./midcap_report`).
//!
//! Run with `cargo run --release --example svg_report -- /tmp/report`.

use std::path::PathBuf;

use midcap_neutral::backtest::{run_protocol, BacktestSettings};
use midcap_neutral::report::{summary_text, write_charts, write_phase_csvs};
use midcap_neutral::synth::{generate, SynthParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("midcap_report"));
    std::fs::create_dir_all(&dir)?;
    let ingested = generate(&SynthParams::default())
        .raw_inputs()?
        .build(2e9, 10e9, None)?;
    let report = run_protocol(
        &ingested.panel,
        &BacktestSettings::default(),
        ingested.benchmark.as_ref(),
    )?;
    let mut written = write_phase_csvs(&report, &dir)?;
    written.extend(write_charts(&report, None, &dir)?);
    print!("{}", summary_text(&report, None));
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}
