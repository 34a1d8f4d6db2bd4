//! Standardizes one cross-section, then fits the VIF and correlation pruning
//! on a pooled training window and prints the resulting report.
//!
//! Run with `cargo run --release --example preprocess_pipeline`.

use chrono::NaiveDate;
use midcap_neutral::backtest::{build_training_set, BacktestSettings};
use midcap_neutral::features::{cross_section_features, FEATURE_NAMES};
use midcap_neutral::preprocess::{fit_feature_selection, standardize_and_clip, RawCrossSection};
use midcap_neutral::synth::{generate, SynthParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ingested = generate(&SynthParams::default())
        .raw_inputs()?
        .build(2e9, 10e9, None)?;
    let settings = BacktestSettings::default();

    let t = NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date");
    let rows = cross_section_features(&ingested.midcap.as_of(t), t);
    let matrix = standardize_and_clip(
        &RawCrossSection::from_rows(t, &rows, &FEATURE_NAMES),
        settings.preprocess.z_clip,
    )?;
    let max_abs = matrix.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    println!(
        "{t}: {} x {} standardized, max |z| {max_abs:.3}, degenerate {:?}",
        matrix.values.nrows(),
        matrix.values.ncols(),
        matrix.dropped_features
    );

    let fit_start = NaiveDate::from_ymd_opt(2013, 1, 1).expect("valid date");
    let fit_end = NaiveDate::from_ymd_opt(2021, 12, 1).expect("valid date");
    let training = build_training_set(&ingested.panel, &settings, fit_start, fit_end);
    let (x, y) = training.pooled();
    let names: Vec<String> = FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
    let fit = fit_feature_selection(&x, &names, &y, &settings.preprocess)?;
    println!("pooled training rows: {}", y.len());
    println!("{}", serde_json::to_string_pretty(&fit.report)?);
    Ok(())
}
