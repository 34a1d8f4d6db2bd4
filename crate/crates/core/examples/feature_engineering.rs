//! Computes the thirteen candidate features for one cross-section and prints
//! their coverage and medians.
//!
//! Run with `cargo run --release --example feature_engineering`.

use chrono::NaiveDate;
use midcap_neutral::features::{cross_section_features, FEATURE_NAMES};
use midcap_neutral::stats::median;
use midcap_neutral::synth::{generate, SynthParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ingested = generate(&SynthParams::default())
        .raw_inputs()?
        .build(2e9, 10e9, None)?;
    let t = NaiveDate::from_ymd_opt(2021, 3, 1).expect("valid date");
    let rows = cross_section_features(&ingested.midcap.as_of(t), t);
    println!("{} securities on {t}", rows.len());
    println!("{:<20} {:>8} {:>14}", "feature", "present", "median");
    for name in FEATURE_NAMES {
        let present: Vec<f64> = rows.iter().filter_map(|r| r.get(name)).collect();
        println!(
            "{:<20} {:>8} {:>14.4}",
            name,
            present.len(),
            median(&present).unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
