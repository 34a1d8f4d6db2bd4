//! Writes a synthetic data set to a temp directory, ingests it from disk and
//! shows what the point-in-time panel looks like at one cutoff.
//!
//! Run with `cargo run --release --example ingest_panel`.

use chrono::NaiveDate;
use midcap_neutral::panel::{ingest, DataPaths};
use midcap_neutral::synth::{generate, SynthParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("midcap_ingest_example");
    let files = generate(&SynthParams::default()).write_to(&dir)?;
    let paths = DataPaths {
        crsp: files.crsp,
        compustat: files.compustat,
        links: files.links,
        sentiment: files.sentiment,
        benchmark: Some(files.benchmark),
    };
    let ingested = ingest(&paths, 2e9, 10e9, None)?;
    println!("{}", serde_json::to_string_pretty(&ingested.report)?);

    let t = NaiveDate::from_ymd_opt(2018, 6, 1).expect("valid date");
    let view = ingested.midcap.as_of(t);
    let section: Vec<_> = view.cross_section(t).collect();
    println!(
        "as of {t}: {} mid-cap names, {} rows visible",
        section.len(),
        view.len()
    );
    let filled = view.fill_log().filter(|f| f.target_date == t).count();
    println!("cells carried forward on {t}: {filled}");
    for row in section.iter().take(5) {
        println!(
            "  permno {:>5}  cap {:>6.2}bn  ret {:>8}  sentiment {:?}",
            row.permno,
            row.market_cap / 1e9,
            row.ret.map_or("-".into(), |r| format!("{r:.4}")),
            row.avg_sentiment
        );
    }
    Ok(())
}
