mod common;

use common::{default_inputs, default_synth, ymd};
use midcap_neutral::features::{self, FEATURE_NAMES};
use midcap_neutral::panel::{self, DataPaths};
use midcap_neutral::synth::{self, SynthParams};

#[test]
fn same_seed_writes_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    default_synth().write_to(a.path()).unwrap();
    synth::generate(&SynthParams::default())
        .write_to(b.path())
        .unwrap();
    for name in [
        "crsp.csv",
        "compustat.csv",
        "links.csv",
        "sentiment.csv",
        "benchmark.csv",
        "config.txt",
    ] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name} differs");
    }
}

#[test]
fn files_and_memory_give_the_same_panel() {
    let dir = tempfile::tempdir().unwrap();
    let files = default_synth().write_to(dir.path()).unwrap();
    let paths = DataPaths {
        crsp: files.crsp,
        compustat: files.compustat,
        links: files.links,
        sentiment: files.sentiment,
        benchmark: Some(files.benchmark),
    };
    let from_disk = panel::ingest(&paths, 2e9, 10e9, None).unwrap();
    let in_memory = default_inputs().build(2e9, 10e9, None).unwrap();
    let last = from_disk.panel.last_date().unwrap();
    assert_eq!(
        from_disk.panel.as_of(last).to_csv_string(),
        in_memory.panel.as_of(last).to_csv_string()
    );
    assert_eq!(from_disk.report, in_memory.report);
}

#[test]
fn ingest_exercises_filters_and_cleaning() {
    let ing = default_inputs().build(2e9, 10e9, None).unwrap();
    let r = &ing.report;
    assert_eq!(r.securities, 500);
    assert!(r.rows_filtered_out > 0 && r.midcap_rows > 0);
    assert_eq!(r.panel_rows, r.midcap_rows + r.rows_filtered_out);
    assert!(r.crsp_duplicates > 0);
    assert!(r.cells_filled > 0);
    assert_eq!(r.first_date, Some(ymd(2013, 1, 1)));
    assert_eq!(r.last_date, Some(ymd(2023, 12, 1)));
    assert!(ing
        .midcap
        .rows()
        .iter()
        .all(|row| (2e9..=10e9).contains(&row.market_cap)));
    assert!(ing.panel.rows().iter().any(|row| row.market_cap < 2e9));
    assert!(ing.panel.rows().iter().any(|row| row.market_cap > 10e9));
}

#[test]
fn merged_csv_has_forty_one_columns() {
    let ing = default_inputs().build(2e9, 10e9, None).unwrap();
    let mut buf = Vec::new();
    ing.midcap.write_csv(&mut buf).unwrap();
    let mut reader = csv::Reader::from_reader(buf.as_slice());
    assert_eq!(reader.headers().unwrap().len(), 41);
    for rec in reader.records().take(500) {
        assert_eq!(rec.unwrap().len(), 41);
    }
}

#[test]
fn feature_table_matches_ratio_definitions() {
    let ing = default_inputs().build(2e9, 10e9, None).unwrap();
    let view = ing.midcap.as_of(ymd(2020, 6, 1));
    let rows = features::cross_section_features(&view, ymd(2020, 6, 1));
    assert!(!rows.is_empty());
    for (f, row) in rows.iter().zip(view.cross_section(ymd(2020, 6, 1))) {
        assert_eq!(f.permno, row.permno);
        let get = |c: panel::Fundamental| row.fundamentals.get(c);
        if let (Some(gp), Some(revt)) = (get(panel::Fundamental::Gp), get(panel::Fundamental::Revt))
        {
            if revt != 0.0 {
                assert_eq!(f.gross_margin, Some(gp / revt));
            }
        }
        if let Some(eps) = get(panel::Fundamental::Epspx) {
            assert_eq!(f.ep_ratio, Some(eps / row.prc));
        }
    }
    let mut buf = Vec::new();
    features::write_features_csv(&rows, &mut buf).unwrap();
    let header = String::from_utf8(buf)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    assert_eq!(header, format!("permno,date,{}", FEATURE_NAMES.join(",")));
}
