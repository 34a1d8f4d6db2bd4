use std::path::Path;
use std::process::{Command, Output};

use quick_xml::events::Event;
use quick_xml::Reader;

fn midcap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_midcap"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Parses the whole document; returns element names in order.
fn parse_xml(text: &str) -> Vec<String> {
    let mut reader = Reader::from_str(text);
    let mut names = Vec::new();
    let mut depth = 0i32;
    loop {
        match reader.read_event().expect("well-formed XML") {
            Event::Start(e) => {
                depth += 1;
                names.push(String::from_utf8(e.name().as_ref().to_vec()).unwrap());
            }
            Event::Empty(e) => names.push(String::from_utf8(e.name().as_ref().to_vec()).unwrap()),
            Event::End(_) => depth -= 1,
            Event::Eof => break,
            _ => {}
        }
    }
    assert_eq!(depth, 0, "unbalanced tags");
    names
}

fn synth_fixture(dir: &Path) -> std::path::PathBuf {
    let out = midcap(&["synth", "--out", p(dir)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    dir.join("config.txt")
}

#[test]
fn backtest_then_report_writes_valid_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth_fixture(&tmp.path().join("data"));
    let run = tmp.path().join("run");

    let out = midcap(&["backtest", "--config", p(&cfg), "--out", p(&run)]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.join("report.json")).unwrap()).unwrap();
    let phases = report["phases"].as_array().unwrap();
    assert_eq!(phases.len(), 3);
    for (ph, name) in phases.iter().zip(["train", "validate", "test"]) {
        assert_eq!(ph["phase"]["name"], name);
        assert!(run.join(format!("{name}_returns.csv")).is_file());
        assert!(run.join(format!("{name}_weights.csv")).is_file());
    }

    let out = midcap(&["report", "--input", p(&run)]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("[test]"));
    for name in ["train", "validate", "test"] {
        for kind in ["cumulative", "weights"] {
            let path = run.join(format!("{name}_{kind}.svg"));
            let text = std::fs::read_to_string(&path).unwrap();
            let elements = parse_xml(&text);
            assert_eq!(elements.first().map(String::as_str), Some("svg"));
            if kind == "weights" {
                assert!(elements.iter().filter(|e| *e == "rect").count() > 100);
                assert!(text.contains(r#"class="long""#) && text.contains(r#"class="short""#));
                let fill = |class: &str| {
                    let at = text.find(&format!(r#"class="{class}""#)).unwrap();
                    let rest = &text[at..];
                    let f = rest.find("fill=\"").unwrap() + 6;
                    rest[f..f + 7].to_string()
                };
                assert_ne!(fill("long"), fill("short"));
            } else {
                assert!(
                    elements.iter().filter(|e| *e == "polyline").count() == 2,
                    "portfolio and benchmark lines"
                );
            }
        }
    }
    assert!(run.join("summary.txt").is_file());
}

#[test]
fn end_to_end_runs_are_byte_identical_and_config_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth_fixture(&tmp.path().join("data"));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(midcap(&["backtest", "--config", p(&cfg), "--out", p(&a)])
        .status
        .success());
    assert!(midcap(&["backtest", "--config", p(&cfg), "--out", p(&b)])
        .status
        .success());
    let ra = std::fs::read(a.join("report.json")).unwrap();
    assert_eq!(ra, std::fs::read(b.join("report.json")).unwrap());

    // The effective config written next to the report reproduces it.
    let c = tmp.path().join("c");
    assert!(midcap(&[
        "backtest",
        "--config",
        p(&a.join("config.txt")),
        "--out",
        p(&c)
    ])
    .status
    .success());
    assert_eq!(ra, std::fs::read(c.join("report.json")).unwrap());
}

#[test]
fn ingest_features_preprocess_emit_their_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth_fixture(&tmp.path().join("data"));
    let out = tmp.path().join("out");

    assert!(midcap(&["ingest", "--config", p(&cfg), "--out", p(&out)])
        .status
        .success());
    let panel = std::fs::read_to_string(out.join("panel.csv")).unwrap();
    assert_eq!(panel.lines().next().unwrap().split(',').count(), 41);
    let ingest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("ingest.json")).unwrap()).unwrap();
    assert!(ingest["rows_filtered_out"].as_u64().unwrap() > 0);

    assert!(midcap(&["features", "--config", p(&cfg), "--out", p(&out)])
        .status
        .success());
    let features = std::fs::read_to_string(out.join("features.csv")).unwrap();
    assert!(features.starts_with("permno,date,ep_ratio,"));
    assert_eq!(
        features.lines().count() as u64,
        ingest["midcap_rows"].as_u64().unwrap() + 1
    );

    assert!(midcap(&[
        "preprocess",
        "--config",
        p(&cfg),
        "--out",
        p(&out),
        "--phase",
        "validate"
    ])
    .status
    .success());
    let rep: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("preprocess_report.json")).unwrap())
            .unwrap();
    assert_eq!(
        rep["stage_order"],
        serde_json::json!(["vif", "correlation"])
    );
    assert!(!rep["surviving_features"].as_array().unwrap().is_empty());
    let corr = std::fs::read_to_string(out.join("correlation.csv")).unwrap();
    assert_eq!(corr.lines().count(), 14);
}

#[test]
fn usage_errors_exit_two() {
    let missing = midcap(&[
        "backtest",
        "--config",
        "/definitely/not/here.txt",
        "--out",
        "/tmp/unused",
    ]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("Usage"));
    assert_eq!(midcap(&["backtest", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(midcap(&["explode"]).status.code(), Some(2));
    assert_eq!(midcap(&[]).status.code(), Some(2));
    assert_eq!(midcap(&["--help"]).status.code(), Some(0));
}

#[test]
fn pipeline_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("config.txt");
    std::fs::write(&cfg, "crsp = nowhere.csv\n").unwrap();
    let out = midcap(&[
        "ingest",
        "--config",
        p(&cfg),
        "--out",
        p(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(1));

    std::fs::write(&cfg, "z_clip = banana\n").unwrap();
    let out = midcap(&[
        "ingest",
        "--config",
        p(&cfg),
        "--out",
        p(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("z_clip"));
}
