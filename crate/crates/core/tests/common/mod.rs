#![allow(dead_code)]

use std::sync::OnceLock;

use chrono::NaiveDate;
use midcap_neutral::backtest::BacktestSettings;
use midcap_neutral::panel::{PointInTimePanel, RawInputs};
use midcap_neutral::synth::{self, SynthData, SynthParams};

pub fn ymd(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}

pub fn default_synth() -> &'static SynthData {
    static DATA: OnceLock<SynthData> = OnceLock::new();
    DATA.get_or_init(|| synth::generate(&SynthParams::default()))
}

pub fn default_inputs() -> &'static RawInputs {
    static INPUTS: OnceLock<RawInputs> = OnceLock::new();
    INPUTS.get_or_init(|| {
        default_synth()
            .raw_inputs()
            .expect("synthetic inputs parse")
    })
}

pub fn build(inputs: &RawInputs) -> PointInTimePanel {
    let s = BacktestSettings::default();
    inputs
        .build(s.midcap_min, s.midcap_max, None)
        .expect("panel builds")
        .panel
}

pub fn default_panel() -> &'static PointInTimePanel {
    static PANEL: OnceLock<PointInTimePanel> = OnceLock::new();
    PANEL.get_or_init(|| build(default_inputs()))
}
