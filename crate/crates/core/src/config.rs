//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and falls
//! back to its default; an unknown or repeated key is an error. Relative data
//! paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::backtest::{BacktestSettings, PhaseName, PhaseSpec};
use crate::optimizer::OptimizerParams;
use crate::panel::DataPaths;
use crate::preprocess::PreprocessParams;
use crate::signal::{MuModel, SigmaParams};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },

    #[error("config line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },

    #[error("config line {line}: key `{key}` given twice")]
    DuplicateKey { line: usize, key: String },

    #[error("config key `{key}`: invalid value `{value}` ({reason})")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },

    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Every recognized key, in the order [`Config::to_text`] writes them.
pub const CONFIG_KEYS: [&str; 34] = [
    "crsp",
    "compustat",
    "links",
    "sentiment",
    "benchmark",
    "midcap_min",
    "midcap_max",
    "risk_aversion",
    "z_clip",
    "vif_threshold",
    "corr_threshold",
    "cov_window_months",
    "shrinkage",
    "ridge_mu",
    "gross_target",
    "seed",
    "train_fit_start",
    "train_fit_end",
    "train_eval_start",
    "train_eval_end",
    "validate_fit_start",
    "validate_fit_end",
    "validate_eval_start",
    "validate_eval_end",
    "test_fit_start",
    "test_fit_end",
    "test_eval_start",
    "test_eval_end",
    "mu_model",
    "max_weight",
    "max_staleness_months",
    "min_history_months",
    "capital",
    "permutations",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub paths: DataPaths,
    pub midcap_min: f64,
    pub midcap_max: f64,
    pub risk_aversion: f64,
    pub z_clip: f64,
    pub vif_threshold: f64,
    pub corr_threshold: f64,
    pub cov_window_months: usize,
    pub shrinkage: f64,
    pub ridge_mu: f64,
    pub gross_target: f64,
    pub seed: u64,
    pub phases: [PhaseSpec; 3],
    pub mu_model: MuModel,
    pub max_weight: Option<f64>,
    pub max_staleness_months: Option<u32>,
    pub min_history_months: usize,
    /// Currency amount used when converting weights to share counts.
    pub capital: f64,
    /// Null draws for the permutation test run by `backtest` (0 disables it).
    pub permutations: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            paths: DataPaths {
                crsp: "crsp.csv".into(),
                compustat: "compustat.csv".into(),
                links: "links.csv".into(),
                sentiment: "sentiment.csv".into(),
                benchmark: Some("benchmark.csv".into()),
            },
            midcap_min: 2e9,
            midcap_max: 10e9,
            risk_aversion: 2.0,
            z_clip: 3.0,
            vif_threshold: 10.0,
            corr_threshold: 0.8,
            cov_window_months: 36,
            shrinkage: 0.1,
            ridge_mu: 1e-3,
            gross_target: 1.0,
            seed: 42,
            phases: PhaseSpec::default_protocol(),
            mu_model: MuModel::PooledRidge,
            max_weight: None,
            max_staleness_months: None,
            min_history_months: 12,
            capital: 1e7,
            permutations: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if value.is_empty() || value.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse_num(key, value).map(Some)
    }
}

fn parse_date(key: &str, value: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(value, "%Y-%m-%d").map_err(|e| ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn resolve(base: &Path, value: &str) -> PathBuf {
    let p = PathBuf::from(value);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn phase_index(name: &str) -> Option<usize> {
    match name {
        "train" => Some(0),
        "validate" => Some(1),
        "test" => Some(2),
        _ => None,
    }
}

impl Config {
    /// Defaults with data paths resolved against `base`.
    pub fn with_base(base: &Path) -> Self {
        let mut c = Config::default();
        c.paths.crsp = base.join(&c.paths.crsp);
        c.paths.compustat = base.join(&c.paths.compustat);
        c.paths.links = base.join(&c.paths.links);
        c.paths.sentiment = base.join(&c.paths.sentiment);
        c.paths.benchmark = c.paths.benchmark.map(|b| base.join(b));
        c
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Config::parse(&text, &base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut c = Config::with_base(base);
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                text: raw.to_string(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !CONFIG_KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.into(),
                });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey {
                    line,
                    key: key.into(),
                });
            }
            c.set(key, value, base)?;
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        match key {
            "crsp" => self.paths.crsp = resolve(base, value),
            "compustat" => self.paths.compustat = resolve(base, value),
            "links" => self.paths.links = resolve(base, value),
            "sentiment" => self.paths.sentiment = resolve(base, value),
            "benchmark" => {
                self.paths.benchmark = (!value.is_empty() && !value.eq_ignore_ascii_case("none"))
                    .then(|| resolve(base, value))
            }
            "midcap_min" => self.midcap_min = parse_num(key, value)?,
            "midcap_max" => self.midcap_max = parse_num(key, value)?,
            "risk_aversion" => self.risk_aversion = parse_num(key, value)?,
            "z_clip" => self.z_clip = parse_num(key, value)?,
            "vif_threshold" => self.vif_threshold = parse_num(key, value)?,
            "corr_threshold" => self.corr_threshold = parse_num(key, value)?,
            "cov_window_months" => self.cov_window_months = parse_num(key, value)?,
            "shrinkage" => self.shrinkage = parse_num(key, value)?,
            "ridge_mu" => self.ridge_mu = parse_num(key, value)?,
            "gross_target" => self.gross_target = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "mu_model" => {
                self.mu_model = value.parse().map_err(|reason| ConfigError::InvalidValue {
                    key: key.into(),
                    value: value.into(),
                    reason,
                })?
            }
            "max_weight" => self.max_weight = parse_optional(key, value)?,
            "max_staleness_months" => self.max_staleness_months = parse_optional(key, value)?,
            "min_history_months" => self.min_history_months = parse_num(key, value)?,
            "capital" => self.capital = parse_num(key, value)?,
            "permutations" => self.permutations = parse_num(key, value)?,
            _ => {
                let (phase, field) = key
                    .split_once('_')
                    .expect("phase keys contain an underscore");
                let p = &mut self.phases[phase_index(phase).expect("phase key prefix")];
                let d = parse_date(key, value)?;
                match field {
                    "fit_start" => p.fit_start = d,
                    "fit_end" => p.fit_end = d,
                    "eval_start" => p.eval_start = d,
                    "eval_end" => p.eval_end = d,
                    _ => unreachable!("phase key suffixes are fixed"),
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("midcap_min", self.midcap_min),
            ("midcap_max", self.midcap_max),
            ("risk_aversion", self.risk_aversion),
            ("z_clip", self.z_clip),
            ("vif_threshold", self.vif_threshold),
            ("corr_threshold", self.corr_threshold),
            ("gross_target", self.gross_target),
            ("capital", self.capital),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError::Invalid(format!(
                    "{k} must be positive, got {v}"
                )));
            }
        }
        if self.midcap_min > self.midcap_max {
            return Err(ConfigError::Invalid("midcap_min exceeds midcap_max".into()));
        }
        if self.corr_threshold > 1.0 {
            return Err(ConfigError::Invalid(
                "corr_threshold must be at most 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.shrinkage) {
            return Err(ConfigError::Invalid("shrinkage must lie in [0, 1]".into()));
        }
        if !(self.ridge_mu >= 0.0 && self.ridge_mu.is_finite()) {
            return Err(ConfigError::Invalid("ridge_mu must be non-negative".into()));
        }
        if self.cov_window_months < 2 {
            return Err(ConfigError::Invalid(
                "cov_window_months must be at least 2".into(),
            ));
        }
        if self.min_history_months < 2 {
            return Err(ConfigError::Invalid(
                "min_history_months must be at least 2".into(),
            ));
        }
        if let Some(m) = self.max_weight {
            if !(m > 0.0) {
                return Err(ConfigError::Invalid("max_weight must be positive".into()));
            }
        }
        for p in &self.phases {
            p.validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    /// Effective configuration as text; parsing it back yields the same config.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let path = |p: &Path| p.display().to_string();
        let mut out = String::new();
        for key in CONFIG_KEYS {
            let value = match key {
                "crsp" => path(&self.paths.crsp),
                "compustat" => path(&self.paths.compustat),
                "links" => path(&self.paths.links),
                "sentiment" => path(&self.paths.sentiment),
                "benchmark" => opt(self.paths.benchmark.as_deref().map(path)),
                "midcap_min" => self.midcap_min.to_string(),
                "midcap_max" => self.midcap_max.to_string(),
                "risk_aversion" => self.risk_aversion.to_string(),
                "z_clip" => self.z_clip.to_string(),
                "vif_threshold" => self.vif_threshold.to_string(),
                "corr_threshold" => self.corr_threshold.to_string(),
                "cov_window_months" => self.cov_window_months.to_string(),
                "shrinkage" => self.shrinkage.to_string(),
                "ridge_mu" => self.ridge_mu.to_string(),
                "gross_target" => self.gross_target.to_string(),
                "seed" => self.seed.to_string(),
                "mu_model" => self.mu_model.to_string(),
                "max_weight" => opt(self.max_weight.map(|v| v.to_string())),
                "max_staleness_months" => opt(self.max_staleness_months.map(|v| v.to_string())),
                "min_history_months" => self.min_history_months.to_string(),
                "capital" => self.capital.to_string(),
                "permutations" => self.permutations.to_string(),
                _ => {
                    let (phase, field) = key.split_once('_').expect("phase key");
                    let p = &self.phases[phase_index(phase).expect("phase key prefix")];
                    let d = match field {
                        "fit_start" => p.fit_start,
                        "fit_end" => p.fit_end,
                        "eval_start" => p.eval_start,
                        _ => p.eval_end,
                    };
                    d.format("%Y-%m-%d").to_string()
                }
            };
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    pub fn settings(&self) -> BacktestSettings {
        BacktestSettings {
            midcap_min: self.midcap_min,
            midcap_max: self.midcap_max,
            preprocess: PreprocessParams {
                z_clip: self.z_clip,
                vif_threshold: self.vif_threshold,
                corr_threshold: self.corr_threshold,
            },
            sigma: SigmaParams {
                window_months: self.cov_window_months,
                shrinkage: self.shrinkage,
                min_observations: self.min_history_months,
                ..SigmaParams::default()
            },
            ridge_mu: self.ridge_mu,
            mu_model: self.mu_model,
            optimizer: OptimizerParams {
                risk_aversion: self.risk_aversion,
                gross_target: self.gross_target,
                max_weight: self.max_weight,
            },
            phases: self.phases.to_vec(),
        }
    }

    pub fn phase(&self, name: PhaseName) -> &PhaseSpec {
        self.phases
            .iter()
            .find(|p| p.name == name)
            .expect("all three phases are present")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let c = Config::default();
        assert_eq!((c.midcap_min, c.midcap_max), (2e9, 10e9));
        assert_eq!(c.risk_aversion, 2.0);
        assert_eq!(
            (c.z_clip, c.vif_threshold, c.corr_threshold),
            (3.0, 10.0, 0.8)
        );
        assert_eq!(
            (c.cov_window_months, c.shrinkage, c.ridge_mu, c.gross_target),
            (36, 0.1, 1e-3, 1.0)
        );
        assert!(c.validate().is_ok());
    }

    #[test]
    fn parses_and_resolves_relative_paths() {
        let text = "# run\ncrsp = data/crsp.csv\nrisk_aversion = 4 # doubled\nbenchmark = none\nmax_weight = 0.02\ntest_eval_end = 2023-06-30\n";
        let c = Config::parse(text, Path::new("/tmp/run")).unwrap();
        assert_eq!(c.paths.crsp, PathBuf::from("/tmp/run/data/crsp.csv"));
        assert_eq!(c.paths.links, PathBuf::from("/tmp/run/links.csv"));
        assert_eq!(c.paths.benchmark, None);
        assert_eq!(c.risk_aversion, 4.0);
        assert_eq!(c.max_weight, Some(0.02));
        assert_eq!(
            c.phases[2].eval_end,
            NaiveDate::from_ymd_opt(2023, 6, 30).unwrap()
        );
    }

    #[test]
    fn rejects_unknown_duplicate_and_bad_values() {
        let base = Path::new(".");
        assert!(matches!(
            Config::parse("vif_treshold = 5", base),
            Err(ConfigError::UnknownKey { line: 1, .. })
        ));
        assert!(matches!(
            Config::parse("z_clip = 3\nz_clip = 2", base),
            Err(ConfigError::DuplicateKey { line: 2, .. })
        ));
        assert!(matches!(
            Config::parse("z_clip = three", base),
            Err(ConfigError::InvalidValue { .. })
        ));
        assert!(matches!(
            Config::parse("shrinkage = 1.5", base),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            Config::parse("just words", base),
            Err(ConfigError::Syntax { .. })
        ));
        assert!(matches!(
            Config::parse("validate_eval_start = 2021-06-01", base),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn text_round_trip() {
        let mut c = Config::with_base(Path::new("/data"));
        c.max_staleness_months = Some(6);
        c.mu_model = MuModel::RankIc;
        c.ridge_mu = 0.0025;
        let back = Config::parse(&c.to_text(), Path::new("/elsewhere")).unwrap();
        assert_eq!(back, c);
    }
}
