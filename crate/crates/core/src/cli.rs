//! Command-line front end.
//!
//! Exit codes: 0 on success, 2 for usage errors (bad flags, unknown
//! subcommand, missing config file), 1 when the pipeline itself fails.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::{CommandFactory, Parser, Subcommand};

use crate::backtest::{self, BacktestError, BacktestReport, PermutationResult, PhaseName};
use crate::config::{Config, ConfigError};
use crate::features;
use crate::optimizer;
use crate::panel::{self, Ingested, PanelError};
use crate::preprocess::{self, PreprocessError};
use crate::report;
use crate::synth::{self, SynthParams};

#[derive(Debug, Parser)]
#[command(
    name = "midcap",
    version,
    about = "Point-in-time mid-cap long-short research engine"
)]
pub struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic data set and a matching config.txt.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        stocks: usize,
        #[arg(long, default_value_t = 132)]
        months: usize,
        /// Monthly return per unit of planted signal.
        #[arg(long, default_value_t = 0.008)]
        planted_beta: f64,
    },
    /// Merge, forward fill and filter the inputs; write the panel CSVs.
    Ingest {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the feature table of every mid-cap security-month.
    Features {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run feature selection on one phase's training window.
    Preprocess {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_phase)]
        phase: PhaseName,
    },
    /// Run the three-phase protocol and write the report.
    Backtest {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's permutation count for the test phase.
        #[arg(long)]
        permutations: Option<usize>,
        /// Also dump the test-phase mu and sigma used on this rebalance date.
        #[arg(long)]
        audit_date: Option<NaiveDate>,
    },
    /// Render charts and a summary from a backtest output directory.
    Report {
        /// Directory holding report.json (and permutation.json, if any).
        #[arg(long)]
        input: PathBuf,
        /// Defaults to the input directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_phase(s: &str) -> std::result::Result<PhaseName, String> {
    match s {
        "train" => Ok(PhaseName::Train),
        "validate" => Ok(PhaseName::Validate),
        "test" => Ok(PhaseName::Test),
        other => Err(format!("unknown phase `{other}` (train, validate, test)")),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config file {0} does not exist")]
    MissingConfig(PathBuf),

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Panel(#[from] PanelError),

    #[error(transparent)]
    Preprocess(#[from] PreprocessError),

    #[error(transparent)]
    Backtest(#[from] BacktestError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingConfig(_) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn write_csv(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> csv::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
    write(path, buf)
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes") + "\n"
}

fn make_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn load_config(path: &Path) -> Result<Config> {
    if !path.is_file() {
        return Err(CliError::MissingConfig(path.to_path_buf()));
    }
    let cfg = Config::load(path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn ingest(cfg: &Config) -> Result<Ingested> {
    Ok(panel::ingest(
        &cfg.paths,
        cfg.midcap_min,
        cfg.midcap_max,
        cfg.max_staleness_months,
    )?)
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = if cli.verbose {
        log::LevelFilter::Info
    } else {
        log::LevelFilter::Warn
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_target(false)
        .try_init();
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.exit_code() == 2 {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            e.exit_code()
        }
    }
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::Synth {
            out,
            seed,
            stocks,
            months,
            planted_beta,
        } => {
            let params = SynthParams {
                n_stocks: *stocks,
                n_months: *months,
                planted_beta: *planted_beta,
                seed: *seed,
                ..SynthParams::default()
            };
            let files = synth::generate(&params)
                .write_to(out)
                .map_err(io_err(out))?;
            println!("wrote synthetic data and {}", files.config.display());
            Ok(())
        }
        Command::Ingest { config, out } => {
            let cfg = load_config(config)?;
            let ing = ingest(&cfg)?;
            make_dir(out)?;
            write_csv(&out.join("panel.csv"), |b| ing.panel.write_csv(b))?;
            write_csv(&out.join("midcap_panel.csv"), |b| ing.midcap.write_csv(b))?;
            write(&out.join("ingest.json"), json(&ing.report))?;
            println!(
                "{} panel rows, {} mid-cap rows, {} securities",
                ing.report.panel_rows, ing.report.midcap_rows, ing.report.securities
            );
            Ok(())
        }
        Command::Features { config, out } => {
            let cfg = load_config(config)?;
            let ing = ingest(&cfg)?;
            let last = ing
                .midcap
                .last_date()
                .ok_or_else(|| CliError::Other("mid-cap panel is empty".into()))?;
            let rows = features::compute_features(&ing.midcap.as_of(last));
            make_dir(out)?;
            write_csv(&out.join("features.csv"), |b| {
                features::write_features_csv(&rows, b)
            })?;
            println!("{} feature rows", rows.len());
            Ok(())
        }
        Command::Preprocess { config, out, phase } => {
            let cfg = load_config(config)?;
            let ing = ingest(&cfg)?;
            let settings = cfg.settings();
            let spec = cfg.phase(*phase);
            let training =
                backtest::build_training_set(&ing.panel, &settings, spec.fit_start, spec.fit_end);
            let names: Vec<String> = features::FEATURE_NAMES
                .iter()
                .map(|s| s.to_string())
                .collect();
            let (x, y) = training.pooled();
            let mut fit = preprocess::fit_feature_selection(&x, &names, &y, &settings.preprocess)?;
            fit.report.training_rows = y.len();
            make_dir(out)?;
            write(&out.join("preprocess_report.json"), json(&fit.report))?;
            write_csv(&out.join("correlation.csv"), |b| {
                preprocess::write_correlation_csv(&x, &names, b)
            })?;
            println!(
                "{} training rows, kept {}",
                y.len(),
                fit.surviving_features.join(", ")
            );
            Ok(())
        }
        Command::Backtest {
            config,
            out,
            permutations,
            audit_date,
        } => run_backtest(config, out, *permutations, *audit_date),
        Command::Report { input, out } => {
            let out = out.as_ref().unwrap_or(input);
            let path = input.join("report.json");
            let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
            let rep: BacktestReport =
                serde_json::from_str(&text).map_err(|source| CliError::Json {
                    path: path.clone(),
                    source,
                })?;
            let perm_path = input.join("permutation.json");
            let perm: Option<PermutationResult> = if perm_path.is_file() {
                let text = std::fs::read_to_string(&perm_path).map_err(io_err(&perm_path))?;
                Some(
                    serde_json::from_str(&text).map_err(|source| CliError::Json {
                        path: perm_path.clone(),
                        source,
                    })?,
                )
            } else {
                None
            };
            let files = report::write_charts(&rep, perm.as_ref(), out).map_err(io_err(out))?;
            print!("{}", report::summary_text(&rep, perm.as_ref()));
            log::info!("wrote {} files to {}", files.len(), out.display());
            Ok(())
        }
    }
}

fn run_backtest(
    config: &Path,
    out: &Path,
    permutations: Option<usize>,
    audit_date: Option<NaiveDate>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let ing = ingest(&cfg)?;
    let settings = cfg.settings();
    let rep = backtest::run_protocol(&ing.panel, &settings, ing.benchmark.as_ref())?;
    make_dir(out)?;
    write(&out.join("report.json"), rep.to_json() + "\n")?;
    write(&out.join("config.txt"), cfg.to_text())?;
    report::write_phase_csvs(&rep, out).map_err(io_err(out))?;

    let test = rep
        .phase(PhaseName::Test)
        .expect("protocol has a test phase");
    if let Some(last) = test.weights_history.values().next_back() {
        let prices = last
            .ids
            .iter()
            .filter_map(|&id| ing.panel.get(id, last.date).map(|r| (id, r.prc)))
            .collect();
        match optimizer::weights_to_positions(last, &prices, cfg.capital) {
            Ok(pos) => write_csv(&out.join("test_positions.csv"), |b| {
                let mut w = csv::Writer::from_writer(b);
                w.write_record(["date", "permno", "weight", "shares"])?;
                for ((id, wt), sh) in pos.ids.iter().zip(&last.w).zip(&pos.shares) {
                    w.write_record([
                        last.date.to_string(),
                        id.to_string(),
                        wt.to_string(),
                        sh.to_string(),
                    ])?;
                }
                w.flush()?;
                Ok(())
            })?,
            Err(e) => log::warn!("positions not written: {e}"),
        }
    }

    if let Some(date) = audit_date {
        let est = backtest::signal_at(&ing.panel, &settings, &test.model, date)?;
        write_csv(&out.join(format!("mu_{date}.csv")), |b| est.write_mu_csv(b))?;
        write_csv(&out.join(format!("sigma_{date}.csv")), |b| {
            est.write_sigma_csv(b)
        })?;
    }

    let n = permutations.unwrap_or(cfg.permutations);
    if n > 0 {
        let perm = backtest::permutation_test(
            &ing.panel,
            cfg.phase(PhaseName::Test),
            &settings,
            n,
            cfg.seed,
        )?;
        write(&out.join("permutation.json"), json(&perm))?;
    }

    for p in &rep.phases {
        println!(
            "{:<8} Sharpe {:>7.3} (annualized), cumulative {:>+8.2}%, {} months",
            p.phase.name.to_string(),
            p.sharpe_annualized,
            100.0 * p.cumulative_return,
            p.monthly_returns.len()
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["midcap", "frobnicate"]), 2);
        assert_eq!(run(["midcap", "backtest", "--bogus"]), 2);
        assert_eq!(
            run([
                "midcap",
                "backtest",
                "--config",
                "/nonexistent/cfg.txt",
                "--out",
                "/tmp/x"
            ]),
            2
        );
    }

    #[test]
    fn phases_parse() {
        assert_eq!(parse_phase("validate"), Ok(PhaseName::Validate));
        assert!(parse_phase("holdout").is_err());
    }
}
