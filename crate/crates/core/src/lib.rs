//! Point-in-time research engine for a dollar-neutral mid-cap equity book.
//!
//! The pipeline runs in this order:
//!
//! * [`panel`] loads price, fundamental, link and sentiment files, merges
//!   them as of each month and forward fills stale values.
//! * [`features`] turns a panel row into thirteen ratio and sentiment features.
//! * [`preprocess`] standardizes and clips cross-sections, then prunes
//!   collinear features on the pooled training matrix.
//! * [`signal`] fits the expected-return model and estimates a shrunk
//!   trailing covariance.
//! * [`optimizer`] solves the dollar-neutral mean-variance problem in closed
//!   form.
//! * [`backtest`] walks the train, validate and test phases forward month by
//!   month; [`metrics`] and [`report`] summarize the results.
//!
//! Every rebalance reads the panel through [`panel::PointInTimePanel::as_of`],
//! so nothing dated after the rebalance can reach the weights.
//!
//! ```no_run
//! use midcap_neutral::{backtest, config::Config};
//!
//! let cfg = Config::load("data/config.txt".as_ref()).unwrap();
//! let ing = midcap_neutral::panel::ingest(&cfg.paths, cfg.midcap_min, cfg.midcap_max, cfg.max_staleness_months).unwrap();
//! let report = backtest::run_protocol(&ing.panel, &cfg.settings(), ing.benchmark.as_ref()).unwrap();
//! println!("{}", report.to_json());
//! ```

pub mod backtest;
pub mod cli;
pub mod config;
pub mod features;
pub mod metrics;
pub mod optimizer;
pub mod panel;
pub mod preprocess;
pub mod report;
pub mod signal;
pub mod stats;
pub mod synth;

pub use backtest::{run_protocol, BacktestReport, BacktestSettings, PhaseName, PhaseSpec};
pub use config::Config;
pub use metrics::compute_sharpe;
pub use optimizer::{solve_dollar_neutral, OptimizerParams, PortfolioWeights};
pub use panel::{ingest, PointInTimePanel};
