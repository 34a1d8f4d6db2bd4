//! Walk-forward backtest: fit on one window, rebalance monthly over another.
//!
//! For each rebalance date `t` the pipeline sees only `panel.as_of(t)`:
//! mid-cap universe at `t`, history filter, features, frozen feature list,
//! expected returns, covariance, weights. The realized return is
//! `w_t . ret_{t+1}`, keyed by the month in which it is earned.

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::features::{FeatureRow, FEATURE_NAMES};
use crate::metrics::{self, BenchmarkComparison, MetricsError};
use crate::optimizer::{DollarNeutralSolver, OptimizerError, OptimizerParams, PortfolioWeights};
use crate::panel::{is_midcap, Permno, PointInTimePanel};
use crate::preprocess::{
    self, FeatureMatrix, PreprocessError, PreprocessFit, PreprocessParams, RawCrossSection,
};
use crate::signal::{self, MuModel, ReturnModel, SigmaParams, SignalError, SignalEstimate};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BacktestError {
    #[error(
        "{phase} phase needs data from {needed_start} to {needed_end}, panel covers {available}"
    )]
    MissingRange {
        phase: PhaseName,
        needed_start: NaiveDate,
        needed_end: NaiveDate,
        available: String,
    },

    #[error("invalid phase {phase}: {reason}")]
    InvalidPhase { phase: PhaseName, reason: String },

    #[error("{phase} phase has no training observations in its fit window")]
    EmptyFitWindow { phase: PhaseName },

    #[error("{phase} phase preprocessing failed: {source}")]
    Preprocess {
        phase: PhaseName,
        #[source]
        source: PreprocessError,
    },

    #[error("{phase} phase model fit failed: {source}")]
    Fit {
        phase: PhaseName,
        #[source]
        source: SignalError,
    },

    #[error("{phase} phase optimizer failed on {date}: {source}")]
    Optimizer {
        phase: PhaseName,
        date: NaiveDate,
        #[source]
        source: OptimizerError,
    },

    #[error("{phase} phase Sharpe ratio: {source}")]
    Sharpe {
        phase: PhaseName,
        #[source]
        source: MetricsError,
    },

    #[error("the protocol needs exactly one phase of each kind (train, validate, test)")]
    PhaseSet,

    #[error("no signal on {date}: {reason}")]
    NoSignal { date: NaiveDate, reason: String },
}

pub type Result<T> = std::result::Result<T, BacktestError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseName {
    Train,
    Validate,
    Test,
}

impl std::fmt::Display for PhaseName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PhaseName::Train => "train",
            PhaseName::Validate => "validate",
            PhaseName::Test => "test",
        })
    }
}

/// Fit and evaluation windows of one phase. Evaluation dates bound the months
/// in which returns are realized; the first rebalance is the panel date just
/// before `eval_start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub name: PhaseName,
    pub fit_start: NaiveDate,
    pub fit_end: NaiveDate,
    pub eval_start: NaiveDate,
    pub eval_end: NaiveDate,
}

fn ymd(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid calendar date")
}

impl PhaseSpec {
    /// Train 2013-2021 in-sample, validate on 2022, refit through 2022 and
    /// test on 2023.
    pub fn default_protocol() -> [PhaseSpec; 3] {
        [
            PhaseSpec {
                name: PhaseName::Train,
                fit_start: ymd(2013, 1, 1),
                fit_end: ymd(2021, 12, 31),
                eval_start: ymd(2013, 1, 1),
                eval_end: ymd(2021, 12, 31),
            },
            PhaseSpec {
                name: PhaseName::Validate,
                fit_start: ymd(2013, 1, 1),
                fit_end: ymd(2021, 12, 31),
                eval_start: ymd(2022, 1, 1),
                eval_end: ymd(2022, 12, 31),
            },
            PhaseSpec {
                name: PhaseName::Test,
                fit_start: ymd(2013, 1, 1),
                fit_end: ymd(2022, 12, 31),
                eval_start: ymd(2023, 1, 1),
                eval_end: ymd(2023, 12, 31),
            },
        ]
    }

    /// Evaluation overlaps the fit window.
    pub fn is_in_sample(&self) -> bool {
        self.eval_start <= self.fit_end
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(BacktestError::InvalidPhase {
                phase: self.name,
                reason: reason.to_string(),
            })
        };
        if self.fit_start > self.fit_end {
            return bad("fit_start is after fit_end");
        }
        if self.eval_start > self.eval_end {
            return bad("eval_start is after eval_end");
        }
        if self.name != PhaseName::Train && self.fit_end >= self.eval_start {
            return bad("fit window must end before evaluation starts");
        }
        Ok(())
    }
}

/// Everything the backtest needs besides the panel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BacktestSettings {
    pub midcap_min: f64,
    pub midcap_max: f64,
    pub preprocess: PreprocessParams,
    pub sigma: SigmaParams,
    pub ridge_mu: f64,
    pub mu_model: MuModel,
    pub optimizer: OptimizerParams,
    pub phases: Vec<PhaseSpec>,
}

impl Default for BacktestSettings {
    fn default() -> Self {
        BacktestSettings {
            midcap_min: 2e9,
            midcap_max: 10e9,
            preprocess: PreprocessParams::default(),
            sigma: SigmaParams::default(),
            ridge_mu: 1e-3,
            mu_model: MuModel::default(),
            optimizer: OptimizerParams::default(),
            phases: PhaseSpec::default_protocol().to_vec(),
        }
    }
}

/// Sorted panel dates.
struct Calendar {
    dates: Vec<NaiveDate>,
}

impl Calendar {
    fn new(panel: &PointInTimePanel) -> Self {
        Calendar {
            dates: panel.dates().collect(),
        }
    }

    /// `(t, next(t))` pairs with `start <= t` and `next(t) <= end`.
    fn pairs_within(&self, start: NaiveDate, end: NaiveDate) -> Vec<(NaiveDate, NaiveDate)> {
        self.dates
            .windows(2)
            .filter(|w| w[0] >= start && w[1] <= end)
            .map(|w| (w[0], w[1]))
            .collect()
    }

    /// `(t, next(t))` pairs whose realization date falls in `[start, end]`.
    fn realized_within(&self, start: NaiveDate, end: NaiveDate) -> Vec<(NaiveDate, NaiveDate)> {
        self.dates
            .windows(2)
            .filter(|w| w[1] >= start && w[1] <= end)
            .map(|w| (w[0], w[1]))
            .collect()
    }
}

fn month_start(d: NaiveDate) -> NaiveDate {
    ymd(d.year(), d.month(), 1)
}

fn month_end(d: NaiveDate) -> NaiveDate {
    let first_next = if d.month() == 12 {
        ymd(d.year() + 1, 1, 1)
    } else {
        ymd(d.year(), d.month() + 1, 1)
    };
    first_next.pred_opt().expect("date in range")
}

/// Fails unless the panel has observations in the first fit month and the
/// last evaluation month.
pub fn check_coverage(panel: &PointInTimePanel, spec: &PhaseSpec) -> Result<()> {
    let start = spec.fit_start.min(spec.eval_start);
    let end = spec.fit_end.max(spec.eval_end);
    let (first, last) = match (panel.first_date(), panel.last_date()) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(BacktestError::MissingRange {
                phase: spec.name,
                needed_start: start,
                needed_end: end,
                available: "no dates".into(),
            })
        }
    };
    if first > month_end(start) || last < month_start(end) {
        return Err(BacktestError::MissingRange {
            phase: spec.name,
            needed_start: start,
            needed_end: end,
            available: format!("{first} to {last}"),
        });
    }
    Ok(())
}

/// Mid-cap securities on `t`, as seen at `t`.
fn midcap_ids(panel: &PointInTimePanel, t: NaiveDate, settings: &BacktestSettings) -> Vec<Permno> {
    panel
        .as_of(t)
        .cross_section(t)
        .filter(|r| is_midcap(r, settings.midcap_min, settings.midcap_max))
        .map(|r| r.permno)
        .collect()
}

// ---------------------------------------------------------------------------
// Training set
// ---------------------------------------------------------------------------

/// One training date: all candidate features standardized on that date's
/// cross-section, with next-month returns as the target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingDate {
    pub date: NaiveDate,
    /// All candidate features; a column that is degenerate on this date is
    /// zero (every value imputed to the median).
    pub matrix: FeatureMatrix,
    pub forward_returns: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub fit_start: NaiveDate,
    pub fit_end: NaiveDate,
    pub dates: Vec<TrainingDate>,
}

impl TrainingSet {
    pub fn rows(&self) -> usize {
        self.dates.iter().map(|d| d.forward_returns.len()).sum()
    }

    /// Rows of every date stacked into one matrix.
    pub fn pooled(&self) -> (nalgebra::DMatrix<f64>, Vec<f64>) {
        let k = FEATURE_NAMES.len();
        let n = self.rows();
        let mut x = nalgebra::DMatrix::zeros(n, k);
        let mut y = Vec::with_capacity(n);
        let mut r = 0;
        for d in &self.dates {
            let m = d.matrix.values.nrows();
            x.view_mut((r, 0), (m, k)).copy_from(&d.matrix.values);
            y.extend_from_slice(&d.forward_returns);
            r += m;
        }
        (x, y)
    }

    /// Same set with each date's targets shuffled across securities.
    pub fn permuted(&self, rng: &mut ChaCha8Rng) -> TrainingSet {
        let mut out = self.clone();
        for d in out.dates.iter_mut() {
            d.forward_returns.shuffle(rng);
        }
        out
    }
}

/// Training pairs `(t, t+1)` with `fit_start <= t` and `t+1 <= fit_end`, so
/// nothing after `fit_end` is read.
pub fn build_training_set(
    panel: &PointInTimePanel,
    settings: &BacktestSettings,
    fit_start: NaiveDate,
    fit_end: NaiveDate,
) -> TrainingSet {
    let cal = Calendar::new(panel);
    let names: Vec<String> = FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
    let dates: Vec<TrainingDate> = cal
        .pairs_within(fit_start, fit_end)
        .into_par_iter()
        .filter_map(|(t, next)| {
            let view = panel.as_of(next);
            let mut rows = Vec::new();
            let mut fwd = Vec::new();
            for r in view.cross_section(t) {
                if !is_midcap(r, settings.midcap_min, settings.midcap_max) {
                    continue;
                }
                if let Some(y) = view
                    .get(r.permno, next)
                    .and_then(|n| n.ret)
                    .filter(|y| y.is_finite())
                {
                    rows.push(FeatureRow::from_row(r));
                    fwd.push(y);
                }
            }
            if rows.len() < 2 {
                return None;
            }
            let raw = RawCrossSection::from_rows(t, &rows, &FEATURE_NAMES);
            let cols = preprocess::standardize_columns(&raw, settings.preprocess.z_clip);
            let n = rows.len();
            let values = nalgebra::DMatrix::from_fn(n, names.len(), |i, k| {
                cols[k].as_ref().map_or(0.0, |c| c[i])
            });
            Some(TrainingDate {
                date: t,
                matrix: FeatureMatrix {
                    date: t,
                    ids: raw.ids,
                    feature_names: names.clone(),
                    values,
                    dropped_features: vec![],
                },
                forward_returns: fwd,
            })
        })
        .collect();
    TrainingSet {
        fit_start,
        fit_end,
        dates,
    }
}

/// Frozen feature list and return model of one phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub selection: PreprocessFit,
    pub model: ReturnModel,
}

/// Feature selection on the pooled training matrix, then the return model on
/// the surviving columns.
pub fn fit_model(
    training: &TrainingSet,
    settings: &BacktestSettings,
    phase: PhaseName,
) -> Result<FittedModel> {
    if training.dates.is_empty() {
        return Err(BacktestError::EmptyFitWindow { phase });
    }
    let names: Vec<String> = FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
    let (x, y) = training.pooled();
    let mut selection = preprocess::fit_feature_selection(&x, &names, &y, &settings.preprocess)
        .map_err(|source| BacktestError::Preprocess { phase, source })?;
    selection.report.training_rows = y.len();
    let keep: Vec<usize> = selection
        .surviving_features
        .iter()
        .map(|f| {
            names
                .iter()
                .position(|n| n == f)
                .expect("survivor is a candidate")
        })
        .collect();
    let matrices: Vec<FeatureMatrix> = training
        .dates
        .iter()
        .map(|d| FeatureMatrix {
            date: d.date,
            ids: d.matrix.ids.clone(),
            feature_names: selection.surviving_features.clone(),
            values: d.matrix.values.select_columns(&keep),
            dropped_features: vec![],
        })
        .collect();
    let targets: Vec<Vec<f64>> = training
        .dates
        .iter()
        .map(|d| d.forward_returns.clone())
        .collect();
    let model =
        signal::fit_return_model_with(settings.mu_model, &matrices, &targets, settings.ridge_mu)
            .map_err(|source| BacktestError::Fit { phase, source })?;
    Ok(FittedModel { selection, model })
}

// ---------------------------------------------------------------------------
// Evaluation dates
// ---------------------------------------------------------------------------

/// What happened to a held security over the holding month.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Realized {
    Return(f64),
    /// Priced at `t+1` but no return recorded: contributes 0.
    MissingReturn,
    /// No row at `t+1`: contributes 0.
    Delisted,
}

impl Realized {
    pub fn value(self) -> f64 {
        match self {
            Realized::Return(r) => r,
            _ => 0.0,
        }
    }
}

/// Label-independent state of one rebalance date, reusable across fits.
#[derive(Clone, Debug)]
pub struct PreparedDate {
    pub date: NaiveDate,
    pub next_date: NaiveDate,
    pub midcap_count: usize,
    pub state: std::result::Result<PreparedRisk, String>,
}

#[derive(Clone, Debug)]
pub struct PreparedRisk {
    pub ids: Vec<Permno>,
    pub features: Vec<FeatureRow>,
    pub solver: DollarNeutralSolver,
    pub condition_number: f64,
    pub ridge_added: f64,
    pub realized: Vec<Realized>,
}

fn prepare_date(
    panel: &PointInTimePanel,
    settings: &BacktestSettings,
    t: NaiveDate,
    next: NaiveDate,
) -> PreparedDate {
    let view = panel.as_of(t);
    let candidates = midcap_ids(panel, t, settings);
    let midcap_count = candidates.len();
    let state = (|| {
        let sigma = signal::estimate_sigma(&view, &candidates, &settings.sigma)
            .map_err(|e| e.to_string())?;
        if sigma.ids.len() < 2 {
            return Err(format!("only {} eligible securities", sigma.ids.len()));
        }
        let solver = DollarNeutralSolver::new(&sigma.sigma).map_err(|e| e.to_string())?;
        let features = sigma
            .ids
            .iter()
            .map(|&id| {
                FeatureRow::from_row(view.get(id, t).expect("universe member has a row at t"))
            })
            .collect();
        // Outcomes come from t+1, strictly after every input above.
        let realized = sigma
            .ids
            .iter()
            .map(|&id| match panel.get(id, next) {
                Some(r) => r
                    .ret
                    .filter(|x| x.is_finite())
                    .map_or(Realized::MissingReturn, Realized::Return),
                None => Realized::Delisted,
            })
            .collect();
        Ok(PreparedRisk {
            ids: sigma.ids,
            features,
            solver,
            condition_number: sigma.condition_number,
            ridge_added: sigma.ridge_added,
            realized,
        })
    })();
    PreparedDate {
        date: t,
        next_date: next,
        midcap_count,
        state,
    }
}

/// Prepares every rebalance date whose return is realized in
/// `[eval_start, eval_end]`, in date order.
pub fn prepare_eval(
    panel: &PointInTimePanel,
    settings: &BacktestSettings,
    eval_start: NaiveDate,
    eval_end: NaiveDate,
) -> Vec<PreparedDate> {
    Calendar::new(panel)
        .realized_within(eval_start, eval_end)
        .into_par_iter()
        .map(|(t, next)| prepare_date(panel, settings, t, next))
        .collect()
}

/// Expected returns and covariance the pipeline would use at `t`, for audit.
pub fn signal_at(
    panel: &PointInTimePanel,
    settings: &BacktestSettings,
    fitted: &FittedModel,
    t: NaiveDate,
) -> Result<SignalEstimate> {
    let fail = |reason: String| BacktestError::NoSignal { date: t, reason };
    if panel.cross_section(t).next().is_none() {
        return Err(fail("not a panel date".into()));
    }
    let view = panel.as_of(t);
    let candidates = midcap_ids(panel, t, settings);
    let sigma = signal::estimate_sigma(&view, &candidates, &settings.sigma)
        .map_err(|e| fail(e.to_string()))?;
    let rows: Vec<FeatureRow> = sigma
        .ids
        .iter()
        .map(|&id| FeatureRow::from_row(view.get(id, t).expect("universe member has a row at t")))
        .collect();
    let names: Vec<&str> = fitted
        .selection
        .surviving_features
        .iter()
        .map(String::as_str)
        .collect();
    let raw = RawCrossSection::from_rows(t, &rows, &names);
    let matrix = preprocess::standardize_and_clip(&raw, settings.preprocess.z_clip)
        .map_err(|e| fail(e.to_string()))?;
    let mu = signal::score_mu(&matrix, &fitted.model).map_err(|e| fail(e.to_string()))?;
    SignalEstimate::new(mu, &sigma, &fitted.model).map_err(|e| fail(e.to_string()))
}

// ---------------------------------------------------------------------------
// Phase results
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapEntry {
    pub date: NaiveDate,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelistEntry {
    pub rebalance_date: NaiveDate,
    pub realized_date: NaiveDate,
    pub permno: Permno,
    pub weight: f64,
    pub outcome: Realized,
}

/// Per-rebalance diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RebalanceRecord {
    pub date: NaiveDate,
    pub realized_date: NaiveDate,
    pub midcap_count: usize,
    pub universe: usize,
    pub dropped_features: Vec<String>,
    pub condition_number: f64,
    pub ridge_added: f64,
    pub kkt_residual: f64,
    pub lambda: f64,
    pub long_count: usize,
    pub short_count: usize,
    pub max_abs_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BacktestPhaseResult {
    pub phase: PhaseSpec,
    pub in_sample: bool,
    pub surviving_features: Vec<String>,
    pub beta: BTreeMap<String, f64>,
    pub model: FittedModel,
    /// Realized portfolio return keyed by the month it was earned.
    pub monthly_returns: BTreeMap<NaiveDate, f64>,
    /// Normalized weights keyed by rebalance date.
    pub weights_history: BTreeMap<NaiveDate, PortfolioWeights>,
    pub rebalances: Vec<RebalanceRecord>,
    pub sharpe_monthly: f64,
    pub sharpe_annualized: f64,
    pub mean_monthly_return: f64,
    pub std_monthly_return: f64,
    pub cumulative_return: f64,
    /// Mean `sum |w_t - w_prev|` over consecutive rebalances.
    pub turnover: f64,
    pub gaps: Vec<GapEntry>,
    pub delist_log: Vec<DelistEntry>,
    pub benchmark: Option<BenchmarkComparison>,
    pub benchmark_notice: Option<String>,
}

/// Runs the monthly pipeline over prepared dates with a fitted model.
pub fn evaluate(
    spec: &PhaseSpec,
    prepared: &[PreparedDate],
    fitted: &FittedModel,
    settings: &BacktestSettings,
    benchmark: Option<&BTreeMap<NaiveDate, f64>>,
) -> Result<BacktestPhaseResult> {
    let names: Vec<&str> = fitted
        .selection
        .surviving_features
        .iter()
        .map(String::as_str)
        .collect();
    let steps: Vec<Result<Step>> = prepared
        .par_iter()
        .map(|p| rebalance(spec, p, &names, fitted, settings))
        .collect();

    let mut monthly_returns = BTreeMap::new();
    let mut weights_history = BTreeMap::new();
    let mut rebalances = Vec::new();
    let mut gaps = Vec::new();
    let mut delist_log = Vec::new();
    for step in steps {
        match step? {
            Step::Gap(g) => gaps.push(g),
            Step::Held {
                weights,
                ret,
                record,
                delisted,
            } => {
                monthly_returns.insert(record.realized_date, ret);
                weights_history.insert(record.date, weights);
                rebalances.push(record);
                delist_log.extend(delisted);
            }
        }
    }

    let series: Vec<f64> = monthly_returns.values().copied().collect();
    let summary = metrics::sharpe_summary(&series).map_err(|source| BacktestError::Sharpe {
        phase: spec.name,
        source,
    })?;
    let turnover = mean_turnover(&weights_history);
    let (bench, notice) = match benchmark {
        None => (
            None,
            Some("no benchmark supplied; comparison skipped".to_string()),
        ),
        Some(b) => match metrics::compare_benchmark(&monthly_returns, b) {
            Ok(c) => (Some(c), None),
            Err(e) => (None, Some(format!("benchmark comparison skipped: {e}"))),
        },
    };
    Ok(BacktestPhaseResult {
        phase: *spec,
        in_sample: spec.is_in_sample(),
        surviving_features: fitted.selection.surviving_features.clone(),
        beta: fitted
            .model
            .feature_names
            .iter()
            .cloned()
            .zip(fitted.model.beta.iter().copied())
            .collect(),
        model: fitted.clone(),
        cumulative_return: metrics::total_return(&series),
        monthly_returns,
        weights_history,
        rebalances,
        sharpe_monthly: summary.sharpe_monthly,
        sharpe_annualized: summary.sharpe_annualized,
        mean_monthly_return: summary.mean_monthly,
        std_monthly_return: summary.std_monthly,
        turnover,
        gaps,
        delist_log,
        benchmark: bench,
        benchmark_notice: notice,
    })
}

enum Step {
    Gap(GapEntry),
    Held {
        weights: PortfolioWeights,
        ret: f64,
        record: RebalanceRecord,
        delisted: Vec<DelistEntry>,
    },
}

fn rebalance(
    spec: &PhaseSpec,
    p: &PreparedDate,
    names: &[&str],
    fitted: &FittedModel,
    settings: &BacktestSettings,
) -> Result<Step> {
    let gap = |reason: String| {
        Ok(Step::Gap(GapEntry {
            date: p.date,
            reason,
        }))
    };
    let risk = match &p.state {
        Ok(r) => r,
        Err(reason) => return gap(reason.clone()),
    };
    let raw = RawCrossSection::from_rows(p.date, &risk.features, names);
    let matrix = match preprocess::standardize_and_clip(&raw, settings.preprocess.z_clip) {
        Ok(m) => m,
        Err(e) => return gap(e.to_string()),
    };
    let mu = match signal::score_mu(&matrix, &fitted.model) {
        Ok(m) => m,
        Err(e) => return gap(e.to_string()),
    };
    let err = |source| BacktestError::Optimizer {
        phase: spec.name,
        date: p.date,
        source,
    };
    let raw_w = risk
        .solver
        .solve(p.date, &risk.ids, &mu, &settings.optimizer)
        .map_err(err)?;
    let weights = risk.solver.finalize(&raw_w, &mu, &settings.optimizer);

    let mut ret = 0.0;
    let mut delisted = Vec::new();
    for ((&id, &w), &outcome) in risk.ids.iter().zip(&weights.w).zip(&risk.realized) {
        ret += w * outcome.value();
        if !matches!(outcome, Realized::Return(_)) {
            delisted.push(DelistEntry {
                rebalance_date: p.date,
                realized_date: p.next_date,
                permno: id,
                weight: w,
                outcome,
            });
        }
    }
    let record = RebalanceRecord {
        date: p.date,
        realized_date: p.next_date,
        midcap_count: p.midcap_count,
        universe: risk.ids.len(),
        dropped_features: matrix
            .dropped_features
            .iter()
            .map(|d| d.name.clone())
            .collect(),
        condition_number: risk.condition_number,
        ridge_added: risk.ridge_added,
        kkt_residual: raw_w.kkt_residual,
        lambda: raw_w.lambda,
        long_count: weights.w.iter().filter(|v| **v > 0.0).count(),
        short_count: weights.w.iter().filter(|v| **v < 0.0).count(),
        max_abs_weight: weights.w.iter().fold(0.0, |a, v| a.max(v.abs())),
    };
    Ok(Step::Held {
        weights,
        ret,
        record,
        delisted,
    })
}

/// Mean L1 distance between consecutive weight vectors (absent names count
/// as zero weight).
pub fn mean_turnover(history: &BTreeMap<NaiveDate, PortfolioWeights>) -> f64 {
    let as_map = |w: &PortfolioWeights| -> BTreeMap<Permno, f64> {
        w.ids.iter().copied().zip(w.w.iter().copied()).collect()
    };
    let maps: Vec<BTreeMap<Permno, f64>> = history.values().map(as_map).collect();
    if maps.len() < 2 {
        return 0.0;
    }
    let total: f64 = maps
        .windows(2)
        .map(|pair| {
            let (a, b) = (&pair[0], &pair[1]);
            let mut ids: Vec<Permno> = a.keys().chain(b.keys()).copied().collect();
            ids.sort_unstable();
            ids.dedup();
            ids.iter()
                .map(|id| {
                    (b.get(id).copied().unwrap_or(0.0) - a.get(id).copied().unwrap_or(0.0)).abs()
                })
                .sum::<f64>()
        })
        .sum();
    total / (maps.len() - 1) as f64
}

/// Fits on the phase's fit window and evaluates over its evaluation window.
pub fn run_phase(
    panel: &PointInTimePanel,
    spec: &PhaseSpec,
    settings: &BacktestSettings,
    benchmark: Option<&BTreeMap<NaiveDate, f64>>,
) -> Result<BacktestPhaseResult> {
    spec.validate()?;
    check_coverage(panel, spec)?;
    let training = build_training_set(panel, settings, spec.fit_start, spec.fit_end);
    let fitted = fit_model(&training, settings, spec.name)?;
    let prepared = prepare_eval(panel, settings, spec.eval_start, spec.eval_end);
    log::info!(
        "{} phase: {} training rows, {} features kept, {} rebalances",
        spec.name,
        training.rows(),
        fitted.selection.surviving_features.len(),
        prepared.len()
    );
    evaluate(spec, &prepared, &fitted, settings, benchmark)
}

/// All three phases and the settings that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub settings: BacktestSettings,
    pub panel_first_date: Option<NaiveDate>,
    pub panel_last_date: Option<NaiveDate>,
    pub phases: Vec<BacktestPhaseResult>,
}

impl BacktestReport {
    pub fn phase(&self, name: PhaseName) -> Option<&BacktestPhaseResult> {
        self.phases.iter().find(|p| p.phase.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Runs train, validate and test in that order.
pub fn run_protocol(
    panel: &PointInTimePanel,
    settings: &BacktestSettings,
    benchmark: Option<&BTreeMap<NaiveDate, f64>>,
) -> Result<BacktestReport> {
    let mut ordered = Vec::new();
    for name in [PhaseName::Train, PhaseName::Validate, PhaseName::Test] {
        let mut it = settings.phases.iter().filter(|p| p.name == name);
        match (it.next(), it.next()) {
            (Some(p), None) => ordered.push(*p),
            _ => return Err(BacktestError::PhaseSet),
        }
    }
    for spec in &ordered {
        spec.validate()?;
        check_coverage(panel, spec)?;
    }
    let phases = ordered
        .iter()
        .map(|spec| run_phase(panel, spec, settings, benchmark))
        .collect::<Result<Vec<_>>>()?;
    Ok(BacktestReport {
        settings: settings.clone(),
        panel_first_date: panel.first_date(),
        panel_last_date: panel.last_date(),
        phases,
    })
}

// ---------------------------------------------------------------------------
// Permutation test
// ---------------------------------------------------------------------------

/// Observed phase Sharpe against a null distribution from refits on
/// training targets shuffled within each date.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub phase: PhaseName,
    pub observed_sharpe: f64,
    /// Sorted null Sharpe ratios (permutations with undefined Sharpe omitted).
    pub null_sharpes: Vec<f64>,
    pub permutations: usize,
    pub seed: u64,
    /// Fraction of null draws at or above the observed value.
    pub p_value: f64,
    pub quantile_025: f64,
    pub quantile_975: f64,
    pub quantile_99: f64,
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn permutation_test(
    panel: &PointInTimePanel,
    spec: &PhaseSpec,
    settings: &BacktestSettings,
    permutations: usize,
    seed: u64,
) -> Result<PermutationResult> {
    spec.validate()?;
    check_coverage(panel, spec)?;
    let training = build_training_set(panel, settings, spec.fit_start, spec.fit_end);
    let prepared = prepare_eval(panel, settings, spec.eval_start, spec.eval_end);
    let fitted = fit_model(&training, settings, spec.name)?;
    let observed = evaluate(spec, &prepared, &fitted, settings, None)?.sharpe_annualized;

    let draws: Vec<Option<f64>> = (0..permutations)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let shuffled = training.permuted(&mut rng);
            let fitted = fit_model(&shuffled, settings, spec.name).ok()?;
            evaluate(spec, &prepared, &fitted, settings, None)
                .ok()
                .map(|r| r.sharpe_annualized)
        })
        .collect();
    let mut null: Vec<f64> = draws.into_iter().flatten().collect();
    null.sort_by(f64::total_cmp);
    let at_or_above = null.iter().filter(|s| **s >= observed).count();
    Ok(PermutationResult {
        phase: spec.name,
        observed_sharpe: observed,
        p_value: (at_or_above + 1) as f64 / (null.len() + 1) as f64,
        quantile_025: quantile(&null, 0.025),
        quantile_975: quantile(&null, 0.975),
        quantile_99: quantile(&null, 0.99),
        permutations,
        seed,
        null_sharpes: null,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::SecurityMonth;

    fn month(i: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2013, 1, 1).unwrap() + chrono::Months::new(i)
    }

    #[test]
    fn calendar_pairs() {
        let rows: Vec<SecurityMonth> = (0..6)
            .map(|i| SecurityMonth::from_prices(1, month(i), 10.0, 1.0, Some(0.0), None))
            .collect();
        let panel = PointInTimePanel::from_rows(rows, vec![]).unwrap();
        let cal = Calendar::new(&panel);
        assert_eq!(
            cal.pairs_within(month(0), month(3)),
            vec![
                (month(0), month(1)),
                (month(1), month(2)),
                (month(2), month(3))
            ]
        );
        assert_eq!(
            cal.realized_within(month(4), month(5)),
            vec![(month(3), month(4)), (month(4), month(5))]
        );
    }

    #[test]
    fn coverage_errors_name_the_phase() {
        let rows: Vec<SecurityMonth> = (0..6)
            .map(|i| SecurityMonth::from_prices(1, month(i), 10.0, 1.0, Some(0.0), None))
            .collect();
        let panel = PointInTimePanel::from_rows(rows, vec![]).unwrap();
        let spec = PhaseSpec::default_protocol()[2];
        let err = check_coverage(&panel, &spec).unwrap_err();
        assert!(matches!(
            err,
            BacktestError::MissingRange {
                phase: PhaseName::Test,
                ..
            }
        ));
        assert!(err.to_string().contains("test phase needs data"));
    }

    #[test]
    fn phase_validation() {
        let mut spec = PhaseSpec::default_protocol()[1];
        assert!(spec.validate().is_ok());
        spec.eval_start = spec.fit_end;
        assert!(spec.validate().is_err());
        assert!(PhaseSpec::default_protocol()[0].is_in_sample());
        assert!(!PhaseSpec::default_protocol()[2].is_in_sample());
    }

    #[test]
    fn turnover_counts_entries_and_exits() {
        let w = |ids: Vec<Permno>, w: Vec<f64>| PortfolioWeights {
            date: month(0),
            ids,
            w,
            neutrality_residual: 0.0,
            gross: 0.0,
            objective_value: 0.0,
            raw_objective_value: 0.0,
            lambda: 0.0,
            kkt_residual: 0.0,
            scale: 1.0,
            zero_portfolio: false,
            capped: false,
        };
        let mut h = BTreeMap::new();
        h.insert(month(0), w(vec![1, 2], vec![1.0, -1.0]));
        h.insert(month(1), w(vec![2, 3], vec![-1.0, 1.0]));
        assert_eq!(mean_turnover(&h), 2.0);
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.0);
        assert_eq!(quantile(&v, 0.125), 0.5);
        assert_eq!(quantile(&v, 1.0), 4.0);
    }
}
