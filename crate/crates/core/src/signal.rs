//! Expected returns and return covariance for one rebalance date.
//!
//! Expected returns come from a linear model of next-month return on the
//! standardized surviving features, fitted on the training window. The
//! covariance is a trailing sample covariance shrunk toward its own diagonal,
//! with a small ridge added only when it is not safely invertible.

use chrono::NaiveDate;
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::panel::{PanelView, Permno};
use crate::preprocess::FeatureMatrix;
use crate::stats;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SignalError {
    #[error("singular least-squares fit ({observations} observations, {features} features): use ridge > 0")]
    SingularFit {
        observations: usize,
        features: usize,
    },

    #[error("need at least {required} pooled observations for {features} features, got {actual}")]
    InsufficientObservations {
        required: usize,
        actual: usize,
        features: usize,
    },

    #[error("feature `{feature}` is not part of the fitted model")]
    Alignment { feature: String },

    #[error("training matrices disagree on feature names at {date}")]
    MixedFeatureSets { date: NaiveDate },

    #[error("dimension mismatch: {context} expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("covariance window must span at least 2 months, got {0}")]
    WindowTooShort(usize),

    #[error("no security has enough return history on {date}")]
    EmptyUniverse { date: NaiveDate },
}

pub type Result<T> = std::result::Result<T, SignalError>;

/// How expected returns are formed from features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MuModel {
    /// Ridge regression pooled over all training (date, stock) pairs.
    #[default]
    PooledRidge,
    /// Per-date ridge regressions, coefficients averaged over dates.
    FamaMacbeth,
    /// Coefficient per feature = pooled rank IC times return dispersion.
    RankIc,
}

impl std::str::FromStr for MuModel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pooled_ridge" => Ok(MuModel::PooledRidge),
            "fama_macbeth" => Ok(MuModel::FamaMacbeth),
            "rank_ic" => Ok(MuModel::RankIc),
            other => Err(format!(
                "unknown mu model `{other}` (pooled_ridge, fama_macbeth, rank_ic)"
            )),
        }
    }
}

impl std::fmt::Display for MuModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MuModel::PooledRidge => "pooled_ridge",
            MuModel::FamaMacbeth => "fama_macbeth",
            MuModel::RankIc => "rank_ic",
        })
    }
}

/// Fitted feature coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnModel {
    pub kind: MuModel,
    pub feature_names: Vec<String>,
    /// Decimal return per z-unit, aligned with `feature_names`.
    pub beta: Vec<f64>,
    /// Fitted but never used for scoring: a common shift of all expected
    /// returns does not change dollar-neutral weights.
    pub intercept: f64,
    pub observations: usize,
    pub ridge: f64,
}

fn pooled_design(
    matrices: &[FeatureMatrix],
    forward_returns: &[Vec<f64>],
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    if matrices.len() != forward_returns.len() {
        return Err(SignalError::DimensionMismatch {
            context: "forward return vectors",
            expected: matrices.len(),
            actual: forward_returns.len(),
        });
    }
    let k = matrices.first().map_or(0, |m| m.feature_names.len());
    let mut rows = 0;
    for (m, y) in matrices.iter().zip(forward_returns) {
        if m.feature_names != matrices[0].feature_names {
            return Err(SignalError::MixedFeatureSets { date: m.date });
        }
        if y.len() != m.values.nrows() {
            return Err(SignalError::DimensionMismatch {
                context: "forward returns per date",
                expected: m.values.nrows(),
                actual: y.len(),
            });
        }
        rows += y.len();
    }
    let mut x = DMatrix::zeros(rows, k);
    let mut ys = Vec::with_capacity(rows);
    let mut r = 0;
    for (m, y) in matrices.iter().zip(forward_returns) {
        x.view_mut((r, 0), (m.values.nrows(), k))
            .copy_from(&m.values);
        ys.extend_from_slice(y);
        r += y.len();
    }
    Ok((x, ys))
}

/// Ridge solve of `(X'X/N + ridge*I) b = X'y/N` on centered data. Returns
/// `(beta, intercept)`.
fn ridge_solve(x: &DMatrix<f64>, y: &[f64], ridge: f64) -> Result<(Vec<f64>, f64)> {
    let (n, k) = x.shape();
    if n < k && ridge == 0.0 {
        return Err(SignalError::SingularFit {
            observations: n,
            features: k,
        });
    }
    let nf = n as f64;
    let x_mean: Vec<f64> = x.column_iter().map(|c| c.sum() / nf).collect();
    let y_mean = y.iter().sum::<f64>() / nf;
    let mut xc = x.clone();
    for (j, mut col) in xc.column_iter_mut().enumerate() {
        col.add_scalar_mut(-x_mean[j]);
    }
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    let mut gram = xc.tr_mul(&xc) / nf;
    for j in 0..k {
        gram[(j, j)] += ridge;
    }
    let rhs = xc.tr_mul(&yc) / nf;
    let chol = Cholesky::new(gram).ok_or(SignalError::SingularFit {
        observations: n,
        features: k,
    })?;
    let beta = chol.solve(&rhs);
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(SignalError::SingularFit {
            observations: n,
            features: k,
        });
    }
    let intercept = y_mean - beta.iter().zip(&x_mean).map(|(b, m)| b * m).sum::<f64>();
    Ok((beta.iter().copied().collect(), intercept))
}

/// Pooled ridge regression of next-month return on standardized features.
///
/// `matrices[d]` and `forward_returns[d]` describe the same securities in the
/// same order. All matrices must share one feature list. The penalty is per
/// observation, so duplicating every row leaves the fit unchanged.
pub fn fit_return_model(
    matrices: &[FeatureMatrix],
    forward_returns: &[Vec<f64>],
    ridge: f64,
) -> Result<ReturnModel> {
    fit_return_model_with(MuModel::PooledRidge, matrices, forward_returns, ridge)
}

pub fn fit_return_model_with(
    kind: MuModel,
    matrices: &[FeatureMatrix],
    forward_returns: &[Vec<f64>],
    ridge: f64,
) -> Result<ReturnModel> {
    let (x, y) = pooled_design(matrices, forward_returns)?;
    let (n, k) = x.shape();
    let feature_names = matrices
        .first()
        .map(|m| m.feature_names.clone())
        .unwrap_or_default();
    if n < k && ridge == 0.0 {
        return Err(SignalError::SingularFit {
            observations: n,
            features: k,
        });
    }
    if n < 10 * k || n == 0 {
        return Err(SignalError::InsufficientObservations {
            required: (10 * k).max(1),
            actual: n,
            features: k,
        });
    }

    let (beta, intercept) = match kind {
        MuModel::PooledRidge => ridge_solve(&x, &y, ridge)?,
        MuModel::FamaMacbeth => {
            let mut sum = vec![0.0; k];
            let mut icpt = 0.0;
            let mut used = 0usize;
            for (m, ys) in matrices.iter().zip(forward_returns) {
                if ys.len() < k + 2 {
                    continue;
                }
                if let Ok((b, c)) = ridge_solve(&m.values, ys, ridge) {
                    for (s, v) in sum.iter_mut().zip(b) {
                        *s += v;
                    }
                    icpt += c;
                    used += 1;
                }
            }
            if used == 0 {
                return Err(SignalError::SingularFit {
                    observations: n,
                    features: k,
                });
            }
            (
                sum.into_iter().map(|s| s / used as f64).collect(),
                icpt / used as f64,
            )
        }
        MuModel::RankIc => {
            let spread = stats::sample_std(&y).unwrap_or(0.0);
            let beta = (0..k)
                .map(|j| {
                    let col: Vec<f64> = x.column(j).iter().copied().collect();
                    stats::spearman(&col, &y).unwrap_or(0.0) * spread
                })
                .collect();
            (beta, stats::mean(&y).unwrap_or(0.0))
        }
    };

    Ok(ReturnModel {
        kind,
        feature_names,
        beta,
        intercept,
        observations: n,
        ridge,
    })
}

/// `mu_i = x_i . beta`, intercept excluded. Model features absent from the
/// matrix (degenerate on this date) contribute zero; matrix features unknown
/// to the model are an alignment error.
pub fn score_mu(matrix: &FeatureMatrix, model: &ReturnModel) -> Result<Vec<f64>> {
    let mut coef = Vec::with_capacity(matrix.feature_names.len());
    for name in &matrix.feature_names {
        let k = model
            .feature_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| SignalError::Alignment {
                feature: name.clone(),
            })?;
        coef.push(model.beta[k]);
    }
    Ok((0..matrix.values.nrows())
        .map(|i| {
            matrix
                .values
                .row(i)
                .iter()
                .zip(&coef)
                .map(|(x, b)| x * b)
                .sum()
        })
        .collect())
}

/// Covariance estimation settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaParams {
    pub window_months: usize,
    /// Weight on the diagonal target, in `[0, 1]`.
    pub shrinkage: f64,
    pub min_observations: usize,
    pub ridge_eps: f64,
    pub max_condition: f64,
}

impl Default for SigmaParams {
    fn default() -> Self {
        SigmaParams {
            window_months: 36,
            shrinkage: 0.1,
            min_observations: 12,
            ridge_eps: 1e-6,
            max_condition: 1e8,
        }
    }
}

impl SigmaParams {
    fn required_observations(&self) -> usize {
        self.min_observations.min(self.window_months)
    }
}

/// Covariance estimate and its diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaEstimate {
    pub date: NaiveDate,
    /// Securities with enough history, in input order.
    pub ids: Vec<Permno>,
    pub excluded: Vec<Permno>,
    pub sigma: DMatrix<f64>,
    pub window_dates: Vec<NaiveDate>,
    pub shrinkage: f64,
    /// Amount added to the diagonal by the ridge floor (0 when not needed).
    pub ridge_added: f64,
    pub min_eigenvalue: f64,
    pub condition_number: f64,
}

/// Return histories over the trailing window, one vector per security, with
/// the securities that pass the history requirement.
fn window_returns(
    view: &PanelView<'_>,
    ids: &[Permno],
    params: &SigmaParams,
) -> Result<(Vec<NaiveDate>, Vec<Permno>, Vec<Permno>, Vec<Vec<f64>>)> {
    if params.window_months < 2 {
        return Err(SignalError::WindowTooShort(params.window_months));
    }
    let dates = view.trailing_dates(params.window_months);
    let need = params.required_observations().max(2);
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    let mut series = Vec::new();
    for &id in ids {
        let raw: Vec<Option<f64>> = dates
            .iter()
            .map(|&d| {
                view.get(id, d)
                    .and_then(|r| r.ret)
                    .filter(|r| r.is_finite())
            })
            .collect();
        let observed: Vec<f64> = raw.iter().flatten().copied().collect();
        if observed.len() < need {
            excluded.push(id);
            continue;
        }
        let m = stats::mean(&observed).expect("non-empty");
        series.push(raw.iter().map(|v| v.unwrap_or(m)).collect());
        kept.push(id);
    }
    Ok((dates, kept, excluded, series))
}

/// Securities among `ids` with at least the required number of monthly
/// returns in the trailing window ending at the view's cutoff.
pub fn history_eligible(
    view: &PanelView<'_>,
    ids: &[Permno],
    params: &SigmaParams,
) -> Result<Vec<Permno>> {
    let (_, kept, _, _) = window_returns(view, ids, params)?;
    Ok(kept)
}

/// Trailing sample covariance (divisor `T - 1`) of monthly total returns,
/// shrunk toward its diagonal: `(1 - s) S + s diag(S)`. A ridge
/// `eps * trace(S)/n * I` is added when the result is not positive definite
/// or its condition number exceeds `max_condition`.
pub fn estimate_sigma(
    view: &PanelView<'_>,
    ids: &[Permno],
    params: &SigmaParams,
) -> Result<SigmaEstimate> {
    let date = view.cutoff();
    let (window_dates, kept, excluded, series) = window_returns(view, ids, params)?;
    if kept.is_empty() || window_dates.len() < 2 {
        return Err(SignalError::EmptyUniverse { date });
    }
    let s = sample_covariance(&series);
    let (sigma, ridge_added, min_eig, cond) = shrink_and_floor(&s, params);
    Ok(SigmaEstimate {
        date,
        ids: kept,
        excluded,
        sigma,
        window_dates,
        shrinkage: params.shrinkage,
        ridge_added,
        min_eigenvalue: min_eig,
        condition_number: cond,
    })
}

/// Sample covariance of equally long series (one per asset).
pub fn sample_covariance(series: &[Vec<f64>]) -> DMatrix<f64> {
    let n = series.len();
    let t = series.first().map_or(0, Vec::len);
    let mut centered = DMatrix::zeros(t, n);
    for (j, s) in series.iter().enumerate() {
        // Shift by the first value before averaging so a constant series
        // centers to exact zeros.
        let shift = s.first().copied().unwrap_or(0.0);
        let m = s.iter().map(|v| v - shift).sum::<f64>() / t as f64;
        for (i, v) in s.iter().enumerate() {
            centered[(i, j)] = (v - shift) - m;
        }
    }
    let raw = centered.tr_mul(&centered) / (t as f64 - 1.0);
    // Mirror the upper triangle so the result is exactly symmetric.
    DMatrix::from_fn(n, n, |i, j| if i <= j { raw[(i, j)] } else { raw[(j, i)] })
}

/// Shrinks off-diagonal entries by `(1 - s)` (the diagonal is untouched) and
/// applies the conditional ridge floor. Returns
/// `(sigma, ridge_added, min_eigenvalue, condition_number)`.
pub fn shrink_and_floor(s: &DMatrix<f64>, params: &SigmaParams) -> (DMatrix<f64>, f64, f64, f64) {
    let n = s.nrows();
    let keep = 1.0 - params.shrinkage;
    let mut sigma = DMatrix::from_fn(
        n,
        n,
        |i, j| if i == j { s[(i, i)] } else { keep * s[(i, j)] },
    );
    let (mut min_eig, mut max_eig) = eigen_range(&sigma);
    let mut ridge_added = 0.0;
    if min_eig <= 0.0 || max_eig / min_eig > params.max_condition {
        let avg_var = s.trace() / n as f64;
        let scale = if avg_var > 0.0 { avg_var } else { 1.0 };
        ridge_added = params.ridge_eps * scale;
        for i in 0..n {
            sigma[(i, i)] += ridge_added;
        }
        (min_eig, max_eig) = eigen_range(&sigma);
    }
    (sigma, ridge_added, min_eig, max_eig / min_eig)
}

fn eigen_range(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = m.clone().symmetric_eigenvalues();
    let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Everything the optimizer needs for one rebalance date.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalEstimate {
    pub date: NaiveDate,
    pub ids: Vec<Permno>,
    pub mu: Vec<f64>,
    pub sigma: DMatrix<f64>,
    pub feature_names: Vec<String>,
    pub beta: Vec<f64>,
    pub condition_number: f64,
    pub shrinkage: f64,
    pub ridge_added: f64,
    pub observations: usize,
}

impl SignalEstimate {
    pub fn new(mu: Vec<f64>, sigma: &SigmaEstimate, model: &ReturnModel) -> Result<Self> {
        if mu.len() != sigma.ids.len() {
            return Err(SignalError::DimensionMismatch {
                context: "expected returns",
                expected: sigma.ids.len(),
                actual: mu.len(),
            });
        }
        Ok(SignalEstimate {
            date: sigma.date,
            ids: sigma.ids.clone(),
            mu,
            sigma: sigma.sigma.clone(),
            feature_names: model.feature_names.clone(),
            beta: model.beta.clone(),
            condition_number: sigma.condition_number,
            shrinkage: sigma.shrinkage,
            ridge_added: sigma.ridge_added,
            observations: sigma.window_dates.len(),
        })
    }

    /// `permno,mu` rows in universe order.
    pub fn write_mu_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["permno", "mu"])?;
        for (id, m) in self.ids.iter().zip(&self.mu) {
            w.write_record([id.to_string(), m.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Square covariance matrix with permno row and column labels.
    pub fn write_sigma_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["permno".to_string()];
        header.extend(self.ids.iter().map(|id| id.to_string()));
        w.write_record(&header)?;
        for (i, id) in self.ids.iter().enumerate() {
            let mut rec = vec![id.to_string()];
            rec.extend(self.sigma.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{PointInTimePanel, SecurityMonth};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn date(i: usize) -> NaiveDate {
        NaiveDate::from_ymd_opt(2015, 1, 1).unwrap() + chrono::Months::new(i as u32)
    }

    fn matrix(names: &[&str], values: DMatrix<f64>) -> FeatureMatrix {
        FeatureMatrix {
            date: date(0),
            ids: (0..values.nrows() as i64).collect(),
            feature_names: names.iter().map(|s| s.to_string()).collect(),
            values,
            dropped_features: vec![],
        }
    }

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, k: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, k, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn exact_linear_relation_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mats: Vec<FeatureMatrix> = (0..4)
            .map(|_| matrix(&["a", "b", "c"], random_matrix(&mut rng, 30, 3)))
            .collect();
        let ys: Vec<Vec<f64>> = mats
            .iter()
            .map(|m| m.values.column(0).iter().map(|x| 0.01 * x).collect())
            .collect();
        let model = fit_return_model(&mats, &ys, 0.0).unwrap();
        assert!((model.beta[0] - 0.01).abs() < 1e-10);
        assert!(model.beta[1].abs() < 1e-10 && model.beta[2].abs() < 1e-10);
    }

    #[test]
    fn zero_target_gives_zero_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mats = vec![matrix(&["a", "b"], random_matrix(&mut rng, 40, 2))];
        let model = fit_return_model(&mats, &[vec![0.0; 40]], 1e-3).unwrap();
        assert!(model.beta.iter().all(|b| *b == 0.0));
    }

    /// Normal equations solved through an explicit inverse.
    fn normal_equations_oracle(x: &DMatrix<f64>, y: &[f64], ridge: f64) -> Vec<f64> {
        let n = x.nrows() as f64;
        let ones = DMatrix::from_element(x.nrows(), 1, 1.0);
        let xm = (ones.transpose() * x) / n;
        let xc = x - &ones * &xm;
        let ym = y.iter().sum::<f64>() / n;
        let yc = DMatrix::from_iterator(x.nrows(), 1, y.iter().map(|v| v - ym));
        let a = xc.transpose() * &xc / n + DMatrix::identity(x.ncols(), x.ncols()) * ridge;
        let inv = a.try_inverse().unwrap();
        (inv * xc.transpose() * yc / n).iter().copied().collect()
    }

    #[test]
    fn duplicating_rows_leaves_beta_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 40, 3);
        let y: Vec<f64> = (0..40)
            .map(|i| 0.02 * x[(i, 0)] - 0.01 * x[(i, 2)] + 0.005 * (rng.random::<f64>() - 0.5))
            .collect();
        let ridge = 1e-3;
        let once =
            fit_return_model(&[matrix(&["a", "b", "c"], x.clone())], &[y.clone()], ridge).unwrap();
        let twice = fit_return_model(
            &[
                matrix(&["a", "b", "c"], x.clone()),
                matrix(&["a", "b", "c"], x.clone()),
            ],
            &[y.clone(), y.clone()],
            ridge,
        )
        .unwrap();
        let oracle = normal_equations_oracle(&x, &y, ridge);
        for k in 0..3 {
            assert!((once.beta[k] - oracle[k]).abs() < 1e-12);
            assert!((twice.beta[k] - oracle[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn underdetermined_without_ridge_is_singular() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mats = vec![matrix(&["a", "b", "c"], random_matrix(&mut rng, 2, 3))];
        assert!(matches!(
            fit_return_model(&mats, &[vec![0.1, 0.2]], 0.0),
            Err(SignalError::SingularFit { .. })
        ));
        assert!(matches!(
            fit_return_model(&mats, &[vec![0.1, 0.2]], 1e-3),
            Err(SignalError::InsufficientObservations { .. })
        ));
    }

    #[test]
    fn alternative_models_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mats: Vec<FeatureMatrix> = (0..6)
            .map(|_| matrix(&["a", "b"], random_matrix(&mut rng, 30, 2)))
            .collect();
        let ys: Vec<Vec<f64>> = mats
            .iter()
            .map(|m| m.values.column(1).iter().map(|x| 0.03 * x).collect())
            .collect();
        let fm = fit_return_model_with(MuModel::FamaMacbeth, &mats, &ys, 0.0).unwrap();
        assert!((fm.beta[1] - 0.03).abs() < 1e-10);
        let ric = fit_return_model_with(MuModel::RankIc, &mats, &ys, 0.0).unwrap();
        assert!(ric.beta[1] > 0.0 && ric.beta[1].abs() > ric.beta[0].abs());
    }

    fn model(names: &[&str], beta: &[f64]) -> ReturnModel {
        ReturnModel {
            kind: MuModel::PooledRidge,
            feature_names: names.iter().map(|s| s.to_string()).collect(),
            beta: beta.to_vec(),
            intercept: 0.5,
            observations: 0,
            ridge: 0.0,
        }
    }

    #[test]
    fn scoring_basics() {
        let m = matrix(&["a"], DMatrix::from_column_slice(2, 1, &[2.0, -1.0]));
        assert_eq!(
            score_mu(&m, &model(&["a"], &[0.0])).unwrap(),
            vec![0.0, 0.0]
        );
        assert_eq!(
            score_mu(&m, &model(&["a"], &[0.01])).unwrap(),
            vec![0.02, -0.01]
        );
        assert!(matches!(
            score_mu(&m, &model(&["b"], &[0.01])),
            Err(SignalError::Alignment { .. })
        ));
        // model feature missing from the matrix contributes nothing
        assert_eq!(
            score_mu(&m, &model(&["z", "a"], &[5.0, 0.01])).unwrap(),
            vec![0.02, -0.01]
        );
    }

    #[test]
    fn scoring_permutes_with_rows() {
        let m = matrix(
            &["a", "b"],
            DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -0.5, 0.3, 0.0, -1.0]),
        );
        let p = matrix(
            &["a", "b"],
            DMatrix::from_row_slice(3, 2, &[0.0, -1.0, 1.0, 2.0, -0.5, 0.3]),
        );
        let md = model(&["a", "b"], &[0.01, -0.02]);
        let a = score_mu(&m, &md).unwrap();
        let b = score_mu(&p, &md).unwrap();
        assert_eq!(b, vec![a[2], a[0], a[1]]);
    }

    proptest! {
        #[test]
        fn scoring_is_linear(xs in proptest::collection::vec(-3.0f64..3.0, 8), ys in proptest::collection::vec(-3.0f64..3.0, 8), a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let md = model(&["p", "q"], &[0.013, -0.007]);
            let mx = matrix(&["p", "q"], DMatrix::from_row_slice(4, 2, &xs));
            let my = matrix(&["p", "q"], DMatrix::from_row_slice(4, 2, &ys));
            let mz = matrix(&["p", "q"], DMatrix::from_row_slice(4, 2, &xs) * a + DMatrix::from_row_slice(4, 2, &ys) * b);
            let sx = score_mu(&mx, &md).unwrap();
            let sy = score_mu(&my, &md).unwrap();
            let sz = score_mu(&mz, &md).unwrap();
            for i in 0..4 {
                prop_assert!((sz[i] - (a * sx[i] + b * sy[i])).abs() < 1e-14);
            }
        }
    }

    fn returns_panel(series: &[Vec<Option<f64>>]) -> PointInTimePanel {
        let mut rows = Vec::new();
        for (j, s) in series.iter().enumerate() {
            for (i, r) in s.iter().enumerate() {
                rows.push(SecurityMonth::from_prices(
                    j as i64 + 1,
                    date(i),
                    10.0,
                    1e5,
                    *r,
                    *r,
                ));
            }
        }
        PointInTimePanel::from_rows(rows, vec![]).unwrap()
    }

    /// Two-pass covariance written out element by element.
    fn two_pass_cov(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum::<f64>()
            / (n - 1.0)
    }

    #[test]
    fn covariance_matches_two_pass_oracle() {
        let s = [
            vec![0.01, -0.02, 0.03, 0.00, 0.015, -0.005],
            vec![0.02, 0.01, -0.01, 0.04, -0.03, 0.00],
            vec![-0.01, 0.00, 0.02, 0.01, 0.005, 0.03],
        ];
        let panel = returns_panel(
            &s.iter()
                .map(|v| v.iter().map(|x| Some(*x)).collect())
                .collect::<Vec<_>>(),
        );
        let params = SigmaParams {
            shrinkage: 0.0,
            min_observations: 6,
            ..Default::default()
        };
        let est = estimate_sigma(&panel.as_of(date(5)), &[1, 2, 3], &params).unwrap();
        assert_eq!(est.ridge_added, 0.0);
        for i in 0..3 {
            for j in 0..3 {
                assert!((est.sigma[(i, j)] - two_pass_cov(&s[i], &s[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_returns_get_a_positive_ridge() {
        let panel = returns_panel(&vec![vec![Some(0.01); 14]; 3]);
        let est =
            estimate_sigma(&panel.as_of(date(13)), &[1, 2, 3], &SigmaParams::default()).unwrap();
        assert!(est.ridge_added > 0.0, "{est:?}");
        assert!(est.min_eigenvalue > 0.0);
        assert!(Cholesky::new(est.sigma.clone()).is_some());
    }

    #[test]
    fn short_history_is_excluded_and_empty_universe_errors() {
        let mut short = vec![None; 14];
        for v in short.iter_mut().skip(10) {
            *v = Some(0.01);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let full: Vec<Option<f64>> = (0..14).map(|_| Some(rng.random::<f64>() * 0.1)).collect();
        let panel = returns_panel(&[full.clone(), short, full]);
        let est =
            estimate_sigma(&panel.as_of(date(13)), &[1, 2, 3], &SigmaParams::default()).unwrap();
        assert_eq!(est.ids, vec![1, 3]);
        assert_eq!(est.excluded, vec![2]);
        assert!(matches!(
            estimate_sigma(&panel.as_of(date(13)), &[2], &SigmaParams::default()),
            Err(SignalError::EmptyUniverse { .. })
        ));
    }

    #[test]
    fn shrinkage_keeps_diagonal_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let series: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..8).map(|_| rng.random::<f64>() * 0.1 - 0.05).collect())
            .collect();
        let s = sample_covariance(&series);
        let (sigma, ridge, min_eig, _) = shrink_and_floor(&s, &SigmaParams::default());
        // 8 observations of 20 assets: S is singular, shrinkage alone restores PD
        assert!(min_eig > 0.0);
        if ridge == 0.0 {
            for i in 0..20 {
                assert_eq!(sigma[(i, i)], s[(i, i)]);
            }
        }
        assert_eq!(sigma, sigma.transpose());
    }

    #[test]
    fn future_rows_do_not_change_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut series: Vec<Vec<Option<f64>>> = (0..4)
            .map(|_| (0..20).map(|_| Some(rng.random::<f64>() * 0.1)).collect())
            .collect();
        let a = estimate_sigma(
            &returns_panel(&series).as_of(date(15)),
            &[1, 2, 3, 4],
            &SigmaParams::default(),
        )
        .unwrap();
        for s in series.iter_mut() {
            for v in s.iter_mut().skip(16) {
                *v = Some(rng.random::<f64>());
            }
        }
        let b = estimate_sigma(
            &returns_panel(&series).as_of(date(15)),
            &[1, 2, 3, 4],
            &SigmaParams::default(),
        )
        .unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }
}
