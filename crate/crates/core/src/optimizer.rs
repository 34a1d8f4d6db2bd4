//! Dollar-neutral mean-variance weights.
//!
//! Maximizes `w'mu - A w'Sigma w` subject to `sum(w) = 0`. The single
//! equality constraint gives a closed form:
//! `w = Sigma^-1 (mu - lambda 1) / (2A)` with
//! `lambda = 1'Sigma^-1 mu / 1'Sigma^-1 1`, computed with two Cholesky solves.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::panel::Permno;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimizerError {
    #[error("covariance matrix is not positive definite; regularize it before solving")]
    NotPositiveDefinite,

    #[error("a dollar-neutral portfolio needs at least 2 securities, got {0}")]
    DegenerateUniverse(usize),

    #[error("dimension mismatch: {context} expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid optimizer parameter: {0}")]
    InvalidParams(String),

    #[error("no price for security {0} with a nonzero weight")]
    MissingPrice(Permno),

    #[error("price for security {id} must be positive, got {price}")]
    InvalidPrice { id: Permno, price: f64 },

    #[error("capital must be positive, got {0}")]
    InvalidCapital(f64),
}

pub type Result<T> = std::result::Result<T, OptimizerError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerParams {
    pub risk_aversion: f64,
    /// Gross exposure per side as a fraction of capital.
    pub gross_target: f64,
    /// Optional per-name cap on |w| after normalization. Off by default.
    pub max_weight: Option<f64>,
}

impl Default for OptimizerParams {
    fn default() -> Self {
        OptimizerParams {
            risk_aversion: 2.0,
            gross_target: 1.0,
            max_weight: None,
        }
    }
}

impl OptimizerParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.risk_aversion > 0.0 && self.risk_aversion.is_finite()) {
            return Err(OptimizerError::InvalidParams(format!(
                "risk_aversion must be positive, got {}",
                self.risk_aversion
            )));
        }
        if !(self.gross_target > 0.0 && self.gross_target.is_finite()) {
            return Err(OptimizerError::InvalidParams(format!(
                "gross_target must be positive, got {}",
                self.gross_target
            )));
        }
        if let Some(c) = self.max_weight {
            if !(c > 0.0) {
                return Err(OptimizerError::InvalidParams(format!(
                    "max_weight must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// Weights for one rebalance date with their diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PortfolioWeights {
    pub date: NaiveDate,
    pub ids: Vec<Permno>,
    pub w: Vec<f64>,
    /// `|sum(w)|`.
    pub neutrality_residual: f64,
    /// `sum(|w|)`.
    pub gross: f64,
    /// `w'mu - A w'Sigma w` at the current scale.
    pub objective_value: f64,
    /// Objective of the unnormalized solution.
    pub raw_objective_value: f64,
    pub lambda: f64,
    /// `max |2A Sigma w - mu + lambda 1|` of the unnormalized solution.
    pub kkt_residual: f64,
    /// Factor applied by [`normalize_gross`] (1 for raw weights).
    pub scale: f64,
    pub zero_portfolio: bool,
    pub capped: bool,
}

impl PortfolioWeights {
    pub fn long_exposure(&self) -> f64 {
        self.w.iter().filter(|v| **v > 0.0).sum()
    }

    pub fn short_exposure(&self) -> f64 {
        -self.w.iter().filter(|v| **v < 0.0).sum::<f64>()
    }

    fn refresh(&mut self) {
        self.neutrality_residual = self.w.iter().sum::<f64>().abs();
        self.gross = self.w.iter().map(|v| v.abs()).sum();
    }
}

/// A factorized covariance matrix, reusable across expected-return vectors.
#[derive(Clone, Debug)]
pub struct DollarNeutralSolver {
    chol: Cholesky<f64, Dyn>,
    /// `Sigma^-1 1`.
    inv_ones: DVector<f64>,
    /// `1' Sigma^-1 1`.
    denom: f64,
}

impl DollarNeutralSolver {
    pub fn new(sigma: &DMatrix<f64>) -> Result<Self> {
        let n = sigma.nrows();
        if sigma.ncols() != n {
            return Err(OptimizerError::DimensionMismatch {
                context: "covariance columns",
                expected: n,
                actual: sigma.ncols(),
            });
        }
        if n < 2 {
            return Err(OptimizerError::DegenerateUniverse(n));
        }
        let chol = Cholesky::new(sigma.clone()).ok_or(OptimizerError::NotPositiveDefinite)?;
        let inv_ones = chol.solve(&DVector::from_element(n, 1.0));
        let denom = inv_ones.sum();
        if !(denom > 0.0 && denom.is_finite()) {
            return Err(OptimizerError::NotPositiveDefinite);
        }
        Ok(DollarNeutralSolver {
            chol,
            inv_ones,
            denom,
        })
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// `Sigma w`, evaluated as `L (L' w)` from the stored factor.
    pub fn sigma_times(&self, w: &DVector<f64>) -> DVector<f64> {
        let l = self.chol.l();
        &l * l.tr_mul(w)
    }

    /// Raw (unnormalized) optimal weights.
    pub fn solve(
        &self,
        date: NaiveDate,
        ids: &[Permno],
        mu: &[f64],
        params: &OptimizerParams,
    ) -> Result<PortfolioWeights> {
        params.validate()?;
        let n = self.dim();
        if mu.len() != n {
            return Err(OptimizerError::DimensionMismatch {
                context: "expected returns",
                expected: n,
                actual: mu.len(),
            });
        }
        if ids.len() != n {
            return Err(OptimizerError::DimensionMismatch {
                context: "security ids",
                expected: n,
                actual: ids.len(),
            });
        }
        let a = params.risk_aversion;

        // The solution depends on mu only up to a common shift, so remove one
        // first. Shifting by mu[0] before averaging makes a constant vector
        // center to exact zeros.
        let base = mu[0];
        let shifted: Vec<f64> = mu.iter().map(|m| m - base).collect();
        let offset = shifted.iter().sum::<f64>() / n as f64;
        let centered = DVector::from_iterator(n, shifted.iter().map(|m| m - offset));

        let inv_mu = self.chol.solve(&centered);
        let lambda_c = inv_mu.sum() / self.denom;
        let w = (inv_mu - &self.inv_ones * lambda_c) / (2.0 * a);
        let lambda = lambda_c + base + offset;

        let mu_v = DVector::from_column_slice(mu);
        let sigma_w = self.sigma_times(&w);
        let kkt = (&sigma_w * (2.0 * a) - &mu_v).add_scalar(lambda).amax();
        let objective = w.dot(&mu_v) - a * w.dot(&sigma_w);
        let zero = w.iter().all(|v| *v == 0.0);

        let mut out = PortfolioWeights {
            date,
            ids: ids.to_vec(),
            w: w.iter().copied().collect(),
            neutrality_residual: 0.0,
            gross: 0.0,
            objective_value: objective,
            raw_objective_value: objective,
            lambda,
            kkt_residual: kkt,
            scale: 1.0,
            zero_portfolio: zero,
            capped: false,
        };
        out.refresh();
        Ok(out)
    }

    /// `w'mu - A w'Sigma w` for arbitrary weights.
    pub fn objective(&self, w: &[f64], mu: &[f64], risk_aversion: f64) -> f64 {
        let w = DVector::from_column_slice(w);
        let mu = DVector::from_column_slice(mu);
        w.dot(&mu) - risk_aversion * w.dot(&self.sigma_times(&w))
    }
}

pub fn objective(sigma: &DMatrix<f64>, w: &[f64], mu: &[f64], risk_aversion: f64) -> f64 {
    let w = DVector::from_column_slice(w);
    let mu = DVector::from_column_slice(mu);
    w.dot(&mu) - risk_aversion * w.dot(&(sigma * &w))
}

/// One-shot solve: factorizes `sigma` and returns raw weights.
pub fn solve_dollar_neutral(
    date: NaiveDate,
    ids: &[Permno],
    mu: &[f64],
    sigma: &DMatrix<f64>,
    params: &OptimizerParams,
) -> Result<PortfolioWeights> {
    DollarNeutralSolver::new(sigma)?.solve(date, ids, mu, params)
}

/// Scales weights so `sum(|w|) = 2 * gross_target`, then applies the optional
/// cap. A zero portfolio is returned unchanged with its flag set.
pub fn normalize_gross(weights: &PortfolioWeights, params: &OptimizerParams) -> PortfolioWeights {
    let mut out = weights.clone();
    out.refresh();
    if out.gross == 0.0 {
        out.zero_portfolio = true;
        return out;
    }
    let factor = 2.0 * params.gross_target / out.gross;
    for v in out.w.iter_mut() {
        *v *= factor;
    }
    out.scale *= factor;
    if let Some(cap) = params.max_weight {
        out.capped = apply_cap(&mut out.w, cap);
    }
    out.refresh();
    // At the raw optimum 2A Sigma w = mu - lambda 1, so w'mu = 2 A w'Sigma w
    // and the raw objective R equals A w'Sigma w. Scaling by s gives
    // 2sR - s^2 R. Capped weights are re-evaluated by the caller.
    let r = weights.raw_objective_value;
    out.objective_value = 2.0 * out.scale * r - out.scale * out.scale * r;
    out
}

impl DollarNeutralSolver {
    /// Normalizes raw weights and evaluates the objective at the final scale.
    pub fn finalize(
        &self,
        raw: &PortfolioWeights,
        mu: &[f64],
        params: &OptimizerParams,
    ) -> PortfolioWeights {
        let mut out = normalize_gross(raw, params);
        out.objective_value = self.objective(&out.w, mu, params.risk_aversion);
        out
    }
}

/// Clips to `[-cap, cap]` and re-neutralizes by subtracting the mean, until
/// both hold. Returns whether anything changed.
fn apply_cap(w: &mut [f64], cap: f64) -> bool {
    let mut changed = false;
    for _ in 0..1000 {
        let mut clipped = false;
        for v in w.iter_mut() {
            if v.abs() > cap {
                *v = v.clamp(-cap, cap);
                clipped = true;
            }
        }
        let m = w.iter().sum::<f64>() / w.len() as f64;
        if !clipped && m.abs() <= 1e-15 {
            break;
        }
        changed = true;
        for v in w.iter_mut() {
            *v -= m;
        }
    }
    changed
}

/// Signed share counts implied by a weight vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Positions {
    pub ids: Vec<Permno>,
    pub shares: Vec<i64>,
    /// Long and short dollars before rounding (equal up to float error).
    pub long_dollars: f64,
    pub short_dollars: f64,
    /// Long minus short dollars after rounding to whole shares.
    pub rounded_imbalance: f64,
}

/// `shares_i = trunc(w_i * capital / price_i)`.
pub fn weights_to_positions(
    weights: &PortfolioWeights,
    prices: &BTreeMap<Permno, f64>,
    capital: f64,
) -> Result<Positions> {
    if !(capital > 0.0 && capital.is_finite()) {
        return Err(OptimizerError::InvalidCapital(capital));
    }
    let mut shares = Vec::with_capacity(weights.ids.len());
    let (mut long, mut short, mut imbalance) = (0.0, 0.0, 0.0);
    for (&id, &w) in weights.ids.iter().zip(&weights.w) {
        if w == 0.0 {
            shares.push(0);
            continue;
        }
        let price = *prices.get(&id).ok_or(OptimizerError::MissingPrice(id))?;
        if !(price > 0.0 && price.is_finite()) {
            return Err(OptimizerError::InvalidPrice { id, price });
        }
        let dollars = w * capital;
        if dollars > 0.0 {
            long += dollars;
        } else {
            short -= dollars;
        }
        let q = (dollars / price).trunc() as i64;
        imbalance += q as f64 * price;
        shares.push(q);
    }
    Ok(Positions {
        ids: weights.ids.clone(),
        shares,
        long_dollars: long,
        short_dollars: short,
        rounded_imbalance: imbalance,
    })
}
