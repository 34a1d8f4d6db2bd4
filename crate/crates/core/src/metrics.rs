//! Return-series statistics: Sharpe ratios, compounding, benchmark alignment.

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("Sharpe ratio needs at least 2 returns, got {0}")]
    InsufficientData(usize),

    #[error("Sharpe ratio is undefined: return series has zero standard deviation")]
    ZeroVolatility,

    #[error("portfolio and benchmark series share no months")]
    NoOverlap,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

pub const MONTHS_PER_YEAR: f64 = 12.0;

/// Mean and sample standard deviation, computed on values shifted by the
/// first element so a constant series yields an exact zero deviation.
fn mean_and_sample_std(r: &[f64]) -> Result<(f64, f64)> {
    if r.len() < 2 {
        return Err(MetricsError::InsufficientData(r.len()));
    }
    let n = r.len() as f64;
    let shift = r[0];
    let dm = r.iter().map(|x| x - shift).sum::<f64>() / n;
    let var = r.iter().map(|x| (x - shift - dm).powi(2)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    let scale = r.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if !(std > f64::EPSILON * scale) {
        return Err(MetricsError::ZeroVolatility);
    }
    Ok((shift + dm, std))
}

/// Monthly Sharpe ratio: mean over sample standard deviation, risk-free 0.
pub fn monthly_sharpe(monthly_returns: &[f64]) -> Result<f64> {
    let (m, s) = mean_and_sample_std(monthly_returns)?;
    Ok(m / s)
}

/// Annualized Sharpe ratio: the monthly ratio times sqrt(12).
pub fn compute_sharpe(monthly_returns: &[f64]) -> Result<f64> {
    Ok(monthly_sharpe(monthly_returns)? * MONTHS_PER_YEAR.sqrt())
}

/// Both Sharpe conventions plus the moments behind them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpeSummary {
    pub observations: usize,
    pub mean_monthly: f64,
    pub std_monthly: f64,
    pub sharpe_monthly: f64,
    pub sharpe_annualized: f64,
}

pub fn sharpe_summary(monthly_returns: &[f64]) -> Result<SharpeSummary> {
    let (m, s) = mean_and_sample_std(monthly_returns)?;
    Ok(SharpeSummary {
        observations: monthly_returns.len(),
        mean_monthly: m,
        std_monthly: s,
        sharpe_monthly: m / s,
        sharpe_annualized: m / s * MONTHS_PER_YEAR.sqrt(),
    })
}

/// Running compounded return `prod(1 + r) - 1`.
pub fn cumulative_returns(returns: &[f64]) -> Vec<f64> {
    let mut wealth = 1.0;
    returns
        .iter()
        .map(|r| {
            wealth *= 1.0 + r;
            wealth - 1.0
        })
        .collect()
}

pub fn total_return(returns: &[f64]) -> f64 {
    cumulative_returns(returns).last().copied().unwrap_or(0.0)
}

/// Portfolio and benchmark over their common months.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkComparison {
    /// Portfolio dates of the matched months.
    pub dates: Vec<NaiveDate>,
    pub portfolio: Vec<f64>,
    pub benchmark: Vec<f64>,
    pub portfolio_cumulative: Vec<f64>,
    pub benchmark_cumulative: Vec<f64>,
    /// Monthly portfolio minus benchmark return.
    pub excess: Vec<f64>,
}

/// Inner join on calendar month, then compounding of both legs.
pub fn compare_benchmark(
    portfolio: &BTreeMap<NaiveDate, f64>,
    benchmark: &BTreeMap<NaiveDate, f64>,
) -> Result<BenchmarkComparison> {
    let bench_by_month: BTreeMap<(i32, u32), f64> = benchmark
        .iter()
        .map(|(d, r)| ((d.year(), d.month()), *r))
        .collect();
    let mut dates = Vec::new();
    let mut p = Vec::new();
    let mut b = Vec::new();
    for (d, r) in portfolio {
        if let Some(br) = bench_by_month.get(&(d.year(), d.month())) {
            dates.push(*d);
            p.push(*r);
            b.push(*br);
        }
    }
    if dates.is_empty() {
        return Err(MetricsError::NoOverlap);
    }
    Ok(BenchmarkComparison {
        portfolio_cumulative: cumulative_returns(&p),
        benchmark_cumulative: cumulative_returns(&b),
        excess: p.iter().zip(&b).map(|(x, y)| x - y).collect(),
        dates,
        portfolio: p,
        benchmark: b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_example() {
        let s = compute_sharpe(&[0.02, 0.00, 0.04, -0.02, 0.01]).unwrap();
        // mean 0.01, sample variance 0.0005 -> monthly sqrt(0.2), annual sqrt(2.4)
        assert!((s - 2.4f64.sqrt()).abs() < 1e-12);
        assert!((s - 1.549).abs() < 1e-3);
    }

    #[test]
    fn zero_mean_and_degenerate_inputs() {
        assert_eq!(compute_sharpe(&[0.01, -0.01, 0.02, -0.02]).unwrap(), 0.0);
        assert_eq!(
            compute_sharpe(&[0.01, 0.01, 0.01]),
            Err(MetricsError::ZeroVolatility)
        );
        assert_eq!(
            compute_sharpe(&[0.01]),
            Err(MetricsError::InsufficientData(1))
        );
        assert_eq!(
            compute_sharpe(&[0.0; 12]),
            Err(MetricsError::ZeroVolatility)
        );
    }

    #[test]
    fn compounding_by_hand() {
        let mut p = BTreeMap::new();
        let mut b = BTreeMap::new();
        for (i, (x, y)) in [(0.01, 0.02), (-0.02, 0.01), (0.03, -0.01)]
            .into_iter()
            .enumerate()
        {
            p.insert(NaiveDate::from_ymd_opt(2023, i as u32 + 2, 1).unwrap(), x);
            b.insert(NaiveDate::from_ymd_opt(2023, i as u32 + 2, 28).unwrap(), y);
        }
        let c = compare_benchmark(&p, &b).unwrap();
        assert!((c.portfolio_cumulative[2] - (1.01 * 0.98 * 1.03 - 1.0)).abs() < 1e-15);
        assert!((c.benchmark_cumulative[2] - (1.02 * 1.01 * 0.99 - 1.0)).abs() < 1e-15);
        let same = compare_benchmark(&p, &p).unwrap();
        assert!(same.excess.iter().all(|e| *e == 0.0));
        assert_eq!(
            compare_benchmark(&p, &BTreeMap::new()),
            Err(MetricsError::NoOverlap)
        );
    }

    proptest! {
        #[test]
        fn sharpe_is_scale_invariant(r in proptest::collection::vec(-0.2f64..0.2, 3..40), c in 0.01f64..100.0) {
            if let Ok(s) = compute_sharpe(&r) {
                let scaled: Vec<f64> = r.iter().map(|x| c * x).collect();
                let t = compute_sharpe(&scaled).unwrap();
                prop_assert!((s - t).abs() <= 1e-9 * s.abs().max(1.0));
            }
        }
    }
}
