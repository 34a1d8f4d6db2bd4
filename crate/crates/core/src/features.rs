//! Financial ratio features per security-month.
//!
//! Valuation ratios enter the model only in reciprocal form (earnings-to-price,
//! book-to-price). Any ratio whose inputs are missing, whose denominator is
//! zero, or whose result is not finite is emitted as missing.

use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::panel::{fmt_opt, Fundamental, PanelView, Permno, SecurityMonth};

/// Model feature columns, in canonical order.
pub const FEATURE_NAMES: [&str; 13] = [
    "ep_ratio",
    "bp_ratio",
    "ps_ratio",
    "enterprise_value",
    "ev_to_ebitda",
    "gross_margin",
    "operating_margin",
    "net_margin",
    "current_ratio",
    "debt_to_equity",
    "interest_coverage",
    "avg_sentiment",
    "ret_lag",
];

pub const N_FEATURES: usize = FEATURE_NAMES.len();

/// Division guarded against missing inputs, zero denominators and overflow.
pub fn guarded_ratio(num: Option<f64>, den: Option<f64>) -> Option<f64> {
    let (n, d) = (num?, den?);
    if d == 0.0 {
        return None;
    }
    let v = n / d;
    v.is_finite().then_some(v)
}

fn finite(v: Option<f64>) -> Option<f64> {
    v.filter(|x| x.is_finite())
}

fn enterprise_value(row: &SecurityMonth) -> Option<f64> {
    let f = &row.fundamentals;
    finite(Some(
        row.market_cap + f.get(Fundamental::Dltt)? + f.get(Fundamental::Dlc)?
            - f.get(Fundamental::Che)?,
    ))
}

fn shares(row: &SecurityMonth) -> Option<f64> {
    Some(row.shrout * 1000.0)
}

fn book_per_share(row: &SecurityMonth) -> Option<f64> {
    guarded_ratio(row.fundamentals.get(Fundamental::Ceq), shares(row))
}

fn sales_per_share(row: &SecurityMonth) -> Option<f64> {
    guarded_ratio(row.fundamentals.get(Fundamental::Revt), shares(row))
}

/// One security-month of features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub permno: Permno,
    pub date: NaiveDate,
    pub ep_ratio: Option<f64>,
    pub bp_ratio: Option<f64>,
    pub ps_ratio: Option<f64>,
    pub enterprise_value: Option<f64>,
    pub ev_to_ebitda: Option<f64>,
    pub gross_margin: Option<f64>,
    pub operating_margin: Option<f64>,
    pub net_margin: Option<f64>,
    pub current_ratio: Option<f64>,
    pub debt_to_equity: Option<f64>,
    pub interest_coverage: Option<f64>,
    pub avg_sentiment: Option<f64>,
    /// Return over the month ending at `date`, known at `date`.
    pub ret_lag: Option<f64>,
}

impl FeatureRow {
    pub fn from_row(row: &SecurityMonth) -> Self {
        let f = &row.fundamentals;
        let revt = f.get(Fundamental::Revt);
        let ev = enterprise_value(row);
        FeatureRow {
            permno: row.permno,
            date: row.date,
            ep_ratio: guarded_ratio(f.get(Fundamental::Epspx), Some(row.prc)),
            bp_ratio: guarded_ratio(book_per_share(row), Some(row.prc)),
            ps_ratio: guarded_ratio(Some(row.prc), sales_per_share(row)),
            enterprise_value: ev,
            ev_to_ebitda: guarded_ratio(ev, f.get(Fundamental::Ebitda)),
            gross_margin: guarded_ratio(f.get(Fundamental::Gp), revt),
            operating_margin: guarded_ratio(f.get(Fundamental::Oiadp), revt),
            net_margin: guarded_ratio(f.get(Fundamental::Ni), revt),
            current_ratio: guarded_ratio(f.get(Fundamental::Act), f.get(Fundamental::Lct)),
            debt_to_equity: guarded_ratio(f.get(Fundamental::Lt), f.get(Fundamental::Ceq)),
            interest_coverage: guarded_ratio(f.get(Fundamental::Ebitda), f.get(Fundamental::Xint)),
            avg_sentiment: finite(row.avg_sentiment),
            ret_lag: finite(row.ret),
        }
    }

    /// Feature values in [`FEATURE_NAMES`] order.
    pub fn values(&self) -> [Option<f64>; N_FEATURES] {
        [
            self.ep_ratio,
            self.bp_ratio,
            self.ps_ratio,
            self.enterprise_value,
            self.ev_to_ebitda,
            self.gross_margin,
            self.operating_margin,
            self.net_margin,
            self.current_ratio,
            self.debt_to_equity,
            self.interest_coverage,
            self.avg_sentiment,
            self.ret_lag,
        ]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        let k = FEATURE_NAMES.iter().position(|n| *n == name)?;
        self.values()[k]
    }
}

/// Features for every row visible in the view, ordered by `(permno, date)`.
pub fn compute_features(view: &PanelView<'_>) -> Vec<FeatureRow> {
    view.rows().map(FeatureRow::from_row).collect()
}

/// Features for one date's cross-section, ordered by permno.
pub fn cross_section_features(view: &PanelView<'_>, date: NaiveDate) -> Vec<FeatureRow> {
    view.cross_section(date).map(FeatureRow::from_row).collect()
}

pub fn write_features_csv<'a, W: Write>(
    rows: impl IntoIterator<Item = &'a FeatureRow>,
    out: W,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["permno", "date"];
    header.extend(FEATURE_NAMES);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.permno.to_string(), r.date.format("%Y-%m-%d").to_string()];
        rec.extend(r.values().into_iter().map(fmt_opt));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Direct-form ratio columns of the merged panel CSV (P/E and P/B appear here
/// for completeness; the model never uses them).
#[derive(Clone, Debug, PartialEq)]
pub struct TableRatios {
    pub pe_ratio: Option<f64>,
    pub pb_ratio: Option<f64>,
    pub ps_ratio: Option<f64>,
    pub enterprise_value: Option<f64>,
    pub ev_to_ebitda: Option<f64>,
    pub gross_margin: Option<f64>,
    pub operating_margin: Option<f64>,
    pub net_margin: Option<f64>,
    pub current_ratio: Option<f64>,
    pub debt_to_equity: Option<f64>,
    pub interest_coverage: Option<f64>,
}

impl TableRatios {
    pub fn from_row(row: &SecurityMonth) -> Self {
        let fr = FeatureRow::from_row(row);
        TableRatios {
            pe_ratio: guarded_ratio(Some(row.prc), row.fundamentals.get(Fundamental::Epspx)),
            pb_ratio: guarded_ratio(Some(row.prc), book_per_share(row)),
            ps_ratio: fr.ps_ratio,
            enterprise_value: fr.enterprise_value,
            ev_to_ebitda: fr.ev_to_ebitda,
            gross_margin: fr.gross_margin,
            operating_margin: fr.operating_margin,
            net_margin: fr.net_margin,
            current_ratio: fr.current_ratio,
            debt_to_equity: fr.debt_to_equity,
            interest_coverage: fr.interest_coverage,
        }
    }

    pub fn values(&self) -> [Option<f64>; 11] {
        [
            self.pe_ratio,
            self.pb_ratio,
            self.ps_ratio,
            self.enterprise_value,
            self.ev_to_ebitda,
            self.gross_margin,
            self.operating_margin,
            self.net_margin,
            self.current_ratio,
            self.debt_to_equity,
            self.interest_coverage,
        ]
    }
}
