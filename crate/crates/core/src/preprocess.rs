//! Cross-sectional standardization and multicollinearity pruning.
//!
//! Each rebalance date's cross-section is median-imputed, z-scored with the
//! population standard deviation and clipped to `[-z_clip, z_clip]`. Feature
//! selection runs once per fit window: greedy VIF elimination first, then one
//! representative per group of highly correlated features.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::NaiveDate;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::features::FeatureRow;
use crate::panel::Permno;
use crate::stats;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PreprocessError {
    #[error("every feature is degenerate on {date}")]
    AllDegenerate { date: NaiveDate },

    #[error("VIF pruning needs at least {required} rows for {features} features, got {rows}")]
    TooFewRows {
        rows: usize,
        features: usize,
        required: usize,
    },

    #[error("dimension mismatch: {context} expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
}

pub type Result<T> = std::result::Result<T, PreprocessError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropReason {
    Vif,
    Correlation,
    Degenerate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroppedFeature {
    pub name: String,
    pub reason: DropReason,
}

/// Thresholds for the preprocessing stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessParams {
    pub z_clip: f64,
    pub vif_threshold: f64,
    pub corr_threshold: f64,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        PreprocessParams {
            z_clip: 3.0,
            vif_threshold: 10.0,
            corr_threshold: 0.8,
        }
    }
}

/// One date's raw feature values, row per security.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCrossSection {
    pub date: NaiveDate,
    pub ids: Vec<Permno>,
    pub feature_names: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl RawCrossSection {
    /// Selects `names` from feature rows, keeping the row order.
    pub fn from_rows(date: NaiveDate, rows: &[FeatureRow], names: &[&str]) -> Self {
        RawCrossSection {
            date,
            ids: rows.iter().map(|r| r.permno).collect(),
            feature_names: names.iter().map(|s| s.to_string()).collect(),
            values: rows
                .iter()
                .map(|r| names.iter().map(|n| r.get(n)).collect())
                .collect(),
        }
    }

    fn column(&self, k: usize) -> Vec<Option<f64>> {
        self.values.iter().map(|row| row[k]).collect()
    }
}

/// Standardized, clipped cross-section of the surviving features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub date: NaiveDate,
    pub ids: Vec<Permno>,
    pub feature_names: Vec<String>,
    /// `ids.len() x feature_names.len()`, z-units.
    pub values: DMatrix<f64>,
    pub dropped_features: Vec<DroppedFeature>,
}

/// Median-imputes, z-scores and clips one column. Returns `None` when the
/// column is degenerate (fewer than two observed values or zero spread).
pub fn standardize_column(raw: &[Option<f64>], z_clip: f64) -> Option<Vec<f64>> {
    let observed: Vec<f64> = raw.iter().flatten().copied().collect();
    if observed.len() < 2 {
        return None;
    }
    let med = stats::median(&observed)?;
    let filled: Vec<f64> = raw.iter().map(|v| v.unwrap_or(med)).collect();
    let (lo, hi) = filled
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    if lo == hi {
        return None;
    }
    let mean = stats::mean(&filled)?;
    let sd = stats::population_std(&filled)?;
    if !(sd > 0.0) || !sd.is_finite() {
        return None;
    }
    Some(
        filled
            .iter()
            .map(|x| ((x - mean) / sd).clamp(-z_clip, z_clip))
            .collect(),
    )
}

/// Standardizes every column of a cross-section independently; degenerate
/// columns come back as `None`.
pub fn standardize_columns(raw: &RawCrossSection, z_clip: f64) -> Vec<Option<Vec<f64>>> {
    (0..raw.feature_names.len())
        .map(|k| standardize_column(&raw.column(k), z_clip))
        .collect()
}

/// Builds the model-ready matrix for one date, dropping degenerate features.
pub fn standardize_and_clip(raw: &RawCrossSection, z_clip: f64) -> Result<FeatureMatrix> {
    let cols = standardize_columns(raw, z_clip);
    let mut names = Vec::new();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (name, col) in raw.feature_names.iter().zip(cols) {
        match col {
            Some(c) => {
                names.push(name.clone());
                kept.push(c);
            }
            None => dropped.push(DroppedFeature {
                name: name.clone(),
                reason: DropReason::Degenerate,
            }),
        }
    }
    if kept.is_empty() {
        return Err(PreprocessError::AllDegenerate { date: raw.date });
    }
    let n = raw.ids.len();
    let values = DMatrix::from_fn(n, kept.len(), |i, k| kept[k][i]);
    Ok(FeatureMatrix {
        date: raw.date,
        ids: raw.ids.clone(),
        feature_names: names,
        values,
        dropped_features: dropped,
    })
}

mod inf_as_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad VIF value {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VifEntry {
    pub feature: String,
    #[serde(with = "inf_as_string")]
    pub vif: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationGroup {
    pub members: Vec<String>,
    pub representative: String,
    /// |Spearman correlation| of each member with next-month returns.
    pub rank_ic: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    /// Final VIF of each surviving feature.
    pub vif_table: Vec<VifEntry>,
    /// Features removed by VIF pruning, with the VIF that triggered removal.
    pub elimination_order: Vec<VifEntry>,
    pub correlation_groups: Vec<CorrelationGroup>,
    pub dropped_features: Vec<DroppedFeature>,
    pub surviving_features: Vec<String>,
    /// Largest |Pearson correlation| between surviving features.
    pub max_abs_correlation: f64,
    pub training_rows: usize,
    /// Stages in the order they ran.
    pub stage_order: Vec<String>,
}

/// Column-centered Gram matrix.
fn centered_gram(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = x.clone();
    for mut col in c.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    c.transpose() * &c
}

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix.
fn pinv_symmetric(g: &DMatrix<f64>) -> DMatrix<f64> {
    let n = g.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = SymmetricEigen::new(g.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let tol = max * 1e-12;
    let mut inv_d = DMatrix::zeros(n, n);
    for i in 0..n {
        let l = eig.eigenvalues[i];
        if l > tol {
            inv_d[(i, i)] = 1.0 / l;
        }
    }
    &eig.eigenvectors * inv_d * eig.eigenvectors.transpose()
}

/// VIF of each active column of `gram`, regressing it on the other active
/// columns (with intercept, via the centered Gram matrix).
fn vifs_from_gram(gram: &DMatrix<f64>, active: &[usize]) -> Vec<f64> {
    active
        .iter()
        .map(|&j| {
            let sst = gram[(j, j)];
            let others: Vec<usize> = active.iter().copied().filter(|&k| k != j).collect();
            if others.is_empty() {
                return 1.0;
            }
            let m = others.len();
            let g_oo = DMatrix::from_fn(m, m, |a, b| gram[(others[a], others[b])]);
            let g_oj = DMatrix::from_fn(m, 1, |a, _| gram[(others[a], j)]);
            let b = pinv_symmetric(&g_oo) * &g_oj;
            let explained = (g_oj.transpose() * b)[(0, 0)];
            let r2 = (explained / sst).clamp(0.0, 1.0);
            if r2 >= 1.0 - 1e-12 {
                f64::INFINITY
            } else {
                1.0 / (1.0 - r2)
            }
        })
        .collect()
}

/// VIF for every column of `x`.
pub fn compute_vifs(x: &DMatrix<f64>) -> Vec<f64> {
    let gram = centered_gram(x);
    let active: Vec<usize> = (0..x.ncols()).collect();
    vifs_from_gram(&gram, &active)
}

/// Greedy VIF elimination: repeatedly drops the single feature with the
/// largest VIF while it exceeds `threshold`. Ties go to the later column.
/// Zero-variance columns are dropped up front as degenerate.
pub fn vif_prune(
    x: &DMatrix<f64>,
    names: &[String],
    threshold: f64,
) -> Result<(Vec<String>, PreprocessReport)> {
    if names.len() != x.ncols() {
        return Err(PreprocessError::DimensionMismatch {
            context: "feature names",
            expected: x.ncols(),
            actual: names.len(),
        });
    }
    if x.nrows() < x.ncols() + 1 {
        return Err(PreprocessError::TooFewRows {
            rows: x.nrows(),
            features: x.ncols(),
            required: x.ncols() + 1,
        });
    }
    let gram = centered_gram(x);
    let mut report = PreprocessReport {
        training_rows: x.nrows(),
        ..Default::default()
    };
    let mut active: Vec<usize> = Vec::new();
    for j in 0..x.ncols() {
        if gram[(j, j)] > 0.0 {
            active.push(j);
        } else {
            report.dropped_features.push(DroppedFeature {
                name: names[j].clone(),
                reason: DropReason::Degenerate,
            });
        }
    }

    loop {
        let vifs = vifs_from_gram(&gram, &active);
        let mut worst: Option<(usize, f64)> = None;
        for (pos, &v) in vifs.iter().enumerate() {
            if worst.is_none_or(|(_, w)| v >= w) {
                worst = Some((pos, v));
            }
        }
        match worst {
            Some((pos, v)) if v > threshold => {
                let j = active.remove(pos);
                log::debug!("VIF pruning removes {} (VIF {v})", names[j]);
                report.elimination_order.push(VifEntry {
                    feature: names[j].clone(),
                    vif: v,
                });
                report.dropped_features.push(DroppedFeature {
                    name: names[j].clone(),
                    reason: DropReason::Vif,
                });
            }
            _ => {
                report.vif_table = active
                    .iter()
                    .zip(vifs)
                    .map(|(&j, vif)| VifEntry {
                        feature: names[j].clone(),
                        vif,
                    })
                    .collect();
                break;
            }
        }
    }
    report.stage_order.push("vif".into());
    let survivors = active.iter().map(|&j| names[j].clone()).collect();
    Ok((survivors, report))
}

/// Pearson correlation matrix of the columns; zero-variance pairs read as 0.
pub fn correlation_matrix(x: &DMatrix<f64>) -> DMatrix<f64> {
    let gram = centered_gram(x);
    let k = x.ncols();
    DMatrix::from_fn(k, k, |a, b| {
        if a == b {
            return 1.0;
        }
        let den = (gram[(a, a)] * gram[(b, b)]).sqrt();
        if den > 0.0 {
            (gram[(a, b)] / den).clamp(-1.0, 1.0)
        } else {
            0.0
        }
    })
}

/// Groups features connected by `|correlation| > threshold` edges and keeps
/// one representative per group: the member with the largest |Spearman
/// correlation| against `forward_returns`, ties broken alphabetically.
///
/// Returns surviving names (in input order) and the multi-member groups.
pub fn correlation_prune(
    x: &DMatrix<f64>,
    names: &[String],
    forward_returns: &[f64],
    threshold: f64,
) -> Result<(Vec<String>, Vec<CorrelationGroup>)> {
    if forward_returns.len() != x.nrows() {
        return Err(PreprocessError::DimensionMismatch {
            context: "forward returns",
            expected: x.nrows(),
            actual: forward_returns.len(),
        });
    }
    let k = x.ncols();
    let corr = correlation_matrix(x);

    // Union-find over features.
    let mut parent: Vec<usize> = (0..k).collect();
    fn find(parent: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while parent[r] != r {
            r = parent[r];
        }
        let mut c = i;
        while parent[c] != r {
            let next = parent[c];
            parent[c] = r;
            c = next;
        }
        r
    }
    for a in 0..k {
        for b in (a + 1)..k {
            if corr[(a, b)].abs() > threshold {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut components: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for j in 0..k {
        let r = find(&mut parent, j);
        components.entry(r).or_default().push(j);
    }

    let mut keep = vec![true; k];
    let mut groups = Vec::new();
    for members in components.values().filter(|m| m.len() > 1) {
        let mut ic = BTreeMap::new();
        for &j in members {
            let col: Vec<f64> = x.column(j).iter().copied().collect();
            let rho = stats::spearman(&col, forward_returns).unwrap_or(0.0).abs();
            ic.insert(names[j].clone(), rho);
        }
        let rep = members
            .iter()
            .copied()
            .max_by(|&a, &b| {
                ic[&names[a]]
                    .total_cmp(&ic[&names[b]])
                    .then_with(|| names[b].cmp(&names[a]))
            })
            .expect("component is non-empty");
        for &j in members {
            keep[j] = j == rep;
        }
        groups.push(CorrelationGroup {
            members: members.iter().map(|&j| names[j].clone()).collect(),
            representative: names[rep].clone(),
            rank_ic: ic,
        });
    }
    let survivors = (0..k)
        .filter(|&j| keep[j])
        .map(|j| names[j].clone())
        .collect();
    Ok((survivors, groups))
}

fn select_columns(x: &DMatrix<f64>, names: &[String], wanted: &[String]) -> DMatrix<f64> {
    let idx: Vec<usize> = wanted
        .iter()
        .map(|w| {
            names
                .iter()
                .position(|n| n == w)
                .expect("wanted name is present")
        })
        .collect();
    DMatrix::from_fn(x.nrows(), idx.len(), |i, k| x[(i, idx[k])])
}

/// Result of fitting the feature selection on a training matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessFit {
    pub surviving_features: Vec<String>,
    pub report: PreprocessReport,
}

/// VIF pruning followed by correlation pruning on a pooled training matrix.
/// The surviving list is meant to be frozen for the rest of the phase.
pub fn fit_feature_selection(
    x: &DMatrix<f64>,
    names: &[String],
    forward_returns: &[f64],
    params: &PreprocessParams,
) -> Result<PreprocessFit> {
    let (after_vif, mut report) = vif_prune(x, names, params.vif_threshold)?;
    let x_vif = select_columns(x, names, &after_vif);
    let (survivors, groups) =
        correlation_prune(&x_vif, &after_vif, forward_returns, params.corr_threshold)?;
    for name in after_vif.iter().filter(|n| !survivors.contains(n)) {
        report.dropped_features.push(DroppedFeature {
            name: name.clone(),
            reason: DropReason::Correlation,
        });
    }
    report.correlation_groups = groups;
    report.stage_order.push("correlation".into());

    let x_final = select_columns(x, names, &survivors);
    report.vif_table = survivors
        .iter()
        .zip(compute_vifs(&x_final))
        .map(|(n, vif)| VifEntry {
            feature: n.clone(),
            vif,
        })
        .collect();
    let corr = correlation_matrix(&x_final);
    let k = survivors.len();
    report.max_abs_correlation = (0..k)
        .flat_map(|a| ((a + 1)..k).map(move |b| (a, b)))
        .map(|(a, b)| corr[(a, b)].abs())
        .fold(0.0, f64::max);
    report.surviving_features = survivors.clone();
    Ok(PreprocessFit {
        surviving_features: survivors,
        report,
    })
}

/// Writes a labelled correlation matrix as CSV.
pub fn write_correlation_csv<W: Write>(
    x: &DMatrix<f64>,
    names: &[String],
    out: W,
) -> csv::Result<()> {
    let corr = correlation_matrix(x);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["feature".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (a, name) in names.iter().enumerate() {
        let mut rec = vec![name.clone()];
        rec.extend((0..names.len()).map(|b| corr[(a, b)].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn d() -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, 1, 1).unwrap()
    }

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn outlier_is_clipped_at_three() {
        let mut raw = vec![Some(0.0); 11];
        raw.push(Some(12.0));
        // mean 1, population variance (11*1 + 121)/12 = 11
        let sd = 11f64.sqrt();
        assert!((11.0 / sd - 3.3166247903554).abs() < 1e-12);
        let z = standardize_column(&raw, 3.0).unwrap();
        assert_eq!(z[11], 3.0);
        assert!((z[0] - (-1.0 / sd)).abs() < 1e-15);
        // clipped value mapped back to raw units
        assert!((1.0 + 3.0 * sd - 10.949874371066).abs() < 1e-9);
    }

    #[test]
    fn constant_column_is_degenerate() {
        assert_eq!(standardize_column(&[Some(0.1); 5], 3.0), None);
        assert_eq!(standardize_column(&[Some(1.0), None, None], 3.0), None);
    }

    #[test]
    fn missing_values_land_on_median() {
        let z = standardize_column(&[Some(1.0), Some(2.0), Some(3.0), None, Some(100.0)], 10.0)
            .unwrap();
        // median of observed is 2.5; imputed entry sits between the 2 and 3 entries
        assert!(z[3] > z[1] && z[3] < z[2]);
    }

    #[test]
    fn inside_bounds_clip_is_identity() {
        let raw = [Some(-1.0), Some(0.0), Some(1.0), Some(0.5)];
        let a = standardize_column(&raw, 3.0).unwrap();
        let b = standardize_column(&raw, 1e9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn all_degenerate_is_an_error() {
        let raw = RawCrossSection {
            date: d(),
            ids: vec![1, 2, 3],
            feature_names: names(&["a", "b"]),
            values: vec![vec![Some(1.0), None]; 3],
        };
        assert_eq!(
            standardize_and_clip(&raw, 3.0),
            Err(PreprocessError::AllDegenerate { date: d() })
        );
    }

    #[test]
    fn matrix_drops_degenerate_column() {
        let raw = RawCrossSection {
            date: d(),
            ids: vec![1, 2, 3],
            feature_names: names(&["a", "b"]),
            values: vec![
                vec![Some(1.0), Some(5.0)],
                vec![Some(2.0), Some(5.0)],
                vec![Some(4.0), Some(5.0)],
            ],
        };
        let m = standardize_and_clip(&raw, 3.0).unwrap();
        assert_eq!(m.feature_names, names(&["a"]));
        assert_eq!(m.dropped_features[0].reason, DropReason::Degenerate);
        let col: Vec<f64> = m.values.column(0).iter().copied().collect();
        assert!(stats::mean(&col).unwrap().abs() < 1e-12);
        assert!((stats::population_std(&col).unwrap() - 1.0).abs() < 1e-12);
    }

    fn orthonormal_pair(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let center = |v: Vec<f64>| {
            let m = stats::mean(&v).unwrap();
            v.into_iter().map(|x| x - m).collect::<Vec<f64>>()
        };
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let u = center((0..n).map(|_| rng.random::<f64>() - 0.5).collect());
        let nu = norm(&u);
        let u: Vec<f64> = u.iter().map(|x| x / nu).collect();
        let w = center((0..n).map(|_| rng.random::<f64>() - 0.5).collect());
        let dot: f64 = u.iter().zip(&w).map(|(a, b)| a * b).sum();
        let v: Vec<f64> = w.iter().zip(&u).map(|(a, b)| a - dot * b).collect();
        let nv = norm(&v);
        (u, v.iter().map(|x| x / nv).collect())
    }

    /// Simple-regression R^2 computed from sums, independent of the Gram path.
    fn ols_r2(y: &[f64], x: &[f64]) -> f64 {
        let n = y.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        let ssr: f64 = x
            .iter()
            .zip(y)
            .map(|(a, b)| (b - intercept - slope * a).powi(2))
            .sum();
        let sst: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        1.0 - ssr / sst
    }

    #[test]
    fn orthogonal_features_have_unit_vif() {
        let (u, v) = orthonormal_pair(200, 1);
        let x = DMatrix::from_fn(200, 2, |i, k| if k == 0 { u[i] } else { v[i] });
        let (surv, rep) = vif_prune(&x, &names(&["a", "b"]), 10.0).unwrap();
        assert_eq!(surv, names(&["a", "b"]));
        for e in rep.vif_table {
            assert!((e.vif - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn correlation_point_nine_gives_vif_5_263() {
        let (u, v) = orthonormal_pair(500, 7);
        let b: Vec<f64> = u
            .iter()
            .zip(&v)
            .map(|(a, c)| 0.9 * a + 0.19f64.sqrt() * c)
            .collect();
        let x = DMatrix::from_fn(500, 2, |i, k| if k == 0 { u[i] } else { b[i] });
        let oracle = 1.0 / (1.0 - ols_r2(&b, &u));
        assert!((oracle - 1.0 / 0.19).abs() < 1e-9);
        let vifs = compute_vifs(&x);
        assert!((vifs[0] - oracle).abs() < 1e-9);
        assert!((vifs[1] - oracle).abs() < 1e-9);
        assert!((vifs[0] - 5.263).abs() < 1e-3);
        let (surv, rep) = vif_prune(&x, &names(&["a", "b"]), 10.0).unwrap();
        assert_eq!(surv.len(), 2);
        assert!(rep.elimination_order.is_empty());
    }

    #[test]
    fn exact_linear_combination_is_removed_with_infinite_vif() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100;
        let a: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let x = DMatrix::from_fn(n, 3, |i, k| match k {
            0 => a[i],
            1 => b[i],
            _ => a[i] + b[i],
        });
        let (surv, rep) = vif_prune(&x, &names(&["a", "b", "c"]), 10.0).unwrap();
        assert_eq!(rep.elimination_order.len(), 1);
        assert_eq!(rep.elimination_order[0].feature, "c");
        assert!(rep.elimination_order[0].vif.is_infinite());
        assert_eq!(surv, names(&["a", "b"]));
        let json = serde_json::to_string(&rep).unwrap();
        assert!(json.contains("\"inf\""));
        let back: PreprocessReport = serde_json::from_str(&json).unwrap();
        assert!(back.elimination_order[0].vif.is_infinite());
    }

    #[test]
    fn identical_columns_drop_the_later_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..50).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..50).map(|_| rng.random()).collect();
        let x = DMatrix::from_fn(50, 3, |i, k| match k {
            0 => a[i],
            1 => b[i],
            _ => a[i],
        });
        let (surv, rep) = vif_prune(&x, &names(&["x1", "x2", "x3"]), 10.0).unwrap();
        assert_eq!(rep.elimination_order[0].feature, "x3");
        assert_eq!(surv, names(&["x1", "x2"]));
    }

    #[test]
    fn too_few_rows_is_an_error() {
        let x = DMatrix::from_element(2, 2, 1.0);
        assert!(matches!(
            vif_prune(&x, &names(&["a", "b"]), 10.0),
            Err(PreprocessError::TooFewRows { .. })
        ));
    }

    /// Columns with prescribed correlations built from orthonormal bases.
    fn chain_matrix(n: usize) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let base: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..n).map(|_| rng.random::<f64>() - 0.5).collect())
            .collect();
        // corr(a,b) ~ corr(b,c) ~ 0.85, corr(a,c) ~ 0.72
        let a = base[0].clone();
        let b: Vec<f64> = (0..n).map(|i| a[i] + 0.62 * base[1][i]).collect();
        let c: Vec<f64> = (0..n).map(|i| b[i] + 0.73 * base[2][i]).collect();
        let y: Vec<f64> = (0..n).map(|i| b[i] + base[3][i]).collect();
        (DMatrix::from_fn(n, 3, |i, k| [a[i], b[i], c[i]][k]), y)
    }

    #[test]
    fn transitive_groups_keep_one_member() {
        let (x, y) = chain_matrix(2000);
        let corr = correlation_matrix(&x);
        assert!(
            corr[(0, 1)] > 0.8 && corr[(1, 2)] > 0.8 && corr[(0, 2)] < 0.8,
            "{corr}"
        );
        let (surv, groups) = correlation_prune(&x, &names(&["a", "b", "c"]), &y, 0.8).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].members, names(&["a", "b", "c"]));
        assert_eq!(surv, vec![groups[0].representative.clone()]);
        assert_eq!(surv, names(&["b"]));
    }

    #[test]
    fn uncorrelated_features_all_survive() {
        let (u, v) = orthonormal_pair(100, 2);
        let x = DMatrix::from_fn(100, 2, |i, k| if k == 0 { u[i] } else { v[i] });
        let (surv, groups) = correlation_prune(&x, &names(&["a", "b"]), &u, 0.8).unwrap();
        assert_eq!(surv.len(), 2);
        assert!(groups.is_empty());
    }

    #[test]
    fn tied_relevance_keeps_alphabetical_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..60).map(|_| rng.random()).collect();
        let y: Vec<f64> = (0..60).map(|_| rng.random()).collect();
        // Identical columns: identical rank IC.
        let x = DMatrix::from_fn(60, 2, |i, _| a[i]);
        let (surv, _) = correlation_prune(&x, &names(&["zeta", "alpha"]), &y, 0.8).unwrap();
        assert_eq!(surv, names(&["alpha"]));
    }

    #[test]
    fn fit_selection_audit_holds() {
        let (x3, y) = chain_matrix(1500);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d: Vec<f64> = (0..1500).map(|_| rng.random()).collect();
        // e = a + b + c exactly: forces a VIF elimination
        let x = DMatrix::from_fn(1500, 5, |i, k| match k {
            0..=2 => x3[(i, k)],
            3 => d[i],
            _ => x3[(i, 0)] + x3[(i, 1)] + x3[(i, 2)],
        });
        let n = names(&["a", "b", "c", "d", "e"]);
        let fit = fit_feature_selection(&x, &n, &y, &PreprocessParams::default()).unwrap();
        assert!(!fit.report.elimination_order.is_empty());
        assert!(fit.report.vif_table.iter().all(|e| e.vif <= 10.0 + 1e-9));
        assert!(fit.report.max_abs_correlation <= 0.8 + 1e-9);
        assert_eq!(fit.report.stage_order, vec!["vif", "correlation"]);
        let again = fit_feature_selection(&x, &n, &y, &PreprocessParams::default()).unwrap();
        assert_eq!(fit, again);
    }

    proptest! {
        #[test]
        fn clipping_preserves_order_and_is_idempotent(vals in proptest::collection::vec(-1e6f64..1e6, 3..40)) {
            let raw: Vec<Option<f64>> = vals.iter().copied().map(Some).collect();
            if let Some(z) = standardize_column(&raw, 3.0) {
                for i in 0..vals.len() {
                    for j in 0..vals.len() {
                        if vals[i] < vals[j] {
                            prop_assert!(z[i] <= z[j]);
                        }
                    }
                }
                prop_assert!(z.iter().all(|v| (-3.0..=3.0).contains(v)));
                let again: Vec<f64> = z.iter().map(|v| v.clamp(-3.0, 3.0)).collect();
                prop_assert_eq!(&again, &z);
            }
        }
    }
}
