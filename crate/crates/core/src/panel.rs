//! Point-in-time security panel.
//!
//! Reads CRSP-shaped prices, Compustat-shaped fundamentals, the CRSP/Compustat
//! link table and a precomputed sentiment file, then merges them into one
//! monthly panel keyed by `(permno, date)`.
//!
//! Every value attached to a row at date `t` originates from a record dated on
//! or before `t`. Fundamentals are joined by `datadate <= t`, gaps are filled
//! forward only, and [`PointInTimePanel::as_of`] exposes a view that cannot see
//! rows dated after its cutoff.
//!
//! Units follow CRSP: `shrout` is in thousands of shares, so
//! `market_cap = prc * shrout * 1000`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

/// CRSP security identifier.
pub type Permno = i64;
/// Compustat firm identifier.
pub type Gvkey = i64;

/// Errors raised while loading or assembling the panel.
#[derive(Debug, thiserror::Error)]
pub enum PanelError {
    #[error("cannot open {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error("csv error in {file}: {source}")]
    Csv {
        file: String,
        #[source]
        source: csv::Error,
    },

    #[error("{file}: header is missing required column `{column}`")]
    MissingColumn { file: String, column: String },

    #[error("{file}:{line}: column `{column}` has unparseable value {value:?}: {reason}")]
    Row {
        file: String,
        line: u64,
        column: String,
        value: String,
        reason: String,
    },

    #[error("{file}:{line}: avg_sentiment {value} outside [-1, 1]")]
    SentimentOutOfRange { file: String, line: u64, value: f64 },

    #[error("{file}:{line}: link start {linkdt} is after link end {linkenddt}")]
    InvertedLink {
        file: String,
        line: u64,
        linkdt: NaiveDate,
        linkenddt: NaiveDate,
    },

    #[error("permno {permno} has {count} active primary links on {date}: gvkeys {gvkeys:?}")]
    AmbiguousLink {
        permno: Permno,
        date: NaiveDate,
        count: usize,
        gvkeys: Vec<Gvkey>,
    },

    #[error("mid-cap bounds must satisfy min < max, got [{min}, {max}]")]
    InvalidBounds { min: f64, max: f64 },

    #[error("permno {permno} has non-increasing dates around {date}")]
    Unsorted { permno: Permno, date: NaiveDate },
}

pub type Result<T> = std::result::Result<T, PanelError>;

/// The Compustat fields carried on every panel row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fundamental {
    At,
    Lt,
    Ceq,
    Revt,
    Gp,
    Oiadp,
    Ni,
    Act,
    Lct,
    Dltt,
    Dlc,
    Che,
    Xint,
    Ebitda,
    Epspx,
}

impl Fundamental {
    pub const ALL: [Fundamental; 15] = [
        Fundamental::At,
        Fundamental::Lt,
        Fundamental::Ceq,
        Fundamental::Revt,
        Fundamental::Gp,
        Fundamental::Oiadp,
        Fundamental::Ni,
        Fundamental::Act,
        Fundamental::Lct,
        Fundamental::Dltt,
        Fundamental::Dlc,
        Fundamental::Che,
        Fundamental::Xint,
        Fundamental::Ebitda,
        Fundamental::Epspx,
    ];

    /// Column name used in the Compustat file and the merged panel.
    pub fn column(self) -> &'static str {
        match self {
            Fundamental::At => "at",
            Fundamental::Lt => "lt",
            Fundamental::Ceq => "ceq",
            Fundamental::Revt => "revt",
            Fundamental::Gp => "gp",
            Fundamental::Oiadp => "oiadp",
            Fundamental::Ni => "ni",
            Fundamental::Act => "act",
            Fundamental::Lct => "lct",
            Fundamental::Dltt => "dltt",
            Fundamental::Dlc => "dlc",
            Fundamental::Che => "che",
            Fundamental::Xint => "xint",
            Fundamental::Ebitda => "ebitda",
            Fundamental::Epspx => "epspx",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Fundamental values for one row; `None` marks a missing value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Fundamentals([Option<f64>; 15]);

impl Fundamentals {
    pub fn get(&self, field: Fundamental) -> Option<f64> {
        self.0[field.index()]
    }

    pub fn set(&mut self, field: Fundamental, value: Option<f64>) {
        self.0[field.index()] = value;
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(Option::is_none)
    }

    pub fn with(mut self, field: Fundamental, value: f64) -> Self {
        self.set(field, Some(value));
        self
    }
}

/// One row of the CRSP/Compustat link table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkRecord {
    pub permno: Permno,
    pub gvkey: Gvkey,
    pub linktype: String,
    pub linkprim: String,
    /// Open start when `None`.
    pub linkdt: Option<NaiveDate>,
    /// Open end when `None` (CRSP writes "E" or leaves it blank).
    pub linkenddt: Option<NaiveDate>,
}

impl LinkRecord {
    pub fn is_active(&self, date: NaiveDate) -> bool {
        self.linkdt.is_none_or(|d| d <= date) && self.linkenddt.is_none_or(|d| date <= d)
    }

    /// `P` (primary) and `C` (primary, CRSP-chosen) mark primary links.
    pub fn is_primary(&self) -> bool {
        matches!(self.linkprim.as_str(), "P" | "C")
    }
}

/// One fiscal-period record from the Compustat file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompustatRecord {
    pub gvkey: Gvkey,
    pub datadate: NaiveDate,
    pub tic: Option<String>,
    pub fundamentals: Fundamentals,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentimentRecord {
    pub gvkey: Gvkey,
    pub date: NaiveDate,
    pub avg_sentiment: f64,
}

/// One security-month of the merged panel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecurityMonth {
    pub permno: Permno,
    pub gvkey: Option<Gvkey>,
    pub date: NaiveDate,
    pub prc: f64,
    /// Thousands of shares.
    pub shrout: f64,
    pub ret: Option<f64>,
    pub retx: Option<f64>,
    pub market_cap: f64,
    pub datadate: Option<NaiveDate>,
    pub tic: Option<String>,
    pub link: Option<LinkRecord>,
    pub fundamentals: Fundamentals,
    pub avg_sentiment: Option<f64>,
}

impl SecurityMonth {
    /// A price row with no fundamentals attached yet.
    pub fn from_prices(
        permno: Permno,
        date: NaiveDate,
        prc: f64,
        shrout: f64,
        ret: Option<f64>,
        retx: Option<f64>,
    ) -> Self {
        let prc = prc.abs();
        SecurityMonth {
            permno,
            gvkey: None,
            date,
            prc,
            shrout,
            ret,
            retx,
            market_cap: prc * shrout * 1000.0,
            datadate: None,
            tic: None,
            link: None,
            fundamentals: Fundamentals::default(),
            avg_sentiment: None,
        }
    }
}

/// Which column a forward fill touched.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilledField {
    Fundamental(Fundamental),
    AvgSentiment,
}

/// Audit record for one forward-filled cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FillEntry {
    pub permno: Permno,
    pub field: FilledField,
    pub source_date: NaiveDate,
    pub target_date: NaiveDate,
}

/// Counters produced while reading one input file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadStats {
    pub rows_read: usize,
    pub rows_dropped: usize,
    pub duplicates: usize,
}

// ---------------------------------------------------------------------------
// CSV reading
// ---------------------------------------------------------------------------

struct Columns<'a> {
    file: &'a str,
    idx: Vec<usize>,
}

impl<'a> Columns<'a> {
    fn resolve(file: &'a str, header: &csv::StringRecord, names: &[&str]) -> Result<Self> {
        let mut idx = Vec::with_capacity(names.len());
        for name in names {
            let pos = header
                .iter()
                .position(|h| h.trim().eq_ignore_ascii_case(name))
                .ok_or_else(|| PanelError::MissingColumn {
                    file: file.to_string(),
                    column: name.to_string(),
                })?;
            idx.push(pos);
        }
        Ok(Columns { file, idx })
    }
}

struct Cursor<'r, 'a> {
    cols: &'r Columns<'a>,
    names: &'r [&'r str],
    rec: &'r csv::StringRecord,
    line: u64,
}

impl Cursor<'_, '_> {
    fn raw(&self, i: usize) -> &str {
        self.rec.get(self.cols.idx[i]).unwrap_or("").trim()
    }

    fn err(&self, i: usize, reason: impl Into<String>) -> PanelError {
        PanelError::Row {
            file: self.cols.file.to_string(),
            line: self.line,
            column: self.names[i].to_string(),
            value: self.raw(i).to_string(),
            reason: reason.into(),
        }
    }

    fn opt_f64(&self, i: usize) -> Result<Option<f64>> {
        let s = self.raw(i);
        if s.is_empty() {
            return Ok(None);
        }
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Some(v)),
            Ok(_) => Err(self.err(i, "non-finite number")),
            Err(e) => Err(self.err(i, e.to_string())),
        }
    }

    fn int(&self, i: usize) -> Result<i64> {
        let s = self.raw(i);
        // Some exports write identifiers as floats ("10001.0").
        if let Ok(v) = s.parse::<i64>() {
            return Ok(v);
        }
        match s.parse::<f64>() {
            Ok(v) if v.fract() == 0.0 && v.is_finite() => Ok(v as i64),
            _ => Err(self.err(i, "expected an integer identifier")),
        }
    }

    fn opt_date(&self, i: usize) -> Result<Option<NaiveDate>> {
        let s = self.raw(i);
        if s.is_empty() || s.eq_ignore_ascii_case("e") {
            return Ok(None);
        }
        NaiveDate::parse_from_str(s, "%Y-%m-%d")
            .map(Some)
            .map_err(|e| self.err(i, format!("expected ISO-8601 date: {e}")))
    }

    fn date(&self, i: usize) -> Result<NaiveDate> {
        self.opt_date(i)?
            .ok_or_else(|| self.err(i, "date is required"))
    }

    fn opt_string(&self, i: usize) -> Option<String> {
        let s = self.raw(i);
        (!s.is_empty()).then(|| s.to_string())
    }
}

fn for_each_record<R: Read>(
    reader: R,
    file: &str,
    names: &[&str],
    mut f: impl FnMut(&Cursor<'_, '_>) -> Result<()>,
) -> Result<()> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let csv_err = |source| PanelError::Csv {
        file: file.to_string(),
        source,
    };
    let header = rdr.headers().map_err(csv_err)?.clone();
    let cols = Columns::resolve(file, &header, names)?;
    let mut rec = csv::StringRecord::new();
    while rdr.read_record(&mut rec).map_err(csv_err)? {
        let line = rec.position().map_or(0, |p| p.line());
        if rec.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        let cursor = Cursor {
            cols: &cols,
            names,
            rec: &rec,
            line,
        };
        f(&cursor)?;
    }
    Ok(())
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| PanelError::Io {
        path: path.display().to_string(),
        source,
    })
}

const CRSP_COLUMNS: [&str; 6] = ["permno", "date", "prc", "shrout", "ret", "retx"];

/// Reads CRSP monthly rows.
///
/// Negative prices (bid/ask midpoints) are absolute-valued. Rows with a missing
/// or zero price, or non-positive `shrout`, are dropped and counted. Duplicate
/// `(permno, date)` rows keep the last occurrence. Output is sorted by
/// `(permno, date)`.
pub fn read_crsp<R: Read>(reader: R, file: &str) -> Result<(Vec<SecurityMonth>, LoadStats)> {
    let mut stats = LoadStats::default();
    let mut rows: BTreeMap<(Permno, NaiveDate), SecurityMonth> = BTreeMap::new();
    for_each_record(reader, file, &CRSP_COLUMNS, |c| {
        stats.rows_read += 1;
        let permno = c.int(0)?;
        let date = c.date(1)?;
        let prc = c.opt_f64(2)?;
        let shrout = c.opt_f64(3)?;
        let ret = c.opt_f64(4)?;
        let retx = c.opt_f64(5)?;
        let (Some(prc), Some(shrout)) = (prc, shrout) else {
            stats.rows_dropped += 1;
            return Ok(());
        };
        if prc == 0.0 || shrout <= 0.0 {
            stats.rows_dropped += 1;
            return Ok(());
        }
        let row = SecurityMonth::from_prices(permno, date, prc, shrout, ret, retx);
        if rows.insert((permno, date), row).is_some() {
            stats.duplicates += 1;
            log::debug!(
                "{file}:{}: duplicate row for permno {permno} on {date}, keeping the last",
                c.line
            );
        }
        Ok(())
    })?;
    if stats.duplicates > 0 {
        log::info!(
            "{file}: {} duplicate rows replaced by later lines",
            stats.duplicates
        );
    }
    Ok((rows.into_values().collect(), stats))
}

pub fn load_crsp(path: &Path) -> Result<(Vec<SecurityMonth>, LoadStats)> {
    read_crsp(open(path)?, &path.display().to_string())
}

/// Reads Compustat fundamentals. Duplicate `(gvkey, datadate)` records keep
/// the last occurrence. Output is sorted by `(gvkey, datadate)`.
pub fn read_compustat<R: Read>(reader: R, file: &str) -> Result<(Vec<CompustatRecord>, LoadStats)> {
    let mut names = vec!["gvkey", "datadate", "tic"];
    names.extend(Fundamental::ALL.iter().map(|f| f.column()));
    let mut stats = LoadStats::default();
    let mut out: BTreeMap<(Gvkey, NaiveDate), CompustatRecord> = BTreeMap::new();
    for_each_record(reader, file, &names, |c| {
        stats.rows_read += 1;
        let gvkey = c.int(0)?;
        let datadate = c.date(1)?;
        let tic = c.opt_string(2);
        let mut fundamentals = Fundamentals::default();
        for (k, field) in Fundamental::ALL.iter().enumerate() {
            fundamentals.set(*field, c.opt_f64(3 + k)?);
        }
        let rec = CompustatRecord {
            gvkey,
            datadate,
            tic,
            fundamentals,
        };
        if out.insert((gvkey, datadate), rec).is_some() {
            stats.duplicates += 1;
            log::debug!(
                "{file}:{}: duplicate fundamentals for gvkey {gvkey} at {datadate}",
                c.line
            );
        }
        Ok(())
    })?;
    if stats.duplicates > 0 {
        log::info!(
            "{file}: {} duplicate fundamentals records replaced by later lines",
            stats.duplicates
        );
    }
    Ok((out.into_values().collect(), stats))
}

pub fn load_compustat(path: &Path) -> Result<(Vec<CompustatRecord>, LoadStats)> {
    read_compustat(open(path)?, &path.display().to_string())
}

const LINK_COLUMNS: [&str; 6] = [
    "permno",
    "gvkey",
    "linktype",
    "linkprim",
    "linkdt",
    "linkenddt",
];

pub fn read_links<R: Read>(reader: R, file: &str) -> Result<Vec<LinkRecord>> {
    let mut out = Vec::new();
    for_each_record(reader, file, &LINK_COLUMNS, |c| {
        let rec = LinkRecord {
            permno: c.int(0)?,
            gvkey: c.int(1)?,
            linktype: c.opt_string(2).unwrap_or_default(),
            linkprim: c.opt_string(3).unwrap_or_default(),
            linkdt: c.opt_date(4)?,
            linkenddt: c.opt_date(5)?,
        };
        if let (Some(a), Some(b)) = (rec.linkdt, rec.linkenddt) {
            if a > b {
                return Err(PanelError::InvertedLink {
                    file: file.to_string(),
                    line: c.line,
                    linkdt: a,
                    linkenddt: b,
                });
            }
        }
        out.push(rec);
        Ok(())
    })?;
    Ok(out)
}

pub fn load_links(path: &Path) -> Result<Vec<LinkRecord>> {
    read_links(open(path)?, &path.display().to_string())
}

const SENTIMENT_COLUMNS: [&str; 3] = ["gvkey", "date", "avg_sentiment"];

/// Reads precomputed compound sentiment scores; values must lie in `[-1, 1]`.
/// Rows with an empty score are skipped.
pub fn read_sentiment<R: Read>(reader: R, file: &str) -> Result<Vec<SentimentRecord>> {
    let mut out = Vec::new();
    for_each_record(reader, file, &SENTIMENT_COLUMNS, |c| {
        let gvkey = c.int(0)?;
        let date = c.date(1)?;
        let Some(v) = c.opt_f64(2)? else {
            return Ok(());
        };
        if !(-1.0..=1.0).contains(&v) {
            return Err(PanelError::SentimentOutOfRange {
                file: file.to_string(),
                line: c.line,
                value: v,
            });
        }
        out.push(SentimentRecord {
            gvkey,
            date,
            avg_sentiment: v,
        });
        Ok(())
    })?;
    out.sort_by_key(|r| (r.gvkey, r.date));
    Ok(out)
}

pub fn load_sentiment(path: &Path) -> Result<Vec<SentimentRecord>> {
    read_sentiment(open(path)?, &path.display().to_string())
}

/// Reads a `(date, ret)` benchmark series.
pub fn read_benchmark<R: Read>(reader: R, file: &str) -> Result<BTreeMap<NaiveDate, f64>> {
    let mut out = BTreeMap::new();
    for_each_record(reader, file, &["date", "ret"], |c| {
        let date = c.date(0)?;
        if let Some(r) = c.opt_f64(1)? {
            out.insert(date, r);
        }
        Ok(())
    })?;
    Ok(out)
}

pub fn load_benchmark(path: &Path) -> Result<BTreeMap<NaiveDate, f64>> {
    read_benchmark(open(path)?, &path.display().to_string())
}

// ---------------------------------------------------------------------------
// Panel
// ---------------------------------------------------------------------------

/// Merged monthly panel, sorted by `(permno, date)`. Immutable once built.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointInTimePanel {
    rows: Vec<SecurityMonth>,
    fill_log: Vec<FillEntry>,
    by_permno: BTreeMap<Permno, (usize, usize)>,
    by_date: BTreeMap<NaiveDate, Vec<usize>>,
}

impl PointInTimePanel {
    /// Builds a panel, sorting rows by `(permno, date)`. Fails when a permno
    /// has two rows on the same date.
    pub fn from_rows(mut rows: Vec<SecurityMonth>, fill_log: Vec<FillEntry>) -> Result<Self> {
        rows.sort_by_key(|r| (r.permno, r.date));
        let mut by_permno: BTreeMap<Permno, (usize, usize)> = BTreeMap::new();
        let mut by_date: BTreeMap<NaiveDate, Vec<usize>> = BTreeMap::new();
        for (i, r) in rows.iter().enumerate() {
            if i > 0 && rows[i - 1].permno == r.permno && rows[i - 1].date >= r.date {
                return Err(PanelError::Unsorted {
                    permno: r.permno,
                    date: r.date,
                });
            }
            by_permno.entry(r.permno).or_insert((i, i)).1 = i + 1;
            by_date.entry(r.date).or_default().push(i);
        }
        Ok(PointInTimePanel {
            rows,
            fill_log,
            by_permno,
            by_date,
        })
    }

    pub fn rows(&self) -> &[SecurityMonth] {
        &self.rows
    }

    pub fn fill_log(&self) -> &[FillEntry] {
        &self.fill_log
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn first_date(&self) -> Option<NaiveDate> {
        self.by_date.keys().next().copied()
    }

    pub fn last_date(&self) -> Option<NaiveDate> {
        self.by_date.keys().next_back().copied()
    }

    /// Distinct observation dates in ascending order.
    pub fn dates(&self) -> impl Iterator<Item = NaiveDate> + '_ {
        self.by_date.keys().copied()
    }

    pub fn permnos(&self) -> impl Iterator<Item = Permno> + '_ {
        self.by_permno.keys().copied()
    }

    /// Row locator for `(permno, date)`.
    pub fn locate(&self, permno: Permno, date: NaiveDate) -> Option<usize> {
        let &(lo, hi) = self.by_permno.get(&permno)?;
        self.rows[lo..hi]
            .binary_search_by_key(&date, |r| r.date)
            .ok()
            .map(|k| lo + k)
    }

    pub fn get(&self, permno: Permno, date: NaiveDate) -> Option<&SecurityMonth> {
        self.locate(permno, date).map(|i| &self.rows[i])
    }

    /// All rows of one security in date order.
    pub fn history(&self, permno: Permno) -> &[SecurityMonth] {
        match self.by_permno.get(&permno) {
            Some(&(lo, hi)) => &self.rows[lo..hi],
            None => &[],
        }
    }

    /// Rows observed on `date`, ordered by permno.
    pub fn cross_section(&self, date: NaiveDate) -> impl Iterator<Item = &SecurityMonth> + '_ {
        self.by_date
            .get(&date)
            .into_iter()
            .flatten()
            .map(move |&i| &self.rows[i])
    }

    /// View restricted to rows dated on or before `t`.
    pub fn as_of(&self, t: NaiveDate) -> PanelView<'_> {
        let before_start = self.first_date().is_none_or(|d| t < d);
        PanelView {
            panel: self,
            cutoff: t,
            before_start,
        }
    }

    /// Rows with `min_cap <= market_cap <= max_cap`, evaluated row by row.
    pub fn midcap_filter(&self, min_cap: f64, max_cap: f64) -> Result<PointInTimePanel> {
        if min_cap.partial_cmp(&max_cap) != Some(std::cmp::Ordering::Less) {
            return Err(PanelError::InvalidBounds {
                min: min_cap,
                max: max_cap,
            });
        }
        let keep = |r: &SecurityMonth| is_midcap(r, min_cap, max_cap);
        let rows: Vec<SecurityMonth> = self.rows.iter().filter(|r| keep(r)).cloned().collect();
        let fill_log = self
            .fill_log
            .iter()
            .filter(|e| self.get(e.permno, e.target_date).is_some_and(keep))
            .cloned()
            .collect();
        PointInTimePanel::from_rows(rows, fill_log)
    }

    /// Writes the merged panel in the 41-column final-dataset layout.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        write_panel_csv(self.rows.iter(), out)
    }
}

/// Inclusive mid-cap membership test for one row.
pub fn is_midcap(row: &SecurityMonth, min_cap: f64, max_cap: f64) -> bool {
    min_cap <= row.market_cap && row.market_cap <= max_cap
}

/// Read-only window onto a panel that hides every row dated after `cutoff`.
#[derive(Clone, Copy, Debug)]
pub struct PanelView<'a> {
    panel: &'a PointInTimePanel,
    cutoff: NaiveDate,
    before_start: bool,
}

impl<'a> PanelView<'a> {
    pub fn cutoff(&self) -> NaiveDate {
        self.cutoff
    }

    /// Set when the cutoff precedes the first panel date (the view is empty).
    pub fn is_before_start(&self) -> bool {
        self.before_start
    }

    pub fn rows(&self) -> impl Iterator<Item = &'a SecurityMonth> + 'a {
        let cutoff = self.cutoff;
        self.panel.rows.iter().filter(move |r| r.date <= cutoff)
    }

    pub fn len(&self) -> usize {
        self.rows().count()
    }

    pub fn is_empty(&self) -> bool {
        self.rows().next().is_none()
    }

    pub fn dates(&self) -> impl Iterator<Item = NaiveDate> + 'a {
        self.panel.by_date.range(..=self.cutoff).map(|(d, _)| *d)
    }

    /// Up to `n` most recent observation dates, oldest first.
    pub fn trailing_dates(&self, n: usize) -> Vec<NaiveDate> {
        let mut v: Vec<NaiveDate> = self
            .panel
            .by_date
            .range(..=self.cutoff)
            .rev()
            .take(n)
            .map(|(d, _)| *d)
            .collect();
        v.reverse();
        v
    }

    pub fn cross_section(&self, date: NaiveDate) -> impl Iterator<Item = &'a SecurityMonth> + 'a {
        let visible = date <= self.cutoff;
        let panel = self.panel;
        panel
            .by_date
            .get(&date)
            .filter(|_| visible)
            .into_iter()
            .flatten()
            .map(move |&i| &panel.rows[i])
    }

    pub fn get(&self, permno: Permno, date: NaiveDate) -> Option<&'a SecurityMonth> {
        if date > self.cutoff {
            return None;
        }
        self.panel.get(permno, date)
    }

    pub fn history(&self, permno: Permno) -> &'a [SecurityMonth] {
        let h = self.panel.history(permno);
        let end = h.partition_point(|r| r.date <= self.cutoff);
        &h[..end]
    }

    pub fn fill_log(&self) -> impl Iterator<Item = &'a FillEntry> + 'a {
        let cutoff = self.cutoff;
        self.panel
            .fill_log
            .iter()
            .filter(move |e| e.target_date <= cutoff)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        write_panel_csv(self.rows(), out)
    }

    /// The view as CSV text, used for byte-level comparisons.
    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }
}

// ---------------------------------------------------------------------------
// Merge and fill
// ---------------------------------------------------------------------------

/// Attaches fundamentals to each price row.
///
/// A row at date `t` receives the most recent Compustat record with
/// `datadate <= t` among firms whose link is active at `t`. Competing
/// candidates are ranked by latest `datadate`, then primary link, then lowest
/// gvkey. Rows with no active link keep empty fundamentals.
pub fn merge_link(
    crsp_rows: Vec<SecurityMonth>,
    compustat: &[CompustatRecord],
    links: &[LinkRecord],
) -> Result<PointInTimePanel> {
    let mut comp_by_gvkey: BTreeMap<Gvkey, Vec<&CompustatRecord>> = BTreeMap::new();
    for rec in compustat {
        comp_by_gvkey.entry(rec.gvkey).or_default().push(rec);
    }
    for recs in comp_by_gvkey.values_mut() {
        recs.sort_by_key(|r| r.datadate);
    }
    let mut links_by_permno: BTreeMap<Permno, Vec<&LinkRecord>> = BTreeMap::new();
    for l in links {
        links_by_permno.entry(l.permno).or_default().push(l);
    }

    let mut rows = crsp_rows;
    for row in &mut rows {
        let Some(candidates) = links_by_permno.get(&row.permno) else {
            continue;
        };
        let active: Vec<&LinkRecord> = candidates
            .iter()
            .copied()
            .filter(|l| l.is_active(row.date))
            .collect();
        if active.is_empty() {
            continue;
        }
        let mut primary: Vec<Gvkey> = active
            .iter()
            .filter(|l| l.is_primary())
            .map(|l| l.gvkey)
            .collect();
        primary.sort_unstable();
        primary.dedup();
        if primary.len() > 1 {
            return Err(PanelError::AmbiguousLink {
                permno: row.permno,
                date: row.date,
                count: primary.len(),
                gvkeys: primary,
            });
        }

        // (datadate, is_primary, -gvkey) ordering: larger is better.
        let mut best: Option<(NaiveDate, bool, i64, &LinkRecord, &CompustatRecord)> = None;
        for link in &active {
            let Some(recs) = comp_by_gvkey.get(&link.gvkey) else {
                continue;
            };
            let k = recs.partition_point(|r| r.datadate <= row.date);
            if k == 0 {
                continue;
            }
            let rec = recs[k - 1];
            let key = (rec.datadate, link.is_primary(), -link.gvkey);
            if best.as_ref().is_none_or(|b| key > (b.0, b.1, b.2)) {
                best = Some((key.0, key.1, key.2, link, rec));
            }
        }

        match best {
            Some((_, _, _, link, rec)) => {
                row.gvkey = Some(rec.gvkey);
                row.datadate = Some(rec.datadate);
                row.tic = rec.tic.clone();
                row.link = Some(link.clone());
                row.fundamentals = rec.fundamentals.clone();
            }
            None => {
                // Linked, but no fundamentals published yet.
                let link = active
                    .iter()
                    .max_by_key(|l| (l.is_primary(), -l.gvkey))
                    .expect("active is non-empty");
                row.gvkey = Some(link.gvkey);
                row.link = Some((*link).clone());
            }
        }
    }
    PointInTimePanel::from_rows(rows, Vec::new())
}

/// Attaches sentiment scores by gvkey. A row at `t` takes the latest score
/// dated in `(previous row date, t]`, so each score lands on at most one row.
pub fn merge_sentiment(
    panel: PointInTimePanel,
    sentiment: &[SentimentRecord],
) -> Result<PointInTimePanel> {
    let mut by_gvkey: BTreeMap<Gvkey, Vec<&SentimentRecord>> = BTreeMap::new();
    for s in sentiment {
        by_gvkey.entry(s.gvkey).or_default().push(s);
    }
    for v in by_gvkey.values_mut() {
        v.sort_by_key(|s| s.date);
    }
    let PointInTimePanel {
        mut rows, fill_log, ..
    } = panel;
    let mut prev: Option<(Permno, NaiveDate)> = None;
    for row in &mut rows {
        let lower = match prev {
            Some((p, d)) if p == row.permno => Some(d),
            _ => None,
        };
        prev = Some((row.permno, row.date));
        let Some(scores) = row.gvkey.and_then(|g| by_gvkey.get(&g)) else {
            continue;
        };
        let k = scores.partition_point(|s| s.date <= row.date);
        if k == 0 {
            continue;
        }
        let s = scores[k - 1];
        if lower.is_none_or(|lo| s.date > lo) {
            row.avg_sentiment = Some(s.avg_sentiment);
        }
    }
    PointInTimePanel::from_rows(rows, fill_log)
}

/// Carries the last observed fundamental and sentiment values forward within
/// each permno. Values never move backward in time, leading gaps stay missing
/// and a value never crosses a change of linked gvkey. When
/// `max_staleness_months` is set, values older than that many months are not
/// carried.
pub fn forward_fill(
    panel: PointInTimePanel,
    max_staleness_months: Option<u32>,
) -> PointInTimePanel {
    let PointInTimePanel {
        mut rows,
        mut fill_log,
        ..
    } = panel;

    let fresh_enough = |source: NaiveDate, target: NaiveDate| match max_staleness_months {
        None => true,
        Some(m) => months_between(source, target) <= i64::from(m),
    };

    let mut start = 0;
    while start < rows.len() {
        let permno = rows[start].permno;
        let end = start
            + rows[start..]
                .iter()
                .take_while(|r| r.permno == permno)
                .count();

        let mut last: [Option<(f64, NaiveDate, Gvkey)>; 15] = [None; 15];
        let mut last_sent: Option<(f64, NaiveDate, Gvkey)> = None;
        for row in &mut rows[start..end] {
            let Some(gvkey) = row.gvkey else {
                continue;
            };
            for field in Fundamental::ALL {
                let slot = &mut last[field.index()];
                match row.fundamentals.get(field) {
                    Some(v) => *slot = Some((v, row.date, gvkey)),
                    None => {
                        if let Some((v, src, g)) = *slot {
                            if g == gvkey && fresh_enough(src, row.date) {
                                row.fundamentals.set(field, Some(v));
                                fill_log.push(FillEntry {
                                    permno,
                                    field: FilledField::Fundamental(field),
                                    source_date: src,
                                    target_date: row.date,
                                });
                            }
                        }
                    }
                }
            }
            match row.avg_sentiment {
                Some(v) => last_sent = Some((v, row.date, gvkey)),
                None => {
                    if let Some((v, src, g)) = last_sent {
                        if g == gvkey && fresh_enough(src, row.date) {
                            row.avg_sentiment = Some(v);
                            fill_log.push(FillEntry {
                                permno,
                                field: FilledField::AvgSentiment,
                                source_date: src,
                                target_date: row.date,
                            });
                        }
                    }
                }
            }
        }
        start = end;
    }
    PointInTimePanel::from_rows(rows, fill_log).expect("forward fill preserves ordering")
}

fn months_between(a: NaiveDate, b: NaiveDate) -> i64 {
    use chrono::Datelike;
    (i64::from(b.year()) - i64::from(a.year())) * 12 + i64::from(b.month()) - i64::from(a.month())
}

// ---------------------------------------------------------------------------
// Ingest orchestration and output
// ---------------------------------------------------------------------------

/// Input file locations. Benchmark is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DataPaths {
    pub crsp: std::path::PathBuf,
    pub compustat: std::path::PathBuf,
    pub links: std::path::PathBuf,
    pub sentiment: std::path::PathBuf,
    pub benchmark: Option<std::path::PathBuf>,
}

/// Summary of one ingest run, serialized as JSON.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub crsp_rows_read: usize,
    pub crsp_rows_dropped: usize,
    pub crsp_duplicates: usize,
    pub compustat_records: usize,
    pub compustat_duplicates: usize,
    pub link_records: usize,
    pub sentiment_records: usize,
    pub rows_linked: usize,
    pub rows_with_fundamentals: usize,
    pub cells_filled: usize,
    pub panel_rows: usize,
    pub midcap_rows: usize,
    pub rows_filtered_out: usize,
    pub securities: usize,
    pub first_date: Option<NaiveDate>,
    pub last_date: Option<NaiveDate>,
}

/// Result of [`ingest`]: the full forward-filled panel (mid-cap membership is
/// evaluated later, per rebalance date) plus its mid-cap restriction.
#[derive(Clone, Debug)]
pub struct Ingested {
    pub panel: PointInTimePanel,
    pub midcap: PointInTimePanel,
    pub benchmark: Option<BTreeMap<NaiveDate, f64>>,
    pub report: IngestReport,
}

/// Raw inputs held in memory, before merging.
#[derive(Clone, Debug, Default)]
pub struct RawInputs {
    pub crsp: Vec<SecurityMonth>,
    pub crsp_stats: LoadStats,
    pub compustat: Vec<CompustatRecord>,
    pub compustat_stats: LoadStats,
    pub links: Vec<LinkRecord>,
    pub sentiment: Vec<SentimentRecord>,
    pub benchmark: Option<BTreeMap<NaiveDate, f64>>,
}

impl RawInputs {
    pub fn load(paths: &DataPaths) -> Result<Self> {
        let (crsp, crsp_stats) = load_crsp(&paths.crsp)?;
        let (compustat, compustat_stats) = load_compustat(&paths.compustat)?;
        let links = load_links(&paths.links)?;
        let sentiment = load_sentiment(&paths.sentiment)?;
        let benchmark = paths.benchmark.as_deref().map(load_benchmark).transpose()?;
        Ok(RawInputs {
            crsp,
            crsp_stats,
            compustat,
            compustat_stats,
            links,
            sentiment,
            benchmark,
        })
    }

    /// Merge, attach sentiment, forward fill and apply the mid-cap filter.
    pub fn build(
        &self,
        min_cap: f64,
        max_cap: f64,
        max_staleness_months: Option<u32>,
    ) -> Result<Ingested> {
        let merged = merge_link(self.crsp.clone(), &self.compustat, &self.links)?;
        let merged = merge_sentiment(merged, &self.sentiment)?;
        let panel = forward_fill(merged, max_staleness_months);
        let midcap = panel.midcap_filter(min_cap, max_cap)?;
        let report = IngestReport {
            crsp_rows_read: self.crsp_stats.rows_read,
            crsp_rows_dropped: self.crsp_stats.rows_dropped,
            crsp_duplicates: self.crsp_stats.duplicates,
            compustat_records: self.compustat.len(),
            compustat_duplicates: self.compustat_stats.duplicates,
            link_records: self.links.len(),
            sentiment_records: self.sentiment.len(),
            rows_linked: panel.rows().iter().filter(|r| r.gvkey.is_some()).count(),
            rows_with_fundamentals: panel.rows().iter().filter(|r| r.datadate.is_some()).count(),
            cells_filled: panel.fill_log().len(),
            panel_rows: panel.len(),
            midcap_rows: midcap.len(),
            rows_filtered_out: panel.len() - midcap.len(),
            securities: panel.permnos().count(),
            first_date: panel.first_date(),
            last_date: panel.last_date(),
        };
        Ok(Ingested {
            panel,
            midcap,
            benchmark: self.benchmark.clone(),
            report,
        })
    }
}

/// Loads all inputs and builds the panel in one call.
pub fn ingest(
    paths: &DataPaths,
    min_cap: f64,
    max_cap: f64,
    max_staleness_months: Option<u32>,
) -> Result<Ingested> {
    RawInputs::load(paths)?.build(min_cap, max_cap, max_staleness_months)
}

/// Column layout of the merged panel CSV (41 columns).
pub const PANEL_COLUMNS: [&str; 41] = [
    "permno",
    "date",
    "prc",
    "shrout",
    "market_cap",
    "ret",
    "retx",
    "gvkey",
    "datadate",
    "tic",
    "at",
    "lt",
    "ceq",
    "revt",
    "gp",
    "oiadp",
    "ni",
    "act",
    "lct",
    "dltt",
    "dlc",
    "che",
    "xint",
    "ebitda",
    "epspx",
    "pe_ratio",
    "pb_ratio",
    "ps_ratio",
    "enterprise_value",
    "ev_to_ebitda",
    "gross_margin",
    "operating_margin",
    "net_margin",
    "current_ratio",
    "debt_to_equity",
    "interest_coverage",
    "linktype_y",
    "linkprim_y",
    "linkdt_y",
    "linkenddt_y",
    "avg_sentiment",
];

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn fmt_date(d: Option<NaiveDate>) -> String {
    d.map(|d| d.format("%Y-%m-%d").to_string())
        .unwrap_or_default()
}

fn write_panel_csv<'a, W: Write>(
    rows: impl Iterator<Item = &'a SecurityMonth>,
    out: W,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PANEL_COLUMNS)?;
    for r in rows {
        let ratios = crate::features::TableRatios::from_row(r);
        let mut rec: Vec<String> = Vec::with_capacity(41);
        rec.push(r.permno.to_string());
        rec.push(fmt_date(Some(r.date)));
        rec.push(r.prc.to_string());
        rec.push(r.shrout.to_string());
        rec.push(r.market_cap.to_string());
        rec.push(fmt_opt(r.ret));
        rec.push(fmt_opt(r.retx));
        rec.push(r.gvkey.map(|g| g.to_string()).unwrap_or_default());
        rec.push(fmt_date(r.datadate));
        rec.push(r.tic.clone().unwrap_or_default());
        for f in Fundamental::ALL {
            rec.push(fmt_opt(r.fundamentals.get(f)));
        }
        for v in ratios.values() {
            rec.push(fmt_opt(v));
        }
        let link = r.link.as_ref();
        rec.push(link.map(|l| l.linktype.clone()).unwrap_or_default());
        rec.push(link.map(|l| l.linkprim.clone()).unwrap_or_default());
        rec.push(fmt_date(link.and_then(|l| l.linkdt)));
        rec.push(fmt_date(link.and_then(|l| l.linkenddt)));
        rec.push(fmt_opt(r.avg_sentiment));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn crsp(text: &str) -> Result<(Vec<SecurityMonth>, LoadStats)> {
        read_crsp(text.as_bytes(), "crsp.csv")
    }

    #[test]
    fn market_cap_uses_thousands_of_shares() {
        let (rows, _) =
            crsp("permno,date,prc,shrout,ret,retx\n1001,2015-04-01,50.0,100000,0.01,0.01\n")
                .unwrap();
        assert_eq!(rows[0].market_cap, 5.0e9);
    }

    #[test]
    fn negative_price_is_absolute_valued() {
        let (rows, _) =
            crsp("permno,date,prc,shrout,ret,retx\n1001,2015-04-01,-50.0,100000,,\n").unwrap();
        assert_eq!(rows[0].prc, 50.0);
        assert_eq!(rows[0].market_cap, 5.0e9);
        assert_eq!(rows[0].ret, None);
    }

    #[test]
    fn empty_file_with_header_is_empty() {
        let (rows, stats) = crsp("permno,date,prc,shrout,ret,retx\n").unwrap();
        assert!(rows.is_empty());
        assert_eq!(stats.rows_read, 0);
    }

    #[test]
    fn missing_column_is_named() {
        let err = crsp("permno,date,prc,ret,retx\n").unwrap_err();
        match err {
            PanelError::MissingColumn { column, .. } => assert_eq!(column, "shrout"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn bad_row_reports_line_number() {
        let err =
            crsp("permno,date,prc,shrout,ret,retx\n1,2015-01-01,1,1,0,0\n1,2015-02-01,abc,1,0,0\n")
                .unwrap_err();
        match err {
            PanelError::Row { line, column, .. } => {
                assert_eq!(line, 3);
                assert_eq!(column, "prc");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn invalid_rows_dropped_and_duplicates_keep_last() {
        let text = "permno,date,prc,shrout,ret,retx\n\
                    1,2015-01-01,,100,0,0\n\
                    1,2015-02-01,10,0,0,0\n\
                    1,2015-03-01,10,100,0.1,0.1\n\
                    1,2015-03-01,11,100,0.2,0.2\n";
        let (rows, stats) = crsp(text).unwrap();
        assert_eq!(stats.rows_read, 4);
        assert_eq!(stats.rows_dropped, 2);
        assert_eq!(stats.duplicates, 1);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].prc, 11.0);
    }

    #[test]
    fn sentiment_out_of_range_is_rejected() {
        let err = read_sentiment(
            "gvkey,date,avg_sentiment\n5,2015-01-01,1.5\n".as_bytes(),
            "s.csv",
        )
        .unwrap_err();
        assert!(matches!(
            err,
            PanelError::SentimentOutOfRange { line: 2, .. }
        ));
    }

    fn link(
        permno: Permno,
        gvkey: Gvkey,
        prim: &str,
        start: &str,
        end: Option<&str>,
    ) -> LinkRecord {
        LinkRecord {
            permno,
            gvkey,
            linktype: "LC".into(),
            linkprim: prim.into(),
            linkdt: Some(d(start)),
            linkenddt: end.map(d),
        }
    }

    fn comp(gvkey: Gvkey, datadate: &str, ni: f64) -> CompustatRecord {
        CompustatRecord {
            gvkey,
            datadate: d(datadate),
            tic: Some("ABC".into()),
            fundamentals: Fundamentals::default().with(Fundamental::Ni, ni),
        }
    }

    fn price(permno: Permno, date: &str) -> SecurityMonth {
        SecurityMonth::from_prices(permno, d(date), 10.0, 1000.0, Some(0.0), Some(0.0))
    }

    #[test]
    fn merge_respects_datadate_and_link_window() {
        let rows = vec![price(1, "2015-04-01"), price(2, "2015-04-01")];
        let comps = vec![
            comp(10, "2015-03-31", 1.0),
            comp(10, "2015-05-31", 2.0),
            comp(20, "2014-06-30", 3.0),
        ];
        let links = vec![
            link(1, 10, "P", "2000-01-01", None),
            link(2, 20, "P", "2000-01-01", Some("2014-12-31")),
        ];
        let p = merge_link(rows, &comps, &links).unwrap();
        let r1 = p.get(1, d("2015-04-01")).unwrap();
        assert_eq!(r1.fundamentals.get(Fundamental::Ni), Some(1.0));
        assert_eq!(r1.datadate, Some(d("2015-03-31")));
        let r2 = p.get(2, d("2015-04-01")).unwrap();
        assert_eq!(r2.gvkey, None);
        assert!(r2.fundamentals.is_empty());
    }

    #[test]
    fn later_fundamentals_are_not_joined_early() {
        let p = merge_link(
            vec![price(1, "2015-04-01")],
            &[comp(10, "2015-05-31", 2.0)],
            &[link(1, 10, "P", "2000-01-01", None)],
        )
        .unwrap();
        let r = p.get(1, d("2015-04-01")).unwrap();
        assert!(r.fundamentals.is_empty());
        assert_eq!(r.gvkey, Some(10));
    }

    #[test]
    fn two_primary_links_are_ambiguous() {
        let err = merge_link(
            vec![price(1, "2015-04-01")],
            &[],
            &[
                link(1, 10, "P", "2000-01-01", None),
                link(1, 11, "C", "2010-01-01", None),
            ],
        )
        .unwrap_err();
        match err {
            PanelError::AmbiguousLink { gvkeys, .. } => assert_eq!(gvkeys, vec![10, 11]),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn duplicate_candidates_prefer_latest_then_primary() {
        let links = [
            link(1, 10, "J", "2000-01-01", None),
            link(1, 11, "P", "2000-01-01", None),
        ];
        let p = merge_link(
            vec![price(1, "2015-04-01")],
            &[comp(10, "2015-03-31", 1.0), comp(11, "2015-03-31", 2.0)],
            &links,
        )
        .unwrap();
        assert_eq!(p.get(1, d("2015-04-01")).unwrap().gvkey, Some(11));

        let p = merge_link(
            vec![price(1, "2015-04-01")],
            &[comp(10, "2015-03-31", 1.0), comp(11, "2014-12-31", 2.0)],
            &links,
        )
        .unwrap();
        assert_eq!(p.get(1, d("2015-04-01")).unwrap().gvkey, Some(10));
    }

    fn ni_panel(values: &[Option<f64>]) -> PointInTimePanel {
        let dates = ["2015-01-01", "2015-02-01", "2015-03-01", "2015-04-01"];
        let rows = values
            .iter()
            .zip(dates)
            .map(|(v, dt)| {
                let mut r = price(1, dt);
                r.gvkey = Some(10);
                r.fundamentals.set(Fundamental::Ni, *v);
                r
            })
            .collect();
        PointInTimePanel::from_rows(rows, vec![]).unwrap()
    }

    fn ni_series(p: &PointInTimePanel) -> Vec<Option<f64>> {
        p.rows()
            .iter()
            .map(|r| r.fundamentals.get(Fundamental::Ni))
            .collect()
    }

    #[test]
    fn forward_fill_carries_last_value() {
        let p = forward_fill(ni_panel(&[Some(5.0), None, None, Some(7.0)]), None);
        assert_eq!(
            ni_series(&p),
            vec![Some(5.0), Some(5.0), Some(5.0), Some(7.0)]
        );
        let ni_fills: Vec<_> = p
            .fill_log()
            .iter()
            .filter(|e| e.field == FilledField::Fundamental(Fundamental::Ni))
            .collect();
        assert_eq!(ni_fills.len(), 2);
        assert!(ni_fills.iter().all(|e| e.source_date == d("2015-01-01")));
    }

    #[test]
    fn forward_fill_keeps_leading_gap() {
        let p = forward_fill(ni_panel(&[None, Some(3.0), None, None]), None);
        assert_eq!(ni_series(&p), vec![None, Some(3.0), Some(3.0), Some(3.0)]);
    }

    #[test]
    fn staleness_limit_stops_fill() {
        let p = forward_fill(ni_panel(&[Some(1.0), None, None, None]), Some(1));
        assert_eq!(ni_series(&p), vec![Some(1.0), Some(1.0), None, None]);
    }

    #[test]
    fn midcap_bounds_are_inclusive() {
        let mk = |permno, cap: f64| {
            let mut r = price(permno, "2015-01-01");
            r.market_cap = cap;
            r
        };
        let p = PointInTimePanel::from_rows(
            vec![
                mk(1, 5e9),
                mk(2, 1e9),
                mk(3, 2e9),
                mk(4, 10e9),
                mk(5, 10.1e9),
            ],
            vec![],
        )
        .unwrap();
        let f = p.midcap_filter(2e9, 10e9).unwrap();
        let kept: Vec<Permno> = f.permnos().collect();
        assert_eq!(kept, vec![1, 3, 4]);
        assert_eq!(f.midcap_filter(2e9, 10e9).unwrap(), f);
        assert!(p.midcap_filter(3e9, 2e9).is_err());
    }

    #[test]
    fn as_of_edges() {
        let p = ni_panel(&[Some(1.0), Some(2.0), Some(3.0), Some(4.0)]);
        let all = p.as_of(d("2015-04-01"));
        assert_eq!(all.len(), 4);
        assert!(!all.is_before_start());
        let none = p.as_of(d("2014-12-01"));
        assert!(none.is_empty());
        assert!(none.is_before_start());
        assert_eq!(
            p.as_of(d("2015-02-15")).trailing_dates(5),
            vec![d("2015-01-01"), d("2015-02-01")]
        );
    }

    #[test]
    fn panel_csv_has_41_columns() {
        let p = ni_panel(&[Some(1.0), None, None, None]);
        let text = p.as_of(d("2015-12-01")).to_csv_string();
        let header = text.lines().next().unwrap();
        assert_eq!(header.split(',').count(), 41);
        assert!(text.lines().skip(1).all(|l| l.split(',').count() == 41));
    }
}
