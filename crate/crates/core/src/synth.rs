//! Deterministic synthetic inputs shaped like the vendor extracts.
//!
//! Returns carry a planted linear signal on three observable features
//! (earnings yield, gross margin, sentiment) so that recovery can be tested:
//! `r_{t+1} = planted_beta * s_t + b * market_{t+1} + sector_{t+1} + noise`,
//! where `s_t` is a unit-variance cross-sectional combination of the
//! standardized features as the pipeline would compute them at `t`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::{Datelike, Months, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::features::FeatureRow;
use crate::panel::{self, Fundamental, Fundamentals, PanelError, RawInputs, SecurityMonth};
use crate::preprocess;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n_stocks: usize,
    pub n_months: usize,
    pub start: NaiveDate,
    /// Monthly return per unit of signal (cross-sectional std 1).
    pub planted_beta: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_stocks: 500,
            n_months: 132,
            start: NaiveDate::from_ymd_opt(2013, 1, 1).expect("valid date"),
            planted_beta: 0.008,
            seed: 42,
        }
    }
}

/// Weights of the planted signal on standardized features.
pub const PLANTED_SIGNAL: [(&str, f64); 3] = [
    ("ep_ratio", 0.6),
    ("gross_margin", 0.5),
    ("avg_sentiment", 0.5),
];

const N_SECTORS: usize = 8;

/// Generated CSV files, held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub params: SynthParams,
    pub crsp: String,
    pub compustat: String,
    pub links: String,
    pub sentiment: String,
    pub benchmark: String,
}

/// Paths of the files written by [`SynthData::write_to`].
#[derive(Clone, Debug, PartialEq)]
pub struct WrittenFiles {
    pub crsp: PathBuf,
    pub compustat: PathBuf,
    pub links: PathBuf,
    pub sentiment: PathBuf,
    pub benchmark: PathBuf,
    pub config: PathBuf,
}

impl SynthData {
    pub fn write_to(&self, dir: &Path) -> std::io::Result<WrittenFiles> {
        std::fs::create_dir_all(dir)?;
        let files = WrittenFiles {
            crsp: dir.join("crsp.csv"),
            compustat: dir.join("compustat.csv"),
            links: dir.join("links.csv"),
            sentiment: dir.join("sentiment.csv"),
            benchmark: dir.join("benchmark.csv"),
            config: dir.join("config.txt"),
        };
        std::fs::write(&files.crsp, &self.crsp)?;
        std::fs::write(&files.compustat, &self.compustat)?;
        std::fs::write(&files.links, &self.links)?;
        std::fs::write(&files.sentiment, &self.sentiment)?;
        std::fs::write(&files.benchmark, &self.benchmark)?;
        let cfg = Config {
            seed: self.params.seed,
            ..Config::default()
        };
        let text = cfg
            .to_text()
            .lines()
            .map(|l| {
                // keep data paths relative so the directory can be moved
                match l.split_once(" = ") {
                    Some((k, v))
                        if ["crsp", "compustat", "links", "sentiment", "benchmark"]
                            .contains(&k) =>
                    {
                        format!(
                            "{k} = {}",
                            Path::new(v)
                                .file_name()
                                .map_or(v.into(), |f| f.to_string_lossy())
                        )
                    }
                    _ => l.to_string(),
                }
            })
            .collect::<Vec<_>>()
            .join("\n");
        std::fs::write(
            &files.config,
            format!("# synthetic fixture, seed {}\n{text}\n", self.params.seed),
        )?;
        Ok(files)
    }

    /// Parses the generated CSVs with the regular readers.
    pub fn raw_inputs(&self) -> Result<RawInputs, PanelError> {
        let (crsp, crsp_stats) = panel::read_crsp(self.crsp.as_bytes(), "crsp.csv")?;
        let (compustat, compustat_stats) =
            panel::read_compustat(self.compustat.as_bytes(), "compustat.csv")?;
        Ok(RawInputs {
            crsp,
            crsp_stats,
            compustat,
            compustat_stats,
            links: panel::read_links(self.links.as_bytes(), "links.csv")?,
            sentiment: panel::read_sentiment(self.sentiment.as_bytes(), "sentiment.csv")?,
            benchmark: Some(panel::read_benchmark(
                self.benchmark.as_bytes(),
                "benchmark.csv",
            )?),
        })
    }
}

/// Slowly varying firm characteristics, each AR(1) around zero.
#[derive(Clone, Debug)]
struct Latent {
    value: f64,
    margin: f64,
    sales: f64,
    leverage: f64,
    liquidity: f64,
    mood: f64,
}

#[derive(Clone, Debug)]
struct Stock {
    permno: i64,
    gvkeys: Vec<(i64, NaiveDate)>,
    listed: usize,
    delist: Option<usize>,
    sector: usize,
    market_beta: f64,
    sector_beta: f64,
    vol: f64,
    div_yield: f64,
    price: f64,
    shrout: f64,
    latent: Latent,
    /// Latest published fundamentals with gaps carried forward.
    known: Fundamentals,
    sentiment: Option<f64>,
}

impl Stock {
    fn gvkey_at(&self, d: NaiveDate) -> i64 {
        self.gvkeys
            .iter()
            .rev()
            .find(|(_, from)| *from <= d)
            .map_or(self.gvkeys[0].0, |(g, _)| *g)
    }

    fn active(&self, t: usize) -> bool {
        t >= self.listed && self.delist.is_none_or(|d| t <= d)
    }
}

fn fmt(v: f64) -> String {
    // six significant digits keeps the files small and parsing exact
    format!("{}", (v * 1e6).round() / 1e6)
}

fn fmt_sig(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let mag = v.abs().log10().floor() as i32;
    let scale = 10f64.powi(5 - mag);
    format!("{}", (v * scale).round() / scale)
}

fn month(start: NaiveDate, t: usize) -> NaiveDate {
    start + Months::new(t as u32)
}

fn last_day_before(d: NaiveDate) -> NaiveDate {
    d.pred_opt().expect("date in range")
}

fn ar(rng: &mut ChaCha8Rng, x: f64, rho: f64) -> f64 {
    let n: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(rng);
    rho * x + (1.0 - rho * rho).sqrt() * n
}

/// Builds one quarter's fundamentals from the firm's state and market value.
fn fundamentals(rng: &mut ChaCha8Rng, s: &Stock) -> Fundamentals {
    let z = Normal::new(0.0, 1.0).expect("unit normal");
    let l = &s.latent;
    let cap = s.price * s.shrout * 1000.0;
    let shares = s.shrout * 1000.0;
    let ey = 0.055 + 0.03 * l.value + 0.006 * z.sample(rng);
    let ni = ey * cap;
    let sp = (0.1 + 0.45 * l.sales).exp();
    let revt = sp * cap;
    let gm = (0.38 + 0.12 * l.margin).clamp(0.04, 0.92);
    let gp = gm * revt;
    // operating margin tracks gross margin closely: collinear by construction
    let om = 0.55 * gm + 0.006 * z.sample(rng);
    let oiadp = om * revt;
    let ebitda = oiadp + 0.05 * revt;
    let bp = (-0.6 + 0.35 * l.value + 0.25 * z.sample(rng)).exp();
    let ceq = bp * cap;
    let lev = (-0.7 + 0.5 * l.leverage).exp();
    let dltt = 0.65 * lev * ceq;
    let dlc = 0.35 * lev * ceq;
    let lt = dltt + dlc + 0.3 * ceq;
    let at = ceq + lt;
    let cr = (0.35 + 0.3 * l.liquidity).exp();
    let act = 0.4 * at;
    let lct = act / cr;
    let che = 0.25 * act;
    let xint = (0.045 + 0.01 * z.sample(rng).abs()) * (dltt + dlc);
    let values = [
        (Fundamental::At, at),
        (Fundamental::Lt, lt),
        (Fundamental::Ceq, ceq),
        (Fundamental::Revt, revt),
        (Fundamental::Gp, gp),
        (Fundamental::Oiadp, oiadp),
        (Fundamental::Ni, ni),
        (Fundamental::Act, act),
        (Fundamental::Lct, lct),
        (Fundamental::Dltt, dltt),
        (Fundamental::Dlc, dlc),
        (Fundamental::Che, che),
        (Fundamental::Xint, xint),
        (Fundamental::Ebitda, ebitda),
        (Fundamental::Epspx, ni / shares),
    ];
    let mut f = Fundamentals::default();
    for (field, v) in values {
        f.set(field, Some(v));
    }
    f
}

/// Unit-variance cross-sectional signal from the planted features.
fn planted_signal(rows: &[FeatureRow]) -> Vec<f64> {
    let mut total = vec![0.0; rows.len()];
    for (name, weight) in PLANTED_SIGNAL {
        let raw: Vec<Option<f64>> = rows.iter().map(|r| r.get(name)).collect();
        if let Some(z) = preprocess::standardize_column(&raw, 3.0) {
            for (t, v) in total.iter_mut().zip(z) {
                *t += weight * v;
            }
        }
    }
    let sd = crate::stats::population_std(&total).unwrap_or(0.0);
    if sd > 0.0 {
        let m = crate::stats::mean(&total).unwrap_or(0.0);
        total.iter_mut().for_each(|v| *v = (*v - m) / sd);
    }
    total
}

pub fn generate(params: &SynthParams) -> SynthData {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let z = Normal::new(0.0, 1.0).expect("unit normal");
    let n = params.n_stocks;
    let m = params.n_months;
    let start = params.start;

    let mut stocks: Vec<Stock> = (0..n)
        .map(|i| {
            let cap: f64 = (5e9f64.ln() + 0.6 * z.sample(&mut rng)).exp();
            let price: f64 = (3.6 + 0.5 * z.sample(&mut rng)).exp();
            let listed = if rng.random::<f64>() < 0.06 {
                rng.random_range(12..(m * 2 / 3).max(13))
            } else {
                0
            };
            let delist =
                (rng.random::<f64>() < 0.04).then(|| rng.random_range((listed + 18).min(m - 1)..m));
            let gvkey = 100_000 + i as i64;
            let mut gvkeys = vec![(gvkey, NaiveDate::MIN)];
            if rng.random::<f64>() < 0.04 {
                let k = rng.random_range((m / 4)..(3 * m / 4));
                gvkeys.push((200_000 + i as i64, month(start, k)));
            }
            Stock {
                permno: 10_001 + i as i64,
                gvkeys,
                listed,
                delist,
                sector: rng.random_range(0..N_SECTORS),
                market_beta: rng.random_range(0.7..1.3),
                sector_beta: rng.random_range(0.5..1.5),
                vol: rng.random_range(0.05..0.11),
                div_yield: if rng.random::<f64>() < 0.6 {
                    rng.random_range(0.0005..0.003)
                } else {
                    0.0
                },
                price,
                shrout: (cap / price / 1000.0).round().max(1.0),
                latent: Latent {
                    value: z.sample(&mut rng),
                    margin: z.sample(&mut rng),
                    sales: z.sample(&mut rng),
                    leverage: z.sample(&mut rng),
                    liquidity: z.sample(&mut rng),
                    mood: z.sample(&mut rng),
                },
                known: Fundamentals::default(),
                sentiment: None,
            }
        })
        .collect();

    let mut crsp = String::from("permno,date,prc,shrout,ret,retx\n");
    let mut comp = String::from("gvkey,datadate,tic");
    for f in Fundamental::ALL {
        comp.push(',');
        comp.push_str(f.column());
    }
    comp.push('\n');
    let mut sentiment = String::from("gvkey,date,avg_sentiment\n");
    let mut benchmark = String::from("date,ret\n");

    // Vendor-style link table.
    let mut links = String::from("permno,gvkey,linktype,linkprim,linkdt,linkenddt\n");
    let mut stale_records: BTreeMap<i64, i64> = BTreeMap::new();
    for (i, s) in stocks.iter().enumerate() {
        let late_link = rng.random::<f64>() < 0.02;
        for (k, (g, from)) in s.gvkeys.iter().enumerate() {
            let linkdt = if k == 0 {
                if late_link {
                    month(start, m / 8).to_string()
                } else {
                    "2005-01-01".to_string()
                }
            } else {
                from.to_string()
            };
            let linkenddt = s.gvkeys.get(k + 1).map_or("E".to_string(), |(_, next)| {
                last_day_before(*next).to_string()
            });
            let _ = writeln!(links, "{},{},LC,P,{},{}", s.permno, g, linkdt, linkenddt);
        }
        if rng.random::<f64>() < 0.03 {
            // secondary link to a firm whose only filing is old
            let g = 900_000 + i as i64;
            let _ = writeln!(links, "{},{},LU,J,2005-01-01,E", s.permno, g);
            stale_records.insert(s.permno, g);
        }
    }
    for g in stale_records.values() {
        let mut f = Fundamentals::default();
        for field in Fundamental::ALL {
            f.set(field, Some(1.0));
        }
        write_compustat(
            &mut comp,
            *g,
            NaiveDate::from_ymd_opt(2010, 12, 31).expect("date"),
            &f,
        );
    }

    let mut next_signal = vec![0.0; n];
    for t in 0..m {
        let date = month(start, t);
        let market = 0.007 + 0.042 * z.sample(&mut rng);
        let sectors: Vec<f64> = (0..N_SECTORS).map(|_| 0.03 * z.sample(&mut rng)).collect();
        let _ = writeln!(
            benchmark,
            "{},{}",
            date,
            fmt(market + 0.004 * z.sample(&mut rng))
        );

        // Quarterly filings dated at the end of the previous quarter become
        // visible from the first month after it.
        let filing = t == 0 || matches!(date.month(), 1 | 4 | 7 | 10);
        for s in stocks.iter_mut() {
            let l = &mut s.latent;
            l.value = ar(&mut rng, l.value, 0.97);
            l.margin = ar(&mut rng, l.margin, 0.98);
            l.sales = ar(&mut rng, l.sales, 0.98);
            l.leverage = ar(&mut rng, l.leverage, 0.98);
            l.liquidity = ar(&mut rng, l.liquidity, 0.97);
            l.mood = ar(&mut rng, l.mood, 0.8);
        }

        for (i, s) in stocks.iter_mut().enumerate() {
            if !s.active(t) {
                continue;
            }
            let delisting = s.delist == Some(t);
            let ret = if t == s.listed {
                None
            } else if delisting {
                Some(-0.3 + 0.1 * z.sample(&mut rng))
            } else {
                let idio = s.vol * z.sample(&mut rng);
                Some(
                    params.planted_beta * next_signal[i]
                        + s.market_beta * market
                        + s.sector_beta * sectors[s.sector]
                        + idio,
                )
            };
            if let Some(r) = ret {
                let r = r.max(-0.9);
                s.price *= 1.0 + r - s.div_yield;
            }
            if rng.random::<f64>() < 0.01 {
                s.shrout = (s.shrout * rng.random_range(0.97..1.05)).round().max(1.0);
            }
            let ret = ret.map(|r| r.max(-0.9));
            let retx = ret.map(|r| r - s.div_yield);

            let prc = if rng.random::<f64>() < 0.02 {
                -s.price
            } else {
                s.price
            };
            let ret_text = match ret {
                Some(r) if rng.random::<f64>() >= 0.003 => fmt(r),
                _ => String::new(),
            };
            let line = format!(
                "{},{},{},{},{},{}\n",
                s.permno,
                date,
                fmt_sig(prc),
                s.shrout,
                ret_text,
                retx.map(fmt).unwrap_or_default()
            );
            crsp.push_str(&line);
            if rng.random::<f64>() < 0.001 {
                crsp.push_str(&line);
            }

            let gvkey = s.gvkey_at(date);
            if filing {
                let datadate = last_day_before(date);
                let mut f = fundamentals(&mut rng, s);
                for field in Fundamental::ALL {
                    if rng.random::<f64>() < 0.02 {
                        f.set(field, None);
                    }
                }
                write_compustat(&mut comp, gvkey, datadate, &f);
                // the successor firm also files the overlapping quarter
                if let Some((g2, from)) = s.gvkeys.get(1) {
                    if gvkey != *g2 && date < *from && *from <= date + Months::new(3) {
                        write_compustat(&mut comp, *g2, datadate, &f);
                    }
                }
                for field in Fundamental::ALL {
                    if let Some(v) = f.get(field) {
                        s.known.set(field, Some(v));
                    }
                }
            }
            let mood = (0.9 * s.latent.mood + 0.3 * z.sample(&mut rng)).tanh();
            if rng.random::<f64>() >= 0.05 {
                let _ = writeln!(
                    sentiment,
                    "{},{},{}",
                    gvkey,
                    last_day_before(date) - chrono::Days::new(10),
                    fmt(mood)
                );
                s.sentiment = Some(mood);
            }
        }

        // Signal at t from what the pipeline can see at t.
        let active: Vec<usize> = (0..n)
            .filter(|&i| stocks[i].active(t) && stocks[i].delist != Some(t))
            .collect();
        let rows: Vec<FeatureRow> = active
            .iter()
            .map(|&i| {
                let s = &stocks[i];
                let mut row =
                    SecurityMonth::from_prices(s.permno, date, s.price, s.shrout, None, None);
                row.fundamentals = s.known.clone();
                row.avg_sentiment = s.sentiment;
                FeatureRow::from_row(&row)
            })
            .collect();
        let sig = planted_signal(&rows);
        next_signal.iter_mut().for_each(|v| *v = 0.0);
        for (k, &i) in active.iter().enumerate() {
            next_signal[i] = sig[k];
        }
    }

    SynthData {
        params: params.clone(),
        crsp,
        compustat: comp,
        links,
        sentiment,
        benchmark,
    }
}

fn write_compustat(out: &mut String, gvkey: i64, datadate: NaiveDate, f: &Fundamentals) {
    let _ = write!(out, "{gvkey},{datadate},T{gvkey}");
    for field in Fundamental::ALL {
        out.push(',');
        if let Some(v) = f.get(field) {
            out.push_str(&fmt_sig(v));
        }
    }
    out.push('\n');
}
