//! Civil Protection CSV ingestion, synthetic series and CSV exports.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bayes::CredibleBand;
use crate::contact::ContactRate;
use crate::error::{Error, Result};
use crate::sir::{self, EpidemicState, SirParams, TimeGrid, Trajectory};

pub const LOMBARDY_POPULATION: f64 = 1.0e7;
pub const ITALY_POPULATION: f64 = 6.036e7;

pub const DATE_COLUMN: &str = "data";
pub const REGION_COLUMN: &str = "denominazione_regione";
pub const ICU_COLUMN: &str = "terapia_intensiva";

/// Daily ICU occupancy for one region (or the whole country), normalized
/// by population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSeries {
    pub region: String,
    pub dates: Vec<NaiveDate>,
    pub icu_counts: Vec<u64>,
    pub population: f64,
    pub y: Vec<f64>,
}

impl ObservationSeries {
    pub fn new(region: impl Into<String>, dates: Vec<NaiveDate>, icu_counts: Vec<u64>, population: f64) -> Result<Self> {
        if !(population > 0.0) {
            return Err(Error::Precondition(format!("population must be positive, got {population}")));
        }
        if dates.len() != icu_counts.len() {
            return Err(Error::Precondition(format!(
                "{} dates but {} counts",
                dates.len(),
                icu_counts.len()
            )));
        }
        check_contiguous(&dates)?;
        let y = icu_counts.iter().map(|&c| c as f64 / population).collect();
        Ok(Self { region: region.into(), dates, icu_counts, population, y })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn start(&self) -> Option<NaiveDate> {
        self.dates.first().copied()
    }

    pub fn end(&self) -> Option<NaiveDate> {
        self.dates.last().copied()
    }

    /// Day offset of `date` from the first observation (may be negative or
    /// past the end).
    pub fn day_of(&self, date: NaiveDate) -> Option<f64> {
        self.start().map(|s| (date - s).num_days() as f64)
    }

    pub fn all_zero(&self) -> bool {
        self.icu_counts.iter().all(|&c| c == 0)
    }
}

fn check_contiguous(dates: &[NaiveDate]) -> Result<()> {
    for w in dates.windows(2) {
        if (w[1] - w[0]).num_days() != 1 {
            return Err(Error::GapInDates { before: w[0].to_string(), after: w[1].to_string() });
        }
    }
    Ok(())
}

fn parse_date(raw: &str) -> Result<NaiveDate> {
    let head = raw.trim().get(..10).unwrap_or(raw.trim());
    NaiveDate::parse_from_str(head, "%Y-%m-%d").map_err(|e| Error::Parse(format!("bad date `{raw}`: {e}")))
}

/// Reads a regional or national file in the upstream schema. Files carrying
/// a `denominazione_regione` column are filtered to `region`; files without
/// it are treated as national and every row is kept.
pub fn ingest_dpc_csv(path: impl AsRef<Path>, region: &str, population: f64) -> Result<ObservationSeries> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let missing = |name: &str| Error::SchemaMismatch { path: path.to_path_buf(), column: name.to_string() };
    let date_col = col(DATE_COLUMN).ok_or_else(|| missing(DATE_COLUMN))?;
    let icu_col = col(ICU_COLUMN).ok_or_else(|| missing(ICU_COLUMN))?;
    let region_col = col(REGION_COLUMN);

    let mut by_date: BTreeMap<NaiveDate, i64> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        if let Some(rc) = region_col {
            if rec.get(rc).map(str::trim) != Some(region) {
                continue;
            }
        }
        let date = parse_date(rec.get(date_col).unwrap_or(""))?;
        let raw = rec.get(icu_col).unwrap_or("").trim();
        let count: i64 = raw
            .parse()
            .map_err(|e| Error::Parse(format!("bad {ICU_COLUMN} value `{raw}` on {date}: {e}")))?;
        if count < 0 {
            return Err(Error::NegativeCount { date: date.to_string(), count });
        }
        if by_date.insert(date, count).is_some() {
            return Err(Error::Parse(format!("duplicate rows for {date} in {}", path.display())));
        }
    }
    let dates: Vec<NaiveDate> = by_date.keys().copied().collect();
    let counts: Vec<u64> = by_date.values().map(|&c| c as u64).collect();
    ObservationSeries::new(region, dates, counts, population)
}

/// Inclusive date slice.
pub fn window(series: &ObservationSeries, start: NaiveDate, end: NaiveDate) -> Result<ObservationSeries> {
    let keep: Vec<usize> = (0..series.len()).filter(|&k| series.dates[k] >= start && series.dates[k] <= end).collect();
    if keep.is_empty() {
        return Err(Error::EmptyWindow { start: start.to_string(), end: end.to_string() });
    }
    Ok(ObservationSeries {
        region: series.region.clone(),
        dates: keep.iter().map(|&k| series.dates[k]).collect(),
        icu_counts: keep.iter().map(|&k| series.icu_counts[k]).collect(),
        population: series.population,
        y: keep.iter().map(|&k| series.y[k]).collect(),
    })
}

/// Output of [`synth_generate`]: the rounded series plus the noiseless and
/// noisy (pre-rounding) normalized outputs it was built from.
#[derive(Debug, Clone)]
pub struct SyntheticSeries {
    pub series: ObservationSeries,
    pub clean: Vec<f64>,
    pub noisy: Vec<f64>,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone)]
pub struct SynthSpec<'a> {
    pub region: &'a str,
    pub start: NaiveDate,
    pub population: f64,
    /// SD of the additive Gaussian noise on the normalized output.
    pub noise_sd: f64,
    pub seed: u64,
}

/// Simulates, maps through `y = I/H`, adds Gaussian noise, floors at zero and
/// rounds to whole counts at the configured population.
pub fn synth_generate(
    contact: &impl ContactRate,
    params: &SirParams,
    init: EpidemicState,
    grid: &TimeGrid,
    spec: &SynthSpec<'_>,
) -> Result<SyntheticSeries> {
    if !(spec.noise_sd >= 0.0) {
        return Err(Error::Precondition(format!("noise_sd must be >= 0, got {}", spec.noise_sd)));
    }
    let traj = sir::simulate(contact, params, init, grid)?;
    let clean = sir::model_output(&traj, params);
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let noisy: Vec<f64> = clean
        .iter()
        .map(|&y| if spec.noise_sd > 0.0 { y + spec.noise_sd * normal.sample(&mut rng) } else { y })
        .collect();
    let counts: Vec<u64> = noisy.iter().map(|&y| (y.max(0.0) * spec.population).round() as u64).collect();
    let dates = (0..grid.n).map(|k| spec.start + chrono::Days::new(k as u64)).collect();
    let series = ObservationSeries::new(spec.region, dates, counts, spec.population)?;
    Ok(SyntheticSeries { series, clean, noisy, trajectory: traj })
}

/// Infected fraction implied by ICU counts through the multiplier `H`.
pub fn national_projection(h: f64, national: &ObservationSeries) -> Vec<f64> {
    national.icu_counts.iter().map(|&c| h * c as f64 / national.population).collect()
}

/// Infected-plus-removed fraction implied by national ICU counts: the
/// projected `I = H·y` with `R` started on the equilibrium manifold,
/// `R(0) = I(0)·q0/(1 - q0)` with `q0 = b/a_pre`, and accumulated as
/// `b∫I` by the trapezoidal rule.
pub fn national_total_infected(h: f64, b: f64, a_pre: f64, national: &ObservationSeries) -> Result<Vec<f64>> {
    let q0 = b / a_pre;
    if !(q0 > 0.0 && q0 < 1.0) {
        return Err(Error::Precondition(format!("projection needs 0 < b/a_pre < 1, got {q0}")));
    }
    let infected = national_projection(h, national);
    let Some(&i0) = infected.first() else {
        return Ok(Vec::new());
    };
    let mut removed = i0 * q0 / (1.0 - q0);
    let mut out = Vec::with_capacity(infected.len());
    out.push(i0 + removed);
    for w in infected.windows(2) {
        removed += 0.5 * b * (w[0] + w[1]);
        out.push(w[1] + removed);
    }
    Ok(out)
}

/// Per-date sum of `terapia_intensiva` over every region of a regional file.
pub fn regional_totals(path: impl AsRef<Path>) -> Result<BTreeMap<NaiveDate, u64>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::SchemaMismatch { path: path.to_path_buf(), column: name.to_string() })
    };
    let (date_col, icu_col) = (col(DATE_COLUMN)?, col(ICU_COLUMN)?);
    col(REGION_COLUMN)?;
    let mut totals = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let date = parse_date(rec.get(date_col).unwrap_or(""))?;
        let raw = rec.get(icu_col).unwrap_or("").trim();
        let count: u64 = raw.parse().map_err(|e| Error::Parse(format!("bad {ICU_COLUMN} value `{raw}` on {date}: {e}")))?;
        *totals.entry(date).or_insert(0) += count;
    }
    Ok(totals)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_rows(path: &Path, header: &str, rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "{header}").map_err(io)?;
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn export_band(band: &CredibleBand, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    band.validate()?;
    if band.times.is_empty() {
        return Err(Error::Precondition("refusing to export an empty band".into()));
    }
    write_rows(
        path,
        "t,lower,center,upper",
        (0..band.times.len()).map(|k| vec![band.times[k], band.lower[k], band.center[k], band.upper[k]]),
    )
}

pub fn read_band(path: impl AsRef<Path>, level: f64) -> Result<CredibleBand> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    for name in ["t", "lower", "center", "upper"] {
        if !headers.iter().any(|h| h == name) {
            return Err(Error::SchemaMismatch { path: path.to_path_buf(), column: name.into() });
        }
    }
    let mut band = CredibleBand { times: vec![], lower: vec![], center: vec![], upper: vec![], level };
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let v: Vec<f64> = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| Error::Parse(format!("bad number `{s}`: {e}"))))
            .collect::<Result<_>>()?;
        if v.len() != 4 {
            return Err(Error::Parse(format!("expected 4 columns, found {}", v.len())));
        }
        band.times.push(v[0]);
        band.lower.push(v[1]);
        band.center.push(v[2]);
        band.upper.push(v[3]);
    }
    Ok(band)
}

/// One row of a fit export.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitRow {
    pub t: f64,
    pub y_observed: f64,
    pub y_fitted: f64,
    pub a_hat: f64,
    pub gamma_hat: f64,
}

pub fn export_fit(rows: &[FitRow], path: impl AsRef<Path>) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Precondition("refusing to export an empty fit".into()));
    }
    write_rows(
        path.as_ref(),
        "t,y_observed,y_fitted,a_hat,gamma_hat",
        rows.iter().map(|r| vec![r.t, r.y_observed, r.y_fitted, r.a_hat, r.gamma_hat]),
    )
}

pub fn export_trajectory(traj: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    if traj.states.is_empty() {
        return Err(Error::Precondition("refusing to export an empty trajectory".into()));
    }
    write_rows(
        path.as_ref(),
        "t,s,i,r",
        traj.states.iter().enumerate().map(|(k, st)| vec![traj.grid.t(k), st.s, st.i, st.r]),
    )
}

/// Generic numeric table: `columns` names the header, each row must match it.
pub fn export_table(columns: &[&str], rows: &[Vec<f64>], path: impl AsRef<Path>) -> Result<()> {
    if let Some(bad) = rows.iter().find(|r| r.len() != columns.len()) {
        return Err(Error::Precondition(format!("row of width {} under a {}-column header", bad.len(), columns.len())));
    }
    write_rows(path.as_ref(), &columns.join(","), rows.iter().cloned())
}

/// Writes a series back out in the upstream schema (national layout when
/// `regional` is false).
pub fn write_dpc_csv(series: &[&ObservationSeries], regional: bool, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    if regional {
        writeln!(w, "{DATE_COLUMN},stato,{REGION_COLUMN},{ICU_COLUMN}").map_err(io)?;
    } else {
        writeln!(w, "{DATE_COLUMN},stato,{ICU_COLUMN}").map_err(io)?;
    }
    let n = series.iter().map(|s| s.len()).max().unwrap_or(0);
    for k in 0..n {
        for s in series {
            if k >= s.len() {
                continue;
            }
            let stamp = format!("{}T18:00:00", s.dates[k]);
            if regional {
                writeln!(w, "{stamp},ITA,{},{}", s.region, s.icu_counts[k]).map_err(io)?;
            } else {
                writeln!(w, "{stamp},ITA,{}", s.icu_counts[k]).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}
