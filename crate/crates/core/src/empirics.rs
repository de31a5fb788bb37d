//! EIS regressions per country: data loading, instrument construction and
//! report rows.
//!
//! Two CSV layouts are understood:
//!
//! * `yogo`: `date, dc, r, z_nominal_rate, z_inflation, z_dc_lag, z_dp`, one
//!   file per country (named after the country code) or a single file with an
//!   extra `country` column. The `z_*` columns are taken as already lagged.
//! * `housing`: `year, country, dc, r` in long format. Instruments are a lag
//!   of the country's own return and the contemporaneous mean return of all
//!   other countries.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::{meat, CovarianceSpec};
use crate::error::{IvError, Result};
use crate::estimators::{estimate_2sls, estimate_gmm2, estimate_liml};
use crate::model::IvDataset;
use crate::overid::{j_test, kp_test_with};
use crate::strength::effective_f;

pub const YOGO_INSTRUMENTS: [&str; 4] = ["z_nominal_rate", "z_inflation", "z_dc_lag", "z_dp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schema {
    Yogo,
    Housing,
}

impl FromStr for Schema {
    type Err = IvError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "yogo" => Ok(Schema::Yogo),
            "housing" => Ok(Schema::Housing),
            _ => Err(IvError::Config(format!("unknown schema '{s}', expected yogo or housing"))),
        }
    }
}

/// Which variable is the outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Normalization {
    /// `Δc = μ_c + ψ r + u`
    PsiOnR,
    /// `r = μ_r + (1/ψ) Δc + η`
    InvPsiOnDc,
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::PsiOnR => "psi",
            Normalization::InvPsiOnDc => "invpsi",
        })
    }
}

/// Lag of the own housing return used as an instrument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstrumentSet {
    Lag1,
    Lag2,
}

impl InstrumentSet {
    pub fn lags(&self) -> usize {
        match self {
            InstrumentSet::Lag1 => 1,
            InstrumentSet::Lag2 => 2,
        }
    }
}

impl FromStr for InstrumentSet {
    type Err = IvError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lag1" => Ok(InstrumentSet::Lag1),
            "lag2" => Ok(InstrumentSet::Lag2),
            _ => Err(IvError::Config(format!("unknown instrument set '{s}', expected lag1 or lag2"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountryPanel {
    pub country: String,
    pub period: (String, String),
    pub dc: DVector<f64>,
    pub r: DVector<f64>,
    pub instrument_names: Vec<String>,
    pub instruments: DMatrix<f64>,
}

impl CountryPanel {
    pub fn validate(&self) -> Result<()> {
        let t = self.dc.len();
        if self.r.len() != t || self.instruments.nrows() != t {
            return Err(IvError::Dimension(format!("{}: series lengths differ", self.country)));
        }
        if self.instruments.ncols() < 2 || self.instrument_names.len() != self.instruments.ncols() {
            return Err(IvError::Dimension(format!("{}: need at least two named instruments", self.country)));
        }
        Ok(())
    }

    pub fn dataset(&self, normalization: Normalization) -> Result<IvDataset> {
        let t = self.dc.len();
        let (y, x) = match normalization {
            Normalization::PsiOnR => (&self.dc, &self.r),
            Normalization::InvPsiOnDc => (&self.r, &self.dc),
        };
        IvDataset::new(
            y.clone(),
            DMatrix::from_column_slice(t, 1, x.as_slice()),
            self.instruments.clone(),
            Some(DMatrix::from_element(t, 1, 1.0)),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadedPanels {
    pub panels: Vec<CountryPanel>,
    pub warnings: Vec<String>,
}

fn parse_cell(s: &str) -> Result<Option<f64>> {
    let t = s.trim();
    if t.is_empty() || matches!(t, "NA" | "NaN" | "nan" | "." | "null") {
        return Ok(None);
    }
    t.parse::<f64>().map(Some).map_err(|_| IvError::Parse(format!("cannot parse '{t}' as a number")))
}

struct Table {
    header: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

fn read_table(path: &Path) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.to_string()).collect();
    if header.iter().all(|h| h.is_empty()) {
        return Err(IvError::Parse(format!("{}: empty file", path.display())));
    }
    let rows = rdr.records().collect::<std::result::Result<Vec<_>, _>>()?;
    if rows.is_empty() {
        return Err(IvError::Parse(format!("{}: no data rows", path.display())));
    }
    Ok(Table { header, rows })
}

fn column_index(table: &Table, name: &str, path: &Path) -> Result<usize> {
    table
        .header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| IvError::Schema(format!("{}: missing column '{name}'", path.display())))
}

fn unknown_columns(table: &Table, known: &[&str], path: &Path) -> Vec<String> {
    table
        .header
        .iter()
        .filter(|h| !known.contains(&h.as_str()))
        .map(|h| format!("{}: ignoring unknown column '{h}'", path.display()))
        .collect()
}

/// Keeps the contiguous block of complete rows; incomplete rows may only
/// appear at the ends. Returns the retained index range.
fn trim_ends(complete: &[bool], what: &str) -> Result<std::ops::Range<usize>> {
    let first = complete.iter().position(|&c| c).ok_or_else(|| IvError::Parse(format!("{what}: no complete rows")))?;
    let last = complete.iter().rposition(|&c| c).unwrap_or(first);
    if let Some(gap) = (first..=last).find(|&i| !complete[i]) {
        return Err(IvError::Gap(format!("{what}: missing value in interior row {}", gap + 1)));
    }
    Ok(first..last + 1)
}

fn yogo_from_table(table: &Table, path: &Path, fallback_country: &str) -> Result<(Vec<CountryPanel>, Vec<String>)> {
    let mut required = vec!["date", "dc", "r"];
    required.extend(YOGO_INSTRUMENTS);
    let idx: Vec<usize> = required.iter().map(|c| column_index(table, c, path)).collect::<Result<_>>()?;
    let country_col = table.header.iter().position(|h| h == "country");
    let mut known = required.clone();
    known.push("country");
    let warnings = unknown_columns(table, &known, path);

    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, row) in table.rows.iter().enumerate() {
        let c = match country_col {
            Some(k) => row.get(k).unwrap_or("").trim().to_string(),
            None => fallback_country.to_string(),
        };
        groups.entry(c).or_default().push(i);
    }
    let mut panels = Vec::new();
    for (country, rows) in groups {
        let mut values: Vec<Vec<Option<f64>>> = Vec::with_capacity(rows.len());
        for &i in &rows {
            let rec = &table.rows[i];
            let vals = idx[1..].iter().map(|&k| parse_cell(rec.get(k).unwrap_or(""))).collect::<Result<Vec<_>>>()?;
            values.push(vals);
        }
        let complete: Vec<bool> = values.iter().map(|v| v.iter().all(Option::is_some)).collect();
        let keep = trim_ends(&complete, &format!("{} ({country})", path.display()))?;
        let t = keep.len();
        let get = |r: usize, c: usize| values[keep.start + r][c].unwrap_or(f64::NAN);
        let date = |r: usize| table.rows[rows[keep.start + r]].get(idx[0]).unwrap_or("").to_string();
        let panel = CountryPanel {
            country: country.clone(),
            period: (date(0), date(t - 1)),
            dc: DVector::from_fn(t, |r, _| get(r, 0)),
            r: DVector::from_fn(t, |r, _| get(r, 1)),
            instrument_names: YOGO_INSTRUMENTS.iter().map(|s| s.to_string()).collect(),
            instruments: DMatrix::from_fn(t, YOGO_INSTRUMENTS.len(), |r, c| get(r, c + 2)),
        };
        panel.validate()?;
        panels.push(panel);
    }
    Ok((panels, warnings))
}

fn csv_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(IvError::Io(format!("{}: no CSV files found", path.display())));
        }
        Ok(files)
    } else if path.exists() {
        Ok(vec![path.to_path_buf()])
    } else {
        Err(IvError::Io(format!("{}: no such file or directory", path.display())))
    }
}

/// Loads Yogo-layout panels from a file or a directory of per-country files.
pub fn load_yogo(path: &Path) -> Result<LoadedPanels> {
    let mut panels = Vec::new();
    let mut warnings = Vec::new();
    for file in csv_files(path)? {
        let stem = file.file_stem().map(|s| s.to_string_lossy().to_uppercase()).unwrap_or_default();
        let table = read_table(&file)?;
        let (p, w) = yogo_from_table(&table, &file, &stem)?;
        panels.extend(p);
        warnings.extend(w);
    }
    panels.sort_by(|a, b| a.country.cmp(&b.country));
    Ok(LoadedPanels { panels, warnings })
}

/// Annual series of one country in the housing layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HousingSeries {
    pub country: String,
    pub years: Vec<i64>,
    pub dc: Vec<f64>,
    pub r: Vec<f64>,
}

/// `(year, Δc, r)` with missing cells as `None`.
type YearRow = (i64, Option<f64>, Option<f64>);

/// Loads the long-format housing file, one consecutive-year series per country.
pub fn load_housing(path: &Path) -> Result<(Vec<HousingSeries>, Vec<String>)> {
    let table = read_table(path)?;
    let known = ["year", "country", "dc", "r"];
    let idx: Vec<usize> = known.iter().map(|c| column_index(&table, c, path)).collect::<Result<_>>()?;
    let warnings = unknown_columns(&table, &known, path);
    let mut by_country: BTreeMap<String, Vec<YearRow>> = BTreeMap::new();
    for rec in &table.rows {
        let year_s = rec.get(idx[0]).unwrap_or("").trim();
        let year = year_s
            .parse::<f64>()
            .ok()
            .filter(|y| y.fract() == 0.0)
            .ok_or_else(|| IvError::Parse(format!("cannot parse year '{year_s}'")))? as i64;
        let country = rec.get(idx[1]).unwrap_or("").trim().to_string();
        if country.is_empty() {
            return Err(IvError::Parse("empty country code".into()));
        }
        let dc = parse_cell(rec.get(idx[2]).unwrap_or(""))?;
        let r = parse_cell(rec.get(idx[3]).unwrap_or(""))?;
        by_country.entry(country).or_default().push((year, dc, r));
    }
    let mut out = Vec::new();
    for (country, mut rows) in by_country {
        rows.sort_by_key(|r| r.0);
        if rows.windows(2).any(|w| w[1].0 != w[0].0 + 1) {
            return Err(IvError::Gap(format!("{country}: years are not consecutive")));
        }
        let complete: Vec<bool> = rows.iter().map(|r| r.1.is_some() && r.2.is_some()).collect();
        let keep = trim_ends(&complete, &country)?;
        let rows = &rows[keep];
        out.push(HousingSeries {
            country,
            years: rows.iter().map(|r| r.0).collect(),
            dc: rows.iter().map(|r| r.1.unwrap_or(f64::NAN)).collect(),
            r: rows.iter().map(|r| r.2.unwrap_or(f64::NAN)).collect(),
        });
    }
    Ok((out, warnings))
}

/// Shifts each series down by `lags`: row `t` of the result holds the value
/// at `t` of the input and lines up with outcome row `t + lags`.
pub fn build_lagged_instruments(series: &[(String, Vec<f64>)], lags: usize) -> Result<(Vec<String>, DMatrix<f64>)> {
    let t = series.first().map(|s| s.1.len()).unwrap_or(0);
    if series.is_empty() || series.iter().any(|s| s.1.len() != t) {
        return Err(IvError::Dimension("lagged instruments need equal-length series".into()));
    }
    if lags == 0 || lags >= t {
        return Err(IvError::Dimension(format!("lag {lags} is out of range for {t} observations")));
    }
    let names = series.iter().map(|s| format!("{}_lag{lags}", s.0)).collect();
    let m = DMatrix::from_fn(t - lags, series.len(), |r, c| series[c].1[r]);
    Ok((names, m))
}

/// Elementwise mean over every country except `target`.
pub fn build_loo_mean_instrument(returns_by_country: &[(String, Vec<f64>)], target: &str) -> Result<Vec<f64>> {
    if returns_by_country.len() < 2 {
        return Err(IvError::Dimension("leave-one-out mean needs at least two countries".into()));
    }
    let t = returns_by_country[0].1.len();
    if returns_by_country.iter().any(|s| s.1.len() != t) {
        return Err(IvError::Dimension("leave-one-out mean needs aligned series".into()));
    }
    if !returns_by_country.iter().any(|s| s.0 == target) {
        return Err(IvError::Dimension(format!("unknown country '{target}'")));
    }
    let others: Vec<&Vec<f64>> = returns_by_country.iter().filter(|s| s.0 != target).map(|s| &s.1).collect();
    let k = others.len() as f64;
    Ok((0..t).map(|i| others.iter().map(|s| s[i]).sum::<f64>() / k).collect())
}

/// Housing panels: instruments `(r_{t+1-lags}, r̄^for_{t+1})`. The foreign
/// mean is taken over the years common to all countries.
pub fn housing_panels(series: &[HousingSeries], set: InstrumentSet) -> Result<Vec<CountryPanel>> {
    if series.len() < 2 {
        return Err(IvError::Dimension("housing data need at least two countries".into()));
    }
    let start = series.iter().map(|s| s.years[0]).max().unwrap_or(0);
    let end = series.iter().map(|s| *s.years.last().unwrap_or(&0)).min().unwrap_or(0);
    if end < start {
        return Err(IvError::Dimension("housing series share no common years".into()));
    }
    let window = |s: &HousingSeries, v: &[f64]| -> Vec<f64> {
        let off = (start - s.years[0]) as usize;
        v[off..off + (end - start + 1) as usize].to_vec()
    };
    let returns: Vec<(String, Vec<f64>)> = series.iter().map(|s| (s.country.clone(), window(s, &s.r))).collect();
    let lags = set.lags();
    let mut panels = Vec::new();
    for s in series {
        let r = window(s, &s.r);
        let dc = window(s, &s.dc);
        let (_, lagged) = build_lagged_instruments(&[("r".to_string(), r.clone())], lags)?;
        let foreign = build_loo_mean_instrument(&returns, &s.country)?;
        let t = r.len() - lags;
        let mut z = DMatrix::zeros(t, 2);
        z.set_column(0, &lagged.column(0));
        z.set_column(1, &DVector::from_fn(t, |i, _| foreign[i + lags]));
        let panel = CountryPanel {
            country: s.country.clone(),
            period: ((start + lags as i64).to_string(), end.to_string()),
            dc: DVector::from_fn(t, |i, _| dc[i + lags]),
            r: DVector::from_fn(t, |i, _| r[i + lags]),
            instrument_names: vec![format!("r_lag{lags}"), "r_foreign_mean".into()],
            instruments: z,
        };
        panel.validate()?;
        panels.push(panel);
    }
    Ok(panels)
}

pub fn load_panels(path: &Path, schema: Schema, set: InstrumentSet) -> Result<LoadedPanels> {
    match schema {
        Schema::Yogo => load_yogo(path),
        Schema::Housing => {
            let (series, warnings) = load_housing(path)?;
            Ok(LoadedPanels { panels: housing_panels(&series, set)?, warnings })
        }
    }
}

/// Newey-West lag length used in the published tables.
pub fn default_hac_lags(schema: Schema, country: &str) -> usize {
    match schema {
        Schema::Yogo if country.eq_ignore_ascii_case("USA") => 6,
        _ => 4,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EisRow {
    pub country: String,
    pub period_start: String,
    pub period_end: String,
    pub normalization: Normalization,
    pub observations: usize,
    pub hac_lags: usize,
    pub f_eff: f64,
    pub kappa: f64,
    pub beta_2sls: f64,
    pub beta_liml: f64,
    pub j_stat: f64,
    pub kp_stat: f64,
}

/// One report row: constant partialled out, Newey-West meat with `hac_lags`
/// in F_eff, J and KP.
pub fn run_eis_row(panel: &CountryPanel, normalization: Normalization, hac_lags: usize) -> Result<EisRow> {
    panel.validate()?;
    let d = panel.dataset(normalization)?.partial_out()?;
    let spec = CovarianceSpec::NeweyWest { lags: hac_lags };
    let tsls = estimate_2sls(&d)?;
    let s = meat(&d.z, &tsls.residuals, spec)?;
    let gmm = estimate_gmm2(&d, &tsls, &s)?;
    let j = j_test(&d, &tsls, &gmm, spec)?;
    let liml = estimate_liml(&d)?;
    let kp = kp_test_with(&d, &liml, spec)?;
    let f = effective_f(&d, spec)?;
    Ok(EisRow {
        country: panel.country.clone(),
        period_start: panel.period.0.clone(),
        period_end: panel.period.1.clone(),
        normalization,
        observations: d.n(),
        hac_lags,
        f_eff: f.statistic,
        kappa: f.critical_value.unwrap_or(f64::NAN),
        beta_2sls: tsls.beta_hat[0],
        beta_liml: liml.beta_hat[0],
        j_stat: j.statistic,
        kp_stat: kp.statistic,
    })
}

/// Rows for every panel and normalization, ordered by normalization then
/// country code. `hac_lags = None` uses the published lag choices.
pub fn run_eis(
    panels: &[CountryPanel],
    schema: Schema,
    normalizations: &[Normalization],
    hac_lags: Option<usize>,
) -> Result<Vec<EisRow>> {
    let mut sorted: Vec<&CountryPanel> = panels.iter().collect();
    sorted.sort_by(|a, b| a.country.cmp(&b.country));
    let mut rows = Vec::new();
    for &norm in normalizations {
        for p in &sorted {
            let lags = hac_lags.unwrap_or_else(|| default_hac_lags(schema, &p.country));
            rows.push(run_eis_row(p, norm, lags)?);
        }
    }
    Ok(rows)
}

pub const EIS_CSV_HEADER: [&str; 12] = [
    "normalization",
    "country",
    "period_start",
    "period_end",
    "observations",
    "hac_lags",
    "f_eff",
    "kappa",
    "beta_2sls",
    "beta_liml",
    "j_stat",
    "kp_stat",
];

pub fn eis_csv_row(r: &EisRow) -> Vec<String> {
    vec![
        r.normalization.to_string(),
        r.country.clone(),
        r.period_start.clone(),
        r.period_end.clone(),
        r.observations.to_string(),
        r.hac_lags.to_string(),
        r.f_eff.to_string(),
        r.kappa.to_string(),
        r.beta_2sls.to_string(),
        r.beta_liml.to_string(),
        r.j_stat.to_string(),
        r.kp_stat.to_string(),
    ]
}
