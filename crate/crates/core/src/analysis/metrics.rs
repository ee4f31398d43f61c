use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::cube::VpVerdictCube;
use crate::model::Dataset;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AnalysisError {
    #[error("no data for country {0}")]
    UnknownCountry(String),
    #[error("need at least two {0} with data")]
    TooFewColumns(&'static str),
    #[error("empty input")]
    EmptyInput,
}

/// Whether a percentage counts vantage points or individual requests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Vp,
    Request,
}

impl std::fmt::Display for Granularity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Granularity::Vp => "vp",
            Granularity::Request => "request",
        })
    }
}

fn pct(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

/// Rounds half-up to `decimals` places. A tiny bias absorbs binary representation error
/// in values like 48.985.
pub fn round_half_up(x: f64, decimals: i32) -> f64 {
    let f = 10f64.powi(decimals);
    (x * f + 0.5 + 1e-9).floor() / f
}

/// Two-decimal rendering; `n/a` for undefined values.
pub fn fmt_pct(x: Option<f64>) -> String {
    match x {
        Some(v) => format!("{:.2}", round_half_up(v, 2)),
        None => "n/a".to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountrySummary {
    pub country: String,
    pub total_vps: usize,
    pub censored_vps: usize,
    pub inconsistent_vps: usize,
    pub mechanism_diverse_vps: usize,
    pub censorship_pct: Option<f64>,
    pub inconsistency_pct: Option<f64>,
}

pub fn country_summary(cube: &VpVerdictCube, country: &str) -> Result<CountrySummary, AnalysisError> {
    if !cube.has_country(country) {
        return Err(AnalysisError::UnknownCountry(country.to_string()));
    }
    let (mut total, mut censored, mut inconsistent, mut diverse) = (0, 0, 0, 0);
    for vp in cube.vps_in(country) {
        total += 1;
        if vp.is_censored() {
            censored += 1;
            if vp.is_inconsistent() {
                inconsistent += 1;
            }
            if vp.is_mechanism_diverse() {
                diverse += 1;
            }
        }
    }
    Ok(CountrySummary {
        country: country.to_string(),
        total_vps: total,
        censored_vps: censored,
        inconsistent_vps: inconsistent,
        mechanism_diverse_vps: diverse,
        censorship_pct: pct(censored, total),
        inconsistency_pct: pct(inconsistent, censored),
    })
}

pub fn country_summaries(cube: &VpVerdictCube) -> Vec<CountrySummary> {
    cube.countries().iter().map(|c| country_summary(cube, c).expect("country from cube")).collect()
}

/// Share of a country's vantage points with at least one censored request. `None` when
/// the country has no countable vantage points.
pub fn censorship_pct(cube: &VpVerdictCube, country: &str) -> Result<Option<f64>, AnalysisError> {
    Ok(country_summary(cube, country)?.censorship_pct)
}

/// Share of censored vantage points that saw a domain censored on one path and not on
/// another. `None` when nothing was censored.
pub fn inconsistency_pct(cube: &VpVerdictCube, country: &str) -> Result<Option<f64>, AnalysisError> {
    Ok(country_summary(cube, country)?.inconsistency_pct)
}

/// Request-level share of censored requests for one domain within one country.
pub fn domain_censorship_pct(dataset: &Dataset, country: &str, domain: &str) -> Option<f64> {
    let (mut total, mut censored) = (0, 0);
    for r in dataset.countable().filter(|r| r.vp.country == country && r.domain == domain) {
        total += 1;
        if r.verdict.is_censored() {
            censored += 1;
        }
    }
    pct(censored, total)
}

/// max − min over the columns.
pub fn spread(values: &[f64]) -> Result<f64, AnalysisError> {
    if values.len() < 2 {
        return Err(AnalysisError::TooFewColumns("columns"));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(max - min)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Column {
    pub key: String,
    pub measured: usize,
    pub censored: usize,
    pub pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathSummary {
    pub columns: Vec<Column>,
    pub inconsistency: f64,
}

fn summarize(columns: Vec<Column>, what: &'static str) -> Result<PathSummary, AnalysisError> {
    let values: Vec<f64> = columns.iter().map(|c| c.pct).collect();
    let inconsistency = spread(&values).map_err(|_| AnalysisError::TooFewColumns(what))?;
    Ok(PathSummary { columns, inconsistency })
}

fn server_columns<'a>(
    cube: &VpVerdictCube,
    vps: impl Iterator<Item = &'a super::cube::VpCells> + Clone,
    granularity: Granularity,
) -> Vec<Column> {
    let mut out = Vec::new();
    for sid in cube.servers().keys() {
        let (mut measured, mut censored) = (0, 0);
        for vp in vps.clone() {
            match granularity {
                Granularity::Vp => {
                    if vp.has_server(sid) {
                        measured += 1;
                        censored += usize::from(vp.censored_on(sid));
                    }
                }
                Granularity::Request => {
                    for (k, v) in &vp.cells {
                        if &k.server == sid {
                            measured += 1;
                            censored += usize::from(v.is_censored());
                        }
                    }
                }
            }
        }
        if let Some(p) = pct(censored, measured) {
            out.push(Column { key: sid.clone(), measured, censored, pct: p });
        }
    }
    out
}

/// Per-server censorship percentages for one country, and their spread.
pub fn destination_inconsistency(
    cube: &VpVerdictCube,
    country: &str,
    granularity: Granularity,
) -> Result<PathSummary, AnalysisError> {
    if !cube.has_country(country) {
        return Err(AnalysisError::UnknownCountry(country.to_string()));
    }
    summarize(server_columns(cube, cube.vps_in(country), granularity), "servers")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AsSummary {
    pub asn: u32,
    /// Most common country among the AS's vantage points.
    pub country: String,
    pub vps: usize,
    pub paths: PathSummary,
}

/// Per-server percentages for every AS with at least `min_vps` vantage points, sorted by
/// spread, largest first.
pub fn as_inconsistency(cube: &VpVerdictCube, min_vps: usize, granularity: Granularity) -> Vec<AsSummary> {
    let mut by_as: BTreeMap<u32, Vec<&super::cube::VpCells>> = BTreeMap::new();
    for vp in cube.vps() {
        by_as.entry(vp.info.asn).or_default().push(vp);
    }
    let mut out = Vec::new();
    for (asn, vps) in by_as {
        if vps.len() < min_vps {
            continue;
        }
        let mut countries: BTreeMap<&str, usize> = BTreeMap::new();
        for v in &vps {
            *countries.entry(v.info.country.as_str()).or_default() += 1;
        }
        let country = countries.iter().max_by_key(|(c, n)| (**n, std::cmp::Reverse(**c))).map(|(c, _)| c.to_string()).unwrap_or_default();
        if let Ok(paths) = summarize(server_columns(cube, vps.iter().copied(), granularity), "servers") {
            out.push(AsSummary { asn, country, vps: vps.len(), paths });
        }
    }
    out.sort_by(|a, b| b.paths.inconsistency.total_cmp(&a.paths.inconsistency).then(a.asn.cmp(&b.asn)));
    out
}

/// Request-level censorship per hosting platform for one country, and their spread.
pub fn hosting_inconsistency(dataset: &Dataset, country: &str) -> Result<PathSummary, AnalysisError> {
    let mut by_platform: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut seen = false;
    for r in dataset.countable().filter(|r| r.vp.country == country) {
        seen = true;
        let e = by_platform.entry(r.server.platform.as_str()).or_default();
        e.0 += 1;
        e.1 += usize::from(r.verdict.is_censored());
    }
    if !seen {
        return Err(AnalysisError::UnknownCountry(country.to_string()));
    }
    let columns = by_platform
        .into_iter()
        .map(|(p, (measured, censored))| Column {
            key: p.to_string(),
            measured,
            censored,
            pct: pct(censored, measured).expect("nonzero"),
        })
        .collect();
    summarize(columns, "platforms")
}

/// Empirical CDF as step points: one (value, fraction ≤ value) per distinct value.
pub fn cdf_series(values: &[f64]) -> Result<Vec<(f64, f64)>, AnalysisError> {
    if values.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, v) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *v => last.1 = frac,
            _ => out.push((*v, frac)),
        }
    }
    Ok(out)
}

/// Evaluates a step CDF at `x`.
pub fn cdf_at(series: &[(f64, f64)], x: f64) -> f64 {
    series.iter().take_while(|(v, _)| *v <= x).last().map(|(_, f)| *f).unwrap_or(0.0)
}
