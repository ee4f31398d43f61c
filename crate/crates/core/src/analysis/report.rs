use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use super::cube::{EpochMode, VpVerdictCube};
use super::metrics::*;
use crate::model::Dataset;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportOptions {
    pub min_as_vps: usize,
    pub granularity: Granularity,
    pub epoch_mode: EpochMode,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions { min_as_vps: 80, granularity: Granularity::Vp, epoch_mode: EpochMode::PerEpoch }
    }
}

pub const REPORT_FILES: [&str; 7] = [
    "country_summary.csv",
    "destination_summary.csv",
    "as_summary.csv",
    "platform_summary.csv",
    "domain_summary.csv",
    "cdf_destination.csv",
    "cdf_hosting.csv",
];

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn writer(dir: &Path, name: &str, header: &[&str]) -> Result<csv::Writer<std::fs::File>, ReportError> {
    let mut w = csv::Writer::from_path(dir.join(name))?;
    w.write_record(header)?;
    Ok(w)
}

fn num(x: f64) -> String {
    fmt_pct(Some(x))
}

/// Writes every report CSV into `out_dir` and returns the country summaries.
pub fn write_reports(dataset: &Dataset, out_dir: &Path, opts: &ReportOptions) -> Result<Vec<CountrySummary>, ReportError> {
    std::fs::create_dir_all(out_dir)?;
    let cube = VpVerdictCube::build(dataset, opts.epoch_mode);
    let summaries = country_summaries(&cube);

    let mut w = writer(
        out_dir,
        "country_summary.csv",
        &["country", "total_vps", "censored_vps", "inconsistent_vps", "mechanism_diverse_vps", "censorship_pct", "inconsistency_pct"],
    )?;
    for s in &summaries {
        w.write_record([
            s.country.clone(),
            s.total_vps.to_string(),
            s.censored_vps.to_string(),
            s.inconsistent_vps.to_string(),
            s.mechanism_diverse_vps.to_string(),
            fmt_pct(s.censorship_pct),
            fmt_pct(s.inconsistency_pct),
        ])?;
    }
    w.flush()?;

    let mut w = writer(
        out_dir,
        "destination_summary.csv",
        &["country", "server_id", "platform", "region", "granularity", "measured", "censored", "censorship_pct", "destination_inconsistency"],
    )?;
    let mut destination_values = Vec::new();
    for c in cube.countries() {
        let Ok(paths) = destination_inconsistency(&cube, c, opts.granularity) else { continue };
        destination_values.push(paths.inconsistency);
        for col in &paths.columns {
            let info = &cube.servers()[&col.key];
            w.write_record([
                c.clone(),
                col.key.clone(),
                info.platform.clone(),
                info.region.clone(),
                opts.granularity.to_string(),
                col.measured.to_string(),
                col.censored.to_string(),
                num(col.pct),
                num(paths.inconsistency),
            ])?;
        }
    }
    w.flush()?;

    let mut w = writer(out_dir, "as_summary.csv", &["asn", "country", "vps", "server_id", "censorship_pct", "inconsistency"])?;
    for a in as_inconsistency(&cube, opts.min_as_vps, opts.granularity) {
        for col in &a.paths.columns {
            w.write_record([
                a.asn.to_string(),
                a.country.clone(),
                a.vps.to_string(),
                col.key.clone(),
                num(col.pct),
                num(a.paths.inconsistency),
            ])?;
        }
    }
    w.flush()?;

    let countries: BTreeSet<&str> = dataset.countable().map(|r| r.vp.country.as_str()).collect();
    let mut w = writer(
        out_dir,
        "platform_summary.csv",
        &["country", "platform", "requests", "censored_requests", "censorship_pct", "hosting_inconsistency"],
    )?;
    let mut hosting_values = Vec::new();
    for c in &countries {
        let Ok(paths) = hosting_inconsistency(dataset, c) else { continue };
        hosting_values.push(paths.inconsistency);
        for col in &paths.columns {
            w.write_record([
                c.to_string(),
                col.key.clone(),
                col.measured.to_string(),
                col.censored.to_string(),
                num(col.pct),
                num(paths.inconsistency),
            ])?;
        }
    }
    w.flush()?;

    let mut w = writer(out_dir, "domain_summary.csv", &["country", "domain", "requests", "censored_requests", "censorship_pct"])?;
    let pairs: BTreeSet<(&str, &str)> =
        dataset.countable().map(|r| (r.vp.country.as_str(), r.domain.as_str())).collect();
    for (c, d) in pairs {
        let rs: Vec<_> = dataset.countable().filter(|r| r.vp.country == c && r.domain == d).collect();
        let censored = rs.iter().filter(|r| r.verdict.is_censored()).count();
        w.write_record([
            c.to_string(),
            d.to_string(),
            rs.len().to_string(),
            censored.to_string(),
            fmt_pct(domain_censorship_pct(dataset, c, d)),
        ])?;
    }
    w.flush()?;

    for (name, values) in [("cdf_destination.csv", &destination_values), ("cdf_hosting.csv", &hosting_values)] {
        let mut w = writer(out_dir, name, &["x", "cdf"])?;
        if let Ok(series) = cdf_series(values) {
            for (x, f) in series {
                w.write_record([num(x), format!("{f:.4}")])?;
            }
        }
        w.flush()?;
    }

    Ok(summaries)
}

/// The `limit` most-censored countries with at least `min_vps` vantage points, as a
/// plain-text table.
pub fn render_country_table(summaries: &[CountrySummary], min_vps: usize, limit: usize) -> String {
    let mut rows: Vec<&CountrySummary> = summaries.iter().filter(|s| s.total_vps >= min_vps).collect();
    rows.sort_by(|a, b| {
        b.censorship_pct
            .unwrap_or(-1.0)
            .total_cmp(&a.censorship_pct.unwrap_or(-1.0))
            .then_with(|| a.country.cmp(&b.country))
    });
    let pct = |x: Option<f64>| match x {
        Some(_) => format!("{}%", fmt_pct(x)),
        None => fmt_pct(x),
    };
    let mut out = String::new();
    let _ = writeln!(out, "{:<8} {:>8} {:>9} {:>8} {:>11} {:>10}", "Country", "Total", "Censored", "Incons.", "% Censored", "% Incons.");
    for s in rows.into_iter().take(limit) {
        let _ = writeln!(
            out,
            "{:<8} {:>8} {:>9} {:>8} {:>11} {:>10}",
            s.country,
            s.total_vps,
            s.censored_vps,
            s.inconsistent_vps,
            pct(s.censorship_pct),
            pct(s.inconsistency_pct)
        );
    }
    out
}
