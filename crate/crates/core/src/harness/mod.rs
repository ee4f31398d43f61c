//! Configuration, campaign runs, results persistence and reporting.

pub mod audit;
pub mod campaign;
pub mod config;
pub mod results;

pub use campaign::{
    manifest_path, run_campaign, run_net, run_sim, Campaign, CampaignError, RunManifest, RunOptions, RunSummary,
    TransportKind,
};
pub use config::{CampaignConfig, ConfigError};
pub use results::{load_dataset, read_results, write_results, ResultsError, ResultsWriter};

use std::path::Path;

use crate::analysis::{render_country_table, write_reports, CountrySummary, ReportError, ReportOptions};

#[derive(Debug, thiserror::Error)]
pub enum ReportRunError {
    #[error(transparent)]
    Results(#[from] ResultsError),
    #[error(transparent)]
    Report(#[from] ReportError),
}

/// Reads a results file, writes every report CSV into `out_dir`, and returns the
/// top-10 country table as text.
pub fn report(results: &Path, out_dir: &Path, opts: &ReportOptions) -> Result<(Vec<CountrySummary>, String), ReportRunError> {
    let dataset = load_dataset(results)?;
    let summaries = write_reports(&dataset, out_dir, opts)?;
    let table = render_country_table(&summaries, 0, 10);
    Ok((summaries, table))
}
