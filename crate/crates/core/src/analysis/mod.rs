//! Censorship and inconsistency metrics over a dataset, plus the CSV reports.
//!
//! A vantage point is censored if any of its requests was censored, and inconsistent if
//! some domain was censored on one path and reached the sentinel on another. Destination
//! and hosting inconsistency are the max − min of per-server or per-platform censorship
//! percentages.

pub mod cube;
pub mod metrics;
pub mod report;

pub use cube::{CellKey, EpochMode, VpCells, VpVerdictCube};
pub use metrics::*;
pub use report::{render_country_table, write_reports, ReportError, ReportOptions, REPORT_FILES};

/// Builds the verdict cube for a dataset.
pub fn build_cube(dataset: &crate::model::Dataset, mode: EpochMode) -> VpVerdictCube {
    VpVerdictCube::build(dataset, mode)
}
