//! Results files: one JSON record per line.

use log::warn;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::model::{Dataset, ProbeRecord, SCHEMA_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum ResultsError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path} line {line}: {source}")]
    Json { path: PathBuf, line: usize, source: serde_json::Error },
    #[error("{path} line {line}: schema version {found} is not supported (this build reads version {expected})")]
    SchemaVersion { path: PathBuf, line: usize, found: u64, expected: u32 },
    #[error("{0}: no records")]
    NoRecords(PathBuf),
}

/// Path of the file that receives records while a run is in progress.
pub fn partial_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

/// Appends records to a file, flushing each line so an interrupted run keeps everything
/// written so far.
pub struct ResultsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    count: usize,
}

impl ResultsWriter {
    pub fn create(path: &Path) -> io::Result<ResultsWriter> {
        Ok(ResultsWriter { path: path.to_path_buf(), out: BufWriter::new(File::create(path)?), count: 0 })
    }

    pub fn write(&mut self, record: &ProbeRecord) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn finish(mut self) -> io::Result<usize> {
        self.out.flush()?;
        self.out.get_ref().sync_all()?;
        Ok(self.count)
    }
}

/// Writes all records to `path` through a temporary file and a rename.
pub fn write_results(path: &Path, records: &[ProbeRecord]) -> io::Result<usize> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut w = ResultsWriter::create(&tmp)?;
    for r in records {
        w.write(r)?;
    }
    let n = w.finish()?;
    std::fs::rename(&tmp, path)?;
    Ok(n)
}

/// Reads a results file. A final line that does not parse (a run cut off mid-write) is
/// skipped with a warning; a bad line anywhere else is an error.
pub fn read_results(path: &Path) -> Result<Vec<ProbeRecord>, ResultsError> {
    let io_err = |source| ResultsError::Io { path: path.to_path_buf(), source };
    let file = File::open(path).map_err(io_err)?;
    let mut lines = Vec::new();
    for line in BufReader::new(file).lines() {
        lines.push(line.map_err(io_err)?);
    }
    let last = lines.iter().rposition(|l| !l.trim().is_empty());
    let mut records = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(source) if Some(i) == last => {
                warn!("{}: skipping truncated final line {}: {source}", path.display(), i + 1);
                break;
            }
            Err(source) => return Err(ResultsError::Json { path: path.to_path_buf(), line: i + 1, source }),
        };
        if let Some(found) = value.get("schema_version").and_then(|v| v.as_u64()) {
            if found != u64::from(SCHEMA_VERSION) {
                return Err(ResultsError::SchemaVersion {
                    path: path.to_path_buf(),
                    line: i + 1,
                    found,
                    expected: SCHEMA_VERSION,
                });
            }
        }
        let record = serde_json::from_value(value)
            .map_err(|source| ResultsError::Json { path: path.to_path_buf(), line: i + 1, source })?;
        records.push(record);
    }
    Ok(records)
}

/// Reads a results file into a dataset; an empty file is an error.
pub fn load_dataset(path: &Path) -> Result<Dataset, ResultsError> {
    let records = read_results(path)?;
    if records.is_empty() {
        return Err(ResultsError::NoRecords(path.to_path_buf()));
    }
    Ok(Dataset::from_records(records))
}
