//! Cross-checks client records against sentinel server logs.
//!
//! Every record whose final outcome was the sentinel payload should have a matching log
//! line on its server: same client address, same Host, timestamp inside the probe window
//! widened by a tolerance. Nothing here feeds the metrics.

use serde::Serialize;
use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader};
use std::path::Path;

use crate::model::{ProbeOutcome, ProbeRecord};
use crate::sentinel::ServerLogEntry;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Unmatched {
    pub vp_id: String,
    pub server_id: String,
    pub domain: String,
    pub ts_start: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AuditReport {
    pub matched: usize,
    pub unmatched_records: Vec<Unmatched>,
    /// Log lines no record claimed, per server.
    pub unclaimed_log_entries: BTreeMap<String, usize>,
}

/// Reads a sentinel JSONL log, skipping lines that do not parse.
pub fn read_server_log(path: &Path) -> io::Result<Vec<ServerLogEntry>> {
    let mut out = Vec::new();
    for line in BufReader::new(std::fs::File::open(path)?).lines() {
        let line = line?;
        match serde_json::from_str(&line) {
            Ok(e) => out.push(e),
            Err(e) if !line.trim().is_empty() => log::warn!("{}: skipping bad log line: {e}", path.display()),
            Err(_) => {}
        }
    }
    Ok(out)
}

fn host_only(h: &str) -> String {
    h.split(':').next().unwrap_or("").trim().to_ascii_lowercase()
}

/// Matches records to log lines of their own server. Each log line is claimed at most
/// once. Records for servers without a log are ignored.
pub fn audit(records: &[ProbeRecord], logs: &BTreeMap<String, Vec<ServerLogEntry>>, window_ms: u64) -> AuditReport {
    let mut claimed: BTreeMap<&str, Vec<bool>> = logs.iter().map(|(k, v)| (k.as_str(), vec![false; v.len()])).collect();
    let mut report = AuditReport::default();
    for r in records.iter().filter(|r| r.final_outcome == ProbeOutcome::Sentinel) {
        let (Some(entries), Some(used)) = (logs.get(&r.server.id), claimed.get_mut(r.server.id.as_str())) else {
            continue;
        };
        let lo = r.ts_start.saturating_sub(window_ms);
        let hi = r.ts_end.saturating_add(window_ms);
        let hit = entries.iter().enumerate().position(|(i, e)| {
            !used[i]
                && e.client_ip == r.vp.ip
                && host_only(&e.host_header) == r.domain.to_ascii_lowercase()
                && (lo..=hi).contains(&e.timestamp)
        });
        match hit {
            Some(i) => {
                used[i] = true;
                report.matched += 1;
            }
            None => report.unmatched_records.push(Unmatched {
                vp_id: r.vp.id.clone(),
                server_id: r.server.id.clone(),
                domain: r.domain.clone(),
                ts_start: r.ts_start,
            }),
        }
    }
    for (server, used) in claimed {
        let n = used.iter().filter(|u| !**u).count();
        if n > 0 {
            report.unclaimed_log_entries.insert(server.to_string(), n);
        }
    }
    report
}
