//! Vantage-point hygiene before and after a campaign: the online cache-proxy test, the
//! offline title check, and inbound-censorship verification of the control servers.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Duration;

use crate::model::{
    ControlServer, Dataset, ExclusionReason, ProbeOutcome, ProbeSpec, TestDomain, VantagePoint,
};
use crate::prober::{self, http, ProbeContext, RawResult, Transport};

#[derive(Debug, thiserror::Error)]
pub enum VettingError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing title table: {0}")]
    Json(#[from] serde_json::Error),
    #[error("insufficient evidence: {have} clean vantage points, at least {need} required")]
    InsufficientEvidence { have: usize, need: usize },
}

/// Two servers that answer the same Host with different payloads. A cache between a
/// vantage point and the servers shows up as the first server's payload coming back
/// from the second.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceServerPair {
    pub shared_domain: String,
    pub server_a: ControlServer,
    pub server_b: ControlServer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CacheVerdict {
    Keep,
    Exclude { reason: ExclusionReason, note: String },
}

impl CacheVerdict {
    pub fn is_excluded(&self) -> bool {
        matches!(self, CacheVerdict::Exclude { .. })
    }
}

fn body_has(result: &RawResult, token: &str) -> bool {
    match result {
        RawResult::Response(bytes) => {
            http::contains(http::parse_response(bytes).body, token.as_bytes())
        }
        _ => false,
    }
}

fn describe(result: &RawResult) -> &'static str {
    match result {
        RawResult::Response(_) => "an unexpected payload",
        RawResult::Reset => "a reset",
        RawResult::Timeout => "a timeout",
    }
}

/// Probes server A then server B with the same Host over fresh connections.
pub fn cache_test<T: Transport + ?Sized>(
    vp: &VantagePoint,
    pair: &ReferenceServerPair,
    user_agent: &str,
    timeout: Duration,
    transport: &mut T,
) -> CacheVerdict {
    let exclude = |note: String| CacheVerdict::Exclude { reason: ExclusionReason::CacheOnline, note };
    let domain = TestDomain { name: pair.shared_domain.to_ascii_lowercase(), country_scope: vp.country.clone() };
    let request = prober::build_request(&domain, user_agent);

    let first = match transport.exchange(vp, &pair.server_a, &request, timeout) {
        Ok(ex) => ex.result,
        Err(e) => return exclude(format!("first reference probe failed: {e}")),
    };
    if matches!(first, RawResult::Timeout | RawResult::Reset) {
        return exclude(format!("first reference probe got {}", describe(&first)));
    }
    let second = match transport.exchange(vp, &pair.server_b, &request, timeout) {
        Ok(ex) => ex.result,
        Err(e) => return exclude(format!("second reference probe failed: {e}")),
    };
    if body_has(&second, &pair.server_b.sentinel_token) {
        CacheVerdict::Keep
    } else if body_has(&second, &pair.server_a.sentinel_token) {
        exclude("second reference server answered with the first server's payload".into())
    } else {
        exclude(format!("second reference probe got {}", describe(&second)))
    }
}

/// Canonical landing-page titles of the test domains.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LegitTitleTable {
    titles: BTreeMap<String, String>,
}

impl LegitTitleTable {
    pub fn new(entries: impl IntoIterator<Item = (String, String)>) -> Self {
        LegitTitleTable {
            titles: entries.into_iter().map(|(d, t)| (d, t.trim().to_string())).collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, VettingError> {
        let raw: BTreeMap<String, String> = serde_json::from_str(text)?;
        Ok(Self::new(raw))
    }

    pub fn load(path: &Path) -> Result<Self, VettingError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| VettingError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    pub fn title(&self, domain: &str) -> Option<&str> {
        self.titles.get(domain).map(String::as_str)
    }

    /// True if `title` is the legit title of `domain`, ignoring case and outer whitespace.
    pub fn matches(&self, domain: &str, title: &str) -> bool {
        self.title(domain)
            .is_some_and(|t| t.to_lowercase() == title.trim().to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.titles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.titles.is_empty()
    }
}

/// Vantage points that received a domain's real landing page instead of the sentinel,
/// which only an on-path cache can produce.
pub fn offline_cache_check(dataset: &Dataset, table: &LegitTitleTable) -> BTreeSet<String> {
    dataset
        .records()
        .iter()
        .filter(|r| match &r.final_outcome {
            ProbeOutcome::OtherPayload { title: Some(t), .. } => table.matches(&r.domain, t),
            _ => false,
        })
        .map(|r| r.vp.id.clone())
        .collect()
}

/// Applies the offline check to a dataset in place, returning the newly excluded VPs.
pub fn apply_offline_check(dataset: &mut Dataset, table: &LegitTitleTable) -> BTreeSet<String> {
    let found = offline_cache_check(dataset, table);
    for id in &found {
        dataset.exclude(id, ExclusionReason::CacheOffline);
    }
    found
}

/// Domains a vantage point can fetch without censorship: those scoped to other countries.
pub fn non_censored_domains(domains: &[TestDomain]) -> impl Fn(&VantagePoint) -> Vec<TestDomain> + '_ {
    move |vp| domains.iter().filter(|d| d.country_scope != vp.country).cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InboundFailure {
    pub vp_id: String,
    pub server_id: String,
    pub domain: String,
    pub outcome: ProbeOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerCheck {
    pub server_id: String,
    pub probes: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InboundReport {
    pub servers: Vec<ServerCheck>,
    pub failures: Vec<InboundFailure>,
}

impl InboundReport {
    pub fn failing_servers(&self) -> Vec<&str> {
        self.servers.iter().filter(|s| !s.passed).map(|s| s.server_id.as_str()).collect()
    }

    pub fn all_passed(&self) -> bool {
        self.servers.iter().all(|s| s.passed)
    }
}

/// Probes every server from every clean vantage point with domains that are not censored
/// in that vantage point's country. A server passes only if every probe returns its
/// sentinel. Servers that got no probes at all fail.
pub fn verify_inbound_clean<T, P>(
    clean_vps: &[VantagePoint],
    servers: &[ControlServer],
    domain_picker: P,
    min_clean_vps: usize,
    ctx: &ProbeContext<'_>,
    timeout: Duration,
    max_attempts: u32,
    transport: &mut T,
) -> Result<InboundReport, VettingError>
where
    T: Transport + ?Sized,
    P: Fn(&VantagePoint) -> Vec<TestDomain>,
{
    let need = min_clean_vps.max(1);
    if clean_vps.len() < need {
        return Err(VettingError::InsufficientEvidence { have: clean_vps.len(), need });
    }
    let mut checks: Vec<ServerCheck> = servers
        .iter()
        .map(|s| ServerCheck { server_id: s.id.clone(), probes: 0, passed: true })
        .collect();
    let mut failures = Vec::new();
    for vp in clean_vps {
        let domains = domain_picker(vp);
        for (check, server) in checks.iter_mut().zip(servers) {
            for domain in &domains {
                let spec = ProbeSpec {
                    vp: vp.clone(),
                    server: server.clone(),
                    domain: domain.clone(),
                    timeout,
                    max_attempts,
                };
                let record = prober::probe(&spec, ctx, transport);
                check.probes += 1;
                if record.final_outcome != ProbeOutcome::Sentinel {
                    check.passed = false;
                    failures.push(InboundFailure {
                        vp_id: vp.id.clone(),
                        server_id: server.id.clone(),
                        domain: domain.name.clone(),
                        outcome: record.final_outcome,
                    });
                }
            }
        }
    }
    for c in &mut checks {
        if c.probes == 0 {
            c.passed = false;
        }
    }
    Ok(InboundReport { servers: checks, failures })
}
