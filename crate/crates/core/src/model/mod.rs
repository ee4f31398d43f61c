//! Core domain types shared by every other module. Nothing in here performs I/O.

pub mod country;
mod validate;

pub use validate::{validate_campaign, Violation};

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::{Ipv4Addr, SocketAddrV4};
use std::time::Duration;

/// Current version of the results-file schema.
pub const SCHEMA_VERSION: u32 = 1;

pub const DEFAULT_TIMEOUT_MS: u64 = 5_000;
/// One initial attempt plus four retries.
pub const DEFAULT_MAX_ATTEMPTS: u32 = 5;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("invalid hostname {0:?}")]
    InvalidHostname(String),
    #[error("unknown country code {0:?}")]
    UnknownCountry(String),
    #[error("invalid sentinel token {0:?}: expected 32 lowercase hex characters")]
    InvalidToken(String),
    #[error("probe timeout must be positive")]
    ZeroTimeout,
    #[error("max_attempts must be at least 1")]
    ZeroAttempts,
    #[error("record references unknown {kind} {id:?}")]
    UnknownReference { kind: &'static str, id: String },
}

/// Checks DNS hostname syntax: labels of 1..=63 alphanumerics or hyphens (not at the
/// label edges), total length at most 253, no trailing dot.
pub fn is_valid_hostname(name: &str) -> bool {
    if name.is_empty() || name.len() > 253 {
        return false;
    }
    name.split('.').all(|label| {
        !label.is_empty()
            && label.len() <= 63
            && !label.starts_with('-')
            && !label.ends_with('-')
            && label.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-')
    })
}

/// A domain name used in the Host header of probes, tagged with the country in which it
/// is known to be censored.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TestDomain {
    pub name: String,
    pub country_scope: String,
}

impl TestDomain {
    /// Validates and normalizes (lower-cases) the name.
    pub fn new(name: &str, country_scope: &str) -> Result<Self, ModelError> {
        if !is_valid_hostname(name) {
            return Err(ModelError::InvalidHostname(name.to_string()));
        }
        if !country::is_known(country_scope) {
            return Err(ModelError::UnknownCountry(country_scope.to_string()));
        }
        Ok(TestDomain {
            name: name.to_ascii_lowercase(),
            country_scope: country_scope.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credentials {
    pub username: String,
    pub password: String,
}

/// How a vantage point originates traffic.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Access {
    /// The probing host itself is the vantage point (VPN exit, local machine).
    #[default]
    Direct,
    /// A SOCKS5 proxy relays the connection (residential proxy).
    Socks5 {
        endpoint: SocketAddrV4,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        credentials: Option<Credentials>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VantagePoint {
    pub id: String,
    pub address: Ipv4Addr,
    pub country: String,
    pub asn: u32,
    #[serde(default)]
    pub access: Access,
}

impl VantagePoint {
    pub fn info(&self) -> VpInfo {
        VpInfo {
            id: self.id.clone(),
            ip: self.address,
            country: self.country.clone(),
            asn: self.asn,
        }
    }
}

/// Returns true if `token` is exactly 32 lowercase hex characters.
pub fn is_valid_token(token: &str) -> bool {
    token.len() == 32 && token.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

fn default_http_port() -> u16 {
    80
}

/// A measurement destination that answers every request with its own sentinel payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlServer {
    pub id: String,
    pub address: Ipv4Addr,
    #[serde(default = "default_http_port")]
    pub port: u16,
    pub platform: String,
    pub region: String,
    pub sentinel_token: String,
}

impl ControlServer {
    pub fn info(&self) -> ServerInfo {
        ServerInfo {
            id: self.id.clone(),
            platform: self.platform.clone(),
            region: self.region.clone(),
            ip: self.address,
        }
    }

    pub fn socket_addr(&self) -> SocketAddrV4 {
        SocketAddrV4::new(self.address, self.port)
    }
}

/// Everything needed to issue one measurement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeSpec {
    pub vp: VantagePoint,
    pub server: ControlServer,
    pub domain: TestDomain,
    pub timeout: Duration,
    pub max_attempts: u32,
}

impl ProbeSpec {
    pub fn new(
        vp: VantagePoint,
        server: ControlServer,
        domain: TestDomain,
        timeout: Duration,
        max_attempts: u32,
    ) -> Result<Self, ModelError> {
        if timeout.is_zero() {
            return Err(ModelError::ZeroTimeout);
        }
        if max_attempts == 0 {
            return Err(ModelError::ZeroAttempts);
        }
        Ok(ProbeSpec { vp, server, domain, timeout, max_attempts })
    }

    /// Spec with the default 5 s timeout and 5 attempts.
    pub fn with_defaults(vp: VantagePoint, server: ControlServer, domain: TestDomain) -> Self {
        ProbeSpec {
            vp,
            server,
            domain,
            timeout: Duration::from_millis(DEFAULT_TIMEOUT_MS),
            max_attempts: DEFAULT_MAX_ATTEMPTS,
        }
    }
}

/// What a single attempt observed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProbeOutcome {
    Sentinel,
    Blockpage {
        signature_id: String,
    },
    Reset,
    Timeout,
    OtherPayload {
        body_digest: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        title: Option<String>,
    },
}

impl ProbeOutcome {
    pub fn is_timeout(&self) -> bool {
        matches!(self, ProbeOutcome::Timeout)
    }
}

/// How a censor interfered.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mechanism {
    Drop,
    Reset,
    Blockpage { signature_id: String },
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mechanism::Drop => f.write_str("drop"),
            Mechanism::Reset => f.write_str("reset"),
            Mechanism::Blockpage { signature_id } => write!(f, "blockpage:{signature_id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Verdict {
    Uncensored,
    Censored { mechanism: Mechanism },
    /// An unexpected payload that is neither the sentinel nor a known blockpage.
    Anomalous,
}

impl Verdict {
    /// The verdict implied by a record's terminal outcome. A terminal `Timeout` only exists
    /// once every attempt has timed out, so it always means a drop.
    pub fn from_outcome(outcome: &ProbeOutcome) -> Verdict {
        match outcome {
            ProbeOutcome::Sentinel => Verdict::Uncensored,
            ProbeOutcome::Blockpage { signature_id } => Verdict::Censored {
                mechanism: Mechanism::Blockpage { signature_id: signature_id.clone() },
            },
            ProbeOutcome::Reset => Verdict::Censored { mechanism: Mechanism::Reset },
            ProbeOutcome::Timeout => Verdict::Censored { mechanism: Mechanism::Drop },
            ProbeOutcome::OtherPayload { .. } => Verdict::Anomalous,
        }
    }

    pub fn is_censored(&self) -> bool {
        matches!(self, Verdict::Censored { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempt {
    pub outcome: ProbeOutcome,
    /// Round-trip time; absent for timeouts.
    pub rtt_ms: Option<u64>,
}

/// Vantage-point identity as stored in results.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VpInfo {
    pub id: String,
    pub ip: Ipv4Addr,
    pub country: String,
    pub asn: u32,
}

/// Control-server identity as stored in results.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ServerInfo {
    pub id: String,
    pub platform: String,
    pub region: String,
    pub ip: Ipv4Addr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    CacheOnline,
    CacheOffline,
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExclusionReason::CacheOnline => "cache_online",
            ExclusionReason::CacheOffline => "cache_offline",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordFlag {
    CacheOnline,
    CacheOffline,
    /// The transport could not be set up (e.g. SOCKS handshake refused). Such records
    /// are inconclusive and never counted by analysis.
    TransportError,
}

impl From<ExclusionReason> for RecordFlag {
    fn from(r: ExclusionReason) -> Self {
        match r {
            ExclusionReason::CacheOnline => RecordFlag::CacheOnline,
            ExclusionReason::CacheOffline => RecordFlag::CacheOffline,
        }
    }
}

/// One (vantage point, control server, domain) measurement. This is also the wire form
/// written to results files, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub schema_version: u32,
    pub campaign_id: String,
    pub epoch: u32,
    /// Milliseconds since the Unix epoch (simulated clock under simnet).
    pub ts_start: u64,
    pub ts_end: u64,
    pub vp: VpInfo,
    pub server: ServerInfo,
    pub domain: String,
    pub timeout_ms: u64,
    pub max_attempts: u32,
    pub attempts: Vec<Attempt>,
    pub final_outcome: ProbeOutcome,
    pub verdict: Verdict,
    #[serde(default)]
    pub flags: Vec<RecordFlag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Fields this version does not know about, kept so rewrites are lossless.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl ProbeRecord {
    pub fn has_flag(&self, flag: RecordFlag) -> bool {
        self.flags.contains(&flag)
    }

    pub fn is_inconclusive(&self) -> bool {
        self.has_flag(RecordFlag::TransportError)
    }

    pub fn is_excluded(&self) -> bool {
        self.has_flag(RecordFlag::CacheOnline) || self.has_flag(RecordFlag::CacheOffline)
    }

    pub fn add_flag(&mut self, flag: RecordFlag) {
        if !self.flags.contains(&flag) {
            self.flags.push(flag);
            self.flags.sort();
        }
    }

    /// Returns a description of every broken record invariant (empty when well-formed).
    pub fn invariant_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let n = self.attempts.len();
        if n == 0 {
            out.push("record has no attempts".to_string());
            return out;
        }
        if n > self.max_attempts as usize {
            out.push(format!("{n} attempts exceed max_attempts {}", self.max_attempts));
        }
        if self.attempts[n - 1].outcome != self.final_outcome {
            out.push("final_outcome differs from the last attempt".to_string());
        }
        if self.attempts[..n - 1].iter().any(|a| !a.outcome.is_timeout()) {
            out.push("a non-final attempt is not a timeout".to_string());
        }
        if self.final_outcome.is_timeout() && n != self.max_attempts as usize {
            out.push("terminal timeout before exhausting attempts".to_string());
        }
        if Verdict::from_outcome(&self.final_outcome) != self.verdict {
            out.push("verdict inconsistent with final outcome".to_string());
        }
        if self.ts_end < self.ts_start {
            out.push("ts_end precedes ts_start".to_string());
        }
        out
    }
}

/// Who answered at a given TTL.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Responder {
    Silent,
    Host {
        ip: Ipv4Addr,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        asn: Option<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HopSignal {
    TtlExceeded,
    /// Nothing arrived within the per-hop timeout (or the response was not informative).
    NoReply,
    CensorSign { mechanism: Mechanism },
    SentinelReached,
}

impl HopSignal {
    pub fn is_terminal(&self) -> bool {
        matches!(self, HopSignal::CensorSign { .. } | HopSignal::SentinelReached)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHop {
    pub ttl: u32,
    pub responder: Responder,
    pub signal: HopSignal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceTerminal {
    Sentinel,
    Censored { mechanism: Mechanism },
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceResult {
    pub vp: VpInfo,
    pub server: ServerInfo,
    pub domain: String,
    pub hops: Vec<TraceHop>,
    pub censor_hop: Option<u32>,
    pub terminal: TraceTerminal,
}

impl TraceResult {
    pub fn invariant_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.hops.windows(2).any(|w| w[0].ttl >= w[1].ttl) {
            out.push("hops not strictly ascending by ttl".to_string());
        }
        if let Some(pos) = self.hops.iter().position(|h| h.signal.is_terminal()) {
            if pos + 1 != self.hops.len() {
                out.push("hops follow a terminal signal".to_string());
            }
        }
        let sign_ttl = self.hops.iter().find_map(|h| match h.signal {
            HopSignal::CensorSign { .. } => Some(h.ttl),
            _ => None,
        });
        match (&self.terminal, self.censor_hop) {
            (TraceTerminal::Censored { .. }, Some(c)) if sign_ttl == Some(c) => {}
            (TraceTerminal::Censored { .. }, _) => {
                out.push("censored trace without matching censor_hop".to_string())
            }
            (_, Some(_)) => out.push("censor_hop set on an uncensored trace".to_string()),
            _ => {}
        }
        out
    }
}

/// The collection every metric is computed from.
///
/// Records of excluded vantage points stay in the dataset, flagged with the exclusion
/// reason; analysis skips them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    records: Vec<ProbeRecord>,
    excluded_vps: BTreeMap<String, ExclusionReason>,
    vps: BTreeMap<String, VpInfo>,
    servers: BTreeMap<String, ServerInfo>,
    domains: BTreeSet<String>,
}

impl Dataset {
    /// An empty dataset whose records must reference the given catalogs.
    pub fn with_catalogs(
        vps: impl IntoIterator<Item = VpInfo>,
        servers: impl IntoIterator<Item = ServerInfo>,
        domains: impl IntoIterator<Item = String>,
    ) -> Self {
        Dataset {
            records: Vec::new(),
            excluded_vps: BTreeMap::new(),
            vps: vps.into_iter().map(|v| (v.id.clone(), v)).collect(),
            servers: servers.into_iter().map(|s| (s.id.clone(), s)).collect(),
            domains: domains.into_iter().collect(),
        }
    }

    /// Builds a dataset whose catalogs are whatever the records reference. Exclusions are
    /// recovered from record flags.
    pub fn from_records(records: Vec<ProbeRecord>) -> Self {
        let mut ds = Dataset::default();
        for r in &records {
            ds.vps.entry(r.vp.id.clone()).or_insert_with(|| r.vp.clone());
            ds.servers.entry(r.server.id.clone()).or_insert_with(|| r.server.clone());
            ds.domains.insert(r.domain.clone());
            let reason = if r.has_flag(RecordFlag::CacheOnline) {
                Some(ExclusionReason::CacheOnline)
            } else if r.has_flag(RecordFlag::CacheOffline) {
                Some(ExclusionReason::CacheOffline)
            } else {
                None
            };
            if let Some(reason) = reason {
                ds.excluded_vps.entry(r.vp.id.clone()).or_insert(reason);
            }
        }
        ds.records = records;
        ds
    }

    /// Appends a record, flagging it if its vantage point is already excluded.
    pub fn push(&mut self, mut record: ProbeRecord) -> Result<(), ModelError> {
        if !self.vps.contains_key(&record.vp.id) {
            return Err(ModelError::UnknownReference { kind: "vantage point", id: record.vp.id });
        }
        if !self.servers.contains_key(&record.server.id) {
            return Err(ModelError::UnknownReference { kind: "server", id: record.server.id });
        }
        if !self.domains.contains(&record.domain) {
            return Err(ModelError::UnknownReference { kind: "domain", id: record.domain });
        }
        if let Some(reason) = self.excluded_vps.get(&record.vp.id) {
            record.add_flag((*reason).into());
        }
        self.records.push(record);
        Ok(())
    }

    /// Marks a vantage point excluded and flags all of its records. The first reason
    /// recorded for a vantage point is kept.
    pub fn exclude(&mut self, vp_id: &str, reason: ExclusionReason) {
        let reason = *self.excluded_vps.entry(vp_id.to_string()).or_insert(reason);
        for r in self.records.iter_mut().filter(|r| r.vp.id == vp_id) {
            r.add_flag(reason.into());
        }
    }

    pub fn records(&self) -> &[ProbeRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<ProbeRecord> {
        self.records
    }

    pub fn excluded_vps(&self) -> &BTreeMap<String, ExclusionReason> {
        &self.excluded_vps
    }

    pub fn is_excluded(&self, vp_id: &str) -> bool {
        self.excluded_vps.contains_key(vp_id)
    }

    pub fn vps(&self) -> &BTreeMap<String, VpInfo> {
        &self.vps
    }

    pub fn servers(&self) -> &BTreeMap<String, ServerInfo> {
        &self.servers
    }

    pub fn domains(&self) -> &BTreeSet<String> {
        &self.domains
    }

    /// Records that analysis may count: not excluded and not inconclusive.
    pub fn countable(&self) -> impl Iterator<Item = &ProbeRecord> {
        self.records
            .iter()
            .filter(move |r| !self.is_excluded(&r.vp.id) && !r.is_excluded() && !r.is_inconclusive())
    }
}
