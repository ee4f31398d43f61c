//! Campaign configuration files.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashSet};
use std::net::{Ipv4Addr, SocketAddrV4};
use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::model::{Access, ControlServer, Credentials, TestDomain, VantagePoint};
use crate::prober::{SignatureDb, SignatureError, DEFAULT_USER_AGENT};
use crate::vetting::{LegitTitleTable, ReferenceServerPair, VettingError};

pub const DEFAULT_DESCRIPTION: &str = "This server is part of an academic network measurement \
experiment studying how HTTP requests are filtered along different network paths. It serves \
only this page and stores no data beyond connection logs.";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("referenced file {0} does not exist")]
    MissingFile(PathBuf),
    #[error("a seed is required to generate sentinel tokens or run deterministically")]
    MissingSeed,
    #[error("signature database: {0}")]
    Signatures(#[from] SignatureError),
    #[error("legit title table: {0}")]
    Titles(#[from] VettingError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Caps {
    pub per_country_per_epoch: usize,
}

impl Default for Caps {
    fn default() -> Self {
        Caps { per_country_per_epoch: 80 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSettings {
    pub timeout_ms: u64,
    pub max_attempts: u32,
    pub parallel: usize,
    pub user_agent: String,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            timeout_ms: crate::model::DEFAULT_TIMEOUT_MS,
            max_attempts: crate::model::DEFAULT_MAX_ATTEMPTS,
            parallel: 64,
            user_agent: DEFAULT_USER_AGENT.to_string(),
        }
    }
}

impl ProbeSettings {
    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceSettings {
    pub max_ttl: u32,
    pub per_hop_timeout_ms: u64,
}

impl Default for TraceSettings {
    fn default() -> Self {
        TraceSettings { max_ttl: 40, per_hop_timeout_ms: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VettingSettings {
    /// Clean vantage points needed before servers can be certified free of inbound
    /// censorship.
    pub min_clean_vps: usize,
    pub clean_vps: Vec<VantagePoint>,
}

impl Default for VettingSettings {
    fn default() -> Self {
        VettingSettings { min_clean_vps: 50, clean_vps: Vec::new() }
    }
}

/// A fully resolved campaign: file paths are absolute and every server has a token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub campaign_id: String,
    pub seed: Option<u64>,
    pub description: String,
    pub servers: Vec<ControlServer>,
    pub vps: Vec<VantagePoint>,
    /// Country code → domains censored there.
    pub domains: BTreeMap<String, Vec<String>>,
    pub reference_pair: Option<ReferenceServerPair>,
    pub legit_titles: Option<PathBuf>,
    pub signature_db: Option<PathBuf>,
    pub caps: Caps,
    pub probe: ProbeSettings,
    pub traceroute: TraceSettings,
    pub vetting: VettingSettings,
}

// File form. Tokens may be omitted and VPs may come from elsewhere.

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ServerEntry {
    id: String,
    address: Ipv4Addr,
    #[serde(default = "default_port")]
    port: u16,
    #[serde(default)]
    platform: String,
    #[serde(default)]
    region: String,
    #[serde(default)]
    sentinel_token: Option<String>,
}

fn default_port() -> u16 {
    80
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SocksEntry {
    #[serde(default)]
    id: Option<String>,
    endpoint: SocketAddrV4,
    #[serde(default)]
    credentials: Option<Credentials>,
    /// Exit address of the proxy, as reported by the provider.
    address: Ipv4Addr,
    country: String,
    asn: u32,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum VpSource {
    List(Vec<VantagePoint>),
    File { file: PathBuf },
    Socks { socks_endpoints: Vec<SocksEntry> },
}

impl Default for VpSource {
    fn default() -> Self {
        VpSource::List(Vec::new())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReferenceEntry {
    shared_domain: String,
    server_a: ServerEntry,
    server_b: ServerEntry,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct VettingEntry {
    min_clean_vps: Option<usize>,
    clean_vps: VpSource,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CampaignFile {
    campaign_id: String,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    description: Option<String>,
    servers: Vec<ServerEntry>,
    #[serde(default)]
    vps: VpSource,
    #[serde(default)]
    domains: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    reference_pair: Option<ReferenceEntry>,
    #[serde(default)]
    legit_titles: Option<PathBuf>,
    #[serde(default)]
    signature_db: Option<PathBuf>,
    #[serde(default)]
    caps: Caps,
    #[serde(default)]
    probe: ProbeSettings,
    #[serde(default)]
    traceroute: TraceSettings,
    #[serde(default)]
    vetting: VettingEntry,
}

fn resolve_path(base: &Path, p: PathBuf) -> Result<PathBuf, ConfigError> {
    let full = if p.is_absolute() { p } else { base.join(p) };
    if !full.exists() {
        return Err(ConfigError::MissingFile(full));
    }
    Ok(full)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path: path.to_path_buf(), source })
}

fn resolve_vps(base: &Path, source: VpSource) -> Result<Vec<VantagePoint>, ConfigError> {
    match source {
        VpSource::List(v) => Ok(v),
        VpSource::File { file } => read_json(&resolve_path(base, file)?),
        VpSource::Socks { socks_endpoints } => Ok(socks_endpoints
            .into_iter()
            .map(|e| VantagePoint {
                id: e.id.unwrap_or_else(|| format!("socks-{}", e.endpoint)),
                address: e.address,
                country: e.country,
                asn: e.asn,
                access: Access::Socks5 { endpoint: e.endpoint, credentials: e.credentials },
            })
            .collect()),
    }
}

struct TokenSource {
    rng: Option<ChaCha20Rng>,
    used: HashSet<String>,
}

impl TokenSource {
    fn fill(&mut self, given: Option<String>) -> Result<String, ConfigError> {
        if let Some(t) = given {
            return Ok(t);
        }
        let rng = self.rng.as_mut().ok_or(ConfigError::MissingSeed)?;
        loop {
            let mut bytes = [0u8; 16];
            rng.fill_bytes(&mut bytes);
            let token = hex::encode(bytes);
            if self.used.insert(token.clone()) {
                return Ok(token);
            }
        }
    }
}

impl ServerEntry {
    fn into_server(self, tokens: &mut TokenSource) -> Result<ControlServer, ConfigError> {
        Ok(ControlServer {
            sentinel_token: tokens.fill(self.sentinel_token)?,
            id: self.id,
            address: self.address,
            port: self.port,
            platform: self.platform,
            region: self.region,
        })
    }
}

impl CampaignConfig {
    /// Loads and resolves a config file. Relative paths are taken from the file's
    /// directory. Missing sentinel tokens are generated from the seed, in server order
    /// followed by reference servers a and b.
    pub fn load(path: &Path) -> Result<CampaignConfig, ConfigError> {
        Self::load_with_seed(path, None)
    }

    /// Like [`CampaignConfig::load`], with `seed` replacing the file's seed before any
    /// tokens are generated.
    pub fn load_with_seed(path: &Path, seed: Option<u64>) -> Result<CampaignConfig, ConfigError> {
        let mut raw: CampaignFile = read_json(path)?;
        if seed.is_some() {
            raw.seed = seed;
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::resolve(raw, &base)
    }

    /// Parses config JSON text, resolving relative paths against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<CampaignConfig, ConfigError> {
        let raw: CampaignFile = serde_json::from_str(text)
            .map_err(|source| ConfigError::Parse { path: PathBuf::from("<inline>"), source })?;
        Self::resolve(raw, base)
    }

    fn resolve(raw: CampaignFile, base: &Path) -> Result<CampaignConfig, ConfigError> {
        let mut used: HashSet<String> = raw.servers.iter().filter_map(|s| s.sentinel_token.clone()).collect();
        if let Some(r) = &raw.reference_pair {
            used.extend(r.server_a.sentinel_token.clone());
            used.extend(r.server_b.sentinel_token.clone());
        }
        let mut tokens = TokenSource { rng: raw.seed.map(ChaCha20Rng::seed_from_u64), used };

        let servers = raw
            .servers
            .into_iter()
            .map(|s| s.into_server(&mut tokens))
            .collect::<Result<Vec<_>, _>>()?;
        let reference_pair = match raw.reference_pair {
            Some(r) => Some(ReferenceServerPair {
                shared_domain: r.shared_domain,
                server_a: r.server_a.into_server(&mut tokens)?,
                server_b: r.server_b.into_server(&mut tokens)?,
            }),
            None => None,
        };
        let defaults = VettingSettings::default();
        Ok(CampaignConfig {
            campaign_id: raw.campaign_id,
            seed: raw.seed,
            description: raw.description.unwrap_or_else(|| DEFAULT_DESCRIPTION.to_string()),
            servers,
            vps: resolve_vps(base, raw.vps)?,
            domains: raw.domains,
            reference_pair,
            legit_titles: raw.legit_titles.map(|p| resolve_path(base, p)).transpose()?,
            signature_db: raw.signature_db.map(|p| resolve_path(base, p)).transpose()?,
            caps: raw.caps,
            probe: raw.probe,
            traceroute: raw.traceroute,
            vetting: VettingSettings {
                min_clean_vps: raw.vetting.min_clean_vps.unwrap_or(defaults.min_clean_vps),
                clean_vps: resolve_vps(base, raw.vetting.clean_vps)?,
            },
        })
    }

    /// The configured domains that pass validation, ordered by country then file order.
    pub fn test_domains(&self) -> Vec<TestDomain> {
        self.domains
            .iter()
            .flat_map(|(cc, names)| names.iter().filter_map(move |n| TestDomain::new(n, cc).ok()))
            .collect()
    }

    pub fn signatures(&self) -> Result<SignatureDb, ConfigError> {
        match &self.signature_db {
            Some(p) => Ok(SignatureDb::load(p)?),
            None => Ok(SignatureDb::builtin()),
        }
    }

    pub fn titles(&self) -> Result<LegitTitleTable, ConfigError> {
        match &self.legit_titles {
            Some(p) => Ok(LegitTitleTable::load(p)?),
            None => Ok(LegitTitleTable::default()),
        }
    }

    pub fn server(&self, id: &str) -> Option<&ControlServer> {
        self.servers.iter().find(|s| s.id == id)
    }

    pub fn vp(&self, id: &str) -> Option<&VantagePoint> {
        self.vps.iter().find(|v| v.id == id)
    }

    /// SHA-256 over the canonical JSON form of the resolved config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn require_seed(&self) -> Result<u64, ConfigError> {
        self.seed.ok_or(ConfigError::MissingSeed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "campaign_id": "c1",
        "seed": 7,
        "servers": [
            {"id": "s1", "address": "192.0.2.1", "platform": "aws", "region": "virginia"},
            {"id": "s2", "address": "192.0.2.2", "platform": "gcp", "region": "paris",
             "sentinel_token": "ffffffffffffffffffffffffffffffff"}
        ],
        "vps": [{"id": "v1", "address": "198.51.100.1", "country": "KR", "asn": 4766}],
        "domains": {"KR": ["Torrentdada.com", "bad host"]}
    }"#;

    #[test]
    fn defaults_and_tokens() {
        let c = CampaignConfig::from_json(MINIMAL, Path::new(".")).unwrap();
        assert_eq!(c.caps.per_country_per_epoch, 80);
        assert_eq!(c.probe.timeout_ms, 5000);
        assert_eq!(c.probe.max_attempts, 5);
        assert_eq!(c.probe.parallel, 64);
        assert_eq!(c.traceroute.max_ttl, 40);
        assert_eq!(c.traceroute.per_hop_timeout_ms, 2000);
        assert_eq!(c.vetting.min_clean_vps, 50);
        assert!(crate::model::is_valid_token(&c.servers[0].sentinel_token));
        assert_eq!(c.servers[1].sentinel_token, "ffffffffffffffffffffffffffffffff");
        let again = CampaignConfig::from_json(MINIMAL, Path::new(".")).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.hash(), again.hash());
        assert_eq!(c.test_domains(), vec![TestDomain::new("torrentdada.com", "KR").unwrap()]);
    }

    #[test]
    fn missing_token_without_seed() {
        let text = MINIMAL.replace("\"seed\": 7,", "");
        assert!(matches!(
            CampaignConfig::from_json(&text, Path::new(".")),
            Err(ConfigError::MissingSeed)
        ));
    }

    #[test]
    fn referenced_files_must_exist() {
        let text = MINIMAL.replace("\"seed\": 7,", "\"seed\": 7, \"signature_db\": \"nope.json\",");
        assert!(matches!(
            CampaignConfig::from_json(&text, Path::new("/nonexistent")),
            Err(ConfigError::MissingFile(_))
        ));
    }

    #[test]
    fn socks_source() {
        let text = MINIMAL.replace(
            r#""vps": [{"id": "v1", "address": "198.51.100.1", "country": "KR", "asn": 4766}]"#,
            r#""vps": {"socks_endpoints": [{"endpoint": "203.0.113.9:1080", "address": "198.51.100.7", "country": "KR", "asn": 4766,
                        "credentials": {"username": "u", "password": "p"}}]}"#,
        );
        let c = CampaignConfig::from_json(&text, Path::new(".")).unwrap();
        assert_eq!(c.vps[0].id, "socks-203.0.113.9:1080");
        assert!(matches!(c.vps[0].access, Access::Socks5 { .. }));
    }

    #[test]
    fn vp_file_source() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("vps.json"),
            r#"[{"id": "v9", "address": "198.51.100.9", "country": "IN", "asn": 9498}]"#,
        )
        .unwrap();
        let text = MINIMAL.replace(
            r#""vps": [{"id": "v1", "address": "198.51.100.1", "country": "KR", "asn": 4766}]"#,
            r#""vps": {"file": "vps.json"}"#,
        );
        let c = CampaignConfig::from_json(&text, dir.path()).unwrap();
        assert_eq!(c.vps[0].id, "v9");
    }
}
