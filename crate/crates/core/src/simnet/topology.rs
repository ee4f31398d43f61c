use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::net::Ipv4Addr;
use std::path::Path;

use super::routing::{self, RouteError};

#[derive(Debug, thiserror::Error)]
pub enum TopologyError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing topology: {0}")]
    Json(#[from] serde_json::Error),
    #[error("AS {0} is defined more than once")]
    DuplicateAsn(u32),
    #[error("{context} refers to unknown AS {asn}")]
    UnknownAsn { context: String, asn: u32 },
    #[error("AS {0} has no routers")]
    NoRouters(u32),
    #[error("AS {asn}: {field} has {len} entries for {routers} routers")]
    RouterArrayLength { asn: u32, field: &'static str, len: usize, routers: u32 },
    #[error("{kind} in AS {asn} sits at router {index}, but the AS has {routers} routers")]
    BadRouterIndex { kind: &'static str, asn: u32, index: u32, routers: u32 },
    #[error("censor in AS {0} has an empty blocklist")]
    EmptyBlocklist(u32),
    #[error("more than one link between AS {0} and AS {1}")]
    DuplicateLink(u32, u32),
    #[error("AS {0} is linked to itself")]
    SelfLink(u32),
    #[error("{kind} id {id:?} is used more than once")]
    DuplicateHost { kind: &'static str, id: String },
    #[error(transparent)]
    Route(#[from] RouteError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Eyeball,
    Transit,
    Cloud,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsNode {
    pub asn: u32,
    pub role: Role,
    pub router_count: u32,
    /// Per-router ICMP behaviour; missing entries mean the router responds.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub responds_icmp: Vec<bool>,
    /// Per-router addresses; missing entries get a synthetic 10.0.0.0/8 address.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub router_addresses: Vec<Ipv4Addr>,
}

impl AsNode {
    pub fn responds(&self, index: u32) -> bool {
        self.responds_icmp.get(index as usize).copied().unwrap_or(true)
    }

    pub fn router_address(&self, index: u32) -> Ipv4Addr {
        match self.router_addresses.get(index as usize) {
            Some(a) => *a,
            None => synthetic_router_address(self.asn, index),
        }
    }
}

pub fn synthetic_router_address(asn: u32, index: u32) -> Ipv4Addr {
    let n = (asn.wrapping_mul(64).wrapping_add(index)) & 0x00ff_ffff;
    Ipv4Addr::from(0x0a00_0000 | n)
}

/// Business relationship of `a` towards `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    CustomerOf,
    Peer,
    ProviderOf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Link {
    pub a: u32,
    pub b: u32,
    pub relation: Relation,
}

/// A settlement-free interconnect between an access ISP and a cloud network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeeringEdge {
    pub a: u32,
    pub b: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Inbound,
    Outbound,
    Both,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Blocklist {
    #[serde(default)]
    pub domains: Vec<String>,
    #[serde(default)]
    pub keywords: Vec<String>,
}

impl Blocklist {
    pub fn is_empty(&self) -> bool {
        self.domains.is_empty() && self.keywords.is_empty()
    }

    /// Exact (case-insensitive) Host match, or a keyword anywhere in the Host value or
    /// the request line.
    pub fn matches(&self, host: &str, request_line: &str) -> bool {
        let host = host.to_ascii_lowercase();
        if self.domains.iter().any(|d| d.eq_ignore_ascii_case(&host)) {
            return true;
        }
        let line = request_line.to_ascii_lowercase();
        self.keywords.iter().any(|k| {
            let k = k.to_ascii_lowercase();
            !k.is_empty() && (host.contains(&k) || line.contains(&k))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CensorAction {
    Drop,
    Rst,
    /// `body` is either a full HTTP response (starting with `HTTP/`) or an HTML body that
    /// gets wrapped in a 200 response.
    Blockpage { signature_id: String, body: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtlCopyMode {
    /// The injected packet carries the probe's TTL as it was at the censor.
    #[default]
    Remaining,
    /// The injected packet carries the probe's TTL as sent by the client.
    Original,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Censor {
    pub asn: u32,
    pub router_index: u32,
    pub direction: Direction,
    pub blocklist: Blocklist,
    pub action: CensorAction,
    #[serde(default)]
    pub ttl_copy: bool,
    #[serde(default)]
    pub ttl_copy_mode: TtlCopyMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheProxy {
    pub asn: u32,
    pub router_index: u32,
    /// Host → cached body.
    #[serde(default)]
    pub store: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostedAt {
    pub id: String,
    pub asn: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub nodes: Vec<AsNode>,
    #[serde(default)]
    pub links: Vec<Link>,
    #[serde(default)]
    pub censors: Vec<Censor>,
    #[serde(default)]
    pub caches: Vec<CacheProxy>,
    #[serde(default)]
    pub vps: Vec<HostedAt>,
    #[serde(default)]
    pub servers: Vec<HostedAt>,
    #[serde(default)]
    pub direct_peering: Vec<PeeringEdge>,
    #[serde(default)]
    pub seed: u64,
}

impl Topology {
    pub fn from_json(text: &str) -> Result<Topology, TopologyError> {
        let t: Topology = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Topology, TopologyError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| TopologyError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("topology serializes")
    }

    pub fn node(&self, asn: u32) -> Option<&AsNode> {
        self.nodes.iter().find(|n| n.asn == asn)
    }

    pub fn vp_asn(&self, id: &str) -> Option<u32> {
        self.vps.iter().find(|v| v.id == id).map(|v| v.asn)
    }

    pub fn server_asn(&self, id: &str) -> Option<u32> {
        self.servers.iter().find(|s| s.id == id).map(|s| s.asn)
    }

    /// Checks structural invariants, then that every vantage point can reach every server
    /// under valley-free routing.
    pub fn validate(&self) -> Result<(), TopologyError> {
        let mut routers: BTreeMap<u32, u32> = BTreeMap::new();
        for n in &self.nodes {
            if routers.insert(n.asn, n.router_count).is_some() {
                return Err(TopologyError::DuplicateAsn(n.asn));
            }
            if n.router_count == 0 {
                return Err(TopologyError::NoRouters(n.asn));
            }
            for (field, len) in [("responds_icmp", n.responds_icmp.len()), ("router_addresses", n.router_addresses.len())] {
                if len != 0 && len != n.router_count as usize {
                    return Err(TopologyError::RouterArrayLength { asn: n.asn, field, len, routers: n.router_count });
                }
            }
        }
        let known = |context: String, asn: u32| -> Result<u32, TopologyError> {
            routers.get(&asn).copied().ok_or(TopologyError::UnknownAsn { context, asn })
        };

        let mut pairs: HashSet<(u32, u32)> = HashSet::new();
        let edges = self
            .links
            .iter()
            .map(|l| (l.a, l.b))
            .chain(self.direct_peering.iter().map(|p| (p.a, p.b)));
        for (a, b) in edges {
            known(format!("link {a}-{b}"), a)?;
            known(format!("link {a}-{b}"), b)?;
            if a == b {
                return Err(TopologyError::SelfLink(a));
            }
            if !pairs.insert((a.min(b), a.max(b))) {
                return Err(TopologyError::DuplicateLink(a.min(b), a.max(b)));
            }
        }

        for c in &self.censors {
            let n = known("censor".into(), c.asn)?;
            if c.router_index >= n {
                return Err(TopologyError::BadRouterIndex { kind: "censor", asn: c.asn, index: c.router_index, routers: n });
            }
            if c.blocklist.is_empty() {
                return Err(TopologyError::EmptyBlocklist(c.asn));
            }
        }
        for c in &self.caches {
            let n = known("cache".into(), c.asn)?;
            if c.router_index >= n {
                return Err(TopologyError::BadRouterIndex { kind: "cache", asn: c.asn, index: c.router_index, routers: n });
            }
        }
        for (kind, hosts) in [("vantage point", &self.vps), ("server", &self.servers)] {
            let mut ids = BTreeSet::new();
            for h in hosts {
                known(format!("{kind} {}", h.id), h.asn)?;
                if !ids.insert(h.id.as_str()) {
                    return Err(TopologyError::DuplicateHost { kind, id: h.id.clone() });
                }
            }
        }

        let graph = routing::Graph::new(self);
        graph.check_acyclic()?;
        let server_asns: BTreeSet<u32> = self.servers.iter().map(|s| s.asn).collect();
        let vp_asns: BTreeSet<u32> = self.vps.iter().map(|v| v.asn).collect();
        for dst in server_asns {
            let table = graph.routes_to(dst)?;
            for &src in &vp_asns {
                if !table.contains_key(&src) {
                    return Err(RouteError::NoValleyFreePath { src, dst }.into());
                }
            }
        }
        Ok(())
    }
}
