use std::collections::{BTreeMap, HashMap};
use std::fmt;

use super::{country, is_valid_hostname, is_valid_token, VantagePoint};
use crate::harness::config::CampaignConfig;

/// One broken invariant, naming the entity at fault.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub entity: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.entity, self.message)
    }
}

struct Collector(Vec<Violation>);

impl Collector {
    fn add(&mut self, entity: impl Into<String>, message: impl Into<String>) {
        self.0.push(Violation { entity: entity.into(), message: message.into() });
    }
}

fn check_vps(out: &mut Collector, label: &str, vps: &[VantagePoint]) {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for vp in vps {
        let entity = format!("{label} {}", vp.id);
        if vp.id.is_empty() {
            out.add(label, "id must not be empty");
        }
        *seen.entry(vp.id.as_str()).or_default() += 1;
        if vp.asn == 0 {
            out.add(&entity, "asn must be positive");
        }
        if vp.country.is_empty() {
            out.add(&entity, "country must not be empty");
        } else if !country::is_known(&vp.country) {
            out.add(&entity, format!("unknown country code {:?}", vp.country));
        }
    }
    let mut dups: Vec<_> = seen.into_iter().filter(|(_, n)| *n > 1).collect();
    dups.sort();
    for (id, n) in dups {
        out.add(format!("{label} {id}"), format!("id used {n} times"));
    }
}

/// Checks every catalog invariant of a campaign. An empty result means the campaign is
/// valid.
pub fn validate_campaign(config: &CampaignConfig) -> Vec<Violation> {
    let mut out = Collector(Vec::new());

    if config.campaign_id.trim().is_empty() {
        out.add("campaign", "campaign_id must not be empty");
    }

    // Servers.
    let mut ids: HashMap<&str, usize> = HashMap::new();
    let mut by_token: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut by_location: BTreeMap<(&str, &str), Vec<&str>> = BTreeMap::new();
    for s in &config.servers {
        let entity = format!("server {}", s.id);
        *ids.entry(s.id.as_str()).or_default() += 1;
        if s.id.is_empty() {
            out.add("server", "id must not be empty");
        }
        if s.platform.is_empty() {
            out.add(&entity, "platform must not be empty");
        }
        if s.region.is_empty() {
            out.add(&entity, "region must not be empty");
        }
        if !is_valid_token(&s.sentinel_token) {
            out.add(&entity, "sentinel_token must be 32 lowercase hex characters");
        }
        by_token.entry(s.sentinel_token.as_str()).or_default().push(&s.id);
        by_location.entry((s.platform.as_str(), s.region.as_str())).or_default().push(&s.id);
    }
    let mut dup_ids: Vec<_> = ids.into_iter().filter(|(_, n)| *n > 1).collect();
    dup_ids.sort();
    for (id, n) in dup_ids {
        out.add(format!("server {id}"), format!("id used {n} times"));
    }
    for (_, holders) in by_token.iter().filter(|(_, v)| v.len() > 1) {
        out.add(
            format!("servers {}", holders.join(", ")),
            "sentinel_token shared by more than one server",
        );
    }
    for ((platform, region), holders) in by_location.iter().filter(|(_, v)| v.len() > 1) {
        out.add(
            format!("servers {}", holders.join(", ")),
            format!("platform/region {platform}/{region} used more than once"),
        );
    }
    if config.servers.is_empty() {
        out.add("campaign", "no control servers configured");
    }

    check_vps(&mut out, "vp", &config.vps);
    check_vps(&mut out, "clean vp", &config.vetting.clean_vps);

    for (cc, names) in &config.domains {
        if !country::is_known(cc) {
            out.add(format!("domains {cc}"), format!("unknown country code {cc:?}"));
        }
        for name in names {
            if !is_valid_hostname(name) {
                out.add(format!("domain {name:?}"), "not a valid hostname");
            }
        }
    }

    let p = &config.probe;
    if p.timeout_ms == 0 {
        out.add("probe", "timeout_ms must be positive");
    }
    if p.max_attempts == 0 {
        out.add("probe", "max_attempts must be at least 1");
    }
    if p.parallel == 0 {
        out.add("probe", "parallel must be at least 1");
    }
    let t = &config.traceroute;
    if !(1..=64).contains(&t.max_ttl) {
        out.add("traceroute", "max_ttl must be between 1 and 64");
    }
    if t.per_hop_timeout_ms == 0 {
        out.add("traceroute", "per_hop_timeout_ms must be positive");
    }
    if config.caps.per_country_per_epoch == 0 {
        out.add("caps", "per_country_per_epoch must be at least 1");
    }

    if let Some(pair) = &config.reference_pair {
        if !is_valid_hostname(&pair.shared_domain) {
            out.add("reference_pair", "shared_domain is not a valid hostname");
        }
        for s in [&pair.server_a, &pair.server_b] {
            if !is_valid_token(&s.sentinel_token) {
                out.add(format!("reference server {}", s.id), "sentinel_token must be 32 lowercase hex characters");
            }
            if let Some(clash) = config.servers.iter().find(|c| c.sentinel_token == s.sentinel_token) {
                out.add(
                    format!("reference server {}", s.id),
                    format!("sentinel_token also used by server {}", clash.id),
                );
            }
        }
        if pair.server_a.address == pair.server_b.address {
            out.add("reference_pair", "server_a and server_b must have distinct addresses");
        }
        if pair.server_a.sentinel_token == pair.server_b.sentinel_token {
            out.add("reference_pair", "server_a and server_b must have distinct tokens");
        }
    }

    out.0
}
