//! Random valley-free scenarios for property tests and benchmarking.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::net::Ipv4Addr;

use super::topology::*;
use crate::harness::config::{CampaignConfig, DEFAULT_DESCRIPTION};
use crate::model::{Access, ControlServer, TestDomain, VantagePoint};
use crate::prober::{MatchKind, Signature, SignatureDb};
use crate::vetting::ReferenceServerPair;

#[derive(Debug, Clone)]
pub struct GenParams {
    pub max_ases: usize,
    pub max_servers: usize,
    pub max_vps: usize,
    pub max_domains: usize,
    pub max_censors: usize,
    /// Chance that the scenario gets a cache proxy.
    pub cache_probability: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams { max_ases: 8, max_servers: 3, max_vps: 6, max_domains: 4, max_censors: 3, cache_probability: 0.35 }
    }
}

/// Everything a simulated campaign needs.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub topology: Topology,
    pub servers: Vec<ControlServer>,
    pub vps: Vec<VantagePoint>,
    pub domains: Vec<TestDomain>,
    pub reference: ReferenceServerPair,
    pub signatures: SignatureDb,
    pub parallel: usize,
}

pub const REFERENCE_DOMAIN: &str = "reference-check.example";

const WORDS: [&str; 6] = ["falun", "tibet", "casino", "torrent", "proxy", "leaks"];
const COUNTRIES: [&str; 3] = ["KR", "IN", "RU"];
const PLATFORMS: [&str; 3] = ["aws", "gcp", "azure"];

fn token(rng: &mut ChaCha8Rng) -> String {
    let mut b = [0u8; 16];
    rng.fill_bytes(&mut b);
    hex::encode(b)
}

/// A random scenario. Both reference servers sit in one AS, so the paths to them are
/// identical and a cache on one is on the other.
pub fn scenario(seed: u64, p: &GenParams) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(3..=p.max_ases.max(3));
    let tier1 = if n >= 4 { rng.gen_range(1..=2) } else { 1 };
    let asns: Vec<u32> = {
        let mut v: Vec<u32> = (0..n as u32).map(|i| 64500 + i * 10 + rng.gen_range(0..10)).collect();
        v.shuffle(&mut rng);
        v
    };

    let nodes = asns
        .iter()
        .enumerate()
        .map(|(i, &asn)| {
            let router_count = rng.gen_range(1..=3);
            AsNode {
                asn,
                role: if i < tier1 { Role::Transit } else { *[Role::Eyeball, Role::Transit, Role::Cloud].choose(&mut rng).unwrap() },
                router_count,
                responds_icmp: (0..router_count).map(|_| rng.gen_bool(0.8)).collect(),
                router_addresses: vec![],
            }
        })
        .collect::<Vec<_>>();

    let mut links = Vec::new();
    let mut linked = std::collections::HashSet::new();
    for i in 0..tier1 {
        for j in i + 1..tier1 {
            links.push(Link { a: asns[i], b: asns[j], relation: Relation::Peer });
            linked.insert((i, j));
        }
    }
    for k in tier1..n {
        let mut providers: Vec<usize> = (0..k).collect();
        providers.shuffle(&mut rng);
        let count = rng.gen_range(1..=2.min(k));
        for &pr in &providers[..count] {
            links.push(Link { a: asns[k], b: asns[pr], relation: Relation::CustomerOf });
            linked.insert((pr, k));
        }
    }
    let mut direct_peering = Vec::new();
    for _ in 0..rng.gen_range(0..=2) {
        let (i, j) = (rng.gen_range(0..n), rng.gen_range(0..n));
        let key = (i.min(j), i.max(j));
        if i == j || linked.contains(&key) {
            continue;
        }
        linked.insert(key);
        if rng.gen_bool(0.5) {
            links.push(Link { a: asns[i], b: asns[j], relation: Relation::Peer });
        } else {
            direct_peering.push(PeeringEdge { a: asns[i], b: asns[j] });
        }
    }

    let pick_as = |rng: &mut ChaCha8Rng| asns[rng.gen_range(0..n)];

    let n_servers = rng.gen_range(1..=p.max_servers.max(1));
    let servers: Vec<ControlServer> = (0..n_servers)
        .map(|i| ControlServer {
            id: format!("s{i}"),
            address: Ipv4Addr::new(192, 0, 2, 10 + i as u8),
            port: 80,
            platform: PLATFORMS[i % 3].to_string(),
            region: format!("region-{}", i / 3),
            sentinel_token: token(&mut rng),
        })
        .collect();
    let server_hosts: Vec<HostedAt> = servers.iter().map(|s| HostedAt { id: s.id.clone(), asn: pick_as(&mut rng) }).collect();

    let ref_asn = pick_as(&mut rng);
    let reference = ReferenceServerPair {
        shared_domain: REFERENCE_DOMAIN.to_string(),
        server_a: ControlServer {
            id: "ref-a".into(),
            address: Ipv4Addr::new(192, 0, 2, 200),
            port: 80,
            platform: "reference".into(),
            region: "a".into(),
            sentinel_token: token(&mut rng),
        },
        server_b: ControlServer {
            id: "ref-b".into(),
            address: Ipv4Addr::new(192, 0, 2, 201),
            port: 80,
            platform: "reference".into(),
            region: "b".into(),
            sentinel_token: token(&mut rng),
        },
    };

    let countries = &COUNTRIES[..rng.gen_range(1..=2)];
    let n_vps = rng.gen_range(1..=p.max_vps.max(1));
    let vp_asns: Vec<u32> = (0..n_vps).map(|_| pick_as(&mut rng)).collect();
    let vps: Vec<VantagePoint> = (0..n_vps)
        .map(|i| VantagePoint {
            id: format!("v{i}"),
            address: Ipv4Addr::new(198, 18, 0, 1 + i as u8),
            country: countries.choose(&mut rng).unwrap().to_string(),
            asn: vp_asns[i],
            access: Access::Direct,
        })
        .collect();

    let n_domains = rng.gen_range(1..=p.max_domains.max(1));
    let domains: Vec<TestDomain> = (0..n_domains)
        .map(|j| {
            let word = WORDS.choose(&mut rng).unwrap();
            TestDomain::new(&format!("{word}-{j}.example"), countries.choose(&mut rng).unwrap()).unwrap()
        })
        .collect();

    let mut signatures = vec![Signature {
        id: "kr-warning".into(),
        kind: MatchKind::RedirectLocationPrefix,
        pattern: "http://warning.or.kr".into(),
    }];
    let censors: Vec<Censor> = (0..rng.gen_range(0..=p.max_censors))
        .map(|k| {
            let asn = pick_as(&mut rng);
            let routers = nodes.iter().find(|nd| nd.asn == asn).unwrap().router_count;
            let mut blocklist = Blocklist::default();
            for d in &domains {
                if rng.gen_bool(0.5) {
                    blocklist.domains.push(d.name.clone());
                }
            }
            if blocklist.domains.is_empty() || rng.gen_bool(0.3) {
                blocklist.keywords.push(WORDS.choose(&mut rng).unwrap().to_string());
            }
            let action = match rng.gen_range(0..4) {
                0 => CensorAction::Drop,
                1 => CensorAction::Rst,
                2 => {
                    let title = format!("Access Denied {k}");
                    signatures.push(Signature { id: format!("bp-{k}"), kind: MatchKind::TitleEquals, pattern: title.clone() });
                    CensorAction::Blockpage {
                        signature_id: format!("bp-{k}"),
                        body: format!("<html><head><title>{title}</title></head><body>blocked</body></html>"),
                    }
                }
                _ => CensorAction::Blockpage {
                    signature_id: "kr-warning".into(),
                    body: "HTTP/1.1 302 Found\r\nLocation: http://warning.or.kr/i1.html\r\nContent-Length: 0\r\n\r\n".into(),
                },
            };
            Censor {
                asn,
                router_index: rng.gen_range(0..routers),
                direction: *[Direction::Inbound, Direction::Outbound, Direction::Both].choose(&mut rng).unwrap(),
                blocklist,
                action,
                ttl_copy: rng.gen_bool(0.3),
                ttl_copy_mode: TtlCopyMode::Remaining,
            }
        })
        .collect();

    let caches = if rng.gen_bool(p.cache_probability) {
        let asn = pick_as(&mut rng);
        let routers = nodes.iter().find(|nd| nd.asn == asn).unwrap().router_count;
        vec![CacheProxy { asn, router_index: rng.gen_range(0..routers), store: Default::default() }]
    } else {
        vec![]
    };

    let mut all_servers = server_hosts;
    all_servers.push(HostedAt { id: "ref-a".into(), asn: ref_asn });
    all_servers.push(HostedAt { id: "ref-b".into(), asn: ref_asn });
    let topology = Topology {
        nodes,
        links,
        censors,
        caches,
        vps: vps.iter().map(|v| HostedAt { id: v.id.clone(), asn: v.asn }).collect(),
        servers: all_servers,
        direct_peering,
        seed,
    };
    let parallel = rng.gen_range(1..=3);
    Scenario {
        topology,
        servers,
        vps,
        domains,
        reference,
        signatures: SignatureDb::new(signatures).expect("generated signature ids are unique"),
        parallel,
    }
}

impl Scenario {
    pub fn campaign(&self) -> CampaignConfig {
        let mut domains = std::collections::BTreeMap::<String, Vec<String>>::new();
        for d in &self.domains {
            domains.entry(d.country_scope.clone()).or_default().push(d.name.clone());
        }
        CampaignConfig {
            campaign_id: format!("sim-{}", self.topology.seed),
            seed: Some(self.topology.seed),
            description: DEFAULT_DESCRIPTION.to_string(),
            servers: self.servers.clone(),
            vps: self.vps.clone(),
            domains,
            reference_pair: Some(self.reference.clone()),
            legit_titles: None,
            signature_db: None,
            caps: Default::default(),
            probe: crate::harness::config::ProbeSettings { parallel: self.parallel, ..Default::default() },
            traceroute: Default::default(),
            vetting: Default::default(),
        }
    }

    /// The same scenario with every cache proxy removed.
    pub fn without_caches(&self) -> Scenario {
        let mut s = self.clone();
        s.topology.caches.clear();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenarios_are_valid_and_reproducible() {
        for seed in 0..200 {
            let s = scenario(seed, &GenParams::default());
            s.topology.validate().unwrap_or_else(|e| panic!("seed {seed}: {e}"));
            assert!(s.topology.nodes.len() <= 8);
            assert!(s.servers.len() <= 3 && s.vps.len() <= 6 && s.domains.len() <= 4);
            assert!(crate::model::validate_campaign(&s.campaign()).is_empty(), "seed {seed}");
            assert_eq!(s.topology, scenario(seed, &GenParams::default()).topology);
            for c in &s.topology.censors {
                assert!(!c.blocklist.matches(REFERENCE_DOMAIN, "GET / HTTP/1.1"));
            }
        }
    }
}
