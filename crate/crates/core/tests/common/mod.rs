//! Brute-force ground truth for simulated campaigns, written without the simulator's
//! routing or delivery code.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};

use pathprobe::model::{Mechanism, Verdict};
use pathprobe::simnet::gen::Scenario;
use pathprobe::simnet::{CensorAction, Direction, Relation, Topology, TtlCopyMode};

const TTL: u32 = 64;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
enum Class {
    Customer = 0,
    Peer = 1,
    Provider = 2,
}

/// Relation of `n` as seen from `x`: whether `n` is x's customer, peer or provider.
fn relation(t: &Topology, x: u32, n: u32) -> Option<Class> {
    for l in &t.links {
        let (a, b) = (l.a, l.b);
        if (a, b) != (x, n) && (a, b) != (n, x) {
            continue;
        }
        return Some(match (l.relation, a == x) {
            (Relation::Peer, _) => Class::Peer,
            (Relation::CustomerOf, true) | (Relation::ProviderOf, false) => Class::Provider,
            (Relation::CustomerOf, false) | (Relation::ProviderOf, true) => Class::Customer,
        });
    }
    t.direct_peering
        .iter()
        .any(|p| (p.a, p.b) == (x, n) || (p.a, p.b) == (n, x))
        .then_some(Class::Peer)
}

/// Gao-Rexford best routes to `dst` by fixed-point iteration: every AS repeatedly picks
/// the best exported neighbor route (customer > peer > provider, then length, then
/// lowest next hop) until nothing changes.
pub fn routes_to(t: &Topology, dst: u32) -> BTreeMap<u32, Vec<u32>> {
    let ases: Vec<u32> = t.nodes.iter().map(|n| n.asn).collect();
    let mut best: BTreeMap<u32, (Class, Vec<u32>)> = BTreeMap::new();
    best.insert(dst, (Class::Customer, vec![dst]));
    for _round in 0..=ases.len() * 4 {
        let mut changed = false;
        for &x in &ases {
            if x == dst {
                continue;
            }
            let mut cand: Option<(Class, usize, u32, Vec<u32>)> = None;
            for &n in &ases {
                let Some(rel) = relation(t, x, n) else { continue };
                let Some((n_class, n_path)) = best.get(&n) else { continue };
                if n_path.contains(&x) {
                    continue;
                }
                // n exports everything to its customers, only customer routes otherwise.
                let exports = rel == Class::Provider || *n_class == Class::Customer;
                if !exports {
                    continue;
                }
                let key = (rel, n_path.len() + 1, n);
                if cand.as_ref().map_or(true, |c| key < (c.0, c.1, c.2)) {
                    let mut p = vec![x];
                    p.extend(n_path);
                    cand = Some((rel, key.1, n, p));
                }
            }
            let new = cand.map(|(c, _, _, p)| (c, p));
            if best.get(&x) != new.as_ref() {
                changed = true;
                match new {
                    Some(v) => best.insert(x, v),
                    None => best.remove(&x),
                };
            }
        }
        if !changed {
            return best.into_iter().map(|(k, (_, p))| (k, p)).collect();
        }
    }
    panic!("routing to {dst} did not converge");
}

/// Valley-free check straight from the definition: uphill steps, at most one peer step,
/// then downhill steps only.
pub fn valley_free(t: &Topology, path: &[u32]) -> bool {
    let mut seen_top = false;
    for w in path.windows(2) {
        match relation(t, w[0], w[1]) {
            None => return false,
            Some(Class::Provider) if seen_top => return false,
            Some(Class::Provider) => {}
            Some(Class::Peer) if seen_top => return false,
            Some(Class::Peer) | Some(Class::Customer) => seen_top = true,
        }
    }
    true
}

/// (asn, router index) of every router on the path, in order; hop n is element n-1.
pub fn routers(t: &Topology, path: &[u32]) -> Vec<(u32, u32)> {
    let mut out = Vec::new();
    for asn in path {
        let node = t.nodes.iter().find(|n| n.asn == *asn).unwrap();
        out.extend((0..node.router_count).map(|i| (*asn, i)));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Origin {
    Server(String),
    Preloaded,
}

/// What the client ends up with for one request.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Seen {
    Payload { from: String },
    Foreign,
    Reset,
    Silence,
    Blockpage(String),
}

/// One simulated network's worth of cache state.
pub struct Oracle<'a> {
    topo: &'a Topology,
    caches: HashMap<(u32, u32), HashMap<String, Origin>>,
    paths: HashMap<(u32, u32), Vec<u32>>,
}

impl<'a> Oracle<'a> {
    pub fn new(topo: &'a Topology) -> Self {
        let caches = topo
            .caches
            .iter()
            .map(|c| ((c.asn, c.router_index), c.store.keys().map(|k| (k.to_lowercase(), Origin::Preloaded)).collect()))
            .collect();
        Oracle { topo, caches, paths: HashMap::new() }
    }

    pub fn path(&mut self, src: u32, dst: u32) -> Vec<u32> {
        let t = self.topo;
        self.paths.entry((src, dst)).or_insert_with(|| routes_to(t, dst).remove(&src).expect("route exists")).clone()
    }

    /// Sends one request with the default TTL.
    pub fn request(&mut self, vp: &str, server: &str, host: &str) -> Seen {
        let src = self.topo.vps.iter().find(|v| v.id == vp).unwrap().asn;
        let dst = self.topo.servers.iter().find(|s| s.id == server).unwrap().asn;
        let host = host.to_lowercase();
        let line = "get / http/1.1";
        let hops = routers(self.topo, &self.path(src, dst));
        for (i, r) in hops.iter().enumerate() {
            let hop = i as u32 + 1;
            if let Some(o) = self.caches.get(r).and_then(|c| c.get(&host)) {
                return match o {
                    Origin::Server(s) => Seen::Payload { from: s.clone() },
                    Origin::Preloaded => Seen::Foreign,
                };
            }
            for c in self.topo.censors.iter().filter(|c| (c.asn, c.router_index) == *r) {
                let internal = src == dst;
                let dir_ok = !internal
                    && match c.direction {
                        Direction::Both => true,
                        Direction::Outbound => c.asn != dst,
                        Direction::Inbound => c.asn != src,
                    };
                let listed = c.blocklist.domains.iter().any(|d| d.to_lowercase() == host)
                    || c.blocklist.keywords.iter().any(|k| {
                        let k = k.to_lowercase();
                        !k.is_empty() && (host.contains(&k) || line.contains(&k))
                    });
                if !(dir_ok && listed) {
                    continue;
                }
                let back_ttl = match (c.ttl_copy, c.ttl_copy_mode) {
                    (false, _) => TTL,
                    (true, TtlCopyMode::Remaining) => TTL - hop,
                    (true, TtlCopyMode::Original) => TTL,
                };
                return match &c.action {
                    CensorAction::Drop => Seen::Silence,
                    _ if back_ttl < hop => Seen::Silence,
                    CensorAction::Rst => Seen::Reset,
                    CensorAction::Blockpage { signature_id, .. } => Seen::Blockpage(signature_id.clone()),
                };
            }
        }
        for r in &hops {
            if let Some(c) = self.caches.get_mut(r) {
                c.entry(host.clone()).or_insert_with(|| Origin::Server(server.to_string()));
            }
        }
        Seen::Payload { from: server.to_string() }
    }
}

pub fn verdict_for(seen: &Seen, server: &str) -> Verdict {
    match seen {
        Seen::Payload { from } if from == server => Verdict::Uncensored,
        Seen::Payload { .. } | Seen::Foreign => Verdict::Anomalous,
        Seen::Reset => Verdict::Censored { mechanism: Mechanism::Reset },
        Seen::Silence => Verdict::Censored { mechanism: Mechanism::Drop },
        Seen::Blockpage(id) => Verdict::Censored { mechanism: Mechanism::Blockpage { signature_id: id.clone() } },
    }
}

pub struct Expected {
    pub verdicts: BTreeMap<(String, String, String), Verdict>,
    pub excluded: BTreeSet<String>,
}

/// Replays a whole campaign: one cache state per worker, the cache test for that
/// worker's vantage points first, then its probes in schedule order.
pub fn expected_campaign(s: &Scenario) -> Expected {
    let workers = s.parallel.max(1);
    let mut verdicts = BTreeMap::new();
    let mut excluded = BTreeSet::new();
    for w in 0..workers {
        let mut net = Oracle::new(&s.topology);
        let mine: Vec<_> = s.vps.iter().enumerate().filter(|(i, _)| i % workers == w).map(|(_, v)| v).collect();
        let (a, b) = (&s.reference.server_a.id, &s.reference.server_b.id);
        for vp in &mine {
            let first = net.request(&vp.id, a, &s.reference.shared_domain);
            if matches!(first, Seen::Silence | Seen::Reset) {
                excluded.insert(vp.id.clone());
                continue;
            }
            let second = net.request(&vp.id, b, &s.reference.shared_domain);
            if second != (Seen::Payload { from: b.clone() }) {
                excluded.insert(vp.id.clone());
            }
        }
        for vp in &mine {
            for server in &s.servers {
                for d in s.domains.iter().filter(|d| d.country_scope == vp.country) {
                    let seen = net.request(&vp.id, &server.id, &d.name);
                    verdicts.insert((vp.id.clone(), server.id.clone(), d.name.clone()), verdict_for(&seen, &server.id));
                }
            }
        }
    }
    Expected { verdicts, excluded }
}

/// True if any cache proxy sits on the route from the vantage point to `server`.
pub fn cache_on_path(t: &Topology, vp: &str, server: &str) -> bool {
    let src = t.vps.iter().find(|v| v.id == vp).unwrap().asn;
    let dst = t.servers.iter().find(|s| s.id == server).unwrap().asn;
    let path = routes_to(t, dst).remove(&src).unwrap();
    routers(t, &path).iter().any(|r| t.caches.iter().any(|c| (c.asn, c.router_index) == *r))
}
