//! A deterministic simulated internetwork: AS topology with valley-free routing, router
//! hops, censor and cache middleboxes, and a [`Transport`] over it.
//!
//! Time is simulated: every hop costs 10 ms each way and a lost request costs the full
//! probe timeout, so a campaign runs in microseconds of wall time.

pub mod engine;
pub mod gen;
pub mod routing;
pub mod topology;

pub use engine::{deliver, hop_chain, Delivery, DropCause, Event, Hop, Packet};
pub use routing::{route, Graph, RouteError};
pub use topology::{
    AsNode, Blocklist, CacheProxy, Censor, CensorAction, Direction, HostedAt, Link, PeeringEdge,
    Relation, Role, Topology, TopologyError, TtlCopyMode,
};

use std::collections::HashMap;
use std::time::Duration;

use crate::model::{ControlServer, VantagePoint};
use crate::prober::{Exchange, RawResult, Transport, TransportError, TtlObservation, TtlTransport};
use crate::sentinel;

/// Simulated wall clock at epoch 0 (2023-11-14T22:13:20Z).
pub const CLOCK_BASE_MS: u64 = 1_700_000_000_000;
pub const EPOCH_LENGTH_MS: u64 = 7 * 24 * 3600 * 1000;

pub const SIM_DESCRIPTION: &str = "Simulated control server for censorship measurement tests.";

/// A topology plus a simulated clock. Cache contents live in the topology, so each clone
/// has its own cache state.
#[derive(Debug, Clone)]
pub struct SimNet {
    topology: Topology,
    graph: Graph,
    chains: HashMap<(u32, u32), Vec<Hop>>,
    responses: HashMap<String, Vec<u8>>,
    description: String,
    clock_ms: u64,
}

impl SimNet {
    pub fn new(topology: Topology) -> Result<SimNet, TopologyError> {
        topology.validate()?;
        Ok(SimNet {
            graph: Graph::new(&topology),
            topology,
            chains: HashMap::new(),
            responses: HashMap::new(),
            description: SIM_DESCRIPTION.to_string(),
            clock_ms: CLOCK_BASE_MS,
        })
    }

    /// Sentinel description text used for simulated server payloads.
    pub fn with_description(mut self, text: &str) -> SimNet {
        self.description = text.to_string();
        self.responses.clear();
        self
    }

    /// Puts the clock at the start of `epoch`.
    pub fn set_epoch(&mut self, epoch: u32) {
        self.clock_ms = CLOCK_BASE_MS + u64::from(epoch) * EPOCH_LENGTH_MS;
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    fn chain(&mut self, src: u32, dst: u32) -> Result<Vec<Hop>, RouteError> {
        if let Some(c) = self.chains.get(&(src, dst)) {
            return Ok(c.clone());
        }
        let path = self.graph.route(src, dst)?;
        let chain = hop_chain(&self.topology, &path);
        self.chains.insert((src, dst), chain.clone());
        Ok(chain)
    }

    fn server_response(&mut self, server: &ControlServer) -> Result<Vec<u8>, TransportError> {
        if let Some(r) = self.responses.get(&server.sentinel_token) {
            return Ok(r.clone());
        }
        let payload = sentinel::render_payload(server, &self.description)
            .map_err(|e| TransportError::Setup(e.to_string()))?;
        let r = payload.response();
        self.responses.insert(server.sentinel_token.clone(), r.clone());
        Ok(r)
    }

    /// Sends one request with the given TTL and reports what happened.
    pub fn send(
        &mut self,
        vp: &VantagePoint,
        server: &ControlServer,
        request: &[u8],
        ttl: u32,
    ) -> Result<(Delivery, Vec<u8>), TransportError> {
        let src = self
            .topology
            .vp_asn(&vp.id)
            .ok_or_else(|| TransportError::Setup(format!("vantage point {} is not in the topology", vp.id)))?;
        let dst = self
            .topology
            .server_asn(&server.id)
            .ok_or_else(|| TransportError::Setup(format!("server {} is not in the topology", server.id)))?;
        let chain = self.chain(src, dst).map_err(|e| TransportError::Setup(e.to_string()))?;
        let response = self.server_response(server)?;
        let packet = Packet { src_asn: src, dst_asn: dst, ttl, payload: request };
        let delivery = engine::walk(&mut self.topology, &chain, &packet, &response);
        Ok((delivery, response))
    }

    fn elapse(&mut self, delivery: &Delivery, timeout: Duration) -> Duration {
        let ms = if delivery.is_silent() { timeout.as_millis() as u64 } else { delivery.round_trip_ms() };
        self.clock_ms += ms;
        Duration::from_millis(ms)
    }
}

fn reply(event: Event, server_response: Vec<u8>) -> Option<RawResult> {
    match event {
        Event::InjectedRst => Some(RawResult::Reset),
        Event::InjectedBlockpage { response } | Event::CachedResponse { response } => {
            Some(RawResult::Response(response))
        }
        Event::DeliveredToServer => Some(RawResult::Response(server_response)),
        Event::IcmpTtlExceeded { .. } | Event::Dropped { .. } => None,
    }
}

impl Transport for SimNet {
    fn now_ms(&self) -> u64 {
        self.clock_ms
    }

    fn exchange(
        &mut self,
        vp: &VantagePoint,
        server: &ControlServer,
        request: &[u8],
        timeout: Duration,
    ) -> Result<Exchange, TransportError> {
        let (delivery, response) = self.send(vp, server, request, engine::DEFAULT_TTL)?;
        let elapsed = self.elapse(&delivery, timeout);
        let result = reply(delivery.event, response).unwrap_or(RawResult::Timeout);
        Ok(Exchange { result, elapsed })
    }
}

impl TtlTransport for SimNet {
    fn exchange_with_ttl(
        &mut self,
        vp: &VantagePoint,
        server: &ControlServer,
        request: &[u8],
        ttl: u8,
        timeout: Duration,
    ) -> Result<TtlObservation, TransportError> {
        let (delivery, response) = self.send(vp, server, request, u32::from(ttl))?;
        self.elapse(&delivery, timeout);
        Ok(match delivery.event {
            Event::IcmpTtlExceeded { router } => TtlObservation::TimeExceeded { router },
            event => match reply(event, response) {
                // Injected packets carry the server's address as their source.
                Some(result) => TtlObservation::Reply { source: server.address, result },
                None => TtlObservation::Nothing,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WhatIf {
    pub server_id: String,
    pub censored: usize,
    pub total: usize,
    pub fraction: f64,
}

/// Ranks candidate servers by the fraction of `domains` censored on the path from `vp`,
/// ascending, ties by server id. Each server is evaluated on a fresh copy of the topology
/// so caches do not carry over.
pub fn whatif_min_censorship(
    topology: &Topology,
    vp_id: &str,
    domains: &[String],
    candidate_servers: &[String],
) -> Result<Vec<WhatIf>, TopologyError> {
    let graph = Graph::new(topology);
    let src = topology.vp_asn(vp_id).ok_or_else(|| TopologyError::UnknownAsn {
        context: format!("vantage point {vp_id}"),
        asn: 0,
    })?;
    let mut out = Vec::new();
    for sid in candidate_servers {
        let dst = topology.server_asn(sid).ok_or_else(|| TopologyError::UnknownAsn {
            context: format!("server {sid}"),
            asn: 0,
        })?;
        let chain = hop_chain(topology, &graph.route(src, dst)?);
        let mut scratch = topology.clone();
        let mut censored = 0;
        for d in domains {
            let request = format!("GET / HTTP/1.1\r\nHost: {}\r\n\r\n", d.to_ascii_lowercase());
            let packet = Packet { src_asn: src, dst_asn: dst, ttl: engine::DEFAULT_TTL, payload: request.as_bytes() };
            if engine::walk(&mut scratch, &chain, &packet, b"").is_censorship() {
                censored += 1;
            }
        }
        let fraction = if domains.is_empty() { 0.0 } else { censored as f64 / domains.len() as f64 };
        out.push(WhatIf { server_id: sid.clone(), censored, total: domains.len(), fraction });
    }
    out.sort_by(|a, b| a.fraction.total_cmp(&b.fraction).then_with(|| a.server_id.cmp(&b.server_id)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Access;
    use std::net::Ipv4Addr;

    fn node(asn: u32) -> AsNode {
        AsNode { asn, role: Role::Transit, router_count: 2, responds_icmp: vec![], router_addresses: vec![] }
    }

    /// VP AS 1 under transit 2; servers a, b, c in ASes 3, 4, 5, all customers of 2.
    fn topo() -> Topology {
        Topology {
            nodes: (1..=5).map(node).collect(),
            links: vec![
                Link { a: 1, b: 2, relation: Relation::CustomerOf },
                Link { a: 3, b: 2, relation: Relation::CustomerOf },
                Link { a: 4, b: 2, relation: Relation::CustomerOf },
                Link { a: 5, b: 2, relation: Relation::CustomerOf },
            ],
            censors: vec![],
            caches: vec![],
            vps: vec![HostedAt { id: "v".into(), asn: 1 }],
            servers: vec![
                HostedAt { id: "a".into(), asn: 3 },
                HostedAt { id: "b".into(), asn: 4 },
                HostedAt { id: "c".into(), asn: 5 },
            ],
            direct_peering: vec![],
            seed: 0,
        }
    }

    fn censor(asn: u32, domains: &[&str]) -> Censor {
        Censor {
            asn,
            router_index: 0,
            direction: Direction::Both,
            blocklist: Blocklist { domains: domains.iter().map(|d| d.to_string()).collect(), keywords: vec![] },
            action: CensorAction::Rst,
            ttl_copy: false,
            ttl_copy_mode: TtlCopyMode::Remaining,
        }
    }

    fn ids() -> Vec<String> {
        vec!["c".into(), "b".into(), "a".into()]
    }

    #[test]
    fn whatif_prefers_clean_server() {
        let mut t = topo();
        t.censors.push(censor(3, &["x.test"]));
        t.censors.push(censor(4, &["x.test"]));
        let r = whatif_min_censorship(&t, "v", &["x.test".into()], &ids()).unwrap();
        assert_eq!(r[0].server_id, "c");
        assert_eq!(r[0].fraction, 0.0);
    }

    #[test]
    fn whatif_all_clean_by_id() {
        let r = whatif_min_censorship(&topo(), "v", &["x.test".into()], &ids()).unwrap();
        assert_eq!(r.iter().map(|w| w.server_id.as_str()).collect::<Vec<_>>(), vec!["a", "b", "c"]);
    }

    #[test]
    fn whatif_half() {
        let mut t = topo();
        t.censors.push(censor(3, &["x.test", "y.test"]));
        let domains: Vec<String> = ["w.test", "x.test", "y.test", "z.test"].iter().map(|s| s.to_string()).collect();
        let r = whatif_min_censorship(&t, "v", &domains, &ids()).unwrap();
        let a = r.iter().find(|w| w.server_id == "a").unwrap();
        assert_eq!(a.fraction, 0.5);
        assert_eq!(r.last().unwrap().server_id, "a");
    }

    #[test]
    fn transport_clock_and_results() {
        let mut t = topo();
        t.censors.push(Censor { action: CensorAction::Drop, ..censor(3, &["x.test"]) });
        let mut net = SimNet::new(t).unwrap();
        net.set_epoch(2);
        let start = net.now_ms();
        assert_eq!(start, CLOCK_BASE_MS + 2 * EPOCH_LENGTH_MS);
        let vp = VantagePoint {
            id: "v".into(),
            address: Ipv4Addr::new(198, 51, 100, 1),
            country: "KR".into(),
            asn: 1,
            access: Access::Direct,
        };
        let server = ControlServer {
            id: "a".into(),
            address: Ipv4Addr::new(192, 0, 2, 1),
            port: 80,
            platform: "p".into(),
            region: "r".into(),
            sentinel_token: "0123456789abcdef0123456789abcdef".into(),
        };
        let ex = net
            .exchange(&vp, &server, b"GET / HTTP/1.1\r\nHost: x.test\r\n\r\n", Duration::from_secs(5))
            .unwrap();
        assert_eq!(ex.result, RawResult::Timeout);
        assert_eq!(net.now_ms() - start, 5000);
        let ex = net
            .exchange(&vp, &server, b"GET / HTTP/1.1\r\nHost: ok.test\r\n\r\n", Duration::from_secs(5))
            .unwrap();
        // 1→2→3, two routers each: the server is hop 7.
        assert_eq!(ex.elapsed, Duration::from_millis(140));
        match ex.result {
            RawResult::Response(b) => assert!(crate::prober::http::contains(&b, server.sentinel_token.as_bytes())),
            r => panic!("{r:?}"),
        }
    }
}
