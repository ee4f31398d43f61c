//! Hop-by-hop packet walks over a routed path.

use std::net::Ipv4Addr;

use super::routing::RouteError;
use super::topology::{CensorAction, Direction, Topology, TtlCopyMode};
use crate::prober::http;

/// TTL of packets originated by routers, middleboxes and servers.
pub const DEFAULT_TTL: u32 = 64;
/// Simulated one-way latency per hop.
pub const HOP_LATENCY_MS: u64 = 10;

/// One router on the expanded path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hop {
    /// 1-based TTL at which this router is reached.
    pub hop: u32,
    pub asn: u32,
    pub router_index: u32,
    pub address: Ipv4Addr,
    pub responds_icmp: bool,
}

/// Expands an AS path into its routers, in path order.
pub fn hop_chain(topology: &Topology, as_path: &[u32]) -> Vec<Hop> {
    let mut hops = Vec::new();
    for &asn in as_path {
        let Some(node) = topology.node(asn) else { continue };
        for i in 0..node.router_count {
            hops.push(Hop {
                hop: hops.len() as u32 + 1,
                asn,
                router_index: i,
                address: node.router_address(i),
                responds_icmp: node.responds(i),
            });
        }
    }
    hops
}

/// Where a packet travels relative to one AS.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Travel {
    Outbound,
    Inbound,
    Transit,
    Internal,
}

pub fn travel(src_asn: u32, dst_asn: u32, asn: u32) -> Travel {
    match (src_asn == asn, dst_asn == asn) {
        (true, true) => Travel::Internal,
        (true, false) => Travel::Outbound,
        (false, true) => Travel::Inbound,
        (false, false) => Travel::Transit,
    }
}

/// Whether a censor configured for `direction` inspects traffic travelling `t`. Transit
/// traffic enters and leaves the AS, so every direction setting sees it.
pub fn direction_matches(direction: Direction, t: Travel) -> bool {
    match (direction, t) {
        (_, Travel::Internal) => false,
        (_, Travel::Transit) => true,
        (Direction::Both, _) => true,
        (Direction::Outbound, Travel::Outbound) => true,
        (Direction::Inbound, Travel::Inbound) => true,
        _ => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropCause {
    /// A censor discarded the request.
    Censor,
    /// The request expired at a router that does not send ICMP.
    SilentExpiry,
    /// An injected reply expired on its way back to the client.
    InjectionExpired,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    IcmpTtlExceeded { router: Ipv4Addr },
    InjectedRst,
    InjectedBlockpage { response: Vec<u8> },
    Dropped { cause: DropCause },
    DeliveredToServer,
    CachedResponse { response: Vec<u8> },
}

/// What happened to one request, and the hop where it happened (the server sits one hop
/// past the last router).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub event: Event,
    pub hop: u32,
}

impl Delivery {
    /// True if the client sees nothing at all.
    pub fn is_silent(&self) -> bool {
        matches!(self.event, Event::Dropped { .. })
    }

    pub fn is_censorship(&self) -> bool {
        matches!(
            self.event,
            Event::InjectedRst
                | Event::InjectedBlockpage { .. }
                | Event::Dropped { cause: DropCause::Censor | DropCause::InjectionExpired }
        )
    }

    /// Simulated time until the client sees the reply.
    pub fn round_trip_ms(&self) -> u64 {
        2 * HOP_LATENCY_MS * u64::from(self.hop)
    }
}

pub struct Packet<'a> {
    pub src_asn: u32,
    pub dst_asn: u32,
    pub ttl: u32,
    pub payload: &'a [u8],
}

/// A 200 response carrying `body`.
pub fn html_response(body: &[u8]) -> Vec<u8> {
    let mut out = format!(
        "HTTP/1.1 200 OK\r\nContent-Type: text/html; charset=utf-8\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    )
    .into_bytes();
    out.extend_from_slice(body);
    out
}

pub fn blockpage_response(body: &str) -> Vec<u8> {
    if body.starts_with("HTTP/") {
        body.as_bytes().to_vec()
    } else {
        html_response(body.as_bytes())
    }
}

/// Walks the request along `chain`. The first cache holding the Host replays it;
/// otherwise matching censors act in file order; otherwise the packet expires where its
/// TTL runs out. A request that reaches the server stores the server's body in every
/// cache on the path that lacks the Host.
pub fn walk(
    topology: &mut Topology,
    chain: &[Hop],
    packet: &Packet<'_>,
    server_response: &[u8],
) -> Delivery {
    let (host, request_line) = http::request_target(packet.payload);
    let host = host.to_ascii_lowercase();

    for h in chain {
        let i = h.hop;
        if !host.is_empty() {
            let hit = topology
                .caches
                .iter()
                .find(|c| c.asn == h.asn && c.router_index == h.router_index && c.store.contains_key(&host));
            if let Some(c) = hit {
                let response = html_response(c.store[&host].as_bytes());
                let event = if DEFAULT_TTL >= i {
                    Event::CachedResponse { response }
                } else {
                    Event::Dropped { cause: DropCause::InjectionExpired }
                };
                return Delivery { event, hop: i };
            }
        }

        let t = |asn| travel(packet.src_asn, packet.dst_asn, asn);
        let censor = topology.censors.iter().find(|c| {
            c.asn == h.asn
                && c.router_index == h.router_index
                && direction_matches(c.direction, t(c.asn))
                && c.blocklist.matches(&host, &request_line)
        });
        if let Some(c) = censor {
            let injected_ttl = if !c.ttl_copy {
                DEFAULT_TTL
            } else {
                match c.ttl_copy_mode {
                    TtlCopyMode::Remaining => packet.ttl - i,
                    TtlCopyMode::Original => packet.ttl,
                }
            };
            let event = match &c.action {
                CensorAction::Drop => Event::Dropped { cause: DropCause::Censor },
                _ if injected_ttl < i => Event::Dropped { cause: DropCause::InjectionExpired },
                CensorAction::Rst => Event::InjectedRst,
                CensorAction::Blockpage { body, .. } => Event::InjectedBlockpage { response: blockpage_response(body) },
            };
            return Delivery { event, hop: i };
        }

        if packet.ttl == i {
            let event = if h.responds_icmp {
                Event::IcmpTtlExceeded { router: h.address }
            } else {
                Event::Dropped { cause: DropCause::SilentExpiry }
            };
            return Delivery { event, hop: i };
        }
    }

    let server_hop = chain.len() as u32 + 1;
    if !host.is_empty() {
        let body = String::from_utf8_lossy(http::parse_response(server_response).body).into_owned();
        for h in chain {
            for c in topology.caches.iter_mut().filter(|c| c.asn == h.asn && c.router_index == h.router_index) {
                c.store.entry(host.clone()).or_insert_with(|| body.clone());
            }
        }
    }
    Delivery { event: Event::DeliveredToServer, hop: server_hop }
}

/// Routes and walks one request.
pub fn deliver(
    topology: &mut Topology,
    packet: &Packet<'_>,
    server_response: &[u8],
) -> Result<Delivery, RouteError> {
    let path = super::routing::route(topology, packet.src_asn, packet.dst_asn)?;
    let chain = hop_chain(topology, &path);
    Ok(walk(topology, &chain, packet, server_response))
}
