//! Application traceroute: send the censor-triggering HTTP request with increasing IP TTL
//! and watch for the hop where the interference starts.

pub mod asn;

pub use asn::{AsnEntry, AsnTableError, IpAsnTable};

use std::time::Duration;

use crate::model::{
    Access, HopSignal, Mechanism, ProbeOutcome, ProbeSpec, Responder, TraceHop, TraceResult,
    TraceTerminal,
};
use crate::prober::{self, RawResult, SignatureDb, TransportError, TtlObservation, TtlTransport};

pub const DEFAULT_MAX_TTL: u32 = 40;
pub const DEFAULT_PER_HOP_TIMEOUT_MS: u64 = 2000;

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("vantage point {0} is a proxy; TTL control needs direct access")]
    UnsupportedTransport(String),
    #[error("max_ttl must be between 1 and 64, got {0}")]
    InvalidMaxTtl(u32),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceOptions {
    pub max_ttl: u32,
    pub per_hop_timeout: Duration,
    /// Extra attempts at a TTL that got no answer before it is marked silent.
    pub retries: u32,
}

impl Default for TraceOptions {
    fn default() -> Self {
        TraceOptions {
            max_ttl: DEFAULT_MAX_TTL,
            per_hop_timeout: Duration::from_millis(DEFAULT_PER_HOP_TIMEOUT_MS),
            retries: 1,
        }
    }
}

fn host(ip: std::net::Ipv4Addr) -> Responder {
    Responder::Host { ip, asn: None, label: None }
}

/// Sweeps TTL from 1 to `max_ttl`, one fresh connection per TTL, and stops at the first
/// censor sign or sentinel.
pub fn app_traceroute<T: TtlTransport + ?Sized>(
    spec: &ProbeSpec,
    opts: &TraceOptions,
    db: &SignatureDb,
    user_agent: &str,
    transport: &mut T,
) -> Result<TraceResult, TraceError> {
    if !matches!(spec.vp.access, Access::Direct) {
        return Err(TraceError::UnsupportedTransport(spec.vp.id.clone()));
    }
    if !(1..=64).contains(&opts.max_ttl) {
        return Err(TraceError::InvalidMaxTtl(opts.max_ttl));
    }
    let request = prober::build_request(&spec.domain, user_agent);
    let mut hops = Vec::new();
    let mut terminal = TraceTerminal::Exhausted;
    let mut censor_hop = None;

    for ttl in 1..=opts.max_ttl {
        let mut obs = TtlObservation::Nothing;
        for _ in 0..=opts.retries {
            obs = transport.exchange_with_ttl(&spec.vp, &spec.server, &request, ttl as u8, opts.per_hop_timeout)?;
            if !matches!(obs, TtlObservation::Nothing | TtlObservation::Reply { result: RawResult::Timeout, .. }) {
                break;
            }
        }
        let (responder, signal) = match obs {
            TtlObservation::TimeExceeded { router } => (host(router), HopSignal::TtlExceeded),
            TtlObservation::Nothing | TtlObservation::Reply { result: RawResult::Timeout, .. } => {
                (Responder::Silent, HopSignal::NoReply)
            }
            TtlObservation::Reply { source, result } => {
                let signal = match prober::classify(&result, &spec.server, db) {
                    ProbeOutcome::Sentinel => HopSignal::SentinelReached,
                    ProbeOutcome::Reset => HopSignal::CensorSign { mechanism: Mechanism::Reset },
                    ProbeOutcome::Blockpage { signature_id } => {
                        HopSignal::CensorSign { mechanism: Mechanism::Blockpage { signature_id } }
                    }
                    // An unrecognized page says nothing about where the censor is.
                    ProbeOutcome::OtherPayload { .. } | ProbeOutcome::Timeout => HopSignal::NoReply,
                };
                (host(source), signal)
            }
        };
        match &signal {
            HopSignal::SentinelReached => terminal = TraceTerminal::Sentinel,
            HopSignal::CensorSign { mechanism } => {
                terminal = TraceTerminal::Censored { mechanism: mechanism.clone() };
                censor_hop = Some(ttl);
            }
            _ => {}
        }
        let done = signal.is_terminal();
        hops.push(TraceHop { ttl, responder, signal });
        if done {
            break;
        }
    }

    Ok(TraceResult {
        vp: spec.vp.info(),
        server: spec.server.info(),
        domain: spec.domain.name.clone(),
        hops,
        censor_hop,
        terminal,
    })
}

/// Fills in the ASN and label of every responding hop by longest-prefix match. Hops with
/// no match keep `asn: None`.
pub fn annotate_asn(mut result: TraceResult, table: &IpAsnTable) -> TraceResult {
    for hop in &mut result.hops {
        if let Responder::Host { ip, asn, label } = &mut hop.responder {
            let found = table.lookup(*ip);
            *asn = found.map(|e| e.asn);
            *label = found.and_then(|e| e.label.clone());
        }
    }
    result
}

fn responder_text(r: &Responder) -> String {
    match r {
        Responder::Silent => "*".to_string(),
        Responder::Host { ip, asn, label } => {
            let mut s = ip.to_string();
            if let Some(a) = asn {
                s.push_str(&format!(" AS{a}"));
            }
            if let Some(l) = label {
                s.push(' ');
                s.push_str(l);
            }
            s
        }
    }
}

fn cell(hop: &TraceHop, region: &str) -> String {
    match &hop.signal {
        HopSignal::CensorSign { .. } => format!("Censor: {}", responder_text(&hop.responder)),
        HopSignal::SentinelReached => format!("{} ({region})", responder_text(&hop.responder)),
        HopSignal::TtlExceeded | HopSignal::NoReply => responder_text(&hop.responder),
    }
}

/// One row per TTL up to the largest observed, one column per result ordered by platform,
/// region, server id and vantage point; the vantage point is named in the header when
/// there is more than one. Silent hops are `*`; the censor hop is prefixed
/// `Censor:`; TTLs past the end of a shorter trace are left empty.
pub fn render_trace_table(results: &[TraceResult]) -> String {
    let mut cols: Vec<&TraceResult> = results.iter().collect();
    cols.sort_by(|a, b| {
        (&a.server.platform, &a.server.region, &a.server.id, &a.vp.id)
            .cmp(&(&b.server.platform, &b.server.region, &b.server.id, &b.vp.id))
    });
    let max_ttl = cols.iter().flat_map(|r| r.hops.iter().map(|h| h.ttl)).max().unwrap_or(0);

    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let mut header = vec!["ttl".to_string()];
    let many_vps = cols.iter().any(|r| r.vp.id != cols[0].vp.id);
    header.extend(cols.iter().map(|r| {
        let name = format!("{} {} ({})", r.server.platform, r.server.region, r.server.id);
        if many_vps {
            format!("{name} from {}", r.vp.id)
        } else {
            name
        }
    }));
    w.write_record(&header).expect("in-memory write");
    for ttl in 1..=max_ttl {
        let mut row = vec![format!("ttl = {ttl}")];
        for r in &cols {
            row.push(r.hops.iter().find(|h| h.ttl == ttl).map(|h| cell(h, &r.server.region)).unwrap_or_default());
        }
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}
