//! Probe construction, the timeout/retry policy, response classification and the
//! (vantage point × server × domain) matrix runner.

pub mod http;
pub mod signature;
pub mod socks5;
pub mod transport;

pub use signature::{MatchKind, Signature, SignatureDb, SignatureError};
pub use transport::{Exchange, NetTransport, RawResult, TransportError, TtlObservation, TtlTransport, Transport};

use log::{debug, info};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::mpsc;
use std::time::Duration;

use crate::model::{
    Attempt, ControlServer, ProbeOutcome, ProbeRecord, ProbeSpec, RecordFlag, TestDomain,
    VantagePoint, Verdict, SCHEMA_VERSION,
};

pub const DEFAULT_USER_AGENT: &str =
    "Mozilla/5.0 (Windows NT 10.0; Win64; x64) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/120.0 Safari/537.36";

/// The probe request for `domain`. The Host header is lower-cased and carries no port.
pub fn build_request(domain: &TestDomain, user_agent: &str) -> Vec<u8> {
    format!(
        "GET / HTTP/1.1\r\nHost: {}\r\nUser-Agent: {}\r\nAccept: */*\r\nConnection: close\r\n\r\n",
        domain.name.to_ascii_lowercase(),
        user_agent
    )
    .into_bytes()
}

/// Maps a connection-level result to an outcome. The sentinel token in the body is the
/// only evidence of an undisturbed path.
pub fn classify(result: &RawResult, server: &ControlServer, db: &SignatureDb) -> ProbeOutcome {
    match result {
        RawResult::Reset => ProbeOutcome::Reset,
        RawResult::Timeout => ProbeOutcome::Timeout,
        RawResult::Response(bytes) => {
            let resp = http::parse_response(bytes);
            if http::contains(resp.body, server.sentinel_token.as_bytes()) {
                return ProbeOutcome::Sentinel;
            }
            if let Some(id) = db.match_response(&resp) {
                return ProbeOutcome::Blockpage { signature_id: id.to_string() };
            }
            ProbeOutcome::OtherPayload {
                body_digest: hex::encode(Sha256::digest(resp.body)),
                title: http::extract_title(resp.body),
            }
        }
    }
}

/// Campaign-level facts stamped onto each record.
#[derive(Debug, Clone, Copy)]
pub struct ProbeContext<'a> {
    pub campaign_id: &'a str,
    pub epoch: u32,
    pub db: &'a SignatureDb,
    pub user_agent: &'a str,
}

/// Runs one measurement: retries only while attempts time out, and stops at the first
/// other outcome.
///
/// A transport that cannot even be set up counts as a timed-out attempt; if the last
/// attempt failed that way the record is flagged `transport_error` and analysis treats
/// it as inconclusive.
pub fn probe<T: Transport + ?Sized>(
    spec: &ProbeSpec,
    ctx: &ProbeContext<'_>,
    transport: &mut T,
) -> ProbeRecord {
    let request = build_request(&spec.domain, ctx.user_agent);
    let ts_start = transport.now_ms();
    let mut attempts = Vec::new();
    let mut last_error = None;

    for n in 0..spec.max_attempts {
        let (outcome, rtt_ms) =
            match transport.exchange(&spec.vp, &spec.server, &request, spec.timeout) {
                Ok(ex) => {
                    last_error = None;
                    let outcome = classify(&ex.result, &spec.server, ctx.db);
                    let rtt = (!outcome.is_timeout()).then(|| ex.elapsed.as_millis() as u64);
                    (outcome, rtt)
                }
                Err(e) => {
                    debug!("{} -> {}: attempt {} failed: {e}", spec.vp.id, spec.server.id, n + 1);
                    last_error = Some(e.to_string());
                    (ProbeOutcome::Timeout, None)
                }
            };
        let done = !outcome.is_timeout();
        attempts.push(Attempt { outcome, rtt_ms });
        if done {
            break;
        }
    }

    let final_outcome = attempts.last().expect("max_attempts >= 1").outcome.clone();
    let mut flags = Vec::new();
    if last_error.is_some() {
        flags.push(RecordFlag::TransportError);
    }
    ProbeRecord {
        schema_version: SCHEMA_VERSION,
        campaign_id: ctx.campaign_id.to_string(),
        epoch: ctx.epoch,
        ts_start,
        ts_end: transport.now_ms(),
        vp: spec.vp.info(),
        server: spec.server.info(),
        domain: spec.domain.name.clone(),
        timeout_ms: spec.timeout.as_millis() as u64,
        max_attempts: spec.max_attempts,
        attempts,
        verdict: Verdict::from_outcome(&final_outcome),
        final_outcome,
        flags,
        error: last_error,
        extra: Default::default(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SkipReason {
    CountryCap { country: String, cap: usize },
    AlreadySelected { epoch: u32 },
}

impl std::fmt::Display for SkipReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SkipReason::CountryCap { country, cap } => {
                write!(f, "country {country} already has {cap} vantage points this epoch")
            }
            SkipReason::AlreadySelected { epoch } => write!(f, "already selected in epoch {epoch}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedVp {
    pub id: String,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Schedule {
    pub selected: Vec<VantagePoint>,
    pub skipped: Vec<SkippedVp>,
}

/// Which epochs each vantage point has already been used in.
#[derive(Debug, Clone, Default)]
pub struct UsageHistory {
    used: BTreeMap<String, BTreeSet<u32>>,
}

impl UsageHistory {
    pub fn record(&mut self, vp_id: &str, epoch: u32) {
        self.used.entry(vp_id.to_string()).or_default().insert(epoch);
    }

    pub fn used_in(&self, vp_id: &str, epoch: u32) -> bool {
        self.used.get(vp_id).is_some_and(|e| e.contains(&epoch))
    }
}

/// Applies the per-epoch rules in offer order: a vantage point is used at most once per
/// epoch, and each country gets at most `per_country_cap` of them.
pub fn schedule_vps(
    offered: &[VantagePoint],
    epoch: u32,
    per_country_cap: usize,
    history: &mut UsageHistory,
) -> Schedule {
    let mut schedule = Schedule::default();
    let mut per_country: HashMap<&str, usize> = HashMap::new();
    for vp in offered {
        if history.used_in(&vp.id, epoch) {
            info!("skipping {}: already selected in epoch {epoch}", vp.id);
            schedule.skipped.push(SkippedVp {
                id: vp.id.clone(),
                reason: SkipReason::AlreadySelected { epoch },
            });
            continue;
        }
        let count = per_country.entry(vp.country.as_str()).or_default();
        if *count >= per_country_cap {
            info!("discarding {}: cap of {per_country_cap} reached for {}", vp.id, vp.country);
            schedule.skipped.push(SkippedVp {
                id: vp.id.clone(),
                reason: SkipReason::CountryCap { country: vp.country.clone(), cap: per_country_cap },
            });
            continue;
        }
        *count += 1;
        history.record(&vp.id, epoch);
        schedule.selected.push(vp.clone());
    }
    schedule
}

#[derive(Debug, Clone)]
pub struct MatrixPolicy {
    pub epoch: u32,
    pub per_country_cap: usize,
    pub timeout: Duration,
    pub max_attempts: u32,
    /// Emit records in schedule order rather than completion order.
    pub ordered: bool,
}

impl Default for MatrixPolicy {
    fn default() -> Self {
        MatrixPolicy {
            epoch: 0,
            per_country_cap: 80,
            timeout: Duration::from_millis(crate::model::DEFAULT_TIMEOUT_MS),
            max_attempts: crate::model::DEFAULT_MAX_ATTEMPTS,
            ordered: false,
        }
    }
}

/// One (vp, server, domain) cell of the matrix, in schedule order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatrixTask {
    pub seq: usize,
    pub vp: usize,
    pub server: usize,
    pub domain: usize,
}

/// Every task for the given vantage points. Each vantage point is probed with the domains
/// scoped to its own country.
pub fn matrix_tasks(
    vps: &[VantagePoint],
    servers: &[ControlServer],
    domains: &[TestDomain],
) -> Vec<MatrixTask> {
    let mut tasks = Vec::new();
    for (v, vp) in vps.iter().enumerate() {
        for s in 0..servers.len() {
            for (d, domain) in domains.iter().enumerate() {
                if domain.country_scope == vp.country {
                    tasks.push(MatrixTask { seq: tasks.len(), vp: v, server: s, domain: d });
                }
            }
        }
    }
    tasks
}

/// The worker index that owns a vantage point. Each worker holds its own transport, so
/// all probes from one vantage point run sequentially on the same transport.
pub fn shard_of(vp_index: usize, workers: usize) -> usize {
    vp_index % workers.max(1)
}

/// Probes every task with one worker thread per transport and hands records to `emit`
/// on the calling thread.
pub fn probe_matrix<T, F>(
    vps: &[VantagePoint],
    servers: &[ControlServer],
    domains: &[TestDomain],
    policy: &MatrixPolicy,
    ctx: &ProbeContext<'_>,
    transports: &mut [T],
    mut emit: F,
) -> usize
where
    T: Transport + Send,
    F: FnMut(ProbeRecord),
{
    assert!(!transports.is_empty(), "probe_matrix needs at least one transport");
    let tasks = matrix_tasks(vps, servers, domains);
    let workers = transports.len();
    let total = tasks.len();

    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(usize, ProbeRecord)>();
        for (w, transport) in transports.iter_mut().enumerate() {
            let tx = tx.clone();
            let mine: Vec<MatrixTask> =
                tasks.iter().copied().filter(|t| shard_of(t.vp, workers) == w).collect();
            scope.spawn(move || {
                for t in mine {
                    let spec = ProbeSpec {
                        vp: vps[t.vp].clone(),
                        server: servers[t.server].clone(),
                        domain: domains[t.domain].clone(),
                        timeout: policy.timeout,
                        max_attempts: policy.max_attempts,
                    };
                    let record = probe(&spec, ctx, transport);
                    if tx.send((t.seq, record)).is_err() {
                        return;
                    }
                }
            });
        }
        drop(tx);

        if policy.ordered {
            let mut pending: BTreeMap<usize, ProbeRecord> = BTreeMap::new();
            let mut next = 0;
            for (seq, record) in rx {
                pending.insert(seq, record);
                while let Some(r) = pending.remove(&next) {
                    emit(r);
                    next += 1;
                }
            }
        } else {
            for (_, record) in rx {
                emit(record);
            }
        }
    });
    total
}

/// Schedules the offered vantage points for `policy.epoch` and probes the full matrix.
#[allow(clippy::too_many_arguments)]
pub fn run_matrix<T, F>(
    offered: &[VantagePoint],
    servers: &[ControlServer],
    domains: &[TestDomain],
    policy: &MatrixPolicy,
    history: &mut UsageHistory,
    ctx: &ProbeContext<'_>,
    transports: &mut [T],
    emit: F,
) -> Schedule
where
    T: Transport + Send,
    F: FnMut(ProbeRecord),
{
    let schedule = schedule_vps(offered, policy.epoch, policy.per_country_cap, history);
    probe_matrix(&schedule.selected, servers, domains, policy, ctx, transports, emit);
    schedule
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Access, Mechanism};
    use std::collections::VecDeque;
    use std::net::Ipv4Addr;

    const TOKEN: &str = "0123456789abcdef0123456789abcdef";

    fn server() -> ControlServer {
        ControlServer {
            id: "aws-va".into(),
            address: Ipv4Addr::new(192, 0, 2, 10),
            port: 80,
            platform: "aws".into(),
            region: "virginia".into(),
            sentinel_token: TOKEN.into(),
        }
    }

    fn vp(id: &str, country: &str) -> VantagePoint {
        VantagePoint {
            id: id.into(),
            address: Ipv4Addr::new(198, 51, 100, 1),
            country: country.into(),
            asn: 4766,
            access: Access::Direct,
        }
    }

    /// Replays a fixed script of results and advances a fake clock.
    struct Scripted {
        script: VecDeque<Result<RawResult, String>>,
        clock: u64,
        calls: usize,
    }

    impl Scripted {
        fn new(script: Vec<Result<RawResult, String>>) -> Self {
            Scripted { script: script.into(), clock: 1_000, calls: 0 }
        }
    }

    impl Transport for Scripted {
        fn now_ms(&self) -> u64 {
            self.clock
        }
        fn exchange(
            &mut self,
            _vp: &VantagePoint,
            _server: &ControlServer,
            _request: &[u8],
            timeout: Duration,
        ) -> Result<Exchange, TransportError> {
            self.calls += 1;
            match self.script.pop_front().expect("script exhausted") {
                Ok(result) => {
                    let elapsed = if result == RawResult::Timeout {
                        timeout
                    } else {
                        Duration::from_millis(40)
                    };
                    self.clock += elapsed.as_millis() as u64;
                    Ok(Exchange { result, elapsed })
                }
                Err(msg) => Err(TransportError::Setup(msg)),
            }
        }
    }

    fn ctx(db: &SignatureDb) -> ProbeContext<'_> {
        ProbeContext { campaign_id: "t", epoch: 0, db, user_agent: DEFAULT_USER_AGENT }
    }

    fn spec() -> ProbeSpec {
        ProbeSpec::with_defaults(vp("v1", "KR"), server(), TestDomain::new("example.com", "KR").unwrap())
    }

    fn sentinel_response() -> RawResult {
        RawResult::Response(format!("HTTP/1.1 200 OK\r\n\r\n<p>{TOKEN}</p>").into_bytes())
    }

    #[test]
    fn request_bytes_are_exact() {
        let d = TestDomain::new("Example.COM", "KR").unwrap();
        let req = build_request(&d, "ua/1");
        assert_eq!(
            req,
            b"GET / HTTP/1.1\r\nHost: example.com\r\nUser-Agent: ua/1\r\nAccept: */*\r\nConnection: close\r\n\r\n"
        );
        let second_line = std::str::from_utf8(&req).unwrap().split("\r\n").nth(1).unwrap();
        assert_eq!(second_line, "Host: example.com");
        assert_eq!(req, build_request(&d, "ua/1"));
    }

    #[test]
    fn classify_cases() {
        let db = SignatureDb::builtin();
        assert_eq!(classify(&sentinel_response(), &server(), &db), ProbeOutcome::Sentinel);
        let redirect = RawResult::Response(
            b"HTTP/1.1 302 Found\r\nLocation: http://warning.or.kr/i1.html\r\n\r\n".to_vec(),
        );
        assert_eq!(
            classify(&redirect, &server(), &db),
            ProbeOutcome::Blockpage { signature_id: "kr-warning".into() }
        );
        assert_eq!(classify(&RawResult::Reset, &server(), &db), ProbeOutcome::Reset);
        assert_eq!(classify(&RawResult::Timeout, &server(), &db), ProbeOutcome::Timeout);
        let other = RawResult::Response(b"HTTP/1.1 200 OK\r\n\r\n<title>Hi</title>".to_vec());
        match classify(&other, &server(), &db) {
            ProbeOutcome::OtherPayload { body_digest, title } => {
                assert_eq!(body_digest, hex::encode(Sha256::digest(b"<title>Hi</title>")));
                assert_eq!(body_digest.len(), 64);
                assert_eq!(title.as_deref(), Some("Hi"));
            }
            o => panic!("unexpected {o:?}"),
        }
    }

    #[test]
    fn token_in_headers_only_is_not_sentinel() {
        let db = SignatureDb::builtin();
        let raw = RawResult::Response(format!("HTTP/1.1 200 OK\r\nX-T: {TOKEN}\r\n\r\nbody").into_bytes());
        assert!(matches!(classify(&raw, &server(), &db), ProbeOutcome::OtherPayload { .. }));
    }

    #[test]
    fn clean_path_single_attempt() {
        let db = SignatureDb::builtin();
        let mut t = Scripted::new(vec![Ok(sentinel_response())]);
        let rec = probe(&spec(), &ctx(&db), &mut t);
        assert_eq!(rec.attempts.len(), 1);
        assert_eq!(rec.verdict, Verdict::Uncensored);
        assert_eq!(rec.attempts[0].rtt_ms, Some(40));
        assert!(rec.invariant_violations().is_empty());
    }

    #[test]
    fn drop_exhausts_five_attempts() {
        let db = SignatureDb::builtin();
        let mut t = Scripted::new(vec![Ok(RawResult::Timeout); 5]);
        let rec = probe(&spec(), &ctx(&db), &mut t);
        assert_eq!(rec.attempts.len(), 5);
        assert!(rec.attempts.iter().all(|a| a.outcome == ProbeOutcome::Timeout && a.rtt_ms.is_none()));
        assert_eq!(rec.verdict, Verdict::Censored { mechanism: Mechanism::Drop });
        assert_eq!(rec.ts_end - rec.ts_start, 25_000);
        assert!(rec.invariant_violations().is_empty());
    }

    #[test]
    fn reset_is_immediate_and_late_reset_keeps_timeouts() {
        let db = SignatureDb::builtin();
        let mut t = Scripted::new(vec![Ok(RawResult::Reset)]);
        let rec = probe(&spec(), &ctx(&db), &mut t);
        assert_eq!(rec.attempts.len(), 1);
        assert_eq!(rec.verdict, Verdict::Censored { mechanism: Mechanism::Reset });

        let mut t = Scripted::new(vec![Ok(RawResult::Timeout), Ok(RawResult::Timeout), Ok(RawResult::Reset)]);
        let rec = probe(&spec(), &ctx(&db), &mut t);
        assert_eq!(rec.attempts.len(), 3);
        assert_eq!(rec.verdict, Verdict::Censored { mechanism: Mechanism::Reset });
        assert!(rec.invariant_violations().is_empty());
    }

    #[test]
    fn setup_failures_are_flagged_inconclusive() {
        let db = SignatureDb::builtin();
        let mut t = Scripted::new(vec![Err("socks refused".into()); 5]);
        let rec = probe(&spec(), &ctx(&db), &mut t);
        assert_eq!(rec.attempts.len(), 5);
        assert!(rec.is_inconclusive());
        assert_eq!(rec.error.as_deref(), Some("transport setup failed: socks refused"));
        assert!(rec.invariant_violations().is_empty());

        // A later success clears the annotation.
        let mut t = Scripted::new(vec![Err("blip".into()), Ok(sentinel_response())]);
        let rec = probe(&spec(), &ctx(&db), &mut t);
        assert!(!rec.is_inconclusive());
        assert_eq!(rec.error, None);
    }

    #[test]
    fn country_cap_discards_overflow() {
        let offered: Vec<_> = (0..100).map(|i| vp(&format!("v{i}"), "IN")).collect();
        let s = schedule_vps(&offered, 0, 80, &mut UsageHistory::default());
        assert_eq!(s.selected.len(), 80);
        assert_eq!(s.skipped.len(), 20);
        assert!(s.skipped.iter().all(|k| matches!(k.reason, SkipReason::CountryCap { cap: 80, .. })));
        assert_eq!(s.selected[79].id, "v79");
    }

    #[test]
    fn vp_used_once_per_epoch() {
        let offered = vec![vp("a", "IN"), vp("a", "IN"), vp("b", "IN")];
        let mut history = UsageHistory::default();
        let s = schedule_vps(&offered, 3, 80, &mut history);
        assert_eq!(s.selected.iter().map(|v| v.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(s.skipped, vec![SkippedVp { id: "a".into(), reason: SkipReason::AlreadySelected { epoch: 3 } }]);
        // Same history, next epoch: both allowed again; same epoch: both skipped.
        assert_eq!(schedule_vps(&offered[1..], 4, 80, &mut history).selected.len(), 2);
        assert_eq!(schedule_vps(&offered[1..], 3, 80, &mut history).selected.len(), 0);
    }

    /// Always answers with the sentinel of whatever server is asked.
    struct Echo {
        clock: u64,
    }

    impl Transport for Echo {
        fn now_ms(&self) -> u64 {
            self.clock
        }
        fn exchange(
            &mut self,
            _vp: &VantagePoint,
            server: &ControlServer,
            _request: &[u8],
            _timeout: Duration,
        ) -> Result<Exchange, TransportError> {
            self.clock += 1;
            Ok(Exchange {
                result: RawResult::Response(server.sentinel_token.clone().into_bytes()),
                elapsed: Duration::from_millis(1),
            })
        }
    }

    #[test]
    fn matrix_counts_and_order() {
        let db = SignatureDb::builtin();
        let vps = vec![vp("v1", "KR"), vp("v2", "KR")];
        let servers: Vec<_> = (0..3)
            .map(|i| ControlServer { id: format!("s{i}"), region: format!("r{i}"), ..server() })
            .collect();
        let domains: Vec<_> =
            (0..4).map(|i| TestDomain::new(&format!("d{i}.com"), "KR").unwrap()).collect();
        let policy = MatrixPolicy { ordered: true, ..Default::default() };
        let mut out = Vec::new();
        let mut transports = vec![Echo { clock: 0 }, Echo { clock: 0 }];
        let n = probe_matrix(&vps, &servers, &domains, &policy, &ctx(&db), &mut transports, |r| out.push(r));
        assert_eq!(n, 24);
        assert_eq!(out.len(), 24);
        assert!(out.iter().all(|r| r.verdict == Verdict::Uncensored));
        let keys: Vec<_> = out.iter().map(|r| (r.vp.id.clone(), r.server.id.clone(), r.domain.clone())).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn matrix_scopes_domains_by_country() {
        let vps = vec![vp("v1", "KR"), vp("v2", "IN")];
        let domains = vec![
            TestDomain::new("a.com", "KR").unwrap(),
            TestDomain::new("b.com", "IN").unwrap(),
            TestDomain::new("c.com", "IN").unwrap(),
        ];
        let tasks = matrix_tasks(&vps, &[server()], &domains);
        assert_eq!(tasks.len(), 3);
        assert_eq!(tasks.iter().filter(|t| t.vp == 1).count(), 2);
    }

    #[test]
    fn run_matrix_applies_caps() {
        let db = SignatureDb::builtin();
        let offered: Vec<_> = (0..5).map(|i| vp(&format!("v{i}"), "KR")).collect();
        let domains = vec![TestDomain::new("a.com", "KR").unwrap()];
        let policy = MatrixPolicy { per_country_cap: 3, ..Default::default() };
        let mut count = 0;
        let s = run_matrix(
            &offered,
            &[server()],
            &domains,
            &policy,
            &mut UsageHistory::default(),
            &ctx(&db),
            &mut [Echo { clock: 0 }],
            |_| count += 1,
        );
        assert_eq!(s.selected.len(), 3);
        assert_eq!(count, 3);
    }
}
