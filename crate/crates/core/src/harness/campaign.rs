//! Running a campaign end to end: online vetting, the probe matrix, offline vetting, and
//! the results file plus its manifest.

use log::{info, warn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::{SystemTime, UNIX_EPOCH};

use super::config::{CampaignConfig, ConfigError};
use super::results::{partial_path, write_results, ResultsWriter};
use crate::model::{validate_campaign, Dataset, ExclusionReason, RecordFlag, VantagePoint, Violation, SCHEMA_VERSION};
use crate::prober::{
    probe_matrix, schedule_vps, shard_of, MatrixPolicy, NetTransport, ProbeContext, SignatureDb, Transport,
    UsageHistory,
};
use crate::simnet::{SimNet, Topology, TopologyError};
use crate::vetting::{apply_offline_check, cache_test, CacheVerdict, LegitTitleTable, ReferenceServerPair};

#[derive(Debug, thiserror::Error)]
pub enum CampaignError {
    #[error("invalid campaign config:\n{}", list(.0))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("topology: {0}")]
    Topology(#[from] TopologyError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn list(v: &[Violation]) -> String {
    v.iter().map(|x| format!("  {x}")).collect::<Vec<_>>().join("\n")
}

/// A config together with the files it references, loaded.
#[derive(Debug, Clone)]
pub struct Campaign {
    pub config: CampaignConfig,
    pub signatures: SignatureDb,
    pub titles: LegitTitleTable,
}

impl Campaign {
    pub fn new(config: CampaignConfig) -> Result<Campaign, ConfigError> {
        let signatures = config.signatures()?;
        let titles = config.titles()?;
        Ok(Campaign { config, signatures, titles })
    }

    pub fn load(path: &Path, seed: Option<u64>) -> Result<Campaign, ConfigError> {
        Campaign::new(CampaignConfig::load_with_seed(path, seed)?)
    }

    pub fn with_parts(config: CampaignConfig, signatures: SignatureDb, titles: LegitTitleTable) -> Campaign {
        Campaign { config, signatures, titles }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    Net,
    Simnet,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub epoch: u32,
    /// Require a seed and write records in schedule order.
    pub deterministic: bool,
    /// Overrides `probe.parallel` from the config.
    pub parallel: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedEntry {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionEntry {
    pub reason: ExclusionReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub campaign_id: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub epoch: u32,
    pub transport: TransportKind,
    pub complete: bool,
    /// File name of the results file the counts describe.
    pub results_file: String,
    pub records: usize,
    pub excluded: usize,
    pub inconclusive: usize,
    pub skipped: Vec<SkippedEntry>,
    pub exclusions: BTreeMap<String, ExclusionEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub manifest: RunManifest,
    pub manifest_path: PathBuf,
    pub results_path: PathBuf,
    pub dataset: Dataset,
}

pub fn manifest_path(results: &Path) -> PathBuf {
    let mut s = results.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn wall_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Runs the cache test for every vantage point, each on the transport of its shard.
pub fn online_vetting<T: Transport + Send>(
    vps: &[VantagePoint],
    pair: &ReferenceServerPair,
    user_agent: &str,
    timeout: std::time::Duration,
    transports: &mut [T],
) -> BTreeMap<String, CacheVerdict> {
    let workers = transports.len();
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for (w, transport) in transports.iter_mut().enumerate() {
            let tx = tx.clone();
            scope.spawn(move || {
                for (i, vp) in vps.iter().enumerate().filter(|(i, _)| shard_of(*i, workers) == w) {
                    let verdict = cache_test(vp, pair, user_agent, timeout, transport);
                    let _ = tx.send((i, verdict));
                }
            });
        }
    });
    drop(tx);
    let mut out = BTreeMap::new();
    for (i, verdict) in rx {
        out.insert(vps[i].id.clone(), verdict);
    }
    out
}

/// Runs one epoch of a campaign over the given transports (one worker each) and writes
/// `out` plus `<out>.manifest.json`.
///
/// Records stream to `<out>.partial` while probing. The final file, with exclusion flags
/// applied, replaces it at the end. If the final write fails the partial file is kept and
/// the manifest is marked incomplete.
pub fn run_campaign<T: Transport + Send>(
    campaign: &Campaign,
    opts: &RunOptions,
    kind: TransportKind,
    transports: &mut [T],
    out: &Path,
) -> Result<RunSummary, CampaignError> {
    let cfg = &campaign.config;
    let violations = validate_campaign(cfg);
    if !violations.is_empty() {
        return Err(CampaignError::Invalid(violations));
    }
    if opts.deterministic {
        cfg.require_seed()?;
    }
    assert!(!transports.is_empty(), "run_campaign needs at least one transport");
    let started = (kind == TransportKind::Net).then(wall_ms);

    let mut history = UsageHistory::default();
    let schedule = schedule_vps(&cfg.vps, opts.epoch, cfg.caps.per_country_per_epoch, &mut history);
    info!("epoch {}: {} vantage points selected, {} skipped", opts.epoch, schedule.selected.len(), schedule.skipped.len());

    let mut exclusions = BTreeMap::new();
    match &cfg.reference_pair {
        Some(pair) => {
            let verdicts =
                online_vetting(&schedule.selected, pair, &cfg.probe.user_agent, cfg.probe.timeout(), transports);
            for (id, v) in verdicts {
                if let CacheVerdict::Exclude { reason, note } = v {
                    info!("excluding {id}: {note}");
                    exclusions.insert(id, ExclusionEntry { reason, note: Some(note) });
                }
            }
        }
        None => warn!("no reference server pair configured; skipping the online cache test"),
    }

    let ctx = ProbeContext {
        campaign_id: &cfg.campaign_id,
        epoch: opts.epoch,
        db: &campaign.signatures,
        user_agent: &cfg.probe.user_agent,
    };
    let policy = MatrixPolicy {
        epoch: opts.epoch,
        per_country_cap: cfg.caps.per_country_per_epoch,
        timeout: cfg.probe.timeout(),
        max_attempts: cfg.probe.max_attempts,
        ordered: opts.deterministic || kind == TransportKind::Simnet,
    };

    let partial = partial_path(out);
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CampaignError::Io { path, source }
    };
    let mut writer = Some(ResultsWriter::create(&partial).map_err(io_err(&partial))?);
    let mut stream_error = None;
    let mut records = Vec::new();
    let domains = cfg.test_domains();
    probe_matrix(&schedule.selected, &cfg.servers, &domains, &policy, &ctx, transports, |mut r| {
        if exclusions.contains_key(&r.vp.id) {
            r.add_flag(RecordFlag::CacheOnline);
        }
        if let Some(w) = writer.as_mut() {
            if let Err(e) = w.write(&r) {
                warn!("writing {}: {e}", partial.display());
                stream_error = Some(e.to_string());
                writer = None;
            }
        }
        records.push(r);
    });
    let streamed = writer.as_ref().map(ResultsWriter::count);
    if let Some(w) = writer {
        if let Err(e) = w.finish() {
            stream_error = Some(e.to_string());
        }
    }

    let mut dataset = Dataset::from_records(records);
    for (id, e) in &exclusions {
        dataset.exclude(id, e.reason);
    }
    for id in apply_offline_check(&mut dataset, &campaign.titles) {
        info!("excluding {id}: offline cache check");
        exclusions.entry(id).or_insert(ExclusionEntry { reason: ExclusionReason::CacheOffline, note: None });
    }

    let (complete, results_path, count, error) = match write_results(out, dataset.records()) {
        Ok(n) => {
            let _ = std::fs::remove_file(&partial);
            (true, out.to_path_buf(), n, None)
        }
        Err(e) => {
            warn!("writing {}: {e}; keeping {}", out.display(), partial.display());
            let msg = match stream_error {
                Some(s) => format!("{e}; streaming also failed: {s}"),
                None => e.to_string(),
            };
            (false, partial.clone(), streamed.unwrap_or(0), Some(msg))
        }
    };

    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        campaign_id: cfg.campaign_id.clone(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        epoch: opts.epoch,
        transport: kind,
        complete,
        results_file: file_name(&results_path),
        records: count,
        excluded: exclusions.len(),
        inconclusive: dataset.records().iter().filter(|r| r.is_inconclusive()).count(),
        skipped: schedule.skipped.iter().map(|s| SkippedEntry { id: s.id.clone(), reason: s.reason.to_string() }).collect(),
        exclusions,
        started_at_ms: started,
        finished_at_ms: started.map(|_| wall_ms()),
        error,
    };
    let mpath = manifest_path(out);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&mpath, json + "\n").map_err(io_err(&mpath))?;
    Ok(RunSummary { manifest, manifest_path: mpath, results_path, dataset })
}

fn workers(campaign: &Campaign, opts: &RunOptions) -> usize {
    opts.parallel.unwrap_or(campaign.config.probe.parallel).max(1)
}

/// One simulated network per worker, each with its own cache state and clock.
pub fn sim_transports(topology: &Topology, description: &str, epoch: u32, workers: usize) -> Result<Vec<SimNet>, TopologyError> {
    let mut net = SimNet::new(topology.clone())?.with_description(description);
    net.set_epoch(epoch);
    Ok(vec![net; workers.max(1)])
}

/// Runs a campaign over the simulated network described by `topology`.
pub fn run_sim(campaign: &Campaign, topology: &Topology, opts: &RunOptions, out: &Path) -> Result<RunSummary, CampaignError> {
    let mut nets = sim_transports(topology, &campaign.config.description, opts.epoch, workers(campaign, opts))?;
    run_campaign(campaign, opts, TransportKind::Simnet, &mut nets, out)
}

/// Runs a campaign over real sockets.
pub fn run_net(campaign: &Campaign, opts: &RunOptions, out: &Path) -> Result<RunSummary, CampaignError> {
    let mut transports = vec![NetTransport; workers(campaign, opts)];
    run_campaign(campaign, opts, TransportKind::Net, &mut transports, out)
}
