use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use pathprobe::analysis::{write_reports, EpochMode, Granularity, ReportOptions};
use pathprobe::harness::campaign::{online_vetting, sim_transports};
use pathprobe::harness::{self, audit, load_dataset, Campaign, CampaignError, ConfigError, ResultsError, RunOptions};
use pathprobe::model::{ProbeSpec, VantagePoint};
use pathprobe::prober::{NetTransport, ProbeContext, Transport, TtlTransport};
use pathprobe::simnet::{SimNet, Topology, TopologyError};
use pathprobe::tracer::{annotate_asn, app_traceroute, render_trace_table, IpAsnTable, TraceOptions};
use pathprobe::vetting::{self, CacheVerdict, LegitTitleTable};
use pathprobe::sentinel;

const EXIT_CONFIG: u8 = 2;
const EXIT_PARTIAL: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(name = "pathprobe", version, about = "Measure how HTTP censorship differs across network paths")]
struct Cli {
    /// Seed for token generation and simulation; overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Require a seed and emit results in schedule order.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a sentinel control server.
    ServeSentinel {
        #[arg(long)]
        config: PathBuf,
        /// Which server of the config this host is.
        #[arg(long)]
        server: String,
        #[arg(long, default_value = "0.0.0.0:80")]
        bind: SocketAddr,
        /// Append one JSON line per request here.
        #[arg(long)]
        log: PathBuf,
    },
    /// Probe every vantage point × server × domain over the real network.
    Probe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        epoch: u32,
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Vantage point and control server vetting.
    Vet {
        #[command(subcommand)]
        mode: VetMode,
    },
    /// Application-level traceroute towards the control servers.
    Trace {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        domain: String,
        /// Vantage points to trace from (default: all).
        #[arg(long = "vp")]
        vps: Vec<String>,
        /// Servers to trace to (default: all).
        #[arg(long = "server")]
        servers: Vec<String>,
        /// Trace through a simulated network instead of real sockets.
        #[arg(long)]
        topology: Option<PathBuf>,
        #[arg(long)]
        asn_table: Option<PathBuf>,
        #[arg(long)]
        max_ttl: Option<u32>,
    },
    /// Run a campaign over a simulated network.
    Sim {
        #[arg(long)]
        topology: PathBuf,
        #[arg(long)]
        campaign: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        epoch: u32,
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Compute metrics and write the report CSVs.
    Analyze(AnalyzeArgs),
    /// Like analyze, and print the country table.
    Report(AnalyzeArgs),
    /// Match results against sentinel server logs.
    Audit {
        #[arg(long = "in")]
        input: PathBuf,
        /// SERVER_ID=PATH of a sentinel log; repeatable.
        #[arg(long = "log", value_parser = parse_log_arg)]
        logs: Vec<(String, PathBuf)>,
        #[arg(long, default_value_t = 2000)]
        window_ms: u64,
    },
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 80)]
    min_as_vps: usize,
    #[arg(long, value_enum, default_value_t = GranularityArg::Vp)]
    granularity: GranularityArg,
    /// Keep only the latest epoch per (vp, server, domain).
    #[arg(long)]
    latest_wins: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum GranularityArg {
    Vp,
    Request,
}

#[derive(Subcommand)]
enum VetMode {
    /// Cache test against the reference server pair.
    Online {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        topology: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        epoch: u32,
    },
    /// Flag vantage points whose non-sentinel pages carry a domain's real title.
    Offline {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        titles: PathBuf,
    },
    /// Check that no censor sits in front of the control servers.
    Inbound {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        topology: Option<PathBuf>,
    },
}

fn parse_log_arg(s: &str) -> Result<(String, PathBuf), String> {
    let (id, path) = s.split_once('=').ok_or("expected SERVER_ID=PATH")?;
    Ok((id.to_string(), PathBuf::from(path)))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PATHPROBE_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<CampaignError>() {
            return match c {
                CampaignError::Io { .. } => EXIT_IO,
                _ => EXIT_CONFIG,
            };
        }
        if cause.is::<ConfigError>() || cause.is::<TopologyError>() {
            return EXIT_CONFIG;
        }
        if cause.is::<ResultsError>() || cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
    }
    1
}

fn load_campaign(path: &Path, cli_seed: Option<u64>, deterministic: bool) -> Result<Campaign> {
    let c = Campaign::load(path, cli_seed)?;
    if deterministic {
        c.config.require_seed()?;
    }
    Ok(c)
}

fn run(cli: Cli) -> Result<u8> {
    let seed = cli.seed;
    let deterministic = cli.deterministic;
    match cli.command {
        Command::ServeSentinel { config, server, bind, log } => {
            let c = load_campaign(&config, seed, false)?;
            let s = c.config.server(&server).with_context(|| format!("no server {server} in config"))?;
            let payload = sentinel::render_payload(s, &c.config.description)?;
            let sink = Arc::new(sentinel::JsonlLog::open(&log).with_context(|| log.display().to_string())?);
            let handle = sentinel::serve(bind, payload, sink)?;
            log::info!("sentinel {} listening on {}", s.id, handle.local_addr());
            handle.wait();
            Ok(0)
        }
        Command::Probe { config, out, epoch, parallel } => {
            let c = load_campaign(&config, seed, deterministic)?;
            let run = harness::run_net(&c, &RunOptions { epoch, deterministic, parallel }, &out)?;
            Ok(finish_run(&run))
        }
        Command::Sim { topology, campaign, out, epoch, parallel } => {
            let c = load_campaign(&campaign, seed, deterministic)?;
            let topo = Topology::load(&topology)?;
            let run = harness::run_sim(&c, &topo, &RunOptions { epoch, deterministic, parallel }, &out)?;
            Ok(finish_run(&run))
        }
        Command::Vet { mode } => vet(mode, seed, deterministic),
        Command::Trace { config, domain, vps, servers, topology, asn_table, max_ttl } => {
            let c = load_campaign(&config, seed, deterministic)?;
            let table = asn_table.map(|p| IpAsnTable::load(&p)).transpose()?;
            let opts = TraceOptions {
                max_ttl: max_ttl.unwrap_or(c.config.traceroute.max_ttl),
                per_hop_timeout: Duration::from_millis(c.config.traceroute.per_hop_timeout_ms),
                ..Default::default()
            };
            let results = match topology {
                Some(p) => {
                    let mut net = SimNet::new(Topology::load(&p)?)?.with_description(&c.config.description);
                    trace_all(&c, &domain, &vps, &servers, &opts, table.as_ref(), &mut net)?
                }
                None => trace_all(&c, &domain, &vps, &servers, &opts, table.as_ref(), &mut NetTransport)?,
            };
            print!("{}", render_trace_table(&results));
            Ok(0)
        }
        Command::Analyze(args) => {
            let (dataset, opts) = (load_dataset(&args.input)?, report_options(&args));
            let summaries = write_reports(&dataset, &args.out_dir, &opts)?;
            log::info!("wrote reports for {} countries to {}", summaries.len(), args.out_dir.display());
            Ok(0)
        }
        Command::Report(args) => {
            let (_, table) = harness::report(&args.input, &args.out_dir, &report_options(&args))?;
            print!("{table}");
            Ok(0)
        }
        Command::Audit { input, logs, window_ms } => {
            let records = harness::read_results(&input)?;
            let mut by_server = BTreeMap::new();
            for (id, path) in logs {
                let entries = audit::read_server_log(&path).with_context(|| path.display().to_string())?;
                by_server.insert(id, entries);
            }
            let rep = audit::audit(&records, &by_server, window_ms);
            println!("{}", serde_json::to_string_pretty(&rep)?);
            Ok(0)
        }
    }
}

fn report_options(args: &AnalyzeArgs) -> ReportOptions {
    ReportOptions {
        min_as_vps: args.min_as_vps,
        granularity: match args.granularity {
            GranularityArg::Vp => Granularity::Vp,
            GranularityArg::Request => Granularity::Request,
        },
        epoch_mode: if args.latest_wins { EpochMode::LatestWins } else { EpochMode::PerEpoch },
    }
}

fn finish_run(run: &harness::RunSummary) -> u8 {
    let m = &run.manifest;
    println!(
        "{} records, {} excluded, {} inconclusive -> {}",
        m.records,
        m.excluded,
        m.inconclusive,
        run.results_path.display()
    );
    if m.complete {
        0
    } else {
        eprintln!("run incomplete: {}", m.error.as_deref().unwrap_or("unknown error"));
        EXIT_PARTIAL
    }
}

fn pick<'a, T>(all: &'a [T], wanted: &[String], id: impl Fn(&T) -> &str, what: &str) -> Result<Vec<&'a T>> {
    if wanted.is_empty() {
        return Ok(all.iter().collect());
    }
    wanted
        .iter()
        .map(|w| all.iter().find(|x| id(x) == w).with_context(|| format!("no {what} {w} in config")))
        .collect()
}

fn trace_all<T: TtlTransport>(
    c: &Campaign,
    domain: &str,
    vps: &[String],
    servers: &[String],
    opts: &TraceOptions,
    table: Option<&IpAsnTable>,
    transport: &mut T,
) -> Result<Vec<pathprobe::model::TraceResult>> {
    let vps = pick(&c.config.vps, vps, |v| &v.id, "vantage point")?;
    let servers = pick(&c.config.servers, servers, |s| &s.id, "server")?;
    let mut out = Vec::new();
    for vp in vps {
        let domain = pathprobe::model::TestDomain::new(domain, &vp.country)?;
        for s in &servers {
            let spec = ProbeSpec::with_defaults(vp.clone(), (*s).clone(), domain.clone());
            let r = app_traceroute(&spec, opts, &c.signatures, &c.config.probe.user_agent, transport)?;
            out.push(match table {
                Some(t) => annotate_asn(r, t),
                None => r,
            });
        }
    }
    Ok(out)
}

fn sim_or_net(c: &Campaign, topology: Option<&Path>, epoch: u32) -> Result<Transports> {
    Ok(match topology {
        Some(p) => Transports::Sim(sim_transports(&Topology::load(p)?, &c.config.description, epoch, c.config.probe.parallel)?),
        None => Transports::Net(vec![NetTransport; c.config.probe.parallel.max(1)]),
    })
}

enum Transports {
    Sim(Vec<SimNet>),
    Net(Vec<NetTransport>),
}

fn vet(mode: VetMode, seed: Option<u64>, deterministic: bool) -> Result<u8> {
    match mode {
        VetMode::Online { config, topology, epoch } => {
            let c = load_campaign(&config, seed, deterministic)?;
            let Some(pair) = &c.config.reference_pair else { bail!("config has no reference_pair") };
            let (ua, timeout) = (&c.config.probe.user_agent, c.config.probe.timeout());
            let verdicts = match sim_or_net(&c, topology.as_deref(), epoch)? {
                Transports::Sim(mut t) => online_vetting(&c.config.vps, pair, ua, timeout, &mut t),
                Transports::Net(mut t) => online_vetting(&c.config.vps, pair, ua, timeout, &mut t),
            };
            for (id, v) in verdicts {
                match v {
                    CacheVerdict::Keep => println!("{id}\tkeep"),
                    CacheVerdict::Exclude { note, .. } => println!("{id}\texclude\t{note}"),
                }
            }
            Ok(0)
        }
        VetMode::Offline { input, titles } => {
            let mut dataset = load_dataset(&input)?;
            let table = LegitTitleTable::load(&titles)?;
            for id in vetting::apply_offline_check(&mut dataset, &table) {
                println!("{id}\texclude\tcache_offline");
            }
            Ok(0)
        }
        VetMode::Inbound { config, topology } => {
            let c = load_campaign(&config, seed, deterministic)?;
            let report = match sim_or_net(&c, topology.as_deref(), 0)? {
                Transports::Sim(mut t) => inbound(&c, &mut t[0])?,
                Transports::Net(mut t) => inbound(&c, &mut t[0])?,
            };
            for s in &report.servers {
                println!("{}\t{}\t{} probes", s.server_id, if s.passed { "pass" } else { "FAIL" }, s.probes);
            }
            for f in &report.failures {
                println!("  {} -> {} {}: {:?}", f.vp_id, f.server_id, f.domain, f.outcome);
            }
            Ok(if report.all_passed() { 0 } else { 1 })
        }
    }
}

fn inbound<T: Transport>(c: &Campaign, transport: &mut T) -> Result<vetting::InboundReport> {
    let cfg = &c.config;
    let domains = cfg.test_domains();
    let clean: Vec<VantagePoint> = cfg.vetting.clean_vps.clone();
    let ctx = ProbeContext {
        campaign_id: &cfg.campaign_id,
        epoch: 0,
        db: &c.signatures,
        user_agent: &cfg.probe.user_agent,
    };
    Ok(vetting::verify_inbound_clean(
        &clean,
        &cfg.servers,
        vetting::non_censored_domains(&domains),
        cfg.vetting.min_clean_vps,
        &ctx,
        cfg.probe.timeout(),
        cfg.probe.max_attempts,
        transport,
    )?)
}
