//! End-to-end runs of the campaign pipeline over the simulated toy network, plus
//! persistence and the command line.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;

use common::{verdict_for, Oracle};
use pathprobe::analysis::ReportOptions;
use pathprobe::harness::{self, load_dataset, read_results, run_sim, write_results, Campaign, RunManifest, RunOptions};
use pathprobe::model::*;
use pathprobe::simnet::Topology;
use proptest::prelude::*;

fn testdata(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("testdata").join(name)
}

fn toy_run(topology: &str, dir: &Path) -> (harness::RunSummary, Topology) {
    let campaign = Campaign::load(&testdata("toy_campaign.json"), None).unwrap();
    let topo = Topology::load(&testdata(topology)).unwrap();
    let out = dir.join("results.jsonl");
    let run = run_sim(&campaign, &topo, &RunOptions { deterministic: true, ..Default::default() }, &out).unwrap();
    (run, topo)
}

#[test]
fn toy_campaign_matches_the_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let (run, topo) = toy_run("toy_topology.json", dir.path());
    let text = std::fs::read_to_string(&run.results_path).unwrap();
    assert_eq!(text.lines().count(), 12);
    let manifest: RunManifest = serde_json::from_str(&std::fs::read_to_string(&run.manifest_path).unwrap()).unwrap();
    assert!(manifest.complete);
    assert_eq!((manifest.records, manifest.excluded, manifest.inconclusive), (12, 0, 0));
    assert_eq!(manifest.seed, Some(42));
    assert!(!harness::results::partial_path(&run.results_path).exists());

    for r in read_results(&run.results_path).unwrap() {
        // One worker per vantage point, so each gets its own network state.
        let mut oracle = Oracle::new(&topo);
        oracle.request(&r.vp.id, "ref-a", "reference-check.example");
        oracle.request(&r.vp.id, "ref-b", "reference-check.example");
        let seen = oracle.request(&r.vp.id, &r.server.id, &r.domain);
        assert_eq!(r.verdict, verdict_for(&seen, &r.server.id), "{} {} {}", r.vp.id, r.server.id, r.domain);
    }
    let censored = run.dataset.records().iter().filter(|r| r.verdict.is_censored()).count();
    assert_eq!(censored, 5);
}

#[test]
fn toy_runs_are_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, _) = toy_run("toy_topology.json", a.path());
    let (rb, _) = toy_run("toy_topology.json", b.path());
    assert_eq!(std::fs::read(&ra.results_path).unwrap(), std::fs::read(&rb.results_path).unwrap());
}

#[test]
fn cache_on_the_path_excludes_the_vantage_point() {
    let dir = tempfile::tempdir().unwrap();
    let (run, topo) = toy_run("toy_topology_cache.json", dir.path());
    for vp in ["kr-1", "kr-2"] {
        let behind = common::cache_on_path(&topo, vp, "ref-a") || common::cache_on_path(&topo, vp, "ref-b");
        assert_eq!(run.dataset.is_excluded(vp), behind, "{vp}");
    }
    assert!(run.dataset.is_excluded("kr-2"));
    assert_eq!(run.manifest.excluded, 1);
    assert_eq!(run.manifest.exclusions["kr-2"].reason, ExclusionReason::CacheOnline);
    for r in read_results(&run.results_path).unwrap() {
        assert_eq!(r.has_flag(RecordFlag::CacheOnline), r.vp.id == "kr-2");
    }
}

fn templates(dir: &Path) -> (ProbeRecord, ProbeRecord) {
    let (run, _) = toy_run("toy_topology.json", dir);
    let recs = run.dataset.into_records();
    let clean = recs.iter().find(|r| r.verdict == Verdict::Uncensored).unwrap().clone();
    let rst = recs.iter().find(|r| r.final_outcome == ProbeOutcome::Reset).unwrap().clone();
    (clean, rst)
}

fn like(t: &ProbeRecord, vp: &str, country: &str, server: &str) -> ProbeRecord {
    let mut r = t.clone();
    r.vp.id = vp.into();
    r.vp.country = country.into();
    r.server.id = server.into();
    r.server.region = server.into();
    r.domain = "d.example".into();
    r.flags.clear();
    r
}

#[test]
fn report_writes_country_rows_from_a_results_file() {
    let dir = tempfile::tempdir().unwrap();
    let (clean, rst) = templates(dir.path());
    // 10 vantage points: 4 censored on both servers, 3 on one, 3 on neither.
    let mut recs = Vec::new();
    for k in 0..10 {
        let vp = format!("cn-{k}");
        let (a, b) = match k {
            0..=3 => (&rst, &rst),
            4..=6 => (&rst, &clean),
            _ => (&clean, &clean),
        };
        recs.push(like(a, &vp, "CN", "s1"));
        recs.push(like(b, &vp, "CN", "s2"));
    }
    let path = dir.path().join("synthetic.jsonl");
    write_results(&path, &recs).unwrap();
    let out = dir.path().join("reports");
    let (summaries, table) = harness::report(&path, &out, &ReportOptions::default()).unwrap();
    assert_eq!(summaries.len(), 1);
    assert_eq!(summaries[0].censorship_pct, Some(70.0));
    assert!((summaries[0].inconsistency_pct.unwrap() - 42.857).abs() < 0.01);
    assert!(table.contains("CN"));

    let mut rd = csv::Reader::from_path(out.join("country_summary.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][0], "CN");
    assert_eq!(&rows[0][1], "10");
    assert_eq!(&rows[0][2], "7");
    assert_eq!(&rows[0][3], "3");
    assert_eq!(&rows[0][5], "70.00");
    assert_eq!(&rows[0][6], "42.86");
    for f in pathprobe::analysis::REPORT_FILES {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn only_excluded_vantage_points_render_na() {
    let dir = tempfile::tempdir().unwrap();
    let (clean, _) = templates(dir.path());
    let mut r = like(&clean, "kz-1", "KZ", "s1");
    r.add_flag(RecordFlag::CacheOnline);
    let path = dir.path().join("excluded.jsonl");
    write_results(&path, &[r]).unwrap();
    let (summaries, _) = harness::report(&path, &dir.path().join("out"), &ReportOptions::default()).unwrap();
    assert_eq!(summaries[0].censorship_pct, None);
    let text = std::fs::read_to_string(dir.path().join("out/country_summary.csv")).unwrap();
    assert!(text.lines().nth(1).unwrap().ends_with("n/a,n/a"), "{text}");
}

#[test]
fn empty_results_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    std::fs::write(&path, "").unwrap();
    let err = load_dataset(&path).unwrap_err();
    assert!(err.to_string().contains("no records"), "{err}");
}

#[test]
fn truncated_final_line_is_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let (clean, rst) = templates(dir.path());
    let path = dir.path().join("crash.jsonl");
    write_results(&path, &[clean.clone(), rst.clone()]).unwrap();
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str(&serde_json::to_string(&clean).unwrap()[..40]);
    std::fs::write(&path, text).unwrap();
    assert_eq!(read_results(&path).unwrap(), vec![clean, rst]);
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pathprobe"));
    c.env("PATHPROBE_LOG", "off").stdout(std::process::Stdio::null()).stderr(std::process::Stdio::null());
    c
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.jsonl");

    let ok = bin()
        .args(["sim", "--topology"])
        .arg(testdata("toy_topology.json"))
        .arg("--campaign")
        .arg(testdata("toy_campaign.json"))
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(ok.code(), Some(0));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 12);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"campaign_id": "x", "servers": [], "vps": [], "domains": {}}"#).unwrap();
    let s = bin().args(["probe", "--config"]).arg(&bad).arg("--out").arg(dir.path().join("x.jsonl")).status().unwrap();
    assert_eq!(s.code(), Some(2));

    let s = bin()
        .args(["report", "--in"])
        .arg(dir.path().join("missing.jsonl"))
        .arg("--out-dir")
        .arg(dir.path().join("rep"))
        .status()
        .unwrap();
    assert_eq!(s.code(), Some(4));

    let s = bin().args(["report", "--in"]).arg(&out).arg("--out-dir").arg(dir.path().join("rep")).status().unwrap();
    assert_eq!(s.code(), Some(0));
    assert!(dir.path().join("rep/country_summary.csv").exists());
}

fn outcome() -> impl Strategy<Value = (ProbeOutcome, Verdict)> {
    prop_oneof![
        Just((ProbeOutcome::Sentinel, Verdict::Uncensored)),
        Just((ProbeOutcome::Reset, Verdict::Censored { mechanism: Mechanism::Reset })),
        Just((ProbeOutcome::Timeout, Verdict::Censored { mechanism: Mechanism::Drop })),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn results_round_trip(
        rows in proptest::collection::vec(("[a-z]{1,6}", "[A-Z]{2}", "[a-z]{1,4}", 0u32..5, outcome(), any::<bool>()), 1..20),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let (clean, _) = templates(dir.path());
        let recs: Vec<ProbeRecord> = rows
            .into_iter()
            .map(|(vp, country, server, epoch, (o, v), excluded)| {
                let mut r = like(&clean, &vp, &country, &server);
                r.epoch = epoch;
                r.final_outcome = o;
                r.verdict = v;
                if excluded {
                    r.add_flag(RecordFlag::CacheOffline);
                }
                r
            })
            .collect();
        let path = dir.path().join("rt.jsonl");
        write_results(&path, &recs).unwrap();
        prop_assert_eq!(read_results(&path).unwrap(), recs);
    }
}
