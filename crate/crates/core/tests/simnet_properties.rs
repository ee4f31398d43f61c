//! Generated scenarios checked against the brute-force oracle in `common`.

mod common;

use common::{verdict_for, Oracle};
use pathprobe::model::ProbeSpec;
use pathprobe::prober::{probe, ProbeContext, DEFAULT_USER_AGENT};
use pathprobe::simnet::gen::{scenario, GenParams};
use pathprobe::simnet::routing::Graph;
use pathprobe::simnet::{hop_chain, SimNet};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn routes_match_the_oracle_and_are_valley_free(seed in any::<u64>()) {
        let s = scenario(seed, &GenParams::default());
        let t = &s.topology;
        let graph = Graph::new(t);
        prop_assert!(graph.check_acyclic().is_ok());
        for dst in t.nodes.iter().map(|n| n.asn) {
            let ours = graph.routes_to(dst).unwrap();
            let want = common::routes_to(t, dst);
            prop_assert_eq!(&ours, &want, "seed {} dst {}", seed, dst);
            for path in ours.values() {
                prop_assert!(common::valley_free(t, path));
                prop_assert!(graph.is_valley_free(path));
                prop_assert_eq!(path.last(), Some(&dst));
            }
        }
    }

    #[test]
    fn hop_chain_lists_every_router_once(seed in any::<u64>()) {
        let s = scenario(seed, &GenParams::default());
        let t = &s.topology;
        for vp in &t.vps {
            for server in &t.servers {
                let path = common::routes_to(t, server.asn).remove(&vp.asn).unwrap();
                let chain = hop_chain(t, &path);
                let want = common::routers(t, &path);
                prop_assert_eq!(chain.len(), want.len());
                for (i, (h, r)) in chain.iter().zip(&want).enumerate() {
                    prop_assert_eq!(h.hop as usize, i + 1);
                    prop_assert_eq!((h.asn, h.router_index), *r);
                }
            }
        }
    }

    #[test]
    fn single_probes_match_the_oracle(seed in any::<u64>(), pick in any::<prop::sample::Index>()) {
        let s = scenario(seed, &GenParams::default());
        let ctx = ProbeContext { campaign_id: "p", epoch: 0, db: &s.signatures, user_agent: DEFAULT_USER_AGENT };
        let mut net = SimNet::new(s.topology.clone()).unwrap().with_description(&s.campaign().description);
        let mut oracle = Oracle::new(&s.topology);
        // A whole sequence through one network, so cache fills are compared too.
        let mut cells = Vec::new();
        for v in &s.vps {
            for sv in &s.servers {
                for d in &s.domains {
                    cells.push((v, sv, d));
                }
            }
        }
        let k = pick.index(cells.len().max(1));
        cells.rotate_left(k);
        for (vp, server, domain) in cells {
            let spec = ProbeSpec::with_defaults(vp.clone(), server.clone(), domain.clone());
            let rec = probe(&spec, &ctx, &mut net);
            let want = verdict_for(&oracle.request(&vp.id, &server.id, &domain.name), &server.id);
            prop_assert_eq!(&rec.verdict, &want, "seed {} {} {} {}", seed, vp.id, server.id, domain.name);
        }
    }

    #[test]
    fn scenarios_are_deterministic(seed in any::<u64>()) {
        let a = scenario(seed, &GenParams::default());
        let b = scenario(seed, &GenParams::default());
        prop_assert_eq!(serde_json::to_string(&a.topology).unwrap(), serde_json::to_string(&b.topology).unwrap());
        prop_assert_eq!(a.servers, b.servers);
        prop_assert_eq!(a.vps, b.vps);
    }
}
