//! Valley-free (Gao-Rexford) AS path selection.

use std::collections::{BTreeMap, BTreeSet};

use super::topology::{Relation, Topology};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RouteError {
    #[error("unknown AS {0}")]
    UnknownAs(u32),
    #[error("no valley-free path from AS {src} to AS {dst}")]
    NoValleyFreePath { src: u32, dst: u32 },
    #[error("provider relationships form a cycle through AS {0}")]
    ProviderCycle(u32),
}

/// The AS graph split by relationship.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    ases: BTreeSet<u32>,
    customers: BTreeMap<u32, BTreeSet<u32>>,
    providers: BTreeMap<u32, BTreeSet<u32>>,
    peers: BTreeMap<u32, BTreeSet<u32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    Up,
    Across,
    Down,
}

impl Graph {
    pub fn new(topology: &Topology) -> Graph {
        let mut g = Graph { ases: topology.nodes.iter().map(|n| n.asn).collect(), ..Default::default() };
        for l in &topology.links {
            match l.relation {
                Relation::CustomerOf => g.add_provider(l.b, l.a),
                Relation::ProviderOf => g.add_provider(l.a, l.b),
                Relation::Peer => g.add_peer(l.a, l.b),
            }
        }
        for p in &topology.direct_peering {
            g.add_peer(p.a, p.b);
        }
        g
    }

    fn add_provider(&mut self, provider: u32, customer: u32) {
        self.customers.entry(provider).or_default().insert(customer);
        self.providers.entry(customer).or_default().insert(provider);
    }

    fn add_peer(&mut self, a: u32, b: u32) {
        self.peers.entry(a).or_default().insert(b);
        self.peers.entry(b).or_default().insert(a);
    }

    fn set<'a>(map: &'a BTreeMap<u32, BTreeSet<u32>>, asn: u32) -> impl Iterator<Item = u32> + 'a {
        map.get(&asn).into_iter().flatten().copied()
    }

    fn step(&self, from: u32, to: u32) -> Option<Step> {
        if self.providers.get(&from).is_some_and(|s| s.contains(&to)) {
            Some(Step::Up)
        } else if self.peers.get(&from).is_some_and(|s| s.contains(&to)) {
            Some(Step::Across)
        } else if self.customers.get(&from).is_some_and(|s| s.contains(&to)) {
            Some(Step::Down)
        } else {
            None
        }
    }

    /// ASes ordered so that every provider precedes its customers.
    fn providers_first(&self) -> Result<Vec<u32>, RouteError> {
        let mut pending: BTreeMap<u32, usize> =
            self.ases.iter().map(|&a| (a, Self::set(&self.providers, a).count())).collect();
        let mut ready: Vec<u32> = pending.iter().filter(|(_, n)| **n == 0).map(|(a, _)| *a).collect();
        ready.reverse();
        let mut order = Vec::with_capacity(self.ases.len());
        while let Some(a) = ready.pop() {
            order.push(a);
            for c in Self::set(&self.customers, a) {
                let n = pending.get_mut(&c).expect("customer is a known AS");
                *n -= 1;
                if *n == 0 {
                    ready.push(c);
                }
            }
        }
        if order.len() != self.ases.len() {
            let stuck = self.ases.iter().find(|a| !order.contains(a)).copied().unwrap_or_default();
            return Err(RouteError::ProviderCycle(stuck));
        }
        Ok(order)
    }

    pub fn check_acyclic(&self) -> Result<(), RouteError> {
        self.providers_first().map(|_| ())
    }

    /// The selected path from every AS that has one to `dst`.
    pub fn routes_to(&self, dst: u32) -> Result<BTreeMap<u32, Vec<u32>>, RouteError> {
        if !self.ases.contains(&dst) {
            return Err(RouteError::UnknownAs(dst));
        }
        let order = self.providers_first()?;

        fn pick(candidates: impl Iterator<Item = (u32, usize)>) -> Option<u32> {
            candidates.min_by_key(|&(hop, len)| (len, hop)).map(|(hop, _)| hop)
        }

        // Customer routes, customers first.
        let mut cust: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        cust.insert(dst, vec![dst]);
        for &x in order.iter().rev() {
            if x == dst {
                continue;
            }
            let via = pick(Self::set(&self.customers, x).filter_map(|c| cust.get(&c).map(|p| (c, p.len()))));
            if let Some(c) = via {
                let mut path = vec![x];
                path.extend_from_slice(&cust[&c]);
                cust.insert(x, path);
            }
        }

        // Peers only export customer routes.
        let mut best = cust.clone();
        for &x in &self.ases {
            if best.contains_key(&x) {
                continue;
            }
            let via = pick(Self::set(&self.peers, x).filter_map(|p| cust.get(&p).map(|r| (p, r.len()))));
            if let Some(p) = via {
                let mut path = vec![x];
                path.extend_from_slice(&cust[&p]);
                best.insert(x, path);
            }
        }

        // Provider routes, providers first.
        for &x in &order {
            if best.contains_key(&x) {
                continue;
            }
            let via = pick(Self::set(&self.providers, x).filter_map(|q| best.get(&q).map(|r| (q, r.len()))));
            if let Some(q) = via {
                let mut path = vec![x];
                path.extend_from_slice(&best[&q]);
                best.insert(x, path);
            }
        }
        Ok(best)
    }

    pub fn route(&self, src: u32, dst: u32) -> Result<Vec<u32>, RouteError> {
        if !self.ases.contains(&src) {
            return Err(RouteError::UnknownAs(src));
        }
        self.routes_to(dst)?.remove(&src).ok_or(RouteError::NoValleyFreePath { src, dst })
    }

    /// True if consecutive ASes are linked and the path never climbs again after going
    /// across or down, and crosses at most one peer link.
    pub fn is_valley_free(&self, path: &[u32]) -> bool {
        let mut phase = Step::Up;
        for w in path.windows(2) {
            let Some(step) = self.step(w[0], w[1]) else { return false };
            phase = match (phase, step) {
                (Step::Up, s) => s,
                (Step::Across | Step::Down, Step::Down) => Step::Down,
                _ => return false,
            };
        }
        true
    }
}

/// The AS path from `src` to `dst`.
pub fn route(topology: &Topology, src: u32, dst: u32) -> Result<Vec<u32>, RouteError> {
    Graph::new(topology).route(src, dst)
}
