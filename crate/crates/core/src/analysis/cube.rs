use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use crate::model::{Dataset, Mechanism, ServerInfo, Verdict, VpInfo};

/// How repeated measurements of the same (vp, server, domain) across epochs are kept.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpochMode {
    /// One cell per epoch.
    #[default]
    PerEpoch,
    /// A later epoch replaces the earlier cell.
    LatestWins,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub epoch: u32,
    pub domain: String,
    pub server: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VpCells {
    pub info: VpInfo,
    pub cells: BTreeMap<CellKey, Verdict>,
}

impl VpCells {
    pub fn is_censored(&self) -> bool {
        self.cells.values().any(Verdict::is_censored)
    }

    pub fn censored_on(&self, server: &str) -> bool {
        self.cells.iter().any(|(k, v)| k.server == server && v.is_censored())
    }

    pub fn has_server(&self, server: &str) -> bool {
        self.cells.keys().any(|k| k.server == server)
    }

    /// Cells grouped by (epoch, domain), i.e. the same request sent to every server.
    fn by_request(&self) -> BTreeMap<(u32, &str), Vec<&Verdict>> {
        let mut groups: BTreeMap<(u32, &str), Vec<&Verdict>> = BTreeMap::new();
        for (k, v) in &self.cells {
            groups.entry((k.epoch, k.domain.as_str())).or_default().push(v);
        }
        groups
    }

    /// Some domain was censored on one path and reached the sentinel on another.
    pub fn is_inconsistent(&self) -> bool {
        self.by_request().values().any(|vs| {
            vs.iter().any(|v| v.is_censored()) && vs.iter().any(|v| **v == Verdict::Uncensored)
        })
    }

    /// Some domain was censored by different mechanisms on different paths.
    pub fn is_mechanism_diverse(&self) -> bool {
        self.by_request().values().any(|vs| {
            let mechs: BTreeSet<String> = vs
                .iter()
                .filter_map(|v| match v {
                    Verdict::Censored { mechanism } => Some(mechanism_key(mechanism)),
                    _ => None,
                })
                .collect();
            mechs.len() > 1
        })
    }
}

fn mechanism_key(m: &Mechanism) -> String {
    m.to_string()
}

/// Per-vantage-point verdict cells, built from countable records only.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VpVerdictCube {
    vps: BTreeMap<String, VpCells>,
    servers: BTreeMap<String, ServerInfo>,
    /// Every country seen in the source data, including ones whose vantage points were
    /// all excluded.
    countries: BTreeSet<String>,
    mode: EpochMode,
}

impl VpVerdictCube {
    pub fn new(mode: EpochMode) -> Self {
        VpVerdictCube { mode, ..Default::default() }
    }

    pub fn build(dataset: &Dataset, mode: EpochMode) -> Self {
        let mut cube = VpVerdictCube::new(mode);
        cube.countries.extend(dataset.vps().values().map(|v| v.country.clone()));
        for r in dataset.countable() {
            cube.insert(&r.vp, &r.server, r.epoch, &r.domain, r.verdict.clone());
        }
        cube
    }

    /// Adds or replaces one cell.
    pub fn insert(&mut self, vp: &VpInfo, server: &ServerInfo, epoch: u32, domain: &str, verdict: Verdict) {
        self.countries.insert(vp.country.clone());
        self.servers.entry(server.id.clone()).or_insert_with(|| server.clone());
        let entry = self
            .vps
            .entry(vp.id.clone())
            .or_insert_with(|| VpCells { info: vp.clone(), cells: BTreeMap::new() });
        let epoch = match self.mode {
            EpochMode::PerEpoch => epoch,
            EpochMode::LatestWins => {
                let key_server = server.id.as_str();
                let older: Vec<CellKey> = entry
                    .cells
                    .keys()
                    .filter(|k| k.domain == domain && k.server == key_server && k.epoch <= epoch)
                    .cloned()
                    .collect();
                if entry.cells.keys().any(|k| k.domain == domain && k.server == key_server && k.epoch > epoch) {
                    return;
                }
                for k in older {
                    entry.cells.remove(&k);
                }
                epoch
            }
        };
        entry.cells.insert(CellKey { epoch, domain: domain.to_string(), server: server.id.clone() }, verdict);
    }

    pub fn vps(&self) -> impl Iterator<Item = &VpCells> {
        self.vps.values()
    }

    pub fn vp(&self, id: &str) -> Option<&VpCells> {
        self.vps.get(id)
    }

    pub fn vps_in<'a>(&'a self, country: &'a str) -> impl Iterator<Item = &'a VpCells> + Clone + 'a {
        self.vps.values().filter(move |v| v.info.country == country)
    }

    pub fn servers(&self) -> &BTreeMap<String, ServerInfo> {
        &self.servers
    }

    pub fn countries(&self) -> &BTreeSet<String> {
        &self.countries
    }

    pub fn has_country(&self, country: &str) -> bool {
        self.countries.contains(country)
    }
}
