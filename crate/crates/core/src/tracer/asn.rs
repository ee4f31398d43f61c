use ipnet::Ipv4Net;
use std::collections::HashMap;
use std::net::Ipv4Addr;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum AsnTableError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AsnEntry {
    pub asn: u32,
    pub label: Option<String>,
}

/// IPv4 prefix → ASN with longest-prefix-match lookup. One hash map per prefix length,
/// probed from /32 down.
#[derive(Debug, Clone, Default)]
pub struct IpAsnTable {
    by_len: Vec<HashMap<u32, AsnEntry>>,
}

fn mask(len: u8) -> u32 {
    if len == 0 {
        0
    } else {
        u32::MAX << (32 - len)
    }
}

impl IpAsnTable {
    pub fn new() -> Self {
        IpAsnTable { by_len: vec![HashMap::new(); 33] }
    }

    /// Adds a prefix; host bits are ignored. A later insert of the same prefix wins.
    pub fn insert(&mut self, net: Ipv4Net, asn: u32, label: Option<String>) {
        if self.by_len.is_empty() {
            self.by_len = vec![HashMap::new(); 33];
        }
        let len = net.prefix_len();
        let key = u32::from(net.addr()) & mask(len);
        self.by_len[len as usize].insert(key, AsnEntry { asn, label });
    }

    pub fn lookup(&self, ip: Ipv4Addr) -> Option<&AsnEntry> {
        let ip = u32::from(ip);
        (0..self.by_len.len()).rev().find_map(|len| {
            let table = &self.by_len[len];
            if table.is_empty() {
                return None;
            }
            table.get(&(ip & mask(len as u8)))
        })
    }

    pub fn len(&self) -> usize {
        self.by_len.iter().map(HashMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parses lines of `<CIDR> <ASN> [label]`. Blank lines and `#` comments are skipped;
    /// the ASN may carry an `AS` prefix and the label may contain spaces.
    pub fn parse(text: &str) -> Result<Self, AsnTableError> {
        let mut t = IpAsnTable::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| AsnTableError::Parse { line: n + 1, message };
            let mut parts = line.split_whitespace();
            let cidr = parts.next().unwrap_or("");
            let net: Ipv4Net = cidr.parse().map_err(|_| err(format!("bad prefix {cidr:?}")))?;
            let asn_text = parts.next().ok_or_else(|| err("missing ASN".into()))?;
            let digits = asn_text.strip_prefix("AS").or_else(|| asn_text.strip_prefix("as")).unwrap_or(asn_text);
            let asn: u32 = digits.parse().map_err(|_| err(format!("bad ASN {asn_text:?}")))?;
            let label = parts.collect::<Vec<_>>().join(" ");
            let label = (!label.is_empty()).then_some(label);
            t.insert(net, asn, label);
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, AsnTableError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| AsnTableError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn longest_prefix_wins() {
        let t = IpAsnTable::parse(
            "# comment\n10.0.0.0/8 100 Big Net\n10.1.0.0/16 AS200\n\n0.0.0.0/0 1 default route\n",
        )
        .unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.lookup("10.1.2.3".parse().unwrap()).unwrap().asn, 200);
        let e = t.lookup("10.2.0.1".parse().unwrap()).unwrap();
        assert_eq!((e.asn, e.label.as_deref()), (100, Some("Big Net")));
        assert_eq!(t.lookup("192.0.2.1".parse().unwrap()).unwrap().asn, 1);
    }

    #[test]
    fn unmapped() {
        let t = IpAsnTable::parse("10.1.0.0/16 200").unwrap();
        assert!(t.lookup("10.2.0.1".parse().unwrap()).is_none());
        assert!(IpAsnTable::default().lookup(Ipv4Addr::LOCALHOST).is_none());
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(IpAsnTable::parse("10.0.0.0/33 1"), Err(AsnTableError::Parse { line: 1, .. })));
        assert!(matches!(IpAsnTable::parse("\n10.0.0.0/8"), Err(AsnTableError::Parse { line: 2, .. })));
        assert!(IpAsnTable::parse("10.0.0.0/8 ASx").is_err());
        let t = IpAsnTable::parse("10.0.0.0/8\t  AS7   big  label").unwrap();
        assert_eq!(t.lookup(Ipv4Addr::new(10, 1, 1, 1)).unwrap().label.as_deref(), Some("big label"));
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            prefixes in prop::collection::vec((any::<u32>(), 0u8..=32, 1u32..1000), 0..40),
            probes in prop::collection::vec(any::<u32>(), 1..40),
        ) {
            let mut t = IpAsnTable::new();
            let mut plain: Vec<(u32, u8, u32)> = Vec::new();
            for &(addr, len, asn) in &prefixes {
                let net = Ipv4Net::new(Ipv4Addr::from(addr), len).unwrap();
                t.insert(net, asn, None);
                let key = addr & mask(len);
                plain.retain(|&(k, l, _)| !(k == key && l == len));
                plain.push((key, len, asn));
            }
            for &ip in &probes {
                // Some probes land inside a known prefix.
                let ip = match plain.first() { Some(&(k, _, _)) if ip % 2 == 0 => k | (ip & 0xff), _ => ip };
                let expected = plain
                    .iter()
                    .filter(|&&(k, l, _)| ip & mask(l) == k)
                    .max_by_key(|&&(_, l, _)| l)
                    .map(|&(_, _, asn)| asn);
                prop_assert_eq!(t.lookup(Ipv4Addr::from(ip)).map(|e| e.asn), expected);
            }
        }
    }
}
