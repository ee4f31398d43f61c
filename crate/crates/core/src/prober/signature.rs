use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

use super::http::{self, ParsedResponse};

#[derive(Debug, thiserror::Error)]
pub enum SignatureError {
    #[error("duplicate signature id {0:?}")]
    DuplicateId(String),
    #[error("signature {0:?} has an empty pattern")]
    EmptyPattern(String),
    #[error("reading signature db: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing signature db: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchKind {
    /// Pattern occurs anywhere in the response body.
    Substring,
    /// The `<title>` equals the pattern, ignoring case and surrounding whitespace.
    TitleEquals,
    /// A 3xx response whose Location starts with the pattern (ASCII case-insensitive).
    RedirectLocationPrefix,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub id: String,
    pub kind: MatchKind,
    pub pattern: String,
}

impl Signature {
    fn matches(&self, resp: &ParsedResponse<'_>) -> bool {
        match self.kind {
            MatchKind::Substring => http::contains_ignore_case(resp.body, self.pattern.as_bytes()),
            MatchKind::TitleEquals => http::extract_title(resp.body)
                .is_some_and(|t| t.eq_ignore_ascii_case(self.pattern.trim())),
            MatchKind::RedirectLocationPrefix => {
                resp.is_redirect()
                    && resp.header("location").is_some_and(|loc| {
                        loc.len() >= self.pattern.len()
                            && loc.as_bytes()[..self.pattern.len()]
                                .eq_ignore_ascii_case(self.pattern.as_bytes())
                    })
            }
        }
    }
}

/// Known blockpage fingerprints, checked in order; the first match wins.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SignatureDb {
    entries: Vec<Signature>,
}

impl SignatureDb {
    pub fn new(entries: Vec<Signature>) -> Result<Self, SignatureError> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(SignatureError::DuplicateId(e.id.clone()));
            }
            if e.pattern.is_empty() {
                return Err(SignatureError::EmptyPattern(e.id.clone()));
            }
        }
        Ok(SignatureDb { entries })
    }

    /// The fingerprints shipped with the tool.
    pub fn builtin() -> Self {
        SignatureDb {
            entries: vec![Signature {
                id: "kr-warning".into(),
                kind: MatchKind::RedirectLocationPrefix,
                pattern: "http://warning.or.kr".into(),
            }],
        }
    }

    pub fn from_json(text: &str) -> Result<Self, SignatureError> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, SignatureError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("signatures serialize")
    }

    pub fn entries(&self) -> &[Signature] {
        &self.entries
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.iter().any(|e| e.id == id)
    }

    pub fn match_response(&self, resp: &ParsedResponse<'_>) -> Option<&str> {
        self.entries.iter().find(|e| e.matches(resp)).map(|e| e.id.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prober::http::parse_response;

    fn db() -> SignatureDb {
        SignatureDb::from_json(
            r#"[
                {"id": "generic", "kind": "substring", "pattern": "access denied"},
                {"id": "titled", "kind": "title-equals", "pattern": "Blocked Site"},
                {"id": "kr-warning", "kind": "redirect-location-prefix", "pattern": "http://warning.or.kr"},
                {"id": "late-generic", "kind": "substring", "pattern": "denied"}
            ]"#,
        )
        .unwrap()
    }

    #[test]
    fn first_match_in_file_order() {
        let raw = b"HTTP/1.1 200 OK\r\n\r\naccess denied";
        assert_eq!(db().match_response(&parse_response(raw)), Some("generic"));
        let raw = b"HTTP/1.1 200 OK\r\n\r\nrequest denied";
        assert_eq!(db().match_response(&parse_response(raw)), Some("late-generic"));
    }

    #[test]
    fn substring_ignores_case() {
        let raw = b"HTTP/1.1 200 OK\r\n\r\n<h1>Access Denied</h1>";
        assert_eq!(db().match_response(&parse_response(raw)), Some("generic"));
    }

    #[test]
    fn title_match_ignores_case_and_whitespace() {
        let raw = b"HTTP/1.1 200 OK\r\n\r\n<title> blocked site </title>";
        assert_eq!(db().match_response(&parse_response(raw)), Some("titled"));
    }

    #[test]
    fn redirect_needs_3xx() {
        let redirect = b"HTTP/1.1 302 Found\r\nLocation: HTTP://Warning.or.kr/i1.html\r\n\r\n";
        assert_eq!(db().match_response(&parse_response(redirect)), Some("kr-warning"));
        let ok = b"HTTP/1.1 200 OK\r\nLocation: http://warning.or.kr/\r\n\r\n";
        assert_eq!(db().match_response(&parse_response(ok)), None);
    }

    #[test]
    fn rejects_bad_entries() {
        let dup = r#"[{"id":"a","kind":"substring","pattern":"x"},{"id":"a","kind":"substring","pattern":"y"}]"#;
        assert!(matches!(SignatureDb::from_json(dup), Err(SignatureError::DuplicateId(_))));
        let empty = r#"[{"id":"a","kind":"substring","pattern":""}]"#;
        assert!(matches!(SignatureDb::from_json(empty), Err(SignatureError::EmptyPattern(_))));
    }

    #[test]
    fn builtin_roundtrips() {
        let db = SignatureDb::builtin();
        assert_eq!(SignatureDb::from_json(&db.to_json()).unwrap(), db);
        assert!(db.contains("kr-warning"));
    }
}
