//! Just enough HTTP/1.x response parsing to classify what came back from a probe.

/// A response split into status, headers and body. Bytes that do not look like an HTTP
/// response are treated as a bare body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedResponse<'a> {
    pub status: Option<u16>,
    pub headers: Vec<(String, String)>,
    pub body: &'a [u8],
}

impl ParsedResponse<'_> {
    /// First header with the given name (ASCII case-insensitive).
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn is_redirect(&self) -> bool {
        matches!(self.status, Some(300..=399))
    }
}

const MAX_HEADERS: usize = 64;

pub fn parse_response(bytes: &[u8]) -> ParsedResponse<'_> {
    let bare = ParsedResponse { status: None, headers: Vec::new(), body: bytes };
    if !bytes.starts_with(b"HTTP/") {
        return bare;
    }
    let mut headers = [httparse::EMPTY_HEADER; MAX_HEADERS];
    let mut resp = httparse::Response::new(&mut headers);
    match resp.parse(bytes) {
        Ok(httparse::Status::Complete(offset)) => ParsedResponse {
            status: resp.code,
            headers: resp
                .headers
                .iter()
                .map(|h| (h.name.to_string(), String::from_utf8_lossy(h.value).trim().to_string()))
                .collect(),
            body: &bytes[offset..],
        },
        // Truncated head: keep the status if we got that far.
        Ok(httparse::Status::Partial) => ParsedResponse { status: resp.code, ..bare },
        Err(_) => bare,
    }
}

/// Content of the first `<title>` element, trimmed. Tag matching is case-insensitive.
pub fn extract_title(body: &[u8]) -> Option<String> {
    let text = String::from_utf8_lossy(body);
    let lower = text.to_ascii_lowercase();
    let open = lower.find("<title")?;
    let content_start = open + lower[open..].find('>')? + 1;
    let close = content_start + lower[content_start..].find("</title")?;
    Some(text[content_start..close].trim().to_string())
}

pub fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

pub fn contains_ignore_case(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w.eq_ignore_ascii_case(needle))
}

/// Host header value and request line of a raw request, if it parses.
pub fn request_target(bytes: &[u8]) -> (String, String) {
    let line_end = bytes.windows(2).position(|w| w == b"\r\n").unwrap_or(bytes.len());
    let request_line = String::from_utf8_lossy(&bytes[..line_end]).into_owned();
    let mut headers = [httparse::EMPTY_HEADER; MAX_HEADERS];
    let mut req = httparse::Request::new(&mut headers);
    let host = match req.parse(bytes) {
        Ok(_) => req
            .headers
            .iter()
            .find(|h| h.name.eq_ignore_ascii_case("host"))
            .map(|h| String::from_utf8_lossy(h.value).trim().to_string())
            .unwrap_or_default(),
        Err(_) => String::new(),
    };
    (host, request_line)
}
