//! The control-server side: a static sentinel page served to every HTTP request, with a
//! JSONL log of everything received.

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Read, Write};
use std::net::{Ipv4Addr, SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use crate::model::ControlServer;

pub const MAX_BODY_BYTES: usize = 8 * 1024;
const MAX_REQUEST_HEAD: usize = 16 * 1024;
const MAX_LOGGED_LINE: usize = 512;
const READ_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, thiserror::Error)]
pub enum SentinelError {
    #[error("description text is empty")]
    EmptyDescription,
    #[error("description text contains the sentinel token")]
    TokenInDescription,
    #[error("payload body is {0} bytes, limit is {MAX_BODY_BYTES}")]
    BodyTooLarge(usize),
    #[error("binding {addr}: {source}")]
    Bind { addr: SocketAddr, source: io::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentinelPayload {
    pub token: String,
    pub description_text: String,
    pub body: Vec<u8>,
}

impl SentinelPayload {
    /// Full `200 OK` response carrying the payload.
    pub fn response(&self) -> Vec<u8> {
        self.response_with_status("200 OK")
    }

    /// `400 Bad Request` for unparseable requests; the body is still the payload.
    pub fn bad_request_response(&self) -> Vec<u8> {
        self.response_with_status("400 Bad Request")
    }

    fn response_with_status(&self, status: &str) -> Vec<u8> {
        let mut out = format!(
            "HTTP/1.1 {status}\r\nContent-Type: text/html; charset=utf-8\r\nContent-Length: {}\r\nCache-Control: no-store\r\nConnection: close\r\n\r\n",
            self.body.len()
        )
        .into_bytes();
        out.extend_from_slice(&self.body);
        out
    }
}

/// Renders the static page for `server`. The token appears exactly once.
pub fn render_payload(
    server: &ControlServer,
    description_text: &str,
) -> Result<SentinelPayload, SentinelError> {
    if description_text.trim().is_empty() {
        return Err(SentinelError::EmptyDescription);
    }
    if description_text.contains(&server.sentinel_token) {
        return Err(SentinelError::TokenInDescription);
    }
    let body = format!(
        "<!DOCTYPE html>\n<html>\n<head><meta charset=\"utf-8\"><title>Network measurement experiment</title></head>\n<body>\n<h1>Network measurement experiment</h1>\n<p>{description_text}</p>\n<p>Measurement token: <code>{}</code></p>\n</body>\n</html>\n",
        server.sentinel_token
    );
    if body.len() >= MAX_BODY_BYTES {
        return Err(SentinelError::BodyTooLarge(body.len()));
    }
    Ok(SentinelPayload {
        token: server.sentinel_token.clone(),
        description_text: description_text.to_string(),
        body: body.into_bytes(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerLogEntry {
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    pub client_ip: Ipv4Addr,
    pub host_header: String,
    pub request_line: String,
    pub bytes_in: usize,
}

/// Destination for server log entries. Appends are serialized by the implementation.
pub trait LogSink: Send + Sync {
    fn append(&self, entry: &ServerLogEntry) -> io::Result<()>;
}

/// Append-only JSONL file, flushed after every entry.
pub struct JsonlLog {
    out: Mutex<BufWriter<File>>,
}

impl JsonlLog {
    pub fn open(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(JsonlLog { out: Mutex::new(BufWriter::new(file)) })
    }
}

impl LogSink for JsonlLog {
    fn append(&self, entry: &ServerLogEntry) -> io::Result<()> {
        let line = serde_json::to_string(entry)?;
        let mut out = self.out.lock().unwrap_or_else(|e| e.into_inner());
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
        out.flush()
    }
}

#[derive(Default)]
pub struct MemoryLog {
    entries: Mutex<Vec<ServerLogEntry>>,
}

impl MemoryLog {
    pub fn entries(&self) -> Vec<ServerLogEntry> {
        self.entries.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl LogSink for MemoryLog {
    fn append(&self, entry: &ServerLogEntry) -> io::Result<()> {
        self.entries.lock().unwrap_or_else(|e| e.into_inner()).push(entry.clone());
        Ok(())
    }
}

/// A running responder. Dropping it shuts it down.
pub struct SentinelHandle {
    local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
}

impl SentinelHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// A clonable flag other threads can use to request shutdown; see [`Self::wait`].
    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    /// Stops accepting and waits for in-flight connections to finish.
    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    /// Blocks until the stop flag is raised, then drains like [`Self::shutdown`].
    pub fn wait(mut self) {
        while !self.stop.load(Ordering::SeqCst) {
            std::thread::sleep(Duration::from_millis(100));
        }
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept().
        let mut wake = self.local_addr;
        if wake.ip().is_unspecified() {
            wake.set_ip(Ipv4Addr::LOCALHOST.into());
        }
        let _ = TcpStream::connect_timeout(&wake, Duration::from_millis(500));
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

impl Drop for SentinelHandle {
    fn drop(&mut self) {
        if self.acceptor.is_some() {
            self.stop_and_join();
        }
    }
}

/// Starts answering every request on `bind` with `payload`.
pub fn serve(
    bind: SocketAddr,
    payload: SentinelPayload,
    log: Arc<dyn LogSink>,
) -> Result<SentinelHandle, SentinelError> {
    let listener = TcpListener::bind(bind).map_err(|source| SentinelError::Bind { addr: bind, source })?;
    let local_addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let payload = Arc::new(payload);

    let stop_acceptor = stop.clone();
    let acceptor = std::thread::spawn(move || {
        let mut workers: Vec<JoinHandle<()>> = Vec::new();
        for conn in listener.incoming() {
            if stop_acceptor.load(Ordering::SeqCst) {
                break;
            }
            match conn {
                Ok(stream) => {
                    let payload = payload.clone();
                    let log = log.clone();
                    workers.push(std::thread::spawn(move || {
                        if let Err(e) = handle_connection(stream, &payload, log.as_ref()) {
                            debug!("connection error: {e}");
                        }
                    }));
                    workers.retain(|w| !w.is_finished());
                }
                Err(e) => warn!("accept failed: {e}"),
            }
        }
        for w in workers {
            let _ = w.join();
        }
    });

    Ok(SentinelHandle { local_addr, stop, acceptor: Some(acceptor) })
}

enum Head {
    Complete { host: String, request_line: String },
    Malformed,
}

fn parse_head(buf: &[u8]) -> Option<Head> {
    let mut headers = [httparse::EMPTY_HEADER; 64];
    let mut req = httparse::Request::new(&mut headers);
    match req.parse(buf) {
        Ok(httparse::Status::Complete(_)) => {
            let host = req
                .headers
                .iter()
                .find(|h| h.name.eq_ignore_ascii_case("host"))
                .map(|h| String::from_utf8_lossy(h.value).into_owned())
                .unwrap_or_default();
            let request_line = format!(
                "{} {} HTTP/1.{}",
                req.method.unwrap_or(""),
                req.path.unwrap_or(""),
                req.version.unwrap_or(1)
            );
            Some(Head::Complete { host, request_line })
        }
        Ok(httparse::Status::Partial) => None,
        Err(_) => Some(Head::Malformed),
    }
}

fn first_line(buf: &[u8]) -> String {
    let end = buf.iter().position(|&b| b == b'\r' || b == b'\n').unwrap_or(buf.len());
    let mut line = String::from_utf8_lossy(&buf[..end.min(MAX_LOGGED_LINE)]).into_owned();
    // Replacement characters are wider than the bytes they stand for.
    let mut cut = line.len().min(MAX_LOGGED_LINE);
    while !line.is_char_boundary(cut) {
        cut -= 1;
    }
    line.truncate(cut);
    line
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn handle_connection(
    mut stream: TcpStream,
    payload: &SentinelPayload,
    log: &dyn LogSink,
) -> io::Result<()> {
    let client_ip = match stream.peer_addr()? {
        SocketAddr::V4(a) => *a.ip(),
        SocketAddr::V6(a) => a.ip().to_ipv4_mapped().unwrap_or(Ipv4Addr::UNSPECIFIED),
    };
    stream.set_read_timeout(Some(READ_TIMEOUT))?;
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    let head = loop {
        if let Some(head) = parse_head(&buf) {
            break head;
        }
        if buf.len() >= MAX_REQUEST_HEAD {
            break Head::Malformed;
        }
        match stream.read(&mut chunk) {
            Ok(0) => break Head::Malformed,
            Ok(n) => buf.extend_from_slice(&chunk[..n]),
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(_) => break Head::Malformed,
        }
    };
    // Shutdown wake-up connections carry nothing; don't log them.
    if buf.is_empty() && matches!(head, Head::Malformed) {
        return Ok(());
    }
    let (response, host_header, request_line) = match head {
        Head::Complete { host, request_line } => (payload.response(), host, request_line),
        Head::Malformed => (payload.bad_request_response(), String::new(), first_line(&buf)),
    };
    let written = stream.write_all(&response).and_then(|_| stream.flush());
    let _ = stream.shutdown(std::net::Shutdown::Both);
    log.append(&ServerLogEntry {
        timestamp: now_ms(),
        client_ip,
        host_header,
        request_line,
        bytes_in: buf.len(),
    })?;
    written
}

#[cfg(test)]
mod tests {
    use super::*;

    fn server() -> ControlServer {
        ControlServer {
            id: "s".into(),
            address: Ipv4Addr::LOCALHOST,
            port: 80,
            platform: "aws".into(),
            region: "virginia".into(),
            sentinel_token: "00112233445566778899aabbccddeeff".into(),
        }
    }

    #[test]
    fn token_appears_once_and_body_is_deterministic() {
        let p = render_payload(&server(), "desc").unwrap();
        let body = String::from_utf8(p.body.clone()).unwrap();
        assert_eq!(body.matches(&server().sentinel_token).count(), 1);
        assert!(body.contains("desc"));
        assert_eq!(p, render_payload(&server(), "desc").unwrap());
    }

    #[test]
    fn size_bound() {
        let big = "x".repeat(9 * 1024);
        assert!(matches!(render_payload(&server(), &big), Err(SentinelError::BodyTooLarge(_))));
        assert!(matches!(render_payload(&server(), " "), Err(SentinelError::EmptyDescription)));
        let with_token = format!("see {}", server().sentinel_token);
        assert!(matches!(render_payload(&server(), &with_token), Err(SentinelError::TokenInDescription)));
    }

    #[test]
    fn response_headers() {
        let p = render_payload(&server(), "desc").unwrap();
        let r = String::from_utf8(p.response()).unwrap();
        assert!(r.starts_with("HTTP/1.1 200 OK\r\n"));
        assert!(r.contains("Cache-Control: no-store\r\n"));
        assert!(r.contains("Connection: close\r\n"));
        assert!(r.contains(&format!("Content-Length: {}\r\n", p.body.len())));
        assert!(String::from_utf8(p.bad_request_response()).unwrap().starts_with("HTTP/1.1 400"));
    }

    #[test]
    fn first_line_truncates() {
        let long = vec![b'a'; 2000];
        assert_eq!(first_line(&long).len(), 512);
        assert_eq!(first_line(b"GET /\r\nHost: x"), "GET /");
        assert!(first_line(&[0xff; 2000]).len() <= 512);
    }
}
