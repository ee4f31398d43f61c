use std::io::{self, Read, Write};
use std::net::{Ipv4Addr, SocketAddr, TcpStream};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use super::socks5::{self, Socks5Error};
use crate::model::{Access, ControlServer, VantagePoint};

/// What a single request/response exchange produced at the connection level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RawResult {
    /// Bytes received before the peer closed (or the deadline passed with data in hand).
    Response(Vec<u8>),
    /// The connection was torn down (RST, or FIN before any data).
    Reset,
    /// Nothing arrived before the deadline.
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exchange {
    pub result: RawResult,
    pub elapsed: Duration,
}

/// What came back for one TTL-limited request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TtlObservation {
    TimeExceeded { router: Ipv4Addr },
    Reply { source: Ipv4Addr, result: RawResult },
    Nothing,
}

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("transport setup failed: {0}")]
    Setup(String),
    #[error("socks5 handshake failed: {0}")]
    Socks(#[from] Socks5Error),
    #[error("{0}")]
    Io(#[from] io::Error),
}

/// Carries one HTTP request from a vantage point to a control server.
pub trait Transport {
    /// Milliseconds since the Unix epoch on this transport's clock.
    fn now_ms(&self) -> u64;

    fn exchange(
        &mut self,
        vp: &VantagePoint,
        server: &ControlServer,
        request: &[u8],
        timeout: Duration,
    ) -> Result<Exchange, TransportError>;
}

/// A transport that can also limit the IP TTL of the request packets.
pub trait TtlTransport: Transport {
    fn exchange_with_ttl(
        &mut self,
        vp: &VantagePoint,
        server: &ControlServer,
        request: &[u8],
        ttl: u8,
        timeout: Duration,
    ) -> Result<TtlObservation, TransportError>;
}

const MAX_RESPONSE_BYTES: usize = 1 << 20;

/// Real sockets. Direct vantage points connect from this host; SOCKS5 ones go through
/// their proxy.
#[derive(Debug, Clone, Default)]
pub struct NetTransport;

impl NetTransport {
    fn open(
        vp: &VantagePoint,
        server: &ControlServer,
        timeout: Duration,
    ) -> Result<Result<TcpStream, RawResult>, TransportError> {
        let target = server.socket_addr();
        match &vp.access {
            Access::Direct => match TcpStream::connect_timeout(&SocketAddr::V4(target), timeout) {
                Ok(s) => Ok(Ok(s)),
                Err(e) => match e.kind() {
                    io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock => Ok(Err(RawResult::Timeout)),
                    io::ErrorKind::ConnectionRefused | io::ErrorKind::ConnectionReset => {
                        Ok(Err(RawResult::Reset))
                    }
                    _ => Err(TransportError::Setup(e.to_string())),
                },
            },
            Access::Socks5 { endpoint, credentials } => {
                match socks5::connect(*endpoint, target, credentials.as_ref(), timeout) {
                    Ok(s) => Ok(Ok(s)),
                    Err(e) if e.is_target_refused() => Ok(Err(RawResult::Reset)),
                    Err(e) => Err(e.into()),
                }
            }
        }
    }
}

/// Writes the request and reads until EOF, reset, or `deadline`.
fn send_and_read(stream: &mut TcpStream, request: &[u8], deadline: Instant) -> RawResult {
    if let Err(e) = stream.write_all(request) {
        return match e.kind() {
            io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock => RawResult::Timeout,
            _ => RawResult::Reset,
        };
    }
    let mut buf = Vec::new();
    let mut chunk = [0u8; 8192];
    loop {
        let now = Instant::now();
        if now >= deadline {
            break;
        }
        if stream.set_read_timeout(Some(deadline - now)).is_err() {
            break;
        }
        match stream.read(&mut chunk) {
            Ok(0) => {
                return if buf.is_empty() { RawResult::Reset } else { RawResult::Response(buf) };
            }
            Ok(n) => {
                buf.extend_from_slice(&chunk[..n]);
                if buf.len() >= MAX_RESPONSE_BYTES {
                    return RawResult::Response(buf);
                }
            }
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                break
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(_) => {
                // A blockpage followed by a RST still counts as the blockpage.
                return if buf.is_empty() { RawResult::Reset } else { RawResult::Response(buf) };
            }
        }
    }
    if buf.is_empty() {
        RawResult::Timeout
    } else {
        RawResult::Response(buf)
    }
}

impl Transport for NetTransport {
    fn now_ms(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
    }

    fn exchange(
        &mut self,
        vp: &VantagePoint,
        server: &ControlServer,
        request: &[u8],
        timeout: Duration,
    ) -> Result<Exchange, TransportError> {
        let start = Instant::now();
        let deadline = start + timeout;
        let result = match Self::open(vp, server, timeout)? {
            Ok(mut stream) => {
                stream.set_write_timeout(Some(timeout))?;
                send_and_read(&mut stream, request, deadline)
            }
            Err(early) => early,
        };
        Ok(Exchange { result, elapsed: start.elapsed() })
    }
}

impl TtlTransport for NetTransport {
    /// Completes the TCP handshake at the default TTL, then lowers the TTL for the request.
    ///
    /// Unprivileged sockets cannot read ICMP Time Exceeded messages, so intermediate
    /// routers always show up as `Nothing` here.
    fn exchange_with_ttl(
        &mut self,
        vp: &VantagePoint,
        server: &ControlServer,
        request: &[u8],
        ttl: u8,
        timeout: Duration,
    ) -> Result<TtlObservation, TransportError> {
        if !matches!(vp.access, Access::Direct) {
            return Err(TransportError::Setup("TTL control requires a direct vantage point".into()));
        }
        let deadline = Instant::now() + timeout;
        let mut stream = match Self::open(vp, server, timeout)? {
            Ok(s) => s,
            Err(RawResult::Reset) => {
                return Ok(TtlObservation::Reply { source: server.address, result: RawResult::Reset })
            }
            Err(_) => return Ok(TtlObservation::Nothing),
        };
        stream.set_ttl(u32::from(ttl))?;
        match send_and_read(&mut stream, request, deadline) {
            RawResult::Timeout => Ok(TtlObservation::Nothing),
            result => Ok(TtlObservation::Reply { source: server.address, result }),
        }
    }
}
