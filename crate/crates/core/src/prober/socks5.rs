//! Minimal SOCKS5 client: CONNECT to an IPv4 target, with optional username/password
//! authentication (RFC 1928, RFC 1929).

use std::io::{self, Read, Write};
use std::net::{SocketAddr, SocketAddrV4, TcpStream};
use std::time::Duration;

use crate::model::Credentials;

const VERSION: u8 = 0x05;
const METHOD_NO_AUTH: u8 = 0x00;
const METHOD_USER_PASS: u8 = 0x02;
const METHOD_NONE_ACCEPTABLE: u8 = 0xff;
const CMD_CONNECT: u8 = 0x01;
const ATYP_IPV4: u8 = 0x01;
const ATYP_DOMAIN: u8 = 0x03;
const ATYP_IPV6: u8 = 0x04;

#[derive(Debug, thiserror::Error)]
pub enum Socks5Error {
    #[error("proxy speaks version {0:#04x}, not SOCKS5")]
    BadVersion(u8),
    #[error("proxy accepted none of the offered auth methods")]
    NoAcceptableMethod,
    #[error("proxy selected unsupported method {0:#04x}")]
    UnexpectedMethod(u8),
    #[error("credentials too long for RFC 1929")]
    CredentialsTooLong,
    #[error("proxy rejected credentials (status {0:#04x})")]
    AuthRejected(u8),
    #[error("proxy refused CONNECT: {}", reply_text(*.0))]
    ConnectRefused(u8),
    #[error("proxy replied with unknown address type {0:#04x}")]
    BadAddressType(u8),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Socks5Error {
    /// True when the proxy reported that the target itself refused the connection.
    pub fn is_target_refused(&self) -> bool {
        matches!(self, Socks5Error::ConnectRefused(0x05))
    }
}

fn reply_text(code: u8) -> &'static str {
    match code {
        0x01 => "general failure",
        0x02 => "connection not allowed by ruleset",
        0x03 => "network unreachable",
        0x04 => "host unreachable",
        0x05 => "connection refused",
        0x06 => "TTL expired",
        0x07 => "command not supported",
        0x08 => "address type not supported",
        _ => "unassigned reply code",
    }
}

/// Opens a TCP connection to `proxy` and asks it to CONNECT to `target`.
pub fn connect(
    proxy: SocketAddrV4,
    target: SocketAddrV4,
    credentials: Option<&Credentials>,
    timeout: Duration,
) -> Result<TcpStream, Socks5Error> {
    let mut stream = TcpStream::connect_timeout(&SocketAddr::V4(proxy), timeout)?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    handshake(&mut stream, target, credentials)?;
    Ok(stream)
}

/// Runs the client side of the handshake over an established stream.
pub fn handshake<S: Read + Write>(
    stream: &mut S,
    target: SocketAddrV4,
    credentials: Option<&Credentials>,
) -> Result<(), Socks5Error> {
    let greeting: &[u8] = match credentials {
        Some(_) => &[VERSION, 2, METHOD_NO_AUTH, METHOD_USER_PASS],
        None => &[VERSION, 1, METHOD_NO_AUTH],
    };
    stream.write_all(greeting)?;

    let mut choice = [0u8; 2];
    stream.read_exact(&mut choice)?;
    if choice[0] != VERSION {
        return Err(Socks5Error::BadVersion(choice[0]));
    }
    match (choice[1], credentials) {
        (METHOD_NO_AUTH, _) => {}
        (METHOD_USER_PASS, Some(creds)) => authenticate(stream, creds)?,
        (METHOD_NONE_ACCEPTABLE, _) => return Err(Socks5Error::NoAcceptableMethod),
        (m, _) => return Err(Socks5Error::UnexpectedMethod(m)),
    }

    let mut req = vec![VERSION, CMD_CONNECT, 0x00, ATYP_IPV4];
    req.extend_from_slice(&target.ip().octets());
    req.extend_from_slice(&target.port().to_be_bytes());
    stream.write_all(&req)?;

    let mut head = [0u8; 4];
    stream.read_exact(&mut head)?;
    if head[0] != VERSION {
        return Err(Socks5Error::BadVersion(head[0]));
    }
    if head[1] != 0x00 {
        return Err(Socks5Error::ConnectRefused(head[1]));
    }
    // Bound address: consumed and ignored.
    let addr_len = match head[3] {
        ATYP_IPV4 => 4,
        ATYP_IPV6 => 16,
        ATYP_DOMAIN => {
            let mut len = [0u8; 1];
            stream.read_exact(&mut len)?;
            len[0] as usize
        }
        other => return Err(Socks5Error::BadAddressType(other)),
    };
    let mut rest = vec![0u8; addr_len + 2];
    stream.read_exact(&mut rest)?;
    Ok(())
}

fn authenticate<S: Read + Write>(stream: &mut S, creds: &Credentials) -> Result<(), Socks5Error> {
    let user = creds.username.as_bytes();
    let pass = creds.password.as_bytes();
    if user.len() > 255 || pass.len() > 255 {
        return Err(Socks5Error::CredentialsTooLong);
    }
    let mut msg = Vec::with_capacity(3 + user.len() + pass.len());
    msg.push(0x01);
    msg.push(user.len() as u8);
    msg.extend_from_slice(user);
    msg.push(pass.len() as u8);
    msg.extend_from_slice(pass);
    stream.write_all(&msg)?;
    let mut status = [0u8; 2];
    stream.read_exact(&mut status)?;
    if status[1] != 0x00 {
        return Err(Socks5Error::AuthRejected(status[1]));
    }
    Ok(())
}
