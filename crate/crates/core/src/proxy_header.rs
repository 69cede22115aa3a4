//! The one-line header the frontend prepends to every forwarded connection
//! so the balancer can key stickiness on the participant's address:
//! `PROXY4 <dotted-quad>\n`.

use std::net::{IpAddr, Ipv4Addr};

use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt};

pub const PREFIX: &str = "PROXY4 ";
/// `PROXY4 255.255.255.255\n`
pub const MAX_LEN: usize = PREFIX.len() + 15 + 1;

#[derive(Debug, Error)]
pub enum HeaderError {
    #[error("connection closed before the proxy header was complete")]
    Truncated,
    #[error("malformed proxy header")]
    Malformed,
    #[error("source address {0} has no IPv4 form")]
    NotIpv4(IpAddr),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn encode(source: Ipv4Addr) -> String {
    format!("{PREFIX}{source}\n")
}

/// IPv4 form of `ip`, unwrapping IPv4-mapped IPv6 addresses.
pub fn ipv4_of(ip: IpAddr) -> Result<Ipv4Addr, HeaderError> {
    match ip {
        IpAddr::V4(v4) => Ok(v4),
        IpAddr::V6(v6) => v6.to_ipv4_mapped().ok_or(HeaderError::NotIpv4(ip)),
    }
}

/// Parses a complete header line, including the trailing newline.
pub fn parse(line: &[u8]) -> Result<Ipv4Addr, HeaderError> {
    let text = std::str::from_utf8(line).map_err(|_| HeaderError::Malformed)?;
    let addr = text
        .strip_prefix(PREFIX)
        .and_then(|rest| rest.strip_suffix('\n'))
        .ok_or(HeaderError::Malformed)?;
    // Ipv4Addr's parser already rejects leading zeros and out-of-range octets.
    addr.parse().map_err(|_| HeaderError::Malformed)
}

/// Reads exactly the header bytes from `stream`, leaving everything after
/// the newline unread.
pub async fn read<R: AsyncRead + Unpin>(stream: &mut R) -> Result<Ipv4Addr, HeaderError> {
    let mut buf = Vec::with_capacity(MAX_LEN);
    loop {
        let b = match stream.read_u8().await {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Err(HeaderError::Truncated),
            Err(e) => return Err(e.into()),
        };
        buf.push(b);
        if buf.len() <= PREFIX.len() && !PREFIX.as_bytes().starts_with(&buf) {
            return Err(HeaderError::Malformed);
        }
        if b == b'\n' {
            return parse(&buf);
        }
        if buf.len() >= MAX_LEN {
            return Err(HeaderError::Malformed);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_bytes() {
        assert_eq!(encode(Ipv4Addr::new(10, 0, 0, 7)), "PROXY4 10.0.0.7\n");
        assert_eq!(MAX_LEN, "PROXY4 255.255.255.255\n".len());
    }

    #[test]
    fn rejects_garbage() {
        for bad in [
            "PROXY4 1.2.3\n",
            "PROXY 1.2.3.4\n",
            "PROXY4 1.2.3.4",
            "PROXY4 01.2.3.4\n",
            "PROXY4  1.2.3.4\n",
        ] {
            assert!(parse(bad.as_bytes()).is_err(), "{bad:?}");
        }
    }

    #[tokio::test]
    async fn leaves_payload_unread() {
        let mut input: &[u8] = b"PROXY4 192.168.1.20\nhello";
        assert_eq!(read(&mut input).await.unwrap(), Ipv4Addr::new(192, 168, 1, 20));
        assert_eq!(input, b"hello");

        let mut early: &[u8] = b"GET / HTTP/1.1\r\n";
        assert!(matches!(read(&mut early).await, Err(HeaderError::Malformed)));
        // Bails out on the first byte that cannot be a header.
        assert_eq!(early.len(), b"GET / HTTP/1.1\r\n".len() - 1);

        let mut short: &[u8] = b"PROXY4 1.2";
        assert!(matches!(read(&mut short).await, Err(HeaderError::Truncated)));
    }

    #[test]
    fn mapped_v6() {
        let ip: IpAddr = "::ffff:127.0.0.3".parse().unwrap();
        assert_eq!(ipv4_of(ip).unwrap(), Ipv4Addr::new(127, 0, 0, 3));
        assert!(ipv4_of("::1".parse().unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn encode_parse(a: [u8; 4]) {
            let ip = Ipv4Addr::from(a);
            prop_assert_eq!(parse(encode(ip).as_bytes()).unwrap(), ip);
        }
    }
}
