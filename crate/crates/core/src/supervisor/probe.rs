use std::net::SocketAddr;
use std::time::Duration;

use tokio::io::AsyncReadExt;
use tokio::net::TcpStream;
use tokio::time::{timeout_at, Instant};

use crate::model::ProbeSpec;

/// Bytes of greeting compared against a banner prefix.
pub const BANNER_WINDOW: usize = 64;

/// TCP connect, then (for banner probes) a prefix match against the first
/// bytes the replica sends, all within `limit`.
pub async fn probe(addr: SocketAddr, spec: &ProbeSpec, limit: Duration) -> bool {
    let deadline = Instant::now() + limit;
    let Ok(Ok(mut stream)) = timeout_at(deadline, TcpStream::connect(addr)).await else {
        return false;
    };
    let Some(banner) = &spec.banner else {
        return true;
    };
    let want = banner.len().min(BANNER_WINDOW);
    let mut buf = [0u8; BANNER_WINDOW];
    let mut got = 0;
    while got < want {
        match timeout_at(deadline, stream.read(&mut buf[got..])).await {
            Ok(Ok(0)) | Ok(Err(_)) | Err(_) => break,
            Ok(Ok(n)) => got += n,
        }
    }
    banner_matches(&buf[..got], banner)
}

pub fn banner_matches(greeting: &[u8], banner: &str) -> bool {
    let window = &greeting[..greeting.len().min(BANNER_WINDOW)];
    let banner = &banner.as_bytes()[..banner.len().min(BANNER_WINDOW)];
    window.starts_with(banner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tokio::io::AsyncWriteExt;
    use tokio::net::TcpListener;

    async fn greeter(text: &'static str) -> SocketAddr {
        let l = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = l.local_addr().unwrap();
        tokio::spawn(async move {
            while let Ok((mut s, _)) = l.accept().await {
                let _ = s.write_all(text.as_bytes()).await;
                tokio::time::sleep(Duration::from_millis(50)).await;
            }
        });
        addr
    }

    #[tokio::test]
    async fn tcp_and_banner() {
        let flagd = greeter("FLAGD v1\n").await;
        let http = greeter("HTTP/1.1 200 OK\r\n").await;
        let t = Duration::from_secs(2);
        assert!(probe(flagd, &ProbeSpec::tcp(), t).await);
        assert!(probe(flagd, &"tcp:FLAGD".parse().unwrap(), t).await);
        assert!(!probe(http, &"tcp:FLAGD".parse().unwrap(), t).await);
        assert!(probe(http, &ProbeSpec::tcp(), t).await);
    }

    #[tokio::test]
    async fn closed_port_and_silent_server() {
        let l = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let closed = l.local_addr().unwrap();
        drop(l);
        assert!(!probe(closed, &ProbeSpec::tcp(), Duration::from_secs(1)).await);

        let silent = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = silent.local_addr().unwrap();
        let started = std::time::Instant::now();
        assert!(!probe(addr, &ProbeSpec::banner("X"), Duration::from_millis(200)).await);
        assert!(started.elapsed() < Duration::from_secs(1));
        drop(silent);
    }

    #[test]
    fn prefix_oracle() {
        // Oracle: compare against the first 64 bytes by hand.
        let greeting: Vec<u8> = (0..100u8).map(|i| b'a' + i % 26).collect();
        let first: String = greeting[..64].iter().map(|&b| b as char).collect();
        assert!(banner_matches(&greeting, &first));
        assert!(banner_matches(&greeting, "abc"));
        assert!(!banner_matches(&greeting, "abd"));
        assert!(!banner_matches(b"FLA", "FLAGD"));
    }
}
