#![allow(dead_code)]

use std::collections::HashSet;
use std::net::{Ipv4Addr, SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use flagforge::model::{parse_topology, Topology};
use flagforge::platform::{Hosts, Platform, PlatformOptions, StateDir};
use flagforge::supervisor::SubprocessRunner;
use flagforge::time::SystemClock;
use rand::Rng;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::TcpStream;

pub fn echo_bin() -> &'static str {
    env!("CARGO_BIN_EXE_identity-echo")
}

pub fn flagforge_bin() -> &'static str {
    env!("CARGO_BIN_EXE_flagforge")
}

/// First port of the kernel's ephemeral range; outgoing connections take
/// ports from there, so test blocks stay below it.
fn ephemeral_floor() -> u16 {
    std::fs::read_to_string("/proc/sys/net/ipv4/ip_local_port_range")
        .ok()
        .and_then(|s| s.split_whitespace().next()?.parse().ok())
        .filter(|&p| p > 21_000)
        .unwrap_or(32_768)
}

/// `n` consecutive loopback ports that are free right now and not handed
/// out before by this process.
pub fn port_block(n: u16) -> u16 {
    static TAKEN: OnceLock<Mutex<HashSet<u16>>> = OnceLock::new();
    let taken = TAKEN.get_or_init(|| Mutex::new(HashSet::new()));
    let top = ephemeral_floor() - n;
    let mut rng = rand::thread_rng();
    loop {
        let lo: u16 = rng.gen_range(20_000..top);
        let mut t = taken.lock().unwrap();
        if (lo..lo + n).any(|p| t.contains(&p)) {
            continue;
        }
        if (lo..lo + n).all(|p| TcpListener::bind(("127.0.0.1", p)).is_ok()) {
            t.extend(lo..lo + n);
            return lo;
        }
    }
}

/// Reads the greeting line of one connection, optionally announcing
/// `source` through the proxy header first.
pub async fn greet(addr: SocketAddr, source: Option<Ipv4Addr>) -> std::io::Result<String> {
    let fut = async {
        let mut s = TcpStream::connect(addr).await?;
        if let Some(ip) = source {
            s.write_all(flagforge::proxy_header::encode(ip).as_bytes()).await?;
        }
        let mut line = String::new();
        let mut rd = BufReader::new(&mut s);
        rd.read_line(&mut line).await?;
        let _ = s.shutdown().await;
        if line.is_empty() {
            return Err(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "closed without greeting",
            ));
        }
        Ok(line.trim_end().to_string())
    };
    tokio::time::timeout(Duration::from_secs(5), fut)
        .await
        .unwrap_or_else(|_| Err(std::io::Error::new(std::io::ErrorKind::TimedOut, "no greeting")))
}

/// Replica id of a greeting line.
pub fn replica_of(greeting: &str) -> &str {
    greeting.split_whitespace().next().unwrap_or("")
}

pub fn version_of(greeting: &str) -> &str {
    greeting.split_whitespace().nth(1).unwrap_or("")
}

pub fn kill_group(pid: u64) {
    unsafe {
        libc::killpg(pid as libc::pid_t, libc::SIGKILL);
    }
}

/// Waits until no live (non-zombie) process is left in group `pgid`.
pub async fn wait_group_gone(pgid: u64, limit: Duration) -> bool {
    let deadline = std::time::Instant::now() + limit;
    while std::time::Instant::now() < deadline {
        if !group_alive(pgid) {
            return true;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    false
}

fn group_alive(pgid: u64) -> bool {
    let Ok(dir) = std::fs::read_dir("/proc") else {
        return false;
    };
    dir.flatten().any(|e| {
        let Ok(stat) = std::fs::read_to_string(e.path().join("stat")) else {
            return false;
        };
        // Fields after the parenthesised command: state, ppid, pgrp.
        let Some((_, rest)) = stat.rsplit_once(')') else {
            return false;
        };
        let mut f = rest.split_whitespace();
        let state = f.next();
        let pgrp = f.nth(1).and_then(|v| v.parse::<u64>().ok());
        pgrp == Some(pgid) && state != Some("Z")
    })
}

pub struct Layout {
    pub ext: u16,
    pub be_lo: u16,
}

impl Layout {
    pub fn new() -> Self {
        Layout {
            ext: port_block(8),
            be_lo: port_block(40),
        }
    }

    /// One frontend, one backend `be1`, and `challenges` as
    /// `(name, version, replicas)`; the i-th challenge gets `ext + i`.
    pub fn topology_text(&self, challenges: &[(&str, &str, u32)], settings: &str) -> String {
        let mut doc = format!(
            "node fe role=frontend bind=127.0.0.1 ports={}-{}\nnode be1 role=backend bind=127.0.0.1 ports={}-{}\n",
            self.ext,
            self.ext + 7,
            self.be_lo,
            self.be_lo + 39
        );
        if !settings.is_empty() {
            doc.push_str(&format!("set {settings}\n"));
        }
        for (i, (name, version, replicas)) in challenges.iter().enumerate() {
            doc.push_str(&format!(
                "challenge {name} version={version} replicas={replicas} internal_port=80 external_port={} backend=be1 run=\"{} --port {{PORT}}\" probe=tcp\n",
                self.ext + i as u16,
                echo_bin()
            ));
        }
        doc
    }
}

/// A whole deployment hosted in this process with real replica processes.
pub struct Cluster {
    pub platform: Platform,
    pub topology: Topology,
    pub layout: Layout,
    pub dir: tempfile::TempDir,
}

impl Cluster {
    pub async fn start(challenges: &[(&str, &str, u32)], settings: &str) -> Result<Cluster, String> {
        let layout = Layout::new();
        let topology = parse_topology(&layout.topology_text(challenges, settings)).map_err(|e| e.to_string())?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let state = StateDir::new(dir.path());
        let runner = Arc::new(SubprocessRunner::new(state.logs()).with_stop_grace(Duration::from_millis(500)));
        let opts = PlatformOptions {
            state: Some(state),
            listen: true,
            ..PlatformOptions::default()
        };
        let mut platform = Platform::new(&topology, Hosts::All, runner, Arc::new(SystemClock), opts);
        let report = platform.converge(&topology).await;
        if !report.succeeded() {
            platform.shutdown().await;
            return Err(format!("converge failed:\n{report}"));
        }
        for (name, _, _) in challenges {
            if !platform.wait_healthy("be1", name, Duration::from_secs(10)).await {
                platform.shutdown().await;
                return Err(format!("{name} did not become healthy"));
            }
        }
        Ok(Cluster {
            platform,
            topology,
            layout,
            dir,
        })
    }

    pub fn balancer(&self, challenge: &str) -> SocketAddr {
        self.platform
            .balancer_addr("be1", challenge)
            .expect("balancer listening")
    }

    pub fn external(&self, i: u16) -> SocketAddr {
        SocketAddr::from(([127, 0, 0, 1], self.layout.ext + i))
    }

    pub fn replica_ids(&self, challenge: &str) -> Vec<String> {
        self.platform
            .backend("be1")
            .and_then(|b| b.supervisor().service(challenge))
            .map(|s| s.instances.iter().map(|i| i.endpoint.id.to_string()).collect())
            .unwrap_or_default()
    }

    pub async fn stop(mut self) {
        self.platform.shutdown().await;
    }
}

pub fn write_file(path: &Path, text: &str) -> PathBuf {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).unwrap();
    }
    std::fs::write(path, text).unwrap();
    path.to_path_buf()
}
