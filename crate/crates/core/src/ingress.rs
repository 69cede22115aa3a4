//! The frontend's controlled entry point: one listener per external port,
//! forwarding to the owning backend's balancer with the participant's
//! address carried in a proxy header.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use thiserror::Error;
use tokio::io::AsyncWriteExt;
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinHandle;
use tracing::{debug, warn};

use crate::ids::NodeId;
use crate::model::{ServiceKey, Topology};
use crate::proxy_header;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PortMapping {
    pub external_port: u16,
    pub challenge: String,
    pub backend_node: NodeId,
    pub backend_address: IpAddr,
    pub balancer_port: u16,
}

impl PortMapping {
    pub fn target(&self) -> SocketAddr {
        SocketAddr::new(self.backend_address, self.balancer_port)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MappingTable {
    /// Sorted by external port.
    pub mappings: Vec<PortMapping>,
    pub generation: u64,
}

#[derive(Debug, Error)]
pub enum IngressError {
    #[error("ingress map line {line}: {message}")]
    BadLine { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl MappingTable {
    pub fn new(mut mappings: Vec<PortMapping>) -> Self {
        mappings.sort_by_key(|m| m.external_port);
        MappingTable {
            mappings,
            generation: 0,
        }
    }

    pub fn get(&self, external_port: u16) -> Option<&PortMapping> {
        self.mappings
            .binary_search_by_key(&external_port, |m| m.external_port)
            .ok()
            .map(|i| &self.mappings[i])
    }

    pub fn ports(&self) -> BTreeSet<u16> {
        self.mappings.iter().map(|m| m.external_port).collect()
    }

    /// `<external_port> <challenge> <backend_node> <backend_address>:<balancer_port>` per line.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for m in &self.mappings {
            let _ = writeln!(
                out,
                "{} {} {} {}",
                m.external_port,
                m.challenge,
                m.backend_node,
                m.target()
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, IngressError> {
        let mut mappings: Vec<PortMapping> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let bad = |message: String| IngressError::BadLine { line, message };
            let fields: Vec<&str> = raw.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let [port, challenge, node, target] = fields[..] else {
                return Err(bad(format!("expected 4 fields, found {}", fields.len())));
            };
            let external_port: u16 = port.parse().map_err(|_| bad(format!("invalid port {port:?}")))?;
            let target: SocketAddr = target.parse().map_err(|_| bad(format!("invalid target {target:?}")))?;
            if mappings.iter().any(|m| m.external_port == external_port) {
                return Err(bad(format!("duplicate external port {external_port}")));
            }
            mappings.push(PortMapping {
                external_port,
                challenge: challenge.to_string(),
                backend_node: NodeId::new(node),
                backend_address: target.ip(),
                balancer_port: target.port(),
            });
        }
        Ok(MappingTable::new(mappings))
    }

    pub fn load(path: &Path) -> Result<Self, IngressError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        crate::fsutil::write_atomic(path, self.serialize().as_bytes())
    }
}

/// Balancer listener address of every deployed service.
pub type BalancerView = BTreeMap<ServiceKey, SocketAddr>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedMappings {
    pub table: MappingTable,
    /// Challenges left out because their balancer port is not bound yet, or
    /// because an earlier challenge already claimed their external port.
    pub omitted: Vec<String>,
}

/// One mapping per challenge whose balancer is known, ordered by external port.
pub fn generate_mappings(topology: &Topology, view: &BalancerView) -> GeneratedMappings {
    let mut mappings = Vec::new();
    let mut omitted = Vec::new();
    let mut taken = BTreeSet::new();
    for c in &topology.challenges {
        let key = ServiceKey::new(c.backend.clone(), c.name.clone());
        match view.get(&key) {
            // Only possible for inventories assembled outside a validated topology.
            Some(_) if !taken.insert(c.external_port) => omitted.push(c.name.clone()),
            Some(addr) => mappings.push(PortMapping {
                external_port: c.external_port,
                challenge: c.name.clone(),
                backend_node: c.backend.clone(),
                backend_address: addr.ip(),
                balancer_port: addr.port(),
            }),
            None => omitted.push(c.name.clone()),
        }
    }
    GeneratedMappings {
        table: MappingTable::new(mappings),
        omitted,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ApplyMappingsReport {
    pub generation: u64,
    pub bound: Vec<u16>,
    pub closed: Vec<u16>,
    pub failed: Vec<(u16, String)>,
}

pub struct Ingress {
    bind: IpAddr,
    map_path: Option<PathBuf>,
    connect_timeout: Duration,
    table: Arc<RwLock<Arc<MappingTable>>>,
    listeners: Mutex<BTreeMap<u16, JoinHandle<()>>>,
}

impl Ingress {
    pub fn new(bind: IpAddr, map_path: Option<PathBuf>) -> Arc<Self> {
        Arc::new(Ingress {
            bind,
            map_path,
            connect_timeout: Duration::from_secs(2),
            table: Arc::new(RwLock::new(Arc::new(MappingTable::default()))),
            listeners: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn table(&self) -> Arc<MappingTable> {
        self.table.read().unwrap().clone()
    }

    pub fn listening_ports(&self) -> Vec<u16> {
        self.listeners.lock().unwrap().keys().copied().collect()
    }

    /// Swaps in `table`: binds listeners for new ports, closes listeners for
    /// dropped ports, and persists the table. Connections already being
    /// relayed are not interrupted.
    pub async fn apply_mappings(&self, table: MappingTable) -> io::Result<ApplyMappingsReport> {
        let mut report = ApplyMappingsReport::default();
        let wanted = table.ports();

        let mut fresh = Vec::new();
        let missing: Vec<u16> = {
            let listeners = self.listeners.lock().unwrap();
            wanted.iter().copied().filter(|p| !listeners.contains_key(p)).collect()
        };
        for port in missing {
            match TcpListener::bind((self.bind, port)).await {
                Ok(l) => fresh.push((port, l)),
                Err(e) => {
                    warn!(port, error = %e, "cannot bind external port");
                    report.failed.push((port, e.to_string()));
                }
            }
        }

        {
            let mut current = self.table.write().unwrap();
            let mut table = table;
            table.generation = current.generation + 1;
            report.generation = table.generation;
            *current = Arc::new(table);
        }

        let mut closing = Vec::new();
        {
            let mut listeners = self.listeners.lock().unwrap();
            let stale: Vec<u16> = listeners.keys().copied().filter(|p| !wanted.contains(p)).collect();
            for port in stale {
                if let Some(task) = listeners.remove(&port) {
                    task.abort();
                    closing.push(task);
                }
                report.closed.push(port);
            }
            for (port, listener) in fresh {
                listeners.insert(port, self.accept_loop(port, listener));
                report.bound.push(port);
            }
        }
        // The socket is released only once the aborted task is dropped.
        for task in closing {
            let _ = task.await;
        }

        if let Some(path) = &self.map_path {
            self.table().save(path)?;
        }
        Ok(report)
    }

    /// Loads the persisted table, if any, and binds its listeners.
    pub async fn restore(&self) -> Result<ApplyMappingsReport, IngressError> {
        let Some(path) = &self.map_path else {
            return Ok(ApplyMappingsReport::default());
        };
        let table = match MappingTable::load(path) {
            Ok(t) => t,
            Err(IngressError::Io(e)) if e.kind() == io::ErrorKind::NotFound => MappingTable::default(),
            Err(e) => return Err(e),
        };
        Ok(self.apply_mappings(table).await?)
    }

    /// Stops accepting on every port.
    pub fn shutdown(&self) {
        for (_, task) in std::mem::take(&mut *self.listeners.lock().unwrap()) {
            task.abort();
        }
    }

    /// Like `shutdown`, but returns only after every port is released.
    pub async fn close(&self) {
        let tasks = std::mem::take(&mut *self.listeners.lock().unwrap());
        for (_, task) in tasks {
            task.abort();
            let _ = task.await;
        }
    }

    fn accept_loop(&self, port: u16, listener: TcpListener) -> JoinHandle<()> {
        let table = self.table.clone();
        let timeout = self.connect_timeout;
        tokio::spawn(async move {
            loop {
                match listener.accept().await {
                    Ok((stream, peer)) => {
                        let mapping = table.read().unwrap().get(port).cloned();
                        let Some(mapping) = mapping else {
                            continue;
                        };
                        tokio::spawn(forward(stream, peer, mapping, timeout));
                    }
                    Err(e) => {
                        warn!(port, error = %e, "accept failed");
                        tokio::time::sleep(Duration::from_millis(50)).await;
                    }
                }
            }
        })
    }
}

impl Drop for Ingress {
    fn drop(&mut self) {
        self.shutdown();
    }
}

async fn forward(mut inbound: TcpStream, peer: SocketAddr, mapping: PortMapping, timeout: Duration) {
    let source = match proxy_header::ipv4_of(peer.ip()) {
        Ok(ip) => ip,
        Err(e) => {
            debug!(%peer, error = %e, "dropping connection");
            return;
        }
    };
    let mut upstream = match tokio::time::timeout(timeout, TcpStream::connect(mapping.target())).await {
        Ok(Ok(s)) => s,
        Ok(Err(e)) => {
            warn!(port = mapping.external_port, target = %mapping.target(), error = %e, "backend unreachable");
            return;
        }
        Err(_) => {
            warn!(port = mapping.external_port, target = %mapping.target(), "backend connect timed out");
            return;
        }
    };
    let _ = inbound.set_nodelay(true);
    let _ = upstream.set_nodelay(true);
    if upstream
        .write_all(proxy_header::encode(source).as_bytes())
        .await
        .is_err()
    {
        return;
    }
    let _ = tokio::io::copy_bidirectional(&mut inbound, &mut upstream).await;
}
