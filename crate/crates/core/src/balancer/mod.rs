//! Per-backend L4 reverse proxy with round-robin selection and source-IP
//! stick tables.

mod table;

pub use table::{Selector, StickEntry, StickTable};

use std::collections::{HashMap, HashSet};
use std::net::IpAddr;
use std::sync::{Arc, Mutex, Weak};
use std::time::Duration;

use thiserror::Error;
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinHandle;
use tracing::{debug, warn};

use crate::ids::ReplicaId;
use crate::proxy_header;
use crate::registry::{Health, Registry, RegistryObserver, ReplicaEndpoint};
use crate::time::{Clock, Timestamp};

#[derive(Debug, Clone)]
pub struct BalancerConfig {
    pub stick_ttl: Duration,
    pub stick_capacity: usize,
    /// Expect a `PROXY4` header as the first bytes of every connection.
    pub require_proxy_header: bool,
    pub connect_timeout: Duration,
    pub header_timeout: Duration,
}

impl Default for BalancerConfig {
    fn default() -> Self {
        BalancerConfig {
            stick_ttl: Duration::from_secs(3600),
            stick_capacity: 65536,
            require_proxy_header: false,
            connect_timeout: Duration::from_secs(2),
            header_timeout: Duration::from_secs(5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SelectError {
    #[error("unknown service {0}")]
    UnknownService(String),
    #[error("no healthy replica for {0}")]
    NoHealthyReplica(String),
}

pub struct Balancer {
    registry: Arc<Registry>,
    clock: Arc<dyn Clock>,
    config: BalancerConfig,
    selectors: Mutex<HashMap<String, Arc<Mutex<Selector>>>>,
    /// Replicas that refused a relay connection; skipped until the prober
    /// next writes their health.
    suspects: Mutex<HashSet<ReplicaId>>,
}

struct Hook(Weak<Balancer>);

impl RegistryObserver for Hook {
    fn replica_removed(&self, _service: &str, replica: &ReplicaId) {
        if let Some(b) = self.0.upgrade() {
            b.invalidate_replica(replica);
            b.suspects.lock().unwrap().remove(replica);
        }
    }

    fn health_written(&self, _service: &str, replica: &ReplicaId, _health: Health) {
        if let Some(b) = self.0.upgrade() {
            b.suspects.lock().unwrap().remove(replica);
        }
    }
}

impl Balancer {
    /// Creates a balancer reading replicas from `registry` and subscribes it
    /// to replica removals.
    pub fn new(registry: Arc<Registry>, clock: Arc<dyn Clock>, config: BalancerConfig) -> Arc<Self> {
        let b = Arc::new(Balancer {
            registry: registry.clone(),
            clock,
            config,
            selectors: Mutex::new(HashMap::new()),
            suspects: Mutex::new(HashSet::new()),
        });
        registry.subscribe(Arc::new(Hook(Arc::downgrade(&b))));
        b
    }

    pub fn config(&self) -> &BalancerConfig {
        &self.config
    }

    fn selector(&self, service: &str) -> Arc<Mutex<Selector>> {
        self.selectors
            .lock()
            .unwrap()
            .entry(service.to_string())
            .or_insert_with(|| {
                Arc::new(Mutex::new(Selector::new(
                    self.config.stick_capacity,
                    self.config.stick_ttl,
                )))
            })
            .clone()
    }

    pub fn select_replica(
        &self,
        service: &str,
        source: IpAddr,
        now: Timestamp,
    ) -> Result<ReplicaEndpoint, SelectError> {
        let replicas = self
            .registry
            .endpoints(service)
            .map_err(|_| SelectError::UnknownService(service.to_string()))?;
        let selector = self.selector(service);
        let suspects = self.suspects.lock().unwrap().clone();
        let mut sel = selector.lock().unwrap();
        sel.select(&replicas, |r| !suspects.contains(&r.id), source, now)
            .ok_or_else(|| SelectError::NoHealthyReplica(service.to_string()))
    }

    pub fn expire_entries(&self, now: Timestamp) -> usize {
        let all: Vec<_> = self.selectors.lock().unwrap().values().cloned().collect();
        all.iter().map(|s| s.lock().unwrap().table.expire(now)).sum()
    }

    pub fn invalidate_replica(&self, replica: &ReplicaId) -> usize {
        let all: Vec<_> = self.selectors.lock().unwrap().values().cloned().collect();
        all.iter().map(|s| s.lock().unwrap().table.invalidate(replica)).sum()
    }

    /// Marks a replica as refusing connections and drops its pins. Registry
    /// health is left to the prober.
    pub fn suspect(&self, replica: &ReplicaId) {
        self.suspects.lock().unwrap().insert(replica.clone());
        self.invalidate_replica(replica);
    }

    pub fn stick_count(&self, service: &str) -> usize {
        self.selectors
            .lock()
            .unwrap()
            .get(service)
            .map(|s| s.lock().unwrap().table.len())
            .unwrap_or(0)
    }

    pub fn stick_entries(&self, service: &str) -> Vec<StickEntry> {
        self.selectors
            .lock()
            .unwrap()
            .get(service)
            .map(|s| s.lock().unwrap().table.entries().cloned().collect())
            .unwrap_or_default()
    }

    pub fn forget_service(&self, service: &str) {
        self.selectors.lock().unwrap().remove(service);
    }

    /// Relays one inbound connection to a replica of `service`. Dropping the
    /// stream without relaying closes it, which is what the client sees
    /// when nothing can serve it.
    pub async fn handle_connection(self: Arc<Self>, service: &str, mut inbound: TcpStream) {
        let source = if self.config.require_proxy_header {
            match tokio::time::timeout(self.config.header_timeout, proxy_header::read(&mut inbound)).await {
                Ok(Ok(ip)) => IpAddr::V4(ip),
                Ok(Err(e)) => {
                    debug!(service, error = %e, "rejecting connection without a valid proxy header");
                    return;
                }
                Err(_) => {
                    debug!(service, "timed out waiting for proxy header");
                    return;
                }
            }
        } else {
            match inbound.peer_addr() {
                Ok(a) => a.ip(),
                Err(_) => return,
            }
        };

        for attempt in 0..2 {
            let replica = match self.select_replica(service, source, self.clock.now()) {
                Ok(r) => r,
                Err(e) => {
                    debug!(service, %source, error = %e, "selection failed");
                    return;
                }
            };
            let connect = TcpStream::connect(replica.socket_addr());
            match tokio::time::timeout(self.config.connect_timeout, connect).await {
                Ok(Ok(mut upstream)) => {
                    let _ = inbound.set_nodelay(true);
                    let _ = upstream.set_nodelay(true);
                    if let Err(e) = tokio::io::copy_bidirectional(&mut inbound, &mut upstream).await {
                        debug!(service, replica = %replica.id, error = %e, "relay ended with error");
                    }
                    return;
                }
                Ok(Err(e)) => warn!(service, replica = %replica.id, attempt, error = %e, "replica refused connection"),
                Err(_) => warn!(service, replica = %replica.id, attempt, "replica connect timed out"),
            }
            self.suspect(&replica.id);
        }
    }

    /// Accept loop for `service`. Abort the returned task to stop accepting;
    /// connections already being relayed keep running.
    pub fn listen(self: &Arc<Self>, service: &str, listener: TcpListener) -> JoinHandle<()> {
        let this = self.clone();
        let service = service.to_string();
        tokio::spawn(async move {
            loop {
                match listener.accept().await {
                    Ok((stream, _)) => {
                        let b = this.clone();
                        let svc = service.clone();
                        tokio::spawn(async move { b.handle_connection(&svc, stream).await });
                    }
                    Err(e) => {
                        warn!(service = %service, error = %e, "accept failed");
                        tokio::time::sleep(Duration::from_millis(50)).await;
                    }
                }
            }
        })
    }
}
