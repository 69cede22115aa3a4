//! Runtime for the nodes hosted by one process: per backend a registry,
//! supervisor and balancer; for the frontend the ingress table. Nodes not
//! hosted here are seen read-only through their state files.

pub mod state;

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;
use tracing::{info, warn};

use crate::balancer::{Balancer, BalancerConfig};
use crate::ids::NodeId;
use crate::ingress::{generate_mappings, ApplyMappingsReport, BalancerView, Ingress, MappingTable};
use crate::model::{
    self, diff, Action, ApplyReport, ChallengeSpec, ConvergeTarget, IngressBinding, NodeRole, NodeSpec,
    ObservedReplica, ObservedService, ObservedState, ServiceKey, Topology,
};
use crate::registry::Registry;
use crate::supervisor::{
    AdoptedReplica, ReconcileAction, RunnerBackend, RunnerHandle, Supervisor, SupervisorConfig, SupervisorError,
    UpdateReport,
};
use crate::time::Clock;

pub use state::{NodeState, ReplicaState, ServiceState, StateDir};

#[derive(Debug, Clone)]
pub struct PlatformOptions {
    pub state: Option<StateDir>,
    /// Bind balancer and ingress listeners. One-shot commands only record
    /// port assignments for a later `serve`.
    pub listen: bool,
    pub supervisor: SupervisorConfig,
    pub connect_timeout: Duration,
    pub header_timeout: Duration,
}

impl Default for PlatformOptions {
    fn default() -> Self {
        PlatformOptions {
            state: None,
            listen: true,
            supervisor: SupervisorConfig::default(),
            connect_timeout: Duration::from_secs(2),
            header_timeout: Duration::from_secs(5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Hosts {
    All,
    Only(BTreeSet<NodeId>),
}

impl Hosts {
    pub fn one(node: impl Into<NodeId>) -> Self {
        Hosts::Only([node.into()].into())
    }

    fn contains(&self, node: &NodeId) -> bool {
        match self {
            Hosts::All => true,
            Hosts::Only(set) => set.contains(node),
        }
    }
}

#[derive(Debug, Error)]
pub enum PlatformError {
    #[error("cannot bind {addr}: {error}")]
    Bind { addr: SocketAddr, error: String },
    #[error("node {0} is not hosted by this process")]
    NotHosted(String),
    #[error("no hosted backend runs {0}")]
    UnknownService(String),
    #[error("state: {0}")]
    State(String),
    #[error(transparent)]
    Supervisor(#[from] SupervisorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

struct BalancerSlot {
    port: u16,
    task: Option<JoinHandle<()>>,
}

pub struct Backend {
    node: NodeSpec,
    registry: Arc<Registry>,
    supervisor: Supervisor,
    balancer: Arc<Balancer>,
    slots: BTreeMap<String, BalancerSlot>,
    configured: Option<BTreeSet<String>>,
}

impl Backend {
    pub fn node(&self) -> &NodeSpec {
        &self.node
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn supervisor(&self) -> &Supervisor {
        &self.supervisor
    }

    pub fn supervisor_mut(&mut self) -> &mut Supervisor {
        &mut self.supervisor
    }

    pub fn balancer(&self) -> &Arc<Balancer> {
        &self.balancer
    }

    pub fn balancer_port(&self, challenge: &str) -> Option<u16> {
        self.slots.get(challenge).map(|s| s.port)
    }

    /// Reserves a port for the challenge's balancer (reusing `known` when
    /// given) and, when listening, starts accepting on it.
    async fn open_slot(&mut self, challenge: &str, known: Option<u16>, listen: bool) -> Result<u16, PlatformError> {
        if let Some(slot) = self.slots.get(challenge) {
            return Ok(slot.port);
        }
        let port = match known {
            Some(p) => {
                self.supervisor.reserve_specific_port(p);
                p
            }
            None => self.supervisor.reserve_port()?,
        };
        let task = if listen {
            let addr = SocketAddr::new(self.node.bind, port);
            match TcpListener::bind(addr).await {
                Ok(l) => Some(self.balancer.listen(challenge, l)),
                Err(e) => {
                    self.supervisor.release_port(port);
                    return Err(PlatformError::Bind {
                        addr,
                        error: e.to_string(),
                    });
                }
            }
        } else {
            None
        };
        info!(node = %self.node.id, challenge, port, "balancer slot open");
        self.slots.insert(challenge.to_string(), BalancerSlot { port, task });
        Ok(port)
    }

    fn close_slot(&mut self, challenge: &str) {
        if let Some(slot) = self.slots.remove(challenge) {
            if let Some(task) = slot.task {
                task.abort();
            }
            self.supervisor.release_port(slot.port);
            self.balancer.forget_service(challenge);
        }
    }

    fn snapshot(&self) -> NodeState {
        let services = self
            .supervisor
            .services()
            .map(|svc| ServiceState {
                spec: svc.spec.clone(),
                desired: svc.desired,
                balancer_port: self.balancer_port(&svc.spec.name),
                artifact: svc.artifact.clone(),
                workdir: svc.workdir.clone(),
                next_ordinal: svc.next_ordinal,
                degraded: svc.degraded.clone(),
                sticks: self.balancer.stick_count(&svc.spec.name),
                replicas: svc
                    .instances
                    .iter()
                    .map(|i| ReplicaState {
                        id: i.endpoint.id.clone(),
                        handle: i.runner_handle.0,
                        port: i.endpoint.port,
                        started_at: i.started_at,
                        restarts: i.restarts,
                        workload: i.workload.clone(),
                        artifact: i.artifact.clone(),
                        health: i.endpoint.health,
                    })
                    .collect(),
            })
            .collect();
        NodeState {
            bind: Some(self.node.bind),
            balancer_config: self.configured.clone(),
            services,
        }
    }
}

pub struct Frontend {
    node: NodeSpec,
    table: MappingTable,
    ingress: Option<Arc<Ingress>>,
    dirty: bool,
}

/// Counts from taking over persisted state.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RestoreReport {
    pub services: usize,
    pub adopted: usize,
    pub lost: usize,
    pub ingress: Option<ApplyMappingsReport>,
}

pub struct Platform {
    topology: Topology,
    hosts: Hosts,
    backends: BTreeMap<NodeId, Backend>,
    remotes: BTreeMap<NodeId, NodeState>,
    frontend: Option<Frontend>,
    runner: Arc<dyn RunnerBackend>,
    clock: Arc<dyn Clock>,
    opts: PlatformOptions,
}

impl Platform {
    pub fn new(
        topology: &Topology,
        hosts: Hosts,
        runner: Arc<dyn RunnerBackend>,
        clock: Arc<dyn Clock>,
        opts: PlatformOptions,
    ) -> Self {
        let mut p = Platform {
            topology: topology.clone(),
            hosts,
            backends: BTreeMap::new(),
            remotes: BTreeMap::new(),
            frontend: None,
            runner,
            clock,
            opts,
        };
        p.admit_nodes(topology);
        p
    }

    fn balancer_config(&self, topology: &Topology) -> BalancerConfig {
        BalancerConfig {
            stick_ttl: topology.settings.stick_ttl,
            stick_capacity: topology.settings.stick_capacity.max(1),
            require_proxy_header: topology.frontend().is_some(),
            connect_timeout: self.opts.connect_timeout,
            header_timeout: self.opts.header_timeout,
        }
    }

    /// Creates runtimes for nodes of `topology` seen for the first time.
    fn admit_nodes(&mut self, topology: &Topology) {
        for node in &topology.nodes {
            let hosted = self.hosts.contains(&node.id);
            match node.role {
                NodeRole::Backend if hosted => {
                    if self.backends.contains_key(&node.id) {
                        continue;
                    }
                    let registry = Arc::new(Registry::new());
                    let supervisor = Supervisor::new(
                        node.clone(),
                        registry.clone(),
                        self.runner.clone(),
                        self.clock.clone(),
                        self.opts.supervisor.clone(),
                    );
                    let balancer = Balancer::new(registry.clone(), self.clock.clone(), self.balancer_config(topology));
                    self.backends.insert(
                        node.id.clone(),
                        Backend {
                            node: node.clone(),
                            registry,
                            supervisor,
                            balancer,
                            slots: BTreeMap::new(),
                            configured: None,
                        },
                    );
                }
                NodeRole::Backend => {
                    if !self.remotes.contains_key(&node.id) {
                        let state = self.load_remote(&node.id);
                        self.remotes.insert(node.id.clone(), state);
                    }
                }
                NodeRole::Frontend if hosted => {
                    if self.frontend.as_ref().is_some_and(|f| f.node.id == node.id) {
                        continue;
                    }
                    let ingress = self
                        .opts
                        .listen
                        .then(|| Ingress::new(node.bind, self.opts.state.as_ref().map(|s| s.ingress_map())));
                    let table = self
                        .opts
                        .state
                        .as_ref()
                        .and_then(|s| MappingTable::load(&s.ingress_map()).ok())
                        .unwrap_or_default();
                    self.frontend = Some(Frontend {
                        node: node.clone(),
                        table,
                        ingress,
                        dirty: false,
                    });
                }
                NodeRole::Frontend => {}
            }
        }
    }

    fn load_remote(&self, node: &NodeId) -> NodeState {
        let Some(state) = &self.opts.state else {
            return NodeState::default();
        };
        match state.load_node(node.as_str()) {
            Ok(s) => s.unwrap_or_default(),
            Err(e) => {
                warn!(%node, error = %e, "unreadable node state");
                NodeState::default()
            }
        }
    }

    /// Re-reads the state files of nodes not hosted here.
    pub fn refresh_remotes(&mut self) {
        let ids: Vec<NodeId> = self.remotes.keys().cloned().collect();
        for id in ids {
            let s = self.load_remote(&id);
            self.remotes.insert(id, s);
        }
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn options(&self) -> &PlatformOptions {
        &self.opts
    }

    pub fn backend(&self, node: &str) -> Option<&Backend> {
        self.backends.get(node)
    }

    pub fn backend_mut(&mut self, node: &str) -> Option<&mut Backend> {
        self.backends.get_mut(node)
    }

    pub fn backends(&self) -> impl Iterator<Item = &Backend> {
        self.backends.values()
    }

    pub fn remote(&self, node: &str) -> Option<&NodeState> {
        self.remotes.get(node)
    }

    pub fn ingress(&self) -> Option<&Arc<Ingress>> {
        self.frontend.as_ref().and_then(|f| f.ingress.as_ref())
    }

    pub fn mapping_table(&self) -> Option<&MappingTable> {
        self.frontend.as_ref().map(|f| &f.table)
    }

    /// Hosted backend running `challenge`.
    pub fn backend_of(&self, challenge: &str) -> Option<&NodeId> {
        self.backends
            .iter()
            .find(|(_, b)| b.supervisor.service(challenge).is_some())
            .map(|(id, _)| id)
    }

    fn hosted_backend_mut(&mut self, node: &str) -> Result<&mut Backend, PlatformError> {
        self.backends
            .get_mut(node)
            .ok_or_else(|| PlatformError::NotHosted(node.to_string()))
    }

    pub fn balancer_addr(&self, backend: &str, challenge: &str) -> Option<SocketAddr> {
        self.balancer_view().get(&ServiceKey::new(backend, challenge)).copied()
    }

    /// Balancer listener of every configured service, hosted or not.
    pub fn balancer_view(&self) -> BalancerView {
        let mut view = BalancerView::new();
        for (id, b) in &self.backends {
            for (name, slot) in &b.slots {
                view.insert(
                    ServiceKey::new(id.clone(), name.clone()),
                    SocketAddr::new(b.node.bind, slot.port),
                );
            }
        }
        for (id, s) in &self.remotes {
            let Some(configured) = &s.balancer_config else {
                continue;
            };
            let bind = s.bind.or_else(|| self.topology.node(id.as_str()).map(|n| n.bind));
            let Some(bind) = bind else {
                continue;
            };
            for svc in &s.services {
                if let (true, Some(port)) = (configured.contains(&svc.spec.name), svc.balancer_port) {
                    view.insert(
                        ServiceKey::new(id.clone(), svc.spec.name.clone()),
                        SocketAddr::new(bind, port),
                    );
                }
            }
        }
        view
    }

    /// Every service known on any backend, as challenge specs bound to the
    /// backend that runs them.
    pub fn inventory(&self) -> Vec<ChallengeSpec> {
        let mut out: Vec<ChallengeSpec> = Vec::new();
        for (id, b) in &self.backends {
            out.extend(b.supervisor.services().map(|s| ChallengeSpec {
                backend: id.clone(),
                ..s.spec.clone()
            }));
        }
        for (id, s) in &self.remotes {
            out.extend(s.services.iter().map(|svc| ChallengeSpec {
                backend: id.clone(),
                ..svc.spec.clone()
            }));
        }
        out.sort_by(|a, b| (&a.backend, &a.name).cmp(&(&b.backend, &b.name)));
        out
    }

    /// Takes over persisted state for hosted nodes: services, running
    /// replicas, balancer ports and the ingress table.
    pub async fn restore(&mut self) -> Result<RestoreReport, PlatformError> {
        let mut report = RestoreReport::default();
        let Some(state) = self.opts.state.clone() else {
            return Ok(report);
        };
        let listen = self.opts.listen;
        let now = self.clock.now();
        for (id, backend) in self.backends.iter_mut() {
            let Some(ns) = state.load_node(id.as_str()).map_err(PlatformError::State)? else {
                continue;
            };
            for svc in &ns.services {
                if backend.supervisor.service(&svc.spec.name).is_some() {
                    continue;
                }
                backend.supervisor.add_service(svc.spec.clone())?;
                backend.supervisor.scale(&svc.spec.name, svc.desired.max(1))?;
                backend
                    .supervisor
                    .set_artifact(&svc.spec.name, svc.artifact.clone(), svc.workdir.clone())?;
                backend.supervisor.set_next_ordinal(&svc.spec.name, svc.next_ordinal)?;
                report.services += 1;
                for r in &svc.replicas {
                    let adopted = backend.supervisor.adopt(
                        &svc.spec.name,
                        AdoptedReplica {
                            id: r.id.clone(),
                            handle: RunnerHandle(r.handle),
                            port: r.port,
                            started_at: r.started_at,
                            restarts: r.restarts,
                            workload: r.workload.clone(),
                            artifact: r.artifact.clone(),
                        },
                    )?;
                    if adopted {
                        report.adopted += 1;
                    } else {
                        report.lost += 1;
                    }
                }
            }
            // Adopted replicas start out `starting`; probe them so traffic
            // flows as soon as the balancers open.
            backend.supervisor.probe_all(now).await;
            for svc in &ns.services {
                if let Some(port) = svc.balancer_port {
                    backend.open_slot(&svc.spec.name, Some(port), listen).await?;
                }
            }
            backend.configured = ns.balancer_config.clone();
        }
        if let Some(f) = &mut self.frontend {
            if let Some(ingress) = &f.ingress {
                let r = ingress
                    .restore()
                    .await
                    .map_err(|e| PlatformError::State(e.to_string()))?;
                if let Some((port, error)) = r.failed.first() {
                    return Err(PlatformError::Bind {
                        addr: SocketAddr::new(f.node.bind, *port),
                        error: error.clone(),
                    });
                }
                f.table = (*ingress.table()).clone();
                report.ingress = Some(r);
            }
        }
        Ok(report)
    }

    /// Backend actions belong to the process hosting that backend; ingress
    /// actions to the one hosting the frontend.
    fn in_scope(&self, action: &Action) -> bool {
        match action {
            Action::UpdateBalancerConfig { backend } => self.backends.contains_key(backend),
            Action::BindIngress { .. } | Action::UnbindIngress { .. } => self.frontend.is_some(),
            other => other.service().is_some_and(|k| self.backends.contains_key(&k.backend)),
        }
    }

    /// Adopts a newer topology without converging to it.
    pub fn set_topology(&mut self, topology: &Topology) {
        self.admit_nodes(topology);
        self.topology = topology.clone();
    }

    /// Carries replica counts and (for topology-owned services) spawn
    /// parameters over to running services. Networks are left to the
    /// network actions.
    fn sync_specs(&mut self, desired: &Topology) {
        for c in &desired.challenges {
            let Some(b) = self.backends.get_mut(&c.backend) else {
                continue;
            };
            let Some(svc) = b.supervisor.service(&c.name) else {
                continue;
            };
            let spec = if svc.artifact.is_some() {
                ChallengeSpec {
                    replicas: c.replicas,
                    ..svc.spec.clone()
                }
            } else {
                ChallengeSpec {
                    network: svc.spec.network.clone(),
                    ..c.clone()
                }
            };
            let _ = b.supervisor.update_spec(spec);
        }
    }

    /// Plans against the observed state of the nodes in scope and applies
    /// the result.
    pub async fn converge(&mut self, desired: &Topology) -> ApplyReport {
        self.admit_nodes(desired);
        self.sync_specs(desired);
        let observed = self.observe();
        let mut changes = diff(desired, &observed);
        changes.actions.retain(|a| self.in_scope(a));
        let report = model::apply(&changes, desired, self).await;
        if let Err(e) = self.commit_ingress().await {
            warn!(error = %e, "ingress commit failed");
        }
        self.topology = desired.clone();
        self.save_quietly();
        report
    }

    async fn commit_ingress(&mut self) -> Result<(), String> {
        let state = self.opts.state.clone();
        let Some(f) = &mut self.frontend else {
            return Ok(());
        };
        if !f.dirty {
            return Ok(());
        }
        f.dirty = false;
        match &f.ingress {
            Some(ingress) => {
                let r = ingress
                    .apply_mappings(f.table.clone())
                    .await
                    .map_err(|e| e.to_string())?;
                f.table.generation = r.generation;
                if !r.failed.is_empty() {
                    let failed: Vec<String> = r.failed.iter().map(|(p, e)| format!("{p}: {e}")).collect();
                    return Err(format!("cannot bind {}", failed.join(", ")));
                }
            }
            None => {
                f.table.generation += 1;
                if let Some(s) = state {
                    f.table.save(&s.ingress_map()).map_err(|e| e.to_string())?;
                }
            }
        }
        Ok(())
    }

    /// Regenerates the ingress table from the service inventory and applies
    /// it when it changed. Used by a serving frontend.
    pub async fn sync_ingress(&mut self) -> Result<Option<ApplyMappingsReport>, String> {
        let Some(f) = &self.frontend else {
            return Ok(None);
        };
        let effective = Topology {
            nodes: self.topology.nodes.clone(),
            challenges: self.inventory(),
            settings: self.topology.settings.clone(),
        };
        let generated = generate_mappings(&effective, &self.balancer_view());
        if generated.table.mappings == f.table.mappings {
            return Ok(None);
        }
        let f = self.frontend.as_mut().unwrap();
        f.table.mappings = generated.table.mappings;
        f.dirty = true;
        match &f.ingress {
            Some(ingress) => {
                f.dirty = false;
                let r = ingress
                    .apply_mappings(f.table.clone())
                    .await
                    .map_err(|e| e.to_string())?;
                f.table.generation = r.generation;
                Ok(Some(r))
            }
            None => {
                self.commit_ingress().await?;
                Ok(None)
            }
        }
    }

    /// One control-loop step: probe, reconcile, expire stick entries.
    pub async fn tick(&mut self) -> Vec<(NodeId, String, Vec<ReconcileAction>)> {
        let now = self.clock.now();
        let mut out = Vec::new();
        for (id, b) in self.backends.iter_mut() {
            b.supervisor.probe_all(now).await;
            for (svc, actions) in b.supervisor.reconcile_all().await {
                for a in &actions {
                    info!(node = %id, service = %svc, "{a}");
                }
                out.push((id.clone(), svc, actions));
            }
            b.balancer.expire_entries(now);
        }
        self.save_quietly();
        out
    }

    /// Sets the desired replica count of a hosted service.
    pub fn scale(&mut self, challenge: &str, n: u32) -> Result<(NodeId, u32), PlatformError> {
        let node = self
            .backend_of(challenge)
            .cloned()
            .ok_or_else(|| PlatformError::UnknownService(challenge.to_string()))?;
        let before = self.hosted_backend_mut(node.as_str())?.supervisor.scale(challenge, n)?;
        self.save_quietly();
        Ok((node, before))
    }

    pub async fn reconcile(&mut self, backend: &str, challenge: &str) -> Result<Vec<ReconcileAction>, PlatformError> {
        let b = self.hosted_backend_mut(backend)?;
        let actions = b.supervisor.reconcile(challenge).await?;
        self.save_quietly();
        Ok(actions)
    }

    pub async fn rolling_update(
        &mut self,
        backend: &str,
        spec: ChallengeSpec,
        artifact: Option<(String, PathBuf)>,
    ) -> Result<UpdateReport, PlatformError> {
        let b = self.hosted_backend_mut(backend)?;
        let report = b.supervisor.rolling_update(&spec.name.clone(), spec, artifact).await;
        self.save_quietly();
        Ok(report?)
    }

    /// Provisions one artifact-managed service from scratch: service,
    /// replicas, balancer slot and ingress mapping. Waits up to `wait` for
    /// every replica to probe healthy.
    pub async fn deploy(
        &mut self,
        backend: &str,
        spec: ChallengeSpec,
        artifact: Option<(String, PathBuf)>,
        wait: Duration,
    ) -> Result<bool, PlatformError> {
        let listen = self.opts.listen;
        let name = spec.name.clone();
        let b = self.hosted_backend_mut(backend)?;
        if b.supervisor.service(&name).is_none() {
            b.supervisor.add_service(spec.clone())?;
        } else {
            b.supervisor.update_spec(spec.clone())?;
        }
        let (checksum, workdir) = match artifact {
            Some((c, w)) => (Some(c), Some(w)),
            None => (None, None),
        };
        b.supervisor.set_artifact(&name, checksum, workdir)?;
        b.supervisor.reconcile(&name).await?;
        b.open_slot(&name, None, listen).await?;
        b.configured.get_or_insert_with(BTreeSet::new).insert(name.clone());
        let healthy = b.supervisor.wait_healthy(&name, wait).await;
        if self.frontend.is_some() {
            if let Some(addr) = self.balancer_addr(backend, &name) {
                let f = self.frontend.as_mut().unwrap();
                f.table.mappings.retain(|m| m.external_port != spec.external_port);
                f.table.mappings.push(crate::ingress::PortMapping {
                    external_port: spec.external_port,
                    challenge: name.clone(),
                    backend_node: NodeId::new(backend),
                    backend_address: addr.ip(),
                    balancer_port: addr.port(),
                });
                f.table.mappings.sort_by_key(|m| m.external_port);
                f.dirty = true;
                self.commit_ingress().await.map_err(PlatformError::State)?;
            }
        }
        self.save_quietly();
        Ok(healthy)
    }

    pub async fn wait_healthy(&mut self, backend: &str, challenge: &str, timeout: Duration) -> bool {
        match self.backends.get_mut(backend) {
            Some(b) => b.supervisor.wait_healthy(challenge, timeout).await,
            None => false,
        }
    }

    pub fn save(&self) -> std::io::Result<()> {
        let Some(state) = &self.opts.state else {
            return Ok(());
        };
        for (id, b) in &self.backends {
            state.save_node(id.as_str(), &b.snapshot())?;
        }
        Ok(())
    }

    fn save_quietly(&self) {
        if let Err(e) = self.save() {
            warn!(error = %e, "cannot persist node state");
        }
    }

    /// Stops every hosted replica and listener, then persists.
    pub async fn shutdown(&mut self) -> usize {
        let mut stopped = 0;
        for b in self.backends.values_mut() {
            stopped += b.supervisor.shutdown().await;
            for slot in b.slots.values_mut() {
                if let Some(t) = slot.task.take() {
                    t.abort();
                    let _ = t.await;
                }
            }
        }
        if let Some(i) = self.ingress().cloned() {
            i.close().await;
        }
        self.save_quietly();
        stopped
    }

    /// Stops accepting connections but leaves replicas running and
    /// recorded, for a later process to adopt.
    pub fn detach(&mut self) {
        for b in self.backends.values_mut() {
            for slot in b.slots.values_mut() {
                if let Some(t) = slot.task.take() {
                    t.abort();
                }
            }
        }
        if let Some(i) = self.ingress() {
            i.shutdown();
        }
        self.save_quietly();
    }
}

impl ConvergeTarget for Platform {
    fn observe(&self) -> ObservedState {
        let mut o = ObservedState::default();
        for (id, b) in &self.backends {
            for svc in b.supervisor.services() {
                let key = ServiceKey::new(id.clone(), svc.spec.name.clone());
                o.networks.insert(key.clone(), svc.spec.network.clone());
                o.services.insert(
                    key,
                    ObservedService {
                        artifact_managed: svc.artifact.is_some(),
                        replicas: svc
                            .instances
                            .iter()
                            .map(|i| ObservedReplica {
                                id: i.endpoint.id.clone(),
                                workload: i.workload.clone(),
                                started_at: i.started_at,
                            })
                            .collect(),
                    },
                );
            }
            if let Some(set) = &b.configured {
                o.balancers.insert(id.clone(), set.clone());
            }
        }
        for (id, s) in &self.remotes {
            for svc in &s.services {
                let key = ServiceKey::new(id.clone(), svc.spec.name.clone());
                o.networks.insert(key.clone(), svc.spec.network.clone());
                o.services.insert(
                    key,
                    ObservedService {
                        artifact_managed: svc.artifact.is_some(),
                        replicas: svc
                            .replicas
                            .iter()
                            .map(|r| ObservedReplica {
                                id: r.id.clone(),
                                workload: r.workload.clone(),
                                started_at: r.started_at,
                            })
                            .collect(),
                    },
                );
            }
            if let Some(set) = &s.balancer_config {
                o.balancers.insert(id.clone(), set.clone());
            }
        }
        if let Some(f) = &self.frontend {
            for m in &f.table.mappings {
                o.ingress.insert(
                    m.external_port,
                    IngressBinding {
                        challenge: m.challenge.clone(),
                        backend: m.backend_node.clone(),
                    },
                );
            }
        }
        o
    }

    async fn execute(&mut self, action: &Action, desired: &Topology) -> Result<(), String> {
        let listen = self.opts.listen;
        match action {
            Action::CreateNetwork { service, network } => {
                let b = self
                    .hosted_backend_mut(service.backend.as_str())
                    .map_err(|e| e.to_string())?;
                if let Some(svc) = b.supervisor.service(&service.challenge) {
                    let spec = ChallengeSpec {
                        network: network.clone(),
                        ..svc.spec.clone()
                    };
                    return b.supervisor.update_spec(spec).map_err(|e| e.to_string());
                }
                let spec = desired
                    .challenge(&service.challenge)
                    .filter(|c| c.backend == service.backend)
                    .ok_or_else(|| format!("{service} is not in the topology"))?;
                b.supervisor.add_service(spec.clone()).map_err(|e| e.to_string())
            }
            Action::RemoveNetwork { service, network } => {
                let b = self
                    .hosted_backend_mut(service.backend.as_str())
                    .map_err(|e| e.to_string())?;
                match b.supervisor.service(&service.challenge) {
                    Some(svc) if &svc.spec.network == network => {
                        b.close_slot(&service.challenge);
                        b.supervisor
                            .remove_service(&service.challenge)
                            .await
                            .map(|_| ())
                            .map_err(|e| e.to_string())
                    }
                    _ => Ok(()),
                }
            }
            Action::StartReplica { service } => {
                let b = self
                    .hosted_backend_mut(service.backend.as_str())
                    .map_err(|e| e.to_string())?;
                b.supervisor
                    .start_replica(&service.challenge)
                    .await
                    .map(|_| ())
                    .map_err(|e| e.to_string())
            }
            Action::StopReplica { service, replica } => {
                let b = self
                    .hosted_backend_mut(service.backend.as_str())
                    .map_err(|e| e.to_string())?;
                b.supervisor
                    .stop_replica(&service.challenge, replica)
                    .await
                    .map_err(|e| e.to_string())
            }
            Action::UpdateBalancerConfig { backend } => {
                let wanted: BTreeSet<String> = desired
                    .challenges_on(backend.as_str())
                    .map(|c| c.name.clone())
                    .collect();
                let b = self.hosted_backend_mut(backend.as_str()).map_err(|e| e.to_string())?;
                let stale: Vec<String> = b.slots.keys().filter(|n| !wanted.contains(*n)).cloned().collect();
                for name in stale {
                    b.close_slot(&name);
                }
                for name in &wanted {
                    b.open_slot(name, None, listen).await.map_err(|e| e.to_string())?;
                }
                b.configured = Some(wanted);
                Ok(())
            }
            Action::BindIngress { external_port, service } => {
                let view = self.balancer_view();
                let addr = view
                    .get(service)
                    .ok_or_else(|| format!("{service} has no balancer listener yet"))?;
                let f = self.frontend.as_mut().ok_or("no frontend hosted")?;
                f.table.mappings.retain(|m| m.external_port != *external_port);
                f.table.mappings.push(crate::ingress::PortMapping {
                    external_port: *external_port,
                    challenge: service.challenge.clone(),
                    backend_node: service.backend.clone(),
                    backend_address: addr.ip(),
                    balancer_port: addr.port(),
                });
                f.table.mappings.sort_by_key(|m| m.external_port);
                f.dirty = true;
                self.commit_ingress().await
            }
            Action::UnbindIngress { external_port, .. } => {
                let f = self.frontend.as_mut().ok_or("no frontend hosted")?;
                f.table.mappings.retain(|m| m.external_port != *external_port);
                f.dirty = true;
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests;
