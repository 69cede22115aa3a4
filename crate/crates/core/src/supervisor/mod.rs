//! Keeps each service on one backend at its desired replica count, replaces
//! failed replicas, and performs one-at-a-time rolling updates.

mod mock;
mod probe;
mod runner;

pub use mock::MockRunner;
pub use probe::{banner_matches, probe, BANNER_WINDOW};
pub use runner::{
    pid_alive, RunnerBackend, RunnerError, RunnerHandle, SpawnRequest, Spawned, SubprocessRunner, ENV_CHALLENGE,
    ENV_REPLICA_ID, ENV_VERSION,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use futures::future::join_all;
use thiserror::Error;
use tracing::{info, warn};

use crate::ids::ReplicaId;
use crate::model::{ChallengeSpec, NodeSpec, Workload};
use crate::registry::{Health, Registry, RegistryError, ReplicaEndpoint};
use crate::time::{Clock, Timestamp};

#[derive(Debug, Clone)]
pub struct SupervisorConfig {
    pub probe_timeout: Duration,
    /// Extra spawn attempts after the first one fails.
    pub spawn_retries: u32,
    pub spawn_backoff: Duration,
    /// How long a freshly spawned replica may take to probe healthy during
    /// a rolling update.
    pub update_timeout: Duration,
    /// Pause between deregistering a replica and stopping it, so
    /// connections already routed to it can finish connecting.
    pub drain_grace: Duration,
    pub stop_timeout: Duration,
    /// Failed probes while younger than this keep a replica `starting`.
    pub startup_grace: Duration,
    /// Consecutive failed probes after which a live replica is replaced.
    pub replace_after: u32,
    pub poll_step: Duration,
}

impl Default for SupervisorConfig {
    fn default() -> Self {
        SupervisorConfig {
            probe_timeout: Duration::from_secs(2),
            spawn_retries: 3,
            spawn_backoff: Duration::from_secs(1),
            update_timeout: Duration::from_secs(10),
            drain_grace: Duration::from_millis(200),
            stop_timeout: Duration::from_secs(5),
            startup_grace: Duration::from_secs(5),
            replace_after: 3,
            poll_step: Duration::from_millis(50),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplicaInstance {
    pub endpoint: ReplicaEndpoint,
    pub spec_name: String,
    pub runner_handle: RunnerHandle,
    pub started_at: Timestamp,
    pub restarts: u32,
    pub workload: Workload,
    /// Checksum of the artifact the replica was started from.
    pub artifact: Option<String>,
    pub failed_probes: u32,
}

#[derive(Debug, Clone)]
pub struct ManagedService {
    pub spec: ChallengeSpec,
    pub desired: u32,
    /// Registration order.
    pub instances: Vec<ReplicaInstance>,
    pub degraded: Option<String>,
    pub artifact: Option<String>,
    pub workdir: Option<PathBuf>,
    pub next_ordinal: u64,
    carried_restarts: Vec<u32>,
}

impl ManagedService {
    pub fn healthy_count(&self) -> usize {
        self.instances
            .iter()
            .filter(|i| i.endpoint.health == Health::Healthy)
            .count()
    }

    pub fn instance(&self, id: &ReplicaId) -> Option<&ReplicaInstance> {
        self.instances.iter().find(|i| &i.endpoint.id == id)
    }

    fn position(&self, id: &ReplicaId) -> Option<usize> {
        self.instances.iter().position(|i| &i.endpoint.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Dead,
    Unhealthy,
    Surplus,
    Requested,
    Superseded,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Dead => "dead",
            StopReason::Unhealthy => "unhealthy",
            StopReason::Surplus => "surplus",
            StopReason::Requested => "requested",
            StopReason::Superseded => "superseded",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReconcileAction {
    Stopped { replica: ReplicaId, reason: StopReason },
    Spawned { replica: ReplicaId, port: u16 },
    SpawnFailed { attempts: u32, error: String },
}

impl fmt::Display for ReconcileAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReconcileAction::Stopped { replica, reason } => write!(f, "stop {replica} ({reason})"),
            ReconcileAction::Spawned { replica, port } => write!(f, "spawn {replica} on port {port}"),
            ReconcileAction::SpawnFailed { attempts, error } => {
                write!(f, "spawn failed after {attempts} attempts: {error}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepOutcome {
    Replaced {
        new: ReplicaId,
    },
    Failed {
        new: Option<ReplicaId>,
        error: String,
    },
    /// Left running because the update aborted earlier.
    Untouched,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateStep {
    pub old: ReplicaId,
    pub outcome: StepOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateReport {
    pub service: String,
    pub from_version: String,
    pub to_version: String,
    pub steps: Vec<UpdateStep>,
    pub partial: bool,
}

impl UpdateReport {
    pub fn replaced(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| matches!(s.outcome, StepOutcome::Replaced { .. }))
            .count()
    }

    pub fn is_noop(&self) -> bool {
        self.steps.is_empty() && !self.partial
    }
}

impl fmt::Display for UpdateReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.steps {
            match &s.outcome {
                StepOutcome::Replaced { new } => writeln!(f, "  replaced {} -> {}", s.old, new)?,
                StepOutcome::Failed { error, .. } => writeln!(f, "  FAILED {}: {}", s.old, error)?,
                StepOutcome::Untouched => writeln!(f, "  kept {}", s.old)?,
            }
        }
        write!(
            f,
            "{} {} -> {}: {} of {} replaced{}",
            self.service,
            self.from_version,
            self.to_version,
            self.replaced(),
            self.steps.len(),
            if self.partial { " (partial)" } else { "" }
        )
    }
}

#[derive(Debug, Error)]
pub enum SupervisorError {
    #[error("unknown service {0}")]
    UnknownService(String),
    #[error("service {0} already exists")]
    DuplicateService(String),
    #[error("replica count must be at least 1; remove the challenge from the topology instead")]
    ZeroReplicas,
    #[error("spec is for {found}, not {expected}")]
    NameMismatch { expected: String, found: String },
    #[error("unknown replica {0}")]
    UnknownReplica(ReplicaId),
    #[error("no free port left in {0}")]
    NoFreePort(String),
    #[error("{0}")]
    Spawn(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

/// A replica found running by a previous process, to be taken over.
#[derive(Debug, Clone)]
pub struct AdoptedReplica {
    pub id: ReplicaId,
    pub handle: RunnerHandle,
    pub port: u16,
    pub started_at: Timestamp,
    pub restarts: u32,
    pub workload: Workload,
    pub artifact: Option<String>,
}

struct Core {
    node: NodeSpec,
    registry: Arc<Registry>,
    runner: Arc<dyn RunnerBackend>,
    clock: Arc<dyn Clock>,
    config: SupervisorConfig,
    reserved: BTreeSet<u16>,
}

pub struct Supervisor {
    core: Core,
    services: BTreeMap<String, ManagedService>,
}

fn port_free(addr: std::net::IpAddr, port: u16) -> bool {
    std::net::TcpListener::bind((addr, port)).is_ok()
}

impl Core {
    fn allocate_port(&self, used: &BTreeSet<u16>) -> Option<u16> {
        self.node
            .ports
            .iter()
            .filter(|p| !used.contains(p) && !self.reserved.contains(p))
            .find(|p| port_free(self.node.bind, *p))
    }

    async fn wait_exit(&self, handle: RunnerHandle) -> bool {
        let deadline = tokio::time::Instant::now() + self.config.stop_timeout;
        while self.runner.alive(handle) {
            if tokio::time::Instant::now() >= deadline {
                return false;
            }
            tokio::time::sleep(self.config.poll_step.min(Duration::from_millis(20))).await;
        }
        true
    }

    /// Deregisters, optionally drains, stops and waits for the replica.
    async fn retire(&self, svc: &mut ManagedService, idx: usize, drain: bool) -> ReplicaInstance {
        let inst = svc.instances.remove(idx);
        let _ = self.registry.deregister_replica(&inst.endpoint.id);
        let alive = self.runner.alive(inst.runner_handle);
        if drain && alive && !self.config.drain_grace.is_zero() {
            tokio::time::sleep(self.config.drain_grace).await;
        }
        self.runner.stop(inst.runner_handle);
        if alive && !self.wait_exit(inst.runner_handle).await {
            warn!(replica = %inst.endpoint.id, "replica did not exit within the stop timeout");
        }
        inst
    }

    /// Spawns and registers one replica of `svc`, retrying on failure.
    async fn spawn_instance(
        &self,
        svc: &mut ManagedService,
        others: &BTreeSet<u16>,
        restarts: u32,
    ) -> Result<ReplicaId, (u32, String)> {
        let attempts = self.config.spawn_retries + 1;
        let mut last = String::new();
        for attempt in 1..=attempts {
            if attempt > 1 {
                tokio::time::sleep(self.config.spawn_backoff).await;
            }
            match self.try_spawn(svc, others, restarts) {
                Ok(id) => return Ok(id),
                Err(e) => {
                    warn!(service = %svc.spec.name, attempt, error = %e, "spawn failed");
                    last = e;
                }
            }
        }
        Err((attempts, last))
    }

    fn try_spawn(&self, svc: &mut ManagedService, others: &BTreeSet<u16>, restarts: u32) -> Result<ReplicaId, String> {
        let mut used = others.clone();
        used.extend(svc.instances.iter().map(|i| i.endpoint.port));
        let port = self
            .allocate_port(&used)
            .ok_or_else(|| format!("no free port left in {} ({})", self.node.id, self.node.ports))?;
        let id = ReplicaId::new(format!("{}-r{}", svc.spec.name, svc.next_ordinal));
        let req = SpawnRequest {
            spec: &svc.spec,
            replica_id: &id,
            address: self.node.bind,
            port,
            workdir: svc.workdir.as_deref(),
        };
        let spawned = self.runner.spawn(&req).map_err(|e| e.to_string())?;
        svc.next_ordinal += 1;
        if let Err(e) = self.registry.register_replica(&svc.spec.name, spawned.endpoint.clone()) {
            self.runner.stop(spawned.handle);
            return Err(e.to_string());
        }
        info!(service = %svc.spec.name, replica = %id, port, version = %svc.spec.version, "spawned");
        svc.instances.push(ReplicaInstance {
            endpoint: spawned.endpoint,
            spec_name: svc.spec.name.clone(),
            runner_handle: spawned.handle,
            started_at: self.clock.now(),
            restarts,
            workload: svc.spec.workload(),
            artifact: svc.artifact.clone(),
            failed_probes: 0,
        });
        Ok(id)
    }

    /// Written on every probe, so the balancer can lift its suspicion of a
    /// replica that answers again.
    fn set_health(&self, inst: &mut ReplicaInstance, health: Health) {
        inst.endpoint.health = health;
        let _ = self.registry.mark_health(&inst.endpoint.id, health);
    }

    fn record_probe(&self, inst: &mut ReplicaInstance, ok: bool, alive: bool, now: Timestamp) {
        if ok {
            inst.failed_probes = 0;
            self.set_health(inst, Health::Healthy);
            return;
        }
        if !alive {
            inst.failed_probes = inst.failed_probes.max(self.config.replace_after);
            self.set_health(inst, Health::Unhealthy);
            return;
        }
        let young = now.since(inst.started_at) < self.config.startup_grace;
        if inst.endpoint.health == Health::Starting && young {
            return;
        }
        inst.failed_probes += 1;
        self.set_health(inst, Health::Unhealthy);
    }

    /// Probes one replica until it is healthy, it dies, or the update
    /// timeout passes.
    async fn await_healthy(&self, svc: &mut ManagedService, id: &ReplicaId) -> Result<(), String> {
        let deadline = tokio::time::Instant::now() + self.config.update_timeout;
        loop {
            let idx = svc.position(id).ok_or("replica vanished")?;
            let inst = &svc.instances[idx];
            if !self.runner.alive(inst.runner_handle) {
                return Err(format!("{id} exited before becoming healthy"));
            }
            let addr = inst.endpoint.socket_addr();
            let budget = self.config.probe_timeout.min(self.config.update_timeout);
            if probe(addr, &svc.spec.probe, budget).await {
                let now = self.clock.now();
                self.record_probe(&mut svc.instances[idx], true, true, now);
                return Ok(());
            }
            if tokio::time::Instant::now() >= deadline {
                return Err(format!(
                    "{id} not healthy within {}ms",
                    self.config.update_timeout.as_millis()
                ));
            }
            tokio::time::sleep(self.config.poll_step).await;
        }
    }
}

/// Newest first: started_at descending, then replica id ascending.
fn scale_down_order(a: &ReplicaInstance, b: &ReplicaInstance) -> std::cmp::Ordering {
    b.started_at
        .cmp(&a.started_at)
        .then_with(|| a.endpoint.id.as_str().cmp(b.endpoint.id.as_str()))
}

impl Supervisor {
    pub fn new(
        node: NodeSpec,
        registry: Arc<Registry>,
        runner: Arc<dyn RunnerBackend>,
        clock: Arc<dyn Clock>,
        config: SupervisorConfig,
    ) -> Self {
        Supervisor {
            core: Core {
                node,
                registry,
                runner,
                clock,
                config,
                reserved: BTreeSet::new(),
            },
            services: BTreeMap::new(),
        }
    }

    pub fn node(&self) -> &NodeSpec {
        &self.core.node
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.core.registry
    }

    pub fn runner(&self) -> &Arc<dyn RunnerBackend> {
        &self.core.runner
    }

    pub fn config(&self) -> &SupervisorConfig {
        &self.core.config
    }

    pub fn config_mut(&mut self) -> &mut SupervisorConfig {
        &mut self.core.config
    }

    pub fn service(&self, name: &str) -> Option<&ManagedService> {
        self.services.get(name)
    }

    pub fn services(&self) -> impl Iterator<Item = &ManagedService> {
        self.services.values()
    }

    pub fn service_names(&self) -> Vec<String> {
        self.services.keys().cloned().collect()
    }

    fn others_ports(&self, except: &str) -> BTreeSet<u16> {
        self.services
            .iter()
            .filter(|(name, _)| name.as_str() != except)
            .flat_map(|(_, s)| s.instances.iter().map(|i| i.endpoint.port))
            .collect()
    }

    fn all_ports(&self) -> BTreeSet<u16> {
        self.others_ports("")
    }

    /// Takes a port out of the replica pool, e.g. for a balancer listener.
    pub fn reserve_port(&mut self) -> Result<u16, SupervisorError> {
        let used = self.all_ports();
        let port = self
            .core
            .allocate_port(&used)
            .ok_or_else(|| SupervisorError::NoFreePort(self.core.node.id.to_string()))?;
        self.core.reserved.insert(port);
        Ok(port)
    }

    pub fn reserve_specific_port(&mut self, port: u16) {
        self.core.reserved.insert(port);
    }

    pub fn release_port(&mut self, port: u16) {
        self.core.reserved.remove(&port);
    }

    pub fn add_service(&mut self, spec: ChallengeSpec) -> Result<(), SupervisorError> {
        if self.services.contains_key(&spec.name) {
            return Err(SupervisorError::DuplicateService(spec.name));
        }
        if spec.replicas == 0 {
            return Err(SupervisorError::ZeroReplicas);
        }
        self.core.registry.create_service(&spec.name, &spec.network)?;
        self.services.insert(
            spec.name.clone(),
            ManagedService {
                desired: spec.replicas,
                spec,
                instances: Vec::new(),
                degraded: None,
                artifact: None,
                workdir: None,
                next_ordinal: 1,
                carried_restarts: Vec::new(),
            },
        );
        Ok(())
    }

    /// Replaces the spec used for future spawns without touching running
    /// replicas.
    pub fn update_spec(&mut self, spec: ChallengeSpec) -> Result<(), SupervisorError> {
        let svc = self
            .services
            .get_mut(&spec.name)
            .ok_or_else(|| SupervisorError::UnknownService(spec.name.clone()))?;
        if svc.spec.network != spec.network {
            self.core.registry.set_network(&spec.name, &spec.network)?;
        }
        svc.desired = spec.replicas;
        svc.spec = spec;
        Ok(())
    }

    pub fn set_artifact(
        &mut self,
        name: &str,
        checksum: Option<String>,
        workdir: Option<PathBuf>,
    ) -> Result<(), SupervisorError> {
        let svc = self.service_mut(name)?;
        svc.artifact = checksum;
        svc.workdir = workdir;
        Ok(())
    }

    pub fn set_next_ordinal(&mut self, name: &str, next: u64) -> Result<(), SupervisorError> {
        let svc = self.service_mut(name)?;
        svc.next_ordinal = svc.next_ordinal.max(next);
        Ok(())
    }

    fn service_mut(&mut self, name: &str) -> Result<&mut ManagedService, SupervisorError> {
        self.services
            .get_mut(name)
            .ok_or_else(|| SupervisorError::UnknownService(name.to_string()))
    }

    /// Stops every replica of the service and forgets it.
    pub async fn remove_service(&mut self, name: &str) -> Result<Vec<ReplicaId>, SupervisorError> {
        let mut svc = self
            .services
            .remove(name)
            .ok_or_else(|| SupervisorError::UnknownService(name.to_string()))?;
        let mut stopped = Vec::new();
        while !svc.instances.is_empty() {
            stopped.push(self.core.retire(&mut svc, 0, true).await.endpoint.id);
        }
        self.core.registry.remove_service(name)?;
        Ok(stopped)
    }

    /// Takes over a replica left running by an earlier process. Returns
    /// false (and registers nothing) when it is no longer alive.
    pub fn adopt(&mut self, name: &str, replica: AdoptedReplica) -> Result<bool, SupervisorError> {
        if !self.core.runner.owns(replica.handle, &replica.id) {
            return Ok(false);
        }
        let bind = self.core.node.bind;
        let svc = self
            .services
            .get_mut(name)
            .ok_or_else(|| SupervisorError::UnknownService(name.to_string()))?;
        let endpoint = ReplicaEndpoint {
            id: replica.id.clone(),
            address: bind,
            port: replica.port,
            version: replica.workload.version.clone(),
            health: Health::Starting,
        };
        self.core.registry.register_replica(name, endpoint.clone())?;
        if let Some(n) = replica
            .id
            .as_str()
            .strip_prefix(&format!("{name}-r"))
            .and_then(|n| n.parse::<u64>().ok())
        {
            svc.next_ordinal = svc.next_ordinal.max(n + 1);
        }
        svc.instances.push(ReplicaInstance {
            endpoint,
            spec_name: name.to_string(),
            runner_handle: replica.handle,
            started_at: replica.started_at,
            restarts: replica.restarts,
            workload: replica.workload,
            artifact: replica.artifact,
            failed_probes: 0,
        });
        Ok(true)
    }

    /// Starts one more replica of the service.
    pub async fn start_replica(&mut self, name: &str) -> Result<ReplicaId, SupervisorError> {
        let others = self.others_ports(name);
        let Supervisor { core, services } = self;
        let svc = services
            .get_mut(name)
            .ok_or_else(|| SupervisorError::UnknownService(name.to_string()))?;
        core.spawn_instance(svc, &others, 0)
            .await
            .map_err(|(_, e)| SupervisorError::Spawn(e))
    }

    pub async fn stop_replica(&mut self, name: &str, id: &ReplicaId) -> Result<(), SupervisorError> {
        let Supervisor { core, services } = self;
        let svc = services
            .get_mut(name)
            .ok_or_else(|| SupervisorError::UnknownService(name.to_string()))?;
        let idx = svc
            .position(id)
            .ok_or_else(|| SupervisorError::UnknownReplica(id.clone()))?;
        core.retire(svc, idx, true).await;
        Ok(())
    }

    /// Sets the desired replica count; the next reconcile converges to it.
    pub fn scale(&mut self, name: &str, n: u32) -> Result<u32, SupervisorError> {
        let svc = self.service_mut(name)?;
        if n == 0 {
            return Err(SupervisorError::ZeroReplicas);
        }
        let before = svc.desired;
        svc.desired = n;
        svc.spec.replicas = n;
        Ok(before)
    }

    /// Replaces dead or persistently unhealthy replicas, then spawns or
    /// stops replicas until the desired count is met.
    pub async fn reconcile(&mut self, name: &str) -> Result<Vec<ReconcileAction>, SupervisorError> {
        let others = self.others_ports(name);
        let Supervisor { core, services } = self;
        let svc = services
            .get_mut(name)
            .ok_or_else(|| SupervisorError::UnknownService(name.to_string()))?;
        let mut actions = Vec::new();

        let mut idx = 0;
        while idx < svc.instances.len() {
            let inst = &svc.instances[idx];
            let reason = if !core.runner.alive(inst.runner_handle) {
                Some(StopReason::Dead)
            } else if inst.failed_probes >= core.config.replace_after {
                Some(StopReason::Unhealthy)
            } else {
                None
            };
            match reason {
                Some(reason) => {
                    let gone = core.retire(svc, idx, false).await;
                    svc.carried_restarts.push(gone.restarts);
                    actions.push(ReconcileAction::Stopped {
                        replica: gone.endpoint.id,
                        reason,
                    });
                }
                None => idx += 1,
            }
        }

        let mut failed = None;
        while svc.instances.len() < svc.desired as usize {
            let restarts = svc.carried_restarts.pop().map(|r| r + 1).unwrap_or(0);
            match core.spawn_instance(svc, &others, restarts).await {
                Ok(id) => {
                    let port = svc.instance(&id).map(|i| i.endpoint.port).unwrap_or_default();
                    actions.push(ReconcileAction::Spawned { replica: id, port });
                }
                Err((attempts, error)) => {
                    svc.carried_restarts.push(restarts.saturating_sub(1));
                    actions.push(ReconcileAction::SpawnFailed {
                        attempts,
                        error: error.clone(),
                    });
                    failed = Some(error);
                    break;
                }
            }
        }
        match failed {
            Some(e) => svc.degraded = Some(e),
            None if svc.instances.len() >= svc.desired as usize => {
                svc.carried_restarts.clear();
                svc.degraded = None;
            }
            None => {}
        }

        while svc.instances.len() > svc.desired as usize {
            let victim = svc
                .instances
                .iter()
                .enumerate()
                .min_by(|a, b| scale_down_order(a.1, b.1))
                .map(|(i, _)| i)
                .unwrap();
            let gone = core.retire(svc, victim, true).await;
            actions.push(ReconcileAction::Stopped {
                replica: gone.endpoint.id,
                reason: StopReason::Surplus,
            });
        }
        Ok(actions)
    }

    pub async fn reconcile_all(&mut self) -> Vec<(String, Vec<ReconcileAction>)> {
        let mut out = Vec::new();
        for name in self.service_names() {
            if let Ok(actions) = self.reconcile(&name).await {
                if !actions.is_empty() {
                    out.push((name, actions));
                }
            }
        }
        out
    }

    /// Probes every replica concurrently and writes health to the registry.
    pub async fn probe_all(&mut self, now: Timestamp) {
        let core = &self.core;
        let mut targets = Vec::new();
        for svc in self.services.values() {
            for inst in &svc.instances {
                targets.push((inst.endpoint.socket_addr(), svc.spec.probe.clone(), inst.runner_handle));
            }
        }
        let results = join_all(targets.iter().map(|(addr, spec, handle)| async move {
            let alive = core.runner.alive(*handle);
            let ok = alive && probe(*addr, spec, core.config.probe_timeout).await;
            (ok, alive)
        }))
        .await;
        let mut results = results.into_iter();
        for svc in self.services.values_mut() {
            for inst in &mut svc.instances {
                let (ok, alive) = results.next().unwrap();
                self.core.record_probe(inst, ok, alive, now);
            }
        }
    }

    /// Probes until every desired replica of `name` is healthy or the
    /// timeout passes.
    pub async fn wait_healthy(&mut self, name: &str, timeout: Duration) -> bool {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let now = self.core.clock.now();
            self.probe_all(now).await;
            match self.services.get(name) {
                None => return false,
                Some(s) if s.healthy_count() >= s.desired as usize => return true,
                Some(_) => {}
            }
            if tokio::time::Instant::now() >= deadline {
                return false;
            }
            tokio::time::sleep(self.core.config.poll_step).await;
        }
    }

    /// Replaces replicas one at a time (stop old, start new, wait healthy).
    /// On failure the update stops, the failed replica is removed, and the
    /// remaining old replicas keep running on the previous spec.
    pub async fn rolling_update(
        &mut self,
        name: &str,
        new_spec: ChallengeSpec,
        artifact: Option<(String, PathBuf)>,
    ) -> Result<UpdateReport, SupervisorError> {
        if new_spec.name != name {
            return Err(SupervisorError::NameMismatch {
                expected: name.to_string(),
                found: new_spec.name,
            });
        }
        if new_spec.replicas == 0 {
            return Err(SupervisorError::ZeroReplicas);
        }
        let others = self.others_ports(name);
        let Supervisor { core, services } = self;
        let svc = services
            .get_mut(name)
            .ok_or_else(|| SupervisorError::UnknownService(name.to_string()))?;
        let new_checksum = artifact.as_ref().map(|(c, _)| c.clone());
        let mut report = UpdateReport {
            service: name.to_string(),
            from_version: svc.spec.version.clone(),
            to_version: new_spec.version.clone(),
            steps: Vec::new(),
            partial: false,
        };
        let target = (new_spec.workload(), new_checksum.clone());
        let current = |i: &ReplicaInstance| i.workload == target.0 && i.artifact == target.1;
        if svc.spec.version == new_spec.version && svc.artifact == new_checksum && svc.instances.iter().all(current) {
            return Ok(report);
        }

        let previous = (svc.spec.clone(), svc.artifact.clone(), svc.workdir.clone());
        if svc.spec.network != new_spec.network {
            core.registry.set_network(name, &new_spec.network)?;
        }
        svc.spec = new_spec;
        svc.artifact = new_checksum;
        if let Some((_, dir)) = artifact {
            svc.workdir = Some(dir);
        }

        let mut olds: Vec<(Timestamp, ReplicaId)> = svc
            .instances
            .iter()
            .filter(|i| !current(i))
            .map(|i| (i.started_at, i.endpoint.id.clone()))
            .collect();
        olds.sort();
        let mut abort: Option<String> = None;
        for (_, old) in olds {
            if abort.is_some() {
                report.steps.push(UpdateStep {
                    old,
                    outcome: StepOutcome::Untouched,
                });
                continue;
            }
            let Some(idx) = svc.position(&old) else {
                continue;
            };
            let retired = core.retire(svc, idx, true).await;
            let outcome = match core.spawn_instance(svc, &others, retired.restarts).await {
                Err((_, e)) => StepOutcome::Failed { new: None, error: e },
                Ok(new) => match core.await_healthy(svc, &new).await {
                    Ok(()) => StepOutcome::Replaced { new },
                    Err(e) => {
                        if let Some(i) = svc.position(&new) {
                            core.retire(svc, i, false).await;
                        }
                        StepOutcome::Failed {
                            new: Some(new),
                            error: e,
                        }
                    }
                },
            };
            if let StepOutcome::Failed { error, .. } = &outcome {
                abort = Some(error.clone());
            }
            report.steps.push(UpdateStep { old, outcome });
        }

        match abort {
            Some(error) => {
                let (spec, checksum, workdir) = previous;
                if svc.spec.network != spec.network {
                    let _ = core.registry.set_network(name, &spec.network);
                }
                svc.degraded = Some(format!("update to {} failed: {error}", svc.spec.version));
                svc.spec = spec;
                svc.artifact = checksum;
                svc.workdir = workdir;
                report.partial = true;
            }
            None => {
                svc.desired = svc.spec.replicas;
                svc.degraded = None;
            }
        }
        if !report.partial {
            // Fill any slots that were empty before the update started.
            self.reconcile(name).await?;
        }
        Ok(report)
    }

    /// Stops every replica and deregisters it; services stay known.
    pub async fn shutdown(&mut self) -> usize {
        let Supervisor { core, services } = self;
        let mut n = 0;
        for svc in services.values_mut() {
            while !svc.instances.is_empty() {
                core.retire(svc, 0, false).await;
                n += 1;
            }
        }
        n
    }

    /// Forgets every replica without stopping it, so a later process can
    /// adopt them.
    pub fn release_all(&mut self) {
        for svc in self.services.values_mut() {
            for inst in svc.instances.drain(..) {
                let _ = self.core.registry.deregister_replica(&inst.endpoint.id);
            }
        }
    }
}
