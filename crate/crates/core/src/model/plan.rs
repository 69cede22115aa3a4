//! Converge planning: observed state, actions, and the diff between a
//! desired [`Topology`] and what is actually running.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::ids::{NodeId, ReplicaId};
use crate::model::topology::{Topology, Workload};
use crate::time::Timestamp;

/// A challenge as hosted by one particular backend.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ServiceKey {
    pub backend: NodeId,
    pub challenge: String,
}

impl ServiceKey {
    pub fn new(backend: impl Into<NodeId>, challenge: impl Into<String>) -> Self {
        ServiceKey {
            backend: backend.into(),
            challenge: challenge.into(),
        }
    }
}

impl fmt::Display for ServiceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.backend, self.challenge)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservedReplica {
    pub id: ReplicaId,
    pub workload: Workload,
    pub started_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ObservedService {
    /// Set once the artifact pipeline has deployed to this service; from
    /// then on the store, not the topology, owns version/run/probe.
    pub artifact_managed: bool,
    /// Non-stopped replicas.
    pub replicas: Vec<ObservedReplica>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngressBinding {
    pub challenge: String,
    pub backend: NodeId,
}

/// Snapshot of the running system, gathered from registries, supervisors
/// and the ingress table.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ObservedState {
    pub networks: BTreeMap<ServiceKey, String>,
    pub services: BTreeMap<ServiceKey, ObservedService>,
    /// Challenges with a balancer listener, per backend.
    pub balancers: BTreeMap<NodeId, BTreeSet<String>>,
    pub ingress: BTreeMap<u16, IngressBinding>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Action {
    CreateNetwork { service: ServiceKey, network: String },
    RemoveNetwork { service: ServiceKey, network: String },
    StartReplica { service: ServiceKey },
    StopReplica { service: ServiceKey, replica: ReplicaId },
    BindIngress { external_port: u16, service: ServiceKey },
    UnbindIngress { external_port: u16, service: ServiceKey },
    UpdateBalancerConfig { backend: NodeId },
}

impl Action {
    pub fn kind(&self) -> &'static str {
        match self {
            Action::CreateNetwork { .. } => "create_network",
            Action::RemoveNetwork { .. } => "remove_network",
            Action::StartReplica { .. } => "start_replica",
            Action::StopReplica { .. } => "stop_replica",
            Action::BindIngress { .. } => "bind_ingress",
            Action::UnbindIngress { .. } => "unbind_ingress",
            Action::UpdateBalancerConfig { .. } => "update_balancer_config",
        }
    }

    /// The service this action belongs to, if any.
    pub fn service(&self) -> Option<&ServiceKey> {
        match self {
            Action::CreateNetwork { service, .. }
            | Action::RemoveNetwork { service, .. }
            | Action::StartReplica { service }
            | Action::StopReplica { service, .. }
            | Action::BindIngress { service, .. }
            | Action::UnbindIngress { service, .. } => Some(service),
            Action::UpdateBalancerConfig { .. } => None,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::CreateNetwork { service, network } | Action::RemoveNetwork { service, network } => {
                write!(f, "{} {} {}", self.kind(), service, network)
            }
            Action::StartReplica { service } => write!(f, "{} {}", self.kind(), service),
            Action::StopReplica { service, replica } => write!(f, "{} {} {}", self.kind(), service, replica),
            Action::BindIngress { external_port, service } | Action::UnbindIngress { external_port, service } => {
                write!(f, "{} {} {}", self.kind(), external_port, service)
            }
            Action::UpdateBalancerConfig { backend } => write!(f, "{} {}", self.kind(), backend),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ChangeSet {
    pub actions: Vec<Action>,
}

impl ChangeSet {
    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn count(&self, kind: &str) -> usize {
        self.actions.iter().filter(|a| a.kind() == kind).count()
    }
}

/// Scale-down victim order: newest first, ties broken by replica id.
pub fn newest_first(a: (&Timestamp, &ReplicaId), b: (&Timestamp, &ReplicaId)) -> std::cmp::Ordering {
    b.0.cmp(a.0).then_with(|| a.1.cmp(b.1))
}

struct Desired<'a> {
    networks: BTreeMap<ServiceKey, &'a str>,
    replicas: BTreeMap<ServiceKey, (u32, Workload)>,
    balancers: BTreeMap<NodeId, BTreeSet<String>>,
    ingress: BTreeMap<u16, IngressBinding>,
}

fn desired_of(t: &Topology) -> Desired<'_> {
    let mut d = Desired {
        networks: BTreeMap::new(),
        replicas: BTreeMap::new(),
        balancers: BTreeMap::new(),
        ingress: BTreeMap::new(),
    };
    for b in t.backends() {
        d.balancers.entry(b.id.clone()).or_default();
    }
    for c in &t.challenges {
        let key = ServiceKey::new(c.backend.clone(), c.name.clone());
        d.networks.insert(key.clone(), &c.network);
        d.replicas.insert(key, (c.replicas, c.workload()));
        d.balancers.entry(c.backend.clone()).or_default().insert(c.name.clone());
        d.ingress.insert(
            c.external_port,
            IngressBinding {
                challenge: c.name.clone(),
                backend: c.backend.clone(),
            },
        );
    }
    d
}

/// Plans the actions that take `observed` to `desired`.
///
/// Phases run in dependency order: network creation, replica stops,
/// replica starts, ingress unbinds, balancer reconfiguration, ingress
/// binds, network removal. Within a phase actions are sorted by service.
pub fn diff(desired: &Topology, observed: &ObservedState) -> ChangeSet {
    let want = desired_of(desired);

    let mut create_net = Vec::new();
    let mut remove_net = Vec::new();
    for (key, net) in &want.networks {
        if observed.networks.get(key).map(String::as_str) != Some(*net) {
            create_net.push(Action::CreateNetwork {
                service: key.clone(),
                network: net.to_string(),
            });
        }
    }
    for (key, net) in &observed.networks {
        if want.networks.get(key) != Some(&net.as_str()) {
            remove_net.push(Action::RemoveNetwork {
                service: key.clone(),
                network: net.clone(),
            });
        }
    }

    let mut stops = Vec::new();
    let mut starts = Vec::new();
    let keys: BTreeSet<&ServiceKey> = want.replicas.keys().chain(observed.services.keys()).collect();
    for key in keys {
        let empty = ObservedService::default();
        let obs = observed.services.get(key).unwrap_or(&empty);
        let (count, current): (u32, Vec<&ObservedReplica>) = match want.replicas.get(key) {
            None => (0, Vec::new()),
            Some((n, workload)) => {
                let current = obs
                    .replicas
                    .iter()
                    .filter(|r| obs.artifact_managed || &r.workload == workload)
                    .collect();
                (*n, current)
            }
        };
        for r in &obs.replicas {
            if !current.iter().any(|c| c.id == r.id) {
                stops.push(Action::StopReplica {
                    service: key.clone(),
                    replica: r.id.clone(),
                });
            }
        }
        let have = current.len() as u32;
        if have > count {
            let mut victims = current;
            victims.sort_by(|a, b| newest_first((&a.started_at, &a.id), (&b.started_at, &b.id)));
            for r in victims.into_iter().take((have - count) as usize) {
                stops.push(Action::StopReplica {
                    service: key.clone(),
                    replica: r.id.clone(),
                });
            }
        }
        for _ in have..count {
            starts.push(Action::StartReplica { service: key.clone() });
        }
    }

    let mut unbinds = Vec::new();
    let mut binds = Vec::new();
    let ports: BTreeSet<u16> = want.ingress.keys().chain(observed.ingress.keys()).copied().collect();
    for port in ports {
        let (w, o) = (want.ingress.get(&port), observed.ingress.get(&port));
        if w == o {
            continue;
        }
        if let Some(o) = o {
            unbinds.push(Action::UnbindIngress {
                external_port: port,
                service: ServiceKey::new(o.backend.clone(), o.challenge.clone()),
            });
        }
        if let Some(w) = w {
            binds.push(Action::BindIngress {
                external_port: port,
                service: ServiceKey::new(w.backend.clone(), w.challenge.clone()),
            });
        }
    }

    let mut balancers = Vec::new();
    let backends: BTreeSet<&NodeId> = want.balancers.keys().chain(observed.balancers.keys()).collect();
    let none = BTreeSet::new();
    for b in backends {
        let w = want.balancers.get(b).unwrap_or(&none);
        let o = observed.balancers.get(b).unwrap_or(&none);
        if w != o {
            balancers.push(Action::UpdateBalancerConfig { backend: b.clone() });
        }
    }

    let mut actions = create_net;
    actions.extend(stops);
    actions.extend(starts);
    actions.extend(unbinds);
    actions.extend(balancers);
    actions.extend(binds);
    actions.extend(remove_net);
    ChangeSet { actions }
}
