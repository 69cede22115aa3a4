//! On-disk layout of a state directory and the per-node state file.
//!
//! ```text
//! <state>/topology.applied          last topology passed to `apply`
//! <state>/ingress.map               frontend port mappings
//! <state>/latest-build.txt          pipeline status records
//! <state>/logs/<replica>.log        replica output
//! <state>/work/<bundle>/            unpacked artifact payloads
//! <state>/nodes/<node>/services.state
//! <state>/nodes/<node>/serve.pid
//! <state>/nodes/<node>/requests/
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io;
use std::net::IpAddr;
use std::path::{Path, PathBuf};

use crate::ids::ReplicaId;
use crate::model::{ChallengeSpec, ProbeSpec, Workload};
use crate::registry::Health;
use crate::text::{format_record, Record};
use crate::time::Timestamp;

#[derive(Debug, Clone)]
pub struct StateDir {
    root: PathBuf,
}

impl StateDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        StateDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn topology(&self) -> PathBuf {
        self.root.join("topology.applied")
    }

    pub fn ingress_map(&self) -> PathBuf {
        self.root.join("ingress.map")
    }

    pub fn status_file(&self) -> PathBuf {
        self.root.join("latest-build.txt")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn work(&self) -> PathBuf {
        self.root.join("work")
    }

    pub fn store(&self) -> PathBuf {
        self.root.join("store")
    }

    pub fn node_dir(&self, node: &str) -> PathBuf {
        self.root.join("nodes").join(node)
    }

    pub fn node_state(&self, node: &str) -> PathBuf {
        self.node_dir(node).join("services.state")
    }

    pub fn pid_file(&self, node: &str) -> PathBuf {
        self.node_dir(node).join("serve.pid")
    }

    pub fn requests(&self, node: &str) -> PathBuf {
        self.node_dir(node).join("requests")
    }

    /// Node ids that have a state directory.
    pub fn nodes(&self) -> Vec<String> {
        let Ok(entries) = std::fs::read_dir(self.root.join("nodes")) else {
            return Vec::new();
        };
        let mut out: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        out.sort();
        out
    }

    pub fn load_node(&self, node: &str) -> Result<Option<NodeState>, String> {
        match crate::fsutil::read_optional(&self.node_state(node)) {
            Err(e) => Err(e.to_string()),
            Ok(None) => Ok(None),
            Ok(Some(text)) => NodeState::parse(&text).map(Some),
        }
    }

    pub fn save_node(&self, node: &str, state: &NodeState) -> io::Result<()> {
        crate::fsutil::write_atomic(&self.node_state(node), state.serialize().as_bytes())
    }

    /// Pid of the live `serve` process for `node`, if any.
    pub fn live_server(&self, node: &str) -> Option<u32> {
        let text = std::fs::read_to_string(self.pid_file(node)).ok()?;
        let pid: u32 = text.trim().parse().ok()?;
        (pid != std::process::id() && crate::supervisor::pid_alive(pid as u64)).then_some(pid)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplicaState {
    pub id: ReplicaId,
    pub handle: u64,
    pub port: u16,
    pub started_at: Timestamp,
    pub restarts: u32,
    pub workload: Workload,
    pub artifact: Option<String>,
    pub health: Health,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceState {
    pub spec: ChallengeSpec,
    pub desired: u32,
    pub balancer_port: Option<u16>,
    pub artifact: Option<String>,
    pub workdir: Option<PathBuf>,
    pub next_ordinal: u64,
    pub degraded: Option<String>,
    pub sticks: usize,
    pub replicas: Vec<ReplicaState>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NodeState {
    pub bind: Option<IpAddr>,
    /// Challenges the balancer was last configured for; `None` if never.
    pub balancer_config: Option<BTreeSet<String>>,
    pub services: Vec<ServiceState>,
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(|v| v.to_string()).unwrap_or_else(|| "-".into())
}

fn health_of(s: &str) -> Result<Health, String> {
    Ok(match s {
        "starting" => Health::Starting,
        "healthy" => Health::Healthy,
        "unhealthy" => Health::Unhealthy,
        "stopped" => Health::Stopped,
        _ => return Err(format!("invalid health {s:?}")),
    })
}

impl NodeState {
    pub fn service(&self, name: &str) -> Option<&ServiceState> {
        self.services.iter().find(|s| s.spec.name == name)
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        if let Some(bind) = self.bind {
            let _ = writeln!(out, "{}", format_record("node", &[("bind", bind.to_string())]));
        }
        if let Some(set) = &self.balancer_config {
            let names: Vec<&str> = set.iter().map(String::as_str).collect();
            let _ = writeln!(out, "{}", format_record("balancer", &[("challenges", names.join(","))]));
        }
        for s in &self.services {
            let c = &s.spec;
            let line = format_record(
                "service",
                &[
                    ("name", c.name.clone()),
                    ("version", c.version.clone()),
                    ("replicas", c.replicas.to_string()),
                    ("internal_port", c.internal_port.to_string()),
                    ("external_port", c.external_port.to_string()),
                    ("backend", c.backend.to_string()),
                    ("run", c.run.clone()),
                    ("probe", c.probe.to_string()),
                    ("network", c.network.clone()),
                    ("desired", s.desired.to_string()),
                    ("balancer_port", opt(&s.balancer_port)),
                    ("artifact", opt(&s.artifact)),
                    ("workdir", opt(&s.workdir.as_ref().map(|p| p.display()))),
                    ("next", s.next_ordinal.to_string()),
                    ("degraded", opt(&s.degraded)),
                    ("sticks", s.sticks.to_string()),
                ],
            );
            let _ = writeln!(out, "{line}");
            for r in &s.replicas {
                let line = format_record(
                    "replica",
                    &[
                        ("service", c.name.clone()),
                        ("id", r.id.to_string()),
                        ("handle", r.handle.to_string()),
                        ("port", r.port.to_string()),
                        ("started_at", r.started_at.as_millis().to_string()),
                        ("restarts", r.restarts.to_string()),
                        ("version", r.workload.version.clone()),
                        ("run", r.workload.run.clone()),
                        ("probe", r.workload.probe.to_string()),
                        ("internal_port", r.workload.internal_port.to_string()),
                        ("artifact", opt(&r.artifact)),
                        ("health", r.health.to_string()),
                    ],
                );
                let _ = writeln!(out, "{line}");
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<NodeState, String> {
        let mut state = NodeState::default();
        for (i, line) in text.lines().enumerate() {
            let at = |e: String| format!("line {}: {e}", i + 1);
            let Some(rec) = Record::parse(line).map_err(at)? else {
                continue;
            };
            match rec.kind.as_str() {
                "node" => state.bind = Some(rec.parse_field("bind").map_err(at)?),
                "balancer" => {
                    let list = rec.get("challenges").map_err(at)?;
                    state.balancer_config =
                        Some(list.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect());
                }
                "service" => state.services.push(parse_service(&rec).map_err(at)?),
                "replica" => {
                    let name = rec.get("service").map_err(at)?;
                    let replica = parse_replica(&rec).map_err(at)?;
                    let svc = state
                        .services
                        .iter_mut()
                        .find(|s| s.spec.name == name)
                        .ok_or_else(|| at(format!("replica of unknown service {name:?}")))?;
                    svc.replicas.push(replica);
                }
                other => return Err(at(format!("unknown record {other:?}"))),
            }
        }
        Ok(state)
    }
}

fn parse_probe(rec: &Record) -> Result<ProbeSpec, String> {
    rec.get("probe")?.parse()
}

fn parse_service(rec: &Record) -> Result<ServiceState, String> {
    let spec = ChallengeSpec {
        name: rec.get("name")?.to_string(),
        version: rec.get("version")?.to_string(),
        replicas: rec.parse_field("replicas")?,
        internal_port: rec.parse_field("internal_port")?,
        external_port: rec.parse_field("external_port")?,
        backend: rec.get("backend")?.into(),
        run: rec.get("run")?.to_string(),
        probe: parse_probe(rec)?,
        network: rec.get("network")?.to_string(),
    };
    Ok(ServiceState {
        spec,
        desired: rec.parse_field("desired")?,
        balancer_port: rec.opt_field("balancer_port")?,
        artifact: rec.opt_field("artifact")?,
        workdir: rec.opt_field::<String>("workdir")?.map(PathBuf::from),
        next_ordinal: rec.parse_field("next")?,
        degraded: rec.opt_field("degraded")?,
        sticks: rec.opt_field("sticks")?.unwrap_or(0),
        replicas: Vec::new(),
    })
}

fn parse_replica(rec: &Record) -> Result<ReplicaState, String> {
    Ok(ReplicaState {
        id: ReplicaId::new(rec.get("id")?),
        handle: rec.parse_field("handle")?,
        port: rec.parse_field("port")?,
        started_at: Timestamp::from_millis(rec.parse_field("started_at")?),
        restarts: rec.parse_field("restarts")?,
        workload: Workload {
            version: rec.get("version")?.to_string(),
            run: rec.get("run")?.to_string(),
            probe: parse_probe(rec)?,
            internal_port: rec.parse_field("internal_port")?,
        },
        artifact: rec.opt_field("artifact")?,
        health: health_of(rec.get("health")?)?,
    })
}
