use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::net::IpAddr;
use std::str::FromStr;
use std::time::Duration;

use thiserror::Error;

use crate::ids::NodeId;
use crate::text::{quote, split_pair, tokenize, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeRole {
    Frontend,
    Backend,
}

impl NodeRole {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeRole::Frontend => "frontend",
            NodeRole::Backend => "backend",
        }
    }
}

impl fmt::Display for NodeRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Inclusive TCP port interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PortRange {
    pub lo: u16,
    pub hi: u16,
}

impl PortRange {
    pub fn new(lo: u16, hi: u16) -> Self {
        PortRange { lo, hi }
    }

    pub fn is_empty(&self) -> bool {
        self.lo > self.hi
    }

    pub fn contains(&self, port: u16) -> bool {
        (self.lo..=self.hi).contains(&port)
    }

    pub fn iter(&self) -> impl Iterator<Item = u16> {
        self.lo..=self.hi
    }
}

impl fmt::Display for PortRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.lo, self.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSpec {
    pub id: NodeId,
    pub role: NodeRole,
    pub bind: IpAddr,
    pub ports: PortRange,
}

/// Health probe: TCP connect, optionally requiring the first bytes the
/// replica sends to start with `banner`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct ProbeSpec {
    pub banner: Option<String>,
}

impl ProbeSpec {
    pub fn tcp() -> Self {
        ProbeSpec { banner: None }
    }

    pub fn banner(prefix: impl Into<String>) -> Self {
        ProbeSpec {
            banner: Some(prefix.into()),
        }
    }
}

impl fmt::Display for ProbeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.banner {
            None => f.write_str("tcp"),
            Some(b) => write!(f, "tcp:{b}"),
        }
    }
}

impl FromStr for ProbeSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            None if s == "tcp" => Ok(ProbeSpec::tcp()),
            Some(("tcp", prefix)) if !prefix.is_empty() => Ok(ProbeSpec::banner(prefix)),
            _ => Err(format!("invalid probe {s:?} (expected tcp or tcp:<banner-prefix>)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChallengeSpec {
    pub name: String,
    pub version: String,
    pub replicas: u32,
    pub internal_port: u16,
    pub external_port: u16,
    pub backend: NodeId,
    /// Command template; `{PORT}` is replaced with the replica's assigned port.
    pub run: String,
    pub probe: ProbeSpec,
    pub network: String,
}

/// The parts of a challenge a replica is actually spawned from.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Workload {
    pub version: String,
    pub run: String,
    pub probe: ProbeSpec,
    pub internal_port: u16,
}

pub const PORT_PLACEHOLDER: &str = "{PORT}";

impl ChallengeSpec {
    pub fn default_network(name: &str) -> String {
        format!("net-{name}")
    }

    pub fn workload(&self) -> Workload {
        Workload {
            version: self.version.clone(),
            run: self.run.clone(),
            probe: self.probe.clone(),
            internal_port: self.internal_port,
        }
    }

    /// Renders the run command for a replica listening on `port`.
    pub fn command_for(&self, port: u16) -> String {
        self.run.replace(PORT_PLACEHOLDER, &port.to_string())
    }

    /// Checks the rules that apply to a single challenge in isolation.
    pub fn validate(&self) -> Result<(), Violation> {
        if !is_challenge_name(&self.name) {
            return Err(Violation::BadChallengeName(self.name.clone()));
        }
        if !is_version(&self.version) {
            return Err(Violation::BadVersion {
                challenge: self.name.clone(),
                version: self.version.clone(),
            });
        }
        if self.replicas == 0 {
            return Err(Violation::ZeroReplicas(self.name.clone()));
        }
        if self.internal_port == 0 || self.external_port == 0 {
            return Err(Violation::ZeroPort(self.name.clone()));
        }
        if !self.run.contains(PORT_PLACEHOLDER) {
            return Err(Violation::MissingPortPlaceholder(self.name.clone()));
        }
        if !is_identifier(&self.network) {
            return Err(Violation::BadIdentifier(self.network.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Settings {
    pub stick_ttl: Duration,
    pub stick_capacity: usize,
    pub poll_interval: Duration,
    pub probe_interval: Duration,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            stick_ttl: Duration::from_secs(3600),
            stick_capacity: 65536,
            poll_interval: Duration::from_secs(60),
            probe_interval: Duration::from_secs(5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Topology {
    pub nodes: Vec<NodeSpec>,
    pub challenges: Vec<ChallengeSpec>,
    pub settings: Settings,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("duplicate node_id {0}")]
    DuplicateNode(NodeId),
    #[error("empty port_range {range} on node {node}")]
    EmptyPortRange { node: NodeId, range: PortRange },
    #[error("expected exactly one frontend node, found {0}")]
    FrontendCount(usize),
    #[error("invalid identifier {0:?}")]
    BadIdentifier(String),
    #[error("invalid challenge name {0:?} (must match [a-z0-9-]+)")]
    BadChallengeName(String),
    #[error("duplicate challenge {0}")]
    DuplicateChallenge(String),
    #[error("invalid version {version:?} for challenge {challenge}")]
    BadVersion { challenge: String, version: String },
    #[error("replicas must be at least 1 for challenge {0}")]
    ZeroReplicas(String),
    #[error("port 0 is not usable (challenge {0})")]
    ZeroPort(String),
    #[error("run command of challenge {0} lacks the {{PORT}} placeholder")]
    MissingPortPlaceholder(String),
    #[error("duplicate external_port {0}")]
    DuplicateExternalPort(u16),
    #[error("duplicate network_id {0}")]
    DuplicateNetwork(String),
    #[error("challenge {challenge} references unknown backend {backend}")]
    UnknownBackend { challenge: String, backend: NodeId },
    #[error("challenge {challenge} is assigned to {node}, which is not a backend")]
    NotABackend { challenge: String, node: NodeId },
    #[error("stick_capacity must be at least 1")]
    ZeroStickCapacity,
    #[error("{0} must be positive")]
    ZeroInterval(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid topology: {0}")]
    Invalid(#[from] Violation),
}

pub(crate) fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

pub(crate) fn is_challenge_name(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-')
}

pub(crate) fn is_version(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | '+'))
}

impl Topology {
    pub fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn challenge(&self, name: &str) -> Option<&ChallengeSpec> {
        self.challenges.iter().find(|c| c.name == name)
    }

    pub fn frontend(&self) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.role == NodeRole::Frontend)
    }

    pub fn backends(&self) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.iter().filter(|n| n.role == NodeRole::Backend)
    }

    pub fn challenges_on<'a>(&'a self, backend: &'a str) -> impl Iterator<Item = &'a ChallengeSpec> {
        self.challenges.iter().filter(move |c| c.backend == backend)
    }

    pub fn validate(&self) -> Result<(), Violation> {
        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if !is_identifier(n.id.as_str()) {
                return Err(Violation::BadIdentifier(n.id.to_string()));
            }
            if !ids.insert(n.id.clone()) {
                return Err(Violation::DuplicateNode(n.id.clone()));
            }
            if n.ports.is_empty() {
                return Err(Violation::EmptyPortRange {
                    node: n.id.clone(),
                    range: n.ports,
                });
            }
        }
        let frontends = self.nodes.iter().filter(|n| n.role == NodeRole::Frontend).count();
        if frontends != 1 {
            return Err(Violation::FrontendCount(frontends));
        }

        let mut names = BTreeSet::new();
        let mut ports = BTreeSet::new();
        let mut networks = BTreeSet::new();
        for c in &self.challenges {
            c.validate()?;
            if !names.insert(c.name.as_str()) {
                return Err(Violation::DuplicateChallenge(c.name.clone()));
            }
            if !ports.insert(c.external_port) {
                return Err(Violation::DuplicateExternalPort(c.external_port));
            }
            if !networks.insert(c.network.as_str()) {
                return Err(Violation::DuplicateNetwork(c.network.clone()));
            }
            match self.node(c.backend.as_str()) {
                None => {
                    return Err(Violation::UnknownBackend {
                        challenge: c.name.clone(),
                        backend: c.backend.clone(),
                    })
                }
                Some(n) if n.role != NodeRole::Backend => {
                    return Err(Violation::NotABackend {
                        challenge: c.name.clone(),
                        node: n.id.clone(),
                    })
                }
                Some(_) => {}
            }
        }

        let s = &self.settings;
        if s.stick_capacity == 0 {
            return Err(Violation::ZeroStickCapacity);
        }
        if s.poll_interval.is_zero() {
            return Err(Violation::ZeroInterval("poll_interval"));
        }
        if s.probe_interval.is_zero() {
            return Err(Violation::ZeroInterval("probe_interval"));
        }
        Ok(())
    }

    /// Canonical text form; `parse_topology(&t.to_canonical()) == Ok(t)`.
    pub fn to_canonical(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            let _ = writeln!(out, "node {} role={} bind={} ports={}", n.id, n.role, n.bind, n.ports);
        }
        for c in &self.challenges {
            let _ = write!(
                out,
                "challenge {} version={} replicas={} internal_port={} external_port={} backend={} run={} probe={}",
                c.name,
                c.version,
                c.replicas,
                c.internal_port,
                c.external_port,
                c.backend,
                quote(&c.run),
                quote(&c.probe.to_string()),
            );
            if c.network != ChallengeSpec::default_network(&c.name) {
                let _ = write!(out, " network={}", c.network);
            }
            out.push('\n');
        }
        let s = &self.settings;
        let _ = writeln!(
            out,
            "set stick_ttl={} stick_capacity={} poll_interval={} probe_interval={}",
            format_duration(s.stick_ttl),
            s.stick_capacity,
            format_duration(s.poll_interval),
            format_duration(s.probe_interval),
        );
        out
    }
}

/// Seconds when whole, otherwise `<n>ms`.
pub fn format_duration(d: Duration) -> String {
    let ms = d.as_millis();
    if ms.is_multiple_of(1000) {
        (ms / 1000).to_string()
    } else {
        format!("{ms}ms")
    }
}

pub fn parse_duration(s: &str) -> Option<Duration> {
    if let Some(ms) = s.strip_suffix("ms") {
        return ms.parse().ok().map(Duration::from_millis);
    }
    s.parse().ok().map(Duration::from_secs)
}

struct Fields<'a> {
    line: usize,
    head: &'a Token,
    values: BTreeMap<&'a str, (&'a str, usize)>,
}

impl<'a> Fields<'a> {
    fn collect(line: usize, head: &'a Token, rest: &'a [Token], allowed: &[&str]) -> Result<Self, TopologyError> {
        let mut values = BTreeMap::new();
        for tok in rest {
            let Some((key, value)) = split_pair(&tok.text) else {
                return Err(syntax(
                    line,
                    tok.column,
                    format!("expected key=value, found {:?}", tok.text),
                ));
            };
            if !allowed.contains(&key) {
                return Err(syntax(line, tok.column, format!("unknown field {key:?}")));
            }
            if values.insert(key, (value, tok.column)).is_some() {
                return Err(syntax(line, tok.column, format!("field {key:?} given twice")));
            }
        }
        Ok(Fields { line, head, values })
    }

    fn optional<T>(
        &self,
        key: &str,
        parse: impl FnOnce(&str) -> Result<T, String>,
    ) -> Result<Option<T>, TopologyError> {
        match self.values.get(key) {
            None => Ok(None),
            Some(&(v, col)) => parse(v)
                .map(Some)
                .map_err(|m| syntax(self.line, col, format!("{key}: {m}"))),
        }
    }

    fn required<T>(&self, key: &str, parse: impl FnOnce(&str) -> Result<T, String>) -> Result<T, TopologyError> {
        self.optional(key, parse)?.ok_or_else(|| {
            syntax(
                self.line,
                self.head.column,
                format!("{} declaration is missing field {key:?}", self.head.text),
            )
        })
    }
}

fn syntax(line: usize, column: usize, message: String) -> TopologyError {
    TopologyError::Syntax { line, column, message }
}

fn port(s: &str) -> Result<u16, String> {
    match s.parse::<u16>() {
        Ok(0) | Err(_) => Err(format!("invalid port {s:?}")),
        Ok(p) => Ok(p),
    }
}

fn port_range(s: &str) -> Result<PortRange, String> {
    let (lo, hi) = s
        .split_once('-')
        .ok_or_else(|| format!("invalid port range {s:?} (expected lo-hi)"))?;
    Ok(PortRange::new(port(lo)?, port(hi)?))
}

fn duration(s: &str) -> Result<Duration, String> {
    parse_duration(s).ok_or_else(|| format!("invalid duration {s:?}"))
}

fn text(s: &str) -> Result<String, String> {
    Ok(s.to_string())
}

/// Parses and validates a topology document.
pub fn parse_topology(document: &str) -> Result<Topology, TopologyError> {
    let mut topo = Topology::default();
    for (idx, raw) in document.lines().enumerate() {
        let line = idx + 1;
        let tokens = tokenize(raw).map_err(|e| syntax(line, e.column, e.message))?;
        let Some((head, rest)) = tokens.split_first() else {
            continue;
        };
        match head.text.as_str() {
            "node" => {
                let (id, rest) = name_token(line, head, rest)?;
                let f = Fields::collect(line, head, rest, &["role", "bind", "ports"])?;
                let role = f.required("role", |v| match v {
                    "frontend" => Ok(NodeRole::Frontend),
                    "backend" => Ok(NodeRole::Backend),
                    _ => Err(format!("unknown role {v:?}")),
                })?;
                let bind = f.required("bind", |v| v.parse::<IpAddr>().map_err(|e| e.to_string()))?;
                let ports = f.required("ports", port_range)?;
                topo.nodes.push(NodeSpec {
                    id: NodeId::new(id),
                    role,
                    bind,
                    ports,
                });
            }
            "challenge" => {
                let (name, rest) = name_token(line, head, rest)?;
                let f = Fields::collect(
                    line,
                    head,
                    rest,
                    &[
                        "version",
                        "replicas",
                        "internal_port",
                        "external_port",
                        "backend",
                        "run",
                        "probe",
                        "network",
                    ],
                )?;
                let spec = ChallengeSpec {
                    name: name.to_string(),
                    version: f.required("version", text)?,
                    replicas: f.required("replicas", |v| v.parse::<u32>().map_err(|e| e.to_string()))?,
                    internal_port: f.required("internal_port", port)?,
                    external_port: f.required("external_port", port)?,
                    backend: NodeId::new(f.required("backend", text)?),
                    run: f.required("run", text)?,
                    probe: f.required("probe", |v| v.parse::<ProbeSpec>())?,
                    network: f
                        .optional("network", text)?
                        .unwrap_or_else(|| ChallengeSpec::default_network(name)),
                };
                topo.challenges.push(spec);
            }
            "set" => {
                let f = Fields::collect(
                    line,
                    head,
                    rest,
                    &["stick_ttl", "stick_capacity", "poll_interval", "probe_interval"],
                )?;
                let s = &mut topo.settings;
                if let Some(v) = f.optional("stick_ttl", duration)? {
                    s.stick_ttl = v;
                }
                if let Some(v) = f.optional("stick_capacity", |v| v.parse::<usize>().map_err(|e| e.to_string()))? {
                    s.stick_capacity = v;
                }
                if let Some(v) = f.optional("poll_interval", duration)? {
                    s.poll_interval = v;
                }
                if let Some(v) = f.optional("probe_interval", duration)? {
                    s.probe_interval = v;
                }
            }
            other => {
                return Err(syntax(line, head.column, format!("unknown declaration {other:?}")));
            }
        }
    }
    topo.validate()?;
    Ok(topo)
}

fn name_token<'a>(line: usize, head: &Token, rest: &'a [Token]) -> Result<(&'a str, &'a [Token]), TopologyError> {
    match rest.split_first() {
        Some((name, rest)) if !name.text.contains('=') => Ok((name.text.as_str(), rest)),
        Some((tok, _)) => Err(syntax(line, tok.column, format!("expected a {} name", head.text))),
        None => Err(syntax(
            line,
            head.column,
            format!("{} declaration needs a name", head.text),
        )),
    }
}
