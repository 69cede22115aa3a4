//! `status`: one line per deployed challenge and backend, joined from node
//! state files, the ingress map and the status file, with replica health
//! probed live.

use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::time::Duration;

use futures::future::join_all;

use crate::ingress::MappingTable;
use crate::model::parse_topology;
use crate::pipeline::read_status;
use crate::platform::StateDir;
use crate::supervisor::probe;

const PROBE_LIMIT: Duration = Duration::from_millis(500);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatusLine {
    pub challenge: String,
    pub backend: String,
    pub version: String,
    pub healthy: usize,
    pub desired: u32,
    pub state: String,
    pub sticks: usize,
    pub ingress: Option<u16>,
    pub balancer: Option<SocketAddr>,
}

impl StatusLine {
    pub fn human(&self) -> String {
        format!(
            "{} {} {} {}/{} {} {}",
            self.challenge,
            self.backend,
            self.version,
            self.healthy,
            self.desired,
            self.state,
            dash(self.ingress)
        )
    }

    pub fn porcelain(&self) -> String {
        format!(
            "challenge={} backend={} version={} healthy={} desired={} state={} sticks={} ingress={} balancer={}",
            self.challenge,
            self.backend,
            self.version,
            self.healthy,
            self.desired,
            self.state,
            self.sticks,
            dash(self.ingress),
            dash(self.balancer)
        )
    }
}

fn dash<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_else(|| "-".into())
}

pub async fn collect(state: &StateDir) -> Vec<StatusLine> {
    let table = MappingTable::load(&state.ingress_map()).unwrap_or_default();
    let records = read_status(&state.status_file()).map(|r| r.records).unwrap_or_default();
    let topology = std::fs::read_to_string(state.topology())
        .ok()
        .and_then(|t| parse_topology(&t).ok());
    let mut out = Vec::new();
    for node in state.nodes() {
        let Ok(Some(ns)) = state.load_node(&node) else {
            continue;
        };
        let bind: IpAddr = ns
            .bind
            .or_else(|| topology.as_ref().and_then(|t| t.node(&node)).map(|n| n.bind))
            .unwrap_or(IpAddr::V4(Ipv4Addr::LOCALHOST));
        for svc in &ns.services {
            let probes = svc
                .replicas
                .iter()
                .map(|r| probe(SocketAddr::new(bind, r.port), &r.workload.probe, PROBE_LIMIT));
            let healthy = join_all(probes).await.into_iter().filter(|ok| *ok).count();
            let name = &svc.spec.name;
            let recorded = records
                .iter()
                .find(|r| &r.challenge == name && r.backend.as_str() == node);
            let state = match (recorded, &svc.degraded) {
                (Some(r), _) => r.state.to_string(),
                (None, Some(_)) => "degraded".to_string(),
                (None, None) => "deployed".to_string(),
            };
            let ingress = table
                .mappings
                .iter()
                .find(|m| &m.challenge == name && m.backend_node.as_str() == node)
                .map(|m| m.external_port);
            out.push(StatusLine {
                challenge: name.clone(),
                backend: node.clone(),
                version: svc.spec.version.clone(),
                healthy,
                desired: svc.desired,
                state,
                sticks: svc.sticks,
                ingress,
                balancer: svc.balancer_port.map(|p| SocketAddr::new(bind, p)),
            });
        }
    }
    out.sort_by(|a, b| (&a.challenge, &a.backend).cmp(&(&b.challenge, &b.backend)));
    out
}
