//! Command-line surface. One-shot commands host whatever nodes have no
//! running `serve` process themselves and hand the rest to those processes
//! through the state directory.

pub mod queue;
mod serve;
pub mod status;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use crate::ids::NodeId;
use crate::model::{parse_topology, ApplyReport, NodeRole, Topology};
use crate::pipeline::{package_artifact, run_pipeline, Mode, PipelineContext, PipelineReport};
use crate::platform::{Hosts, Platform, PlatformOptions, StateDir};
use crate::supervisor::SubprocessRunner;
use crate::time::{Clock, SystemClock};
use queue::Response;

pub const STATE_ENV: &str = "FLAGFORGE_STATE";
const REQUEST_TIMEOUT: Duration = Duration::from_secs(300);
const DEPLOY_WAIT: Duration = Duration::from_secs(30);

#[derive(Debug, Parser)]
#[command(
    name = "flagforge",
    version,
    about = "Challenge hosting: converge, supervise, balance, deploy"
)]
pub struct Cli {
    /// State directory; FLAGFORGE_STATE takes precedence.
    #[arg(long, global = true)]
    pub state: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PipelineAction {
    RunOnce,
    Watch,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Converge the system to a topology file.
    Apply { topology: PathBuf },
    /// Run one node until signalled.
    Serve {
        #[arg(long)]
        node: String,
        /// Defaults to the last applied topology.
        #[arg(long)]
        topology: Option<PathBuf>,
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Show deployed challenges.
    Status {
        #[arg(long)]
        porcelain: bool,
    },
    /// Set the replica count of a challenge.
    Scale { challenge: String, replicas: u32 },
    /// Deploy artifacts from the store.
    Pipeline {
        action: PipelineAction,
        #[arg(long)]
        mode: Mode,
        #[arg(long, value_delimiter = ',')]
        select: Vec<String>,
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        topology: Option<PathBuf>,
        /// Backend for challenges the topology does not place.
        #[arg(long)]
        node: Option<String>,
    },
    /// Build a bundle from a challenge source directory.
    Package {
        dir: PathBuf,
        #[arg(long)]
        store: Option<PathBuf>,
    },
}

pub fn state_dir(flag: Option<PathBuf>) -> StateDir {
    match std::env::var_os(STATE_ENV) {
        Some(v) if !v.is_empty() => StateDir::new(PathBuf::from(v)),
        _ => StateDir::new(flag.unwrap_or_else(|| PathBuf::from("state"))),
    }
}

/// Runs a command, writing its report to `out`; returns the exit code.
pub async fn run(cli: Cli, out: &mut dyn Write) -> i32 {
    let state = state_dir(cli.state);
    match cli.command {
        Command::Apply { topology } => cmd_apply(&state, &topology, out).await,
        Command::Serve { node, topology, store } => serve::cmd_serve(&state, &node, topology, store, out).await,
        Command::Status { porcelain } => cmd_status(&state, porcelain, out).await,
        Command::Scale { challenge, replicas } => cmd_scale(&state, &challenge, replicas, out).await,
        Command::Pipeline {
            action,
            mode,
            select,
            store,
            topology,
            node,
        } => {
            let args = PipelineArgs {
                mode,
                select,
                store,
                topology,
                node,
            };
            match action {
                PipelineAction::RunOnce => cmd_pipeline(&state, &args, out).await,
                PipelineAction::Watch => pipeline_watch(&state, &args, out).await,
            }
        }
        Command::Package { dir, store } => cmd_package(&state, &dir, store, out),
    }
}

fn load_topology(path: &std::path::Path) -> Result<(String, Topology), String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let topo = parse_topology(&text).map_err(|e| e.to_string())?;
    Ok((text, topo))
}

fn live_nodes(state: &StateDir, topo: &Topology) -> BTreeSet<NodeId> {
    topo.nodes
        .iter()
        .filter(|n| state.live_server(n.id.as_str()).is_some())
        .map(|n| n.id.clone())
        .collect()
}

fn one_shot_platform(state: &StateDir, topo: &Topology, hosts: BTreeSet<NodeId>) -> Platform {
    let runner = Arc::new(SubprocessRunner::new(state.logs()).detached(true));
    let opts = PlatformOptions {
        state: Some(state.clone()),
        listen: false,
        ..PlatformOptions::default()
    };
    Platform::new(topo, Hosts::Only(hosts), runner, Arc::new(SystemClock), opts)
}

/// Report lines without the trailing summary.
pub(crate) fn apply_response(report: &ApplyReport) -> Response {
    let text = report.to_string();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    lines.pop();
    let failed = report.failures().count();
    Response {
        code: if failed == 0 { 0 } else { 2 },
        changes: report.len(),
        failed,
        lines,
    }
}

pub(crate) fn pipeline_response(report: &PipelineReport) -> Response {
    let text = report.to_string();
    let lines: Vec<String> = text.lines().skip(1).map(str::to_string).collect();
    let failed = report.failed();
    Response {
        code: if failed == 0 { 0 } else { 2 },
        changes: report.updates(),
        failed,
        lines,
    }
}

fn print_lines(out: &mut dyn Write, r: &Response) {
    for l in &r.lines {
        let _ = writeln!(out, "{l}");
    }
}

async fn cmd_apply(state: &StateDir, path: &std::path::Path, out: &mut dyn Write) -> i32 {
    let (text, topo) = match load_topology(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    if let Err(e) = crate::fsutil::write_atomic(&state.topology(), text.as_bytes()) {
        eprintln!("error: cannot write {}: {e}", state.topology().display());
        return 1;
    }
    let live = live_nodes(state, &topo);
    let mut changes = 0;
    let mut failed = 0;
    // Served backends first, so their balancer ports are on disk before
    // the ingress table is built.
    let live_backends = topo.backends().filter(|n| live.contains(&n.id)).map(|n| n.id.clone());
    for node in live_backends {
        match queue::send(state, node.as_str(), "apply", REQUEST_TIMEOUT).await {
            Ok(r) => {
                print_lines(out, &r);
                changes += r.changes;
                failed += r.failed;
            }
            Err(e) => {
                let _ = writeln!(out, "FAILED  {node}: {e}");
                failed += 1;
            }
        }
    }
    let hosted: BTreeSet<NodeId> = topo
        .nodes
        .iter()
        .filter(|n| !live.contains(&n.id))
        .map(|n| n.id.clone())
        .collect();
    if !hosted.is_empty() {
        let mut platform = one_shot_platform(state, &topo, hosted);
        if let Err(e) = platform.restore().await {
            eprintln!("error: {e}");
            return 2;
        }
        let r = apply_response(&platform.converge(&topo).await);
        print_lines(out, &r);
        changes += r.changes;
        failed += r.failed;
    }
    let _ = write!(out, "{changes} changes");
    if failed > 0 {
        let _ = write!(out, ", {failed} not applied");
    }
    let _ = writeln!(out);
    if failed == 0 {
        0
    } else {
        2
    }
}

async fn cmd_status(state: &StateDir, porcelain: bool, out: &mut dyn Write) -> i32 {
    let lines = status::collect(state).await;
    if lines.is_empty() {
        let _ = writeln!(out, "no deployments");
        return 0;
    }
    for l in lines {
        let _ = writeln!(out, "{}", if porcelain { l.porcelain() } else { l.human() });
    }
    0
}

async fn cmd_scale(state: &StateDir, challenge: &str, n: u32, out: &mut dyn Write) -> i32 {
    if n == 0 {
        eprintln!("error: replicas must be at least 1");
        return 1;
    }
    let node = state.nodes().into_iter().find(|node| {
        state
            .load_node(node)
            .ok()
            .flatten()
            .is_some_and(|s| s.service(challenge).is_some())
    });
    let Some(node) = node else {
        eprintln!("error: unknown challenge {challenge}");
        return 1;
    };
    if state.live_server(&node).is_some() {
        return match queue::send(state, &node, &format!("scale {challenge} {n}"), REQUEST_TIMEOUT).await {
            Ok(r) => {
                print_lines(out, &r);
                r.code
            }
            Err(e) => {
                eprintln!("error: {e}");
                2
            }
        };
    }
    let topo = match load_topology(&state.topology()) {
        Ok((_, t)) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let mut platform = one_shot_platform(state, &topo, [NodeId::new(node.clone())].into());
    if let Err(e) = platform.restore().await {
        eprintln!("error: {e}");
        return 2;
    }
    let r = scale_on(&mut platform, challenge, n).await;
    print_lines(out, &r);
    r.code
}

pub(crate) async fn scale_on(platform: &mut Platform, challenge: &str, n: u32) -> Response {
    let mut lines = Vec::new();
    let (node, before) = match platform.scale(challenge, n) {
        Ok(v) => v,
        Err(e) => {
            return Response {
                code: 1,
                changes: 0,
                failed: 1,
                lines: vec![format!("error: {e}")],
            }
        }
    };
    lines.push(format!("{challenge} {node} desired {before} -> {n}"));
    let mut failed = 0;
    match platform.reconcile(node.as_str(), challenge).await {
        Ok(actions) => lines.extend(actions.iter().map(|a| format!("  {a}"))),
        Err(e) => {
            failed = 1;
            lines.push(format!("error: {e}"));
        }
    }
    Response {
        code: if failed == 0 { 0 } else { 2 },
        changes: 1,
        failed,
        lines,
    }
}

#[derive(Debug, Clone)]
struct PipelineArgs {
    mode: Mode,
    select: Vec<String>,
    store: Option<PathBuf>,
    topology: Option<PathBuf>,
    node: Option<String>,
}

pub(crate) fn pipeline_context(state: &StateDir, store: Option<PathBuf>, node: Option<String>) -> PipelineContext {
    PipelineContext {
        store: store.unwrap_or_else(|| state.store()),
        work_dir: state.work(),
        status_file: state.status_file(),
        default_backend: node.map(NodeId::new),
        deploy_wait: DEPLOY_WAIT,
    }
}

/// Body of a pipeline request: `pipeline <mode> <names|->`.
pub(crate) fn pipeline_request(mode: Mode, select: &[String]) -> String {
    let mode = match mode {
        Mode::Dev => "dev",
        Mode::Deploy => "deploy",
    };
    let names = if select.is_empty() {
        "-".to_string()
    } else {
        select.join(",")
    };
    format!("pipeline {mode} {names}")
}

async fn cmd_pipeline(state: &StateDir, args: &PipelineArgs, out: &mut dyn Write) -> i32 {
    if args.mode == Mode::Deploy && args.select.is_empty() {
        eprintln!("error: deploy mode needs a non-empty --select");
        return 1;
    }
    let path = args.topology.clone().unwrap_or_else(|| state.topology());
    let topo = match load_topology(&path) {
        Ok((_, t)) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let backends: Vec<NodeId> = topo.backends().map(|n| n.id.clone()).collect();
    if let Some(n) = &args.node {
        if !backends.iter().any(|b| b.as_str() == n) {
            eprintln!("error: {n} is not a backend in the topology");
            return 1;
        }
    }
    let live = live_nodes(state, &topo);
    // Where each selected challenge goes in deploy mode.
    let assign = |name: &str| -> NodeId {
        topo.challenge(name)
            .map(|c| c.backend.clone())
            .or_else(|| args.node.clone().map(NodeId::new))
            .unwrap_or_else(|| backends[0].clone())
    };
    let subset = |node: &NodeId| -> Vec<String> {
        match args.mode {
            Mode::Dev => args.select.clone(),
            Mode::Deploy => args.select.iter().filter(|s| &assign(s) == node).cloned().collect(),
        }
    };

    let mut total = Response {
        code: 0,
        changes: 0,
        failed: 0,
        lines: Vec::new(),
    };
    let mut merge = |r: Response| {
        total.code = total.code.max(r.code);
        total.changes += r.changes;
        total.failed += r.failed;
        total.lines.extend(r.lines);
    };

    for node in backends.iter().filter(|b| live.contains(*b)) {
        let names = subset(node);
        if args.mode == Mode::Deploy && names.is_empty() {
            continue;
        }
        match queue::send(
            state,
            node.as_str(),
            &pipeline_request(args.mode, &names),
            REQUEST_TIMEOUT,
        )
        .await
        {
            Ok(r) => merge(r),
            Err(e) => merge(Response {
                code: 2,
                changes: 0,
                failed: 1,
                lines: vec![format!("  {node}: {e}")],
            }),
        }
    }

    let local: Vec<NodeId> = backends.iter().filter(|b| !live.contains(*b)).cloned().collect();
    let local_names: Vec<String> = match args.mode {
        Mode::Dev => args.select.clone(),
        Mode::Deploy => local.iter().flat_map(subset).collect(),
    };
    if !local.is_empty() && !(args.mode == Mode::Deploy && local_names.is_empty()) {
        let mut hosts: BTreeSet<NodeId> = local.into_iter().collect();
        if let Some(fe) = topo.frontend() {
            if !live.contains(&fe.id) {
                hosts.insert(fe.id.clone());
            }
        }
        let mut platform = one_shot_platform(state, &topo, hosts);
        if let Err(e) = platform.restore().await {
            eprintln!("error: {e}");
            return 2;
        }
        let ctx = pipeline_context(state, args.store.clone(), args.node.clone());
        let selection = (!local_names.is_empty()).then_some(local_names.as_slice());
        match run_pipeline(&mut platform, &ctx, args.mode, selection).await {
            Ok(report) => merge(pipeline_response(&report)),
            Err(e) => merge(Response {
                code: 2,
                changes: 0,
                failed: 1,
                lines: vec![format!("error: {e}")],
            }),
        }
    }

    let n = total.changes;
    let _ = writeln!(out, "{n} update{}", if n == 1 { "" } else { "s" });
    print_lines(out, &total);
    total.code
}

async fn pipeline_watch(state: &StateDir, args: &PipelineArgs, out: &mut dyn Write) -> i32 {
    use tokio::signal::unix::{signal, SignalKind};
    let Ok(mut term) = signal(SignalKind::terminate()) else {
        return 1;
    };
    loop {
        let code = cmd_pipeline(state, args, out).await;
        if code == 1 {
            return code;
        }
        let _ = out.flush();
        let interval = args
            .topology
            .clone()
            .or_else(|| Some(state.topology()))
            .and_then(|p| load_topology(&p).ok())
            .map(|(_, t)| t.settings.poll_interval)
            .unwrap_or(Duration::from_secs(60));
        tokio::select! {
            _ = tokio::time::sleep(interval) => {}
            _ = term.recv() => return 0,
            _ = tokio::signal::ctrl_c() => return 0,
        }
    }
}

fn cmd_package(state: &StateDir, dir: &std::path::Path, store: Option<PathBuf>, out: &mut dyn Write) -> i32 {
    let store = store.unwrap_or_else(|| state.store());
    match package_artifact(dir, &store, SystemClock.now()) {
        Ok(p) => {
            let _ = writeln!(out, "{}", p.path.display());
            if !p.created {
                eprintln!("identical bundle already in the store");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub(crate) fn is_backend(topo: &Topology, node: &str) -> Option<bool> {
    topo.node(node).map(|n| n.role == NodeRole::Backend)
}
