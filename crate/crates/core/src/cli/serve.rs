//! `serve`: hosts one node until SIGTERM/SIGINT. A backend probes,
//! reconciles and polls the artifact store; a frontend keeps the ingress
//! table in step with what the backends publish in the state directory.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use tokio::signal::unix::{signal, SignalKind};
use tokio::time::{interval, MissedTickBehavior};
use tracing::{info, warn};

use super::queue::{self, Response};
use super::{apply_response, is_backend, load_topology, pipeline_context, pipeline_response, scale_on};
use crate::pipeline::{run_pipeline, Mode, PipelineContext};
use crate::platform::{Hosts, Platform, PlatformOptions, StateDir};
use crate::supervisor::SubprocessRunner;
use crate::time::SystemClock;

const REQUEST_POLL: Duration = Duration::from_millis(100);
const FRONTEND_SYNC: Duration = Duration::from_millis(500);

pub(super) async fn cmd_serve(
    state: &StateDir,
    node: &str,
    topology: Option<PathBuf>,
    store: Option<PathBuf>,
    out: &mut dyn Write,
) -> i32 {
    let path = topology.clone().unwrap_or_else(|| state.topology());
    let (text, topo) = match load_topology(&path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let Some(backend) = is_backend(&topo, node) else {
        eprintln!("error: node {node} is not in the topology");
        return 1;
    };
    if let Some(pid) = state.live_server(node) {
        eprintln!("error: node {node} is already served by pid {pid}");
        return 1;
    }
    if !state.topology().exists() {
        let _ = crate::fsutil::write_atomic(&state.topology(), text.as_bytes());
    }
    let Ok(mut term) = signal(SignalKind::terminate()) else {
        eprintln!("error: cannot install signal handler");
        return 1;
    };

    let runner = Arc::new(SubprocessRunner::new(state.logs()));
    let opts = PlatformOptions {
        state: Some(state.clone()),
        listen: true,
        ..PlatformOptions::default()
    };
    let mut platform = Platform::new(&topo, Hosts::one(node), runner, Arc::new(SystemClock), opts);
    match platform.restore().await {
        Ok(r) => info!(
            node,
            services = r.services,
            adopted = r.adopted,
            lost = r.lost,
            "restored"
        ),
        Err(e) => {
            eprintln!("error: {e}");
            platform.shutdown().await;
            return 1;
        }
    }

    if backend {
        let report = platform.converge(&topo).await;
        for (action, outcome) in report.failures() {
            warn!(%action, ?outcome, "startup converge");
        }
        let bind_failure = report
            .failures()
            .map(|(_, o)| format!("{o:?}"))
            .find(|o| o.contains("cannot bind"));
        if let Some(outcome) = bind_failure {
            eprintln!("error: {outcome}");
            platform.shutdown().await;
            return 1;
        }
    } else {
        platform.refresh_remotes();
        match platform.sync_ingress().await {
            Ok(Some(r)) if !r.failed.is_empty() => {
                let (port, e) = &r.failed[0];
                eprintln!("error: cannot bind ingress port {port}: {e}");
                platform.shutdown().await;
                return 1;
            }
            Ok(_) => {}
            Err(e) => warn!(error = %e, "ingress sync"),
        }
    }

    if let Err(e) = crate::fsutil::write_atomic(&state.pid_file(node), std::process::id().to_string().as_bytes()) {
        eprintln!("error: cannot write pid file: {e}");
        platform.shutdown().await;
        return 1;
    }
    let _ = writeln!(out, "serving {node}");
    let _ = out.flush();

    let ctx = pipeline_context(state, store, Some(node.to_string()));
    let settings = topo.settings.clone();
    let mut probe_tick = interval(settings.probe_interval);
    let mut poll_tick = interval(settings.poll_interval);
    let mut request_tick = interval(REQUEST_POLL);
    let mut sync_tick = interval(FRONTEND_SYNC);
    for t in [&mut probe_tick, &mut poll_tick, &mut request_tick, &mut sync_tick] {
        t.set_missed_tick_behavior(MissedTickBehavior::Delay);
    }
    // Startup already converged; the first poll waits a full interval.
    poll_tick.tick().await;
    let mut applied = text;

    loop {
        tokio::select! {
            _ = term.recv() => break,
            _ = tokio::signal::ctrl_c() => break,
            _ = probe_tick.tick(), if backend => {
                platform.tick().await;
            }
            _ = poll_tick.tick(), if backend => {
                match run_pipeline(&mut platform, &ctx, Mode::Dev, None).await {
                    Ok(r) if r.updates() > 0 => info!("pipeline: {}", r.to_string().trim_end()),
                    Ok(_) => {}
                    Err(e) => warn!(error = %e, "pipeline"),
                }
            }
            _ = sync_tick.tick(), if !backend => {
                if let Ok((t, topo)) = load_topology(&state.topology()) {
                    if t != applied {
                        platform.set_topology(&topo);
                        applied = t;
                    }
                }
                platform.refresh_remotes();
                match platform.sync_ingress().await {
                    Ok(Some(r)) => {
                        info!(generation = r.generation, bound = ?r.bound, closed = ?r.closed, "ingress updated");
                        for (port, e) in &r.failed {
                            warn!(port, error = %e, "ingress bind failed");
                        }
                    }
                    Ok(None) => {}
                    Err(e) => warn!(error = %e, "ingress sync"),
                }
            }
            _ = request_tick.tick() => {
                for (path, body) in queue::pending(state, node) {
                    let response = handle(&mut platform, state, &ctx, body.trim()).await;
                    if let Err(e) = queue::answer(&path, &response) {
                        warn!(error = %e, "cannot answer request");
                    }
                }
            }
        }
    }

    let stopped = platform.shutdown().await;
    let _ = std::fs::remove_file(state.pid_file(node));
    let _ = writeln!(out, "stopped {stopped} replicas");
    0
}

fn usage(body: &str) -> Response {
    Response {
        code: 1,
        changes: 0,
        failed: 1,
        lines: vec![format!("error: bad request {body:?}")],
    }
}

async fn handle(platform: &mut Platform, state: &StateDir, ctx: &PipelineContext, body: &str) -> Response {
    let words: Vec<&str> = body.split_whitespace().collect();
    match words.as_slice() {
        ["apply"] => match load_topology(&state.topology()) {
            Ok((_, topo)) => {
                platform.refresh_remotes();
                apply_response(&platform.converge(&topo).await)
            }
            Err(e) => Response {
                code: 1,
                changes: 0,
                failed: 1,
                lines: vec![format!("error: {e}")],
            },
        },
        ["scale", challenge, n] => match n.parse() {
            Ok(n) => scale_on(platform, challenge, n).await,
            Err(_) => usage(body),
        },
        ["pipeline", mode, names] => {
            let Ok(mode) = mode.parse::<Mode>() else {
                return usage(body);
            };
            let select: Vec<String> = match *names {
                "-" => Vec::new(),
                list => list.split(',').map(str::to_string).collect(),
            };
            let selection = (!select.is_empty()).then_some(select.as_slice());
            match run_pipeline(platform, ctx, mode, selection).await {
                Ok(r) => pipeline_response(&r),
                Err(e) => Response {
                    code: 2,
                    changes: 0,
                    failed: 1,
                    lines: vec![format!("error: {e}")],
                },
            }
        }
        _ => usage(body),
    }
}
