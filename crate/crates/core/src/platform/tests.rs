use std::time::Duration;

use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;

use super::*;
use crate::model::parse_topology;
use crate::supervisor::MockRunner;
use crate::testutil::port_block;
use crate::time::SystemClock;

struct Ports {
    be1: (u16, u16),
    be2: (u16, u16),
    ext: u16,
}

fn ports() -> Ports {
    let be1 = port_block(20);
    let be2 = port_block(20);
    let ext = port_block(4).0;
    Ports { be1, be2, ext }
}

fn topology(p: &Ports, web_replicas: u32) -> Topology {
    let doc = format!(
        "node fe role=frontend bind=127.0.0.1 ports=30000-30010
node be1 role=backend bind=127.0.0.1 ports={}-{}
node be2 role=backend bind=127.0.0.1 ports={}-{}
challenge web version=v1 replicas={web_replicas} internal_port=80 external_port={} backend=be1 run=\"x {{PORT}}\" probe=tcp
challenge pwn version=v1 replicas=1 internal_port=80 external_port={} backend=be2 run=\"x {{PORT}}\" probe=tcp
",
        p.be1.0,
        p.be1.1,
        p.be2.0,
        p.be2.1,
        p.ext,
        p.ext + 1
    );
    parse_topology(&doc).unwrap()
}

fn opts(state: Option<StateDir>, listen: bool) -> PlatformOptions {
    PlatformOptions {
        state,
        listen,
        supervisor: SupervisorConfig {
            spawn_backoff: Duration::from_millis(1),
            drain_grace: Duration::from_millis(10),
            poll_step: Duration::from_millis(10),
            ..SupervisorConfig::default()
        },
        ..PlatformOptions::default()
    }
}

fn platform(t: &Topology, hosts: Hosts, runner: &Arc<MockRunner>, o: PlatformOptions) -> Platform {
    Platform::new(t, hosts, runner.clone(), Arc::new(SystemClock), o)
}

async fn settle(p: &mut Platform) {
    for b in ["be1", "be2"] {
        for c in ["web", "pwn"] {
            p.wait_healthy(b, c, Duration::from_secs(3)).await;
        }
    }
}

async fn greeting(port: u16) -> String {
    let mut s = TcpStream::connect(("127.0.0.1", port)).await.unwrap();
    let mut buf = vec![0u8; 128];
    let n = tokio::time::timeout(Duration::from_secs(3), s.read(&mut buf))
        .await
        .unwrap()
        .unwrap();
    let _ = s.shutdown().await;
    String::from_utf8_lossy(&buf[..n]).into_owned()
}

#[tokio::test]
async fn converge_serves_traffic_and_reaches_fixed_point() {
    let p = ports();
    let t = topology(&p, 2);
    let runner = Arc::new(MockRunner::new());
    let mut plat = platform(&t, Hosts::All, &runner, opts(None, true));
    let report = plat.converge(&t).await;
    assert!(report.succeeded(), "{report}");
    assert_eq!(runner.running(), 3);
    settle(&mut plat).await;

    let again = diff(&t, &plat.observe());
    assert!(again.is_empty(), "{again:?}");

    let table = plat.mapping_table().unwrap();
    assert_eq!(table.ports().into_iter().collect::<Vec<_>>(), vec![p.ext, p.ext + 1]);
    let g = greeting(p.ext).await;
    assert!(g.starts_with("web-r") && g.ends_with(" v1\n"), "{g}");
    let g = greeting(p.ext + 1).await;
    assert!(g.starts_with("pwn-r"), "{g}");

    let scaled = topology(&p, 1);
    let report = plat.converge(&scaled).await;
    assert!(report.succeeded(), "{report}");
    assert_eq!(report.count("stop_replica"), 1);
    assert_eq!(
        plat.backend("be1")
            .unwrap()
            .supervisor()
            .service("web")
            .unwrap()
            .instances
            .len(),
        1
    );
    plat.shutdown().await;
}

#[tokio::test]
async fn removed_challenge_releases_everything() {
    let p = ports();
    let t = topology(&p, 1);
    let runner = Arc::new(MockRunner::new());
    let mut plat = platform(&t, Hosts::All, &runner, opts(None, false));
    assert!(plat.converge(&t).await.succeeded());
    let mut smaller = t.clone();
    smaller.challenges.retain(|c| c.name != "pwn");
    let report = plat.converge(&smaller).await;
    assert!(report.succeeded(), "{report}");
    assert!(plat.backend("be2").unwrap().supervisor().service("pwn").is_none());
    assert_eq!(plat.backend("be2").unwrap().balancer_port("pwn"), None);
    assert_eq!(
        plat.mapping_table().unwrap().ports().into_iter().collect::<Vec<_>>(),
        vec![p.ext]
    );
    assert!(diff(&smaller, &plat.observe()).is_empty());
}

#[tokio::test]
async fn restore_adopts_running_replicas() {
    let dir = tempfile::tempdir().unwrap();
    let state = StateDir::new(dir.path());
    let p = ports();
    let t = topology(&p, 2);
    let runner = Arc::new(MockRunner::new());

    let mut first = platform(&t, Hosts::All, &runner, opts(Some(state.clone()), false));
    assert!(first.converge(&t).await.succeeded());
    let before: Vec<String> = first
        .backend("be1")
        .unwrap()
        .supervisor()
        .service("web")
        .unwrap()
        .instances
        .iter()
        .map(|i| i.endpoint.id.to_string())
        .collect();
    let port_before = first.backend("be1").unwrap().balancer_port("web");
    first.detach();
    drop(first);

    let mut second = platform(&t, Hosts::All, &runner, opts(Some(state.clone()), false));
    let r = second.restore().await.unwrap();
    assert_eq!((r.services, r.adopted, r.lost), (2, 3, 0));
    let after: Vec<String> = second
        .backend("be1")
        .unwrap()
        .supervisor()
        .service("web")
        .unwrap()
        .instances
        .iter()
        .map(|i| i.endpoint.id.to_string())
        .collect();
    assert_eq!(after, before);
    assert_eq!(second.backend("be1").unwrap().balancer_port("web"), port_before);
    let report = second.converge(&t).await;
    assert!(report.is_empty(), "{report}");
    assert_eq!(runner.spawn_count(), 3);
}

#[tokio::test]
async fn frontend_follows_remote_backends() {
    let dir = tempfile::tempdir().unwrap();
    let state = StateDir::new(dir.path());
    let p = ports();
    let t = topology(&p, 1);
    let runner = Arc::new(MockRunner::new());

    let mut be = platform(
        &t,
        Hosts::Only(["be1".into(), "be2".into()].into()),
        &runner,
        opts(Some(state.clone()), true),
    );
    assert!(be.converge(&t).await.succeeded());
    settle(&mut be).await;

    let mut fe = platform(&t, Hosts::one("fe"), &runner, opts(Some(state.clone()), true));
    fe.restore().await.unwrap();
    assert!(fe.mapping_table().unwrap().mappings.is_empty());
    let r = fe.sync_ingress().await.unwrap().unwrap();
    assert_eq!(r.bound.len(), 2);
    assert!(fe.sync_ingress().await.unwrap().is_none());
    let g = greeting(p.ext).await;
    assert!(g.starts_with("web-r1 "), "{g}");
    let on_disk = MappingTable::load(&state.ingress_map()).unwrap();
    assert_eq!(on_disk.mappings, fe.mapping_table().unwrap().mappings);

    // Backend changes are left to the process hosting the backend.
    let mut more = t.clone();
    more.challenges[0].replicas = 2;
    fe.refresh_remotes();
    let report = fe.converge(&more).await;
    assert!(report.is_empty(), "{report}");
    let report = be.converge(&more).await;
    assert_eq!(report.count("start_replica"), 1, "{report}");
    fe.shutdown().await;
    be.shutdown().await;
}
