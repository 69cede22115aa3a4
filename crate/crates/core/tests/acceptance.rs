//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::Path;
use std::process::Stdio;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::*;
use flagforge::balancer::Selector;
use flagforge::ids::{NodeId, ReplicaId};
use flagforge::pipeline::{read_status, write_status, DeployState, StatusRecord};
use flagforge::platform::StateDir;
use flagforge::registry::{Health, ReplicaEndpoint};
use flagforge::time::Timestamp;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokio::io::{AsyncBufReadExt, BufReader};
use tokio::process::{Child, Command};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// 1. Session persistence
async fn session_persistence() -> Outcome {
    let c = Cluster::start(&[("web", "v1", 3)], "").await?;
    let addr = c.balancer("web");
    let mut result = Ok(());
    let mut seen_replicas = BTreeSet::new();
    'outer: for n in 1..=6u8 {
        let ip = Ipv4Addr::new(10, 1, 0, n);
        let mut ids = BTreeSet::new();
        for i in 0..200 {
            match greet(addr, Some(ip)).await {
                Ok(g) => {
                    ids.insert(replica_of(&g).to_string());
                }
                Err(e) => {
                    result = Err(format!("{ip} connection {i}: {e}"));
                    break 'outer;
                }
            }
        }
        if ids.len() != 1 {
            result = Err(format!("{ip} reached {ids:?}"));
            break;
        }
        seen_replicas.extend(ids);
    }
    c.stop().await;
    result?;
    Ok(format!(
        "6 sources x 200 connections, one replica each ({} replicas in use)",
        seen_replicas.len()
    ))
}

// 2. First-contact fairness
async fn first_contact_fairness() -> Outcome {
    let c = Cluster::start(&[("web", "v1", 3)], "").await?;
    let addr = c.balancer("web");
    let mut counts: BTreeMap<String, usize> = c.replica_ids("web").into_iter().map(|id| (id, 0)).collect();
    let mut err = None;
    for n in 1..=90u8 {
        match greet(addr, Some(Ipv4Addr::new(10, 2, 0, n))).await {
            Ok(g) => *counts.entry(replica_of(&g).to_string()).or_default() += 1,
            Err(e) => {
                err = Some(format!("source {n}: {e}"));
                break;
            }
        }
    }
    c.stop().await;
    if let Some(e) = err {
        return Err(e);
    }
    let values: Vec<usize> = counts.values().copied().collect();
    check(values == [30, 30, 30], || format!("first assignments {counts:?}"))?;
    Ok(format!("first assignments {values:?}"))
}

// 3. Failover and self-healing
async fn failover() -> Outcome {
    let probe_interval = Duration::from_secs(1);
    let mut c = Cluster::start(&[("web", "v1", 3)], "probe_interval=1").await?;
    let r = failover_inner(&mut c, probe_interval).await;
    c.stop().await;
    r
}

async fn failover_inner(c: &mut Cluster, probe_interval: Duration) -> Outcome {
    let addr = c.balancer("web");
    let ip = Ipv4Addr::new(10, 3, 0, 1);
    let original: BTreeSet<String> = c.replica_ids("web").into_iter().collect();
    let pinned = replica_of(&greet(addr, Some(ip)).await.map_err(|e| e.to_string())?).to_string();
    let pid = c
        .platform
        .backend("be1")
        .and_then(|b| b.supervisor().service("web"))
        .and_then(|s| s.instance(&ReplicaId::new(pinned.as_str())))
        .map(|i| i.runner_handle.0)
        .ok_or("pinned replica not managed")?;
    kill_group(pid);
    let killed_at = Instant::now();
    check(wait_group_gone(pid, Duration::from_secs(2)).await, || {
        format!("replica group {pid} still alive after SIGKILL")
    })?;

    let next = greet(addr, Some(ip))
        .await
        .map_err(|e| format!("connection after kill failed: {e}"))?;
    let survivor = replica_of(&next).to_string();
    check(survivor != pinned && original.contains(&survivor), || {
        format!("after kill got {survivor}, pinned was {pinned}")
    })?;
    let pin = c
        .platform
        .backend("be1")
        .unwrap()
        .balancer()
        .stick_entries("web")
        .into_iter()
        .find(|e| e.source_ip == IpAddr::V4(ip))
        .map(|e| e.replica.to_string());
    check(pin.as_deref() == Some(survivor.as_str()), || {
        format!("pin is {pin:?}, expected {survivor}")
    })?;

    let bound = probe_interval * 2 + Duration::from_secs(3);
    loop {
        tokio::time::sleep(probe_interval).await;
        c.platform.tick().await;
        let svc = c.platform.backend("be1").unwrap().supervisor().service("web").unwrap();
        let ids: BTreeSet<String> = svc.instances.iter().map(|i| i.endpoint.id.to_string()).collect();
        let fresh = ids.difference(&original).count();
        if svc.healthy_count() == 3 && fresh >= 1 && !ids.contains(&pinned) {
            let took = killed_at.elapsed();
            check(took <= bound, || format!("healed after {took:?}, bound {bound:?}"))?;
            return Ok(format!(
                "pin moved {pinned} -> {survivor}; 3/3 healthy after {:.1}s (bound {:.0}s)",
                took.as_secs_f64(),
                bound.as_secs_f64()
            ));
        }
        if killed_at.elapsed() > bound {
            return Err(format!(
                "not healed within {bound:?}: healthy={} replicas={ids:?}",
                svc.healthy_count()
            ));
        }
    }
}

struct Served {
    child: Child,
}

impl Served {
    async fn start(state: &Path, node: &str, topology: &Path, store: &Path) -> Result<Served, String> {
        let mut child = Command::new(flagforge_bin())
            .arg("--state")
            .arg(state)
            .args(["serve", "--node", node, "--topology"])
            .arg(topology)
            .arg("--store")
            .arg(store)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .kill_on_drop(true)
            .spawn()
            .map_err(|e| e.to_string())?;
        let stdout = child.stdout.take().unwrap();
        let mut lines = BufReader::new(stdout).lines();
        let first = tokio::time::timeout(Duration::from_secs(20), lines.next_line()).await;
        match first {
            Ok(Ok(Some(l))) if l == format!("serving {node}") => {
                tokio::spawn(async move { while let Ok(Some(_)) = lines.next_line().await {} });
                Ok(Served { child })
            }
            other => Err(format!("serve {node} did not start: {other:?}")),
        }
    }

    async fn stop(mut self) -> Result<(), String> {
        if let Some(pid) = self.child.id() {
            unsafe {
                libc::kill(pid as libc::pid_t, libc::SIGTERM);
            }
        }
        match tokio::time::timeout(Duration::from_secs(10), self.child.wait()).await {
            Ok(Ok(s)) if s.success() => Ok(()),
            other => Err(format!("serve exit: {other:?}")),
        }
    }
}

async fn flagforge(state: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(flagforge_bin())
        .arg("--state")
        .arg(state)
        .args(args)
        .stderr(Stdio::inherit())
        .output()
        .await
        .expect("run flagforge");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
    )
}

fn replica_ports(state: &StateDir, node: &str, challenge: &str) -> Vec<u16> {
    state
        .load_node(node)
        .ok()
        .flatten()
        .and_then(|ns| {
            ns.service(challenge)
                .map(|s| s.replicas.iter().map(|r| r.port).collect())
        })
        .unwrap_or_default()
}

async fn greetings_of(ports: &[u16]) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    for p in ports {
        out.push(
            greet(SocketAddr::from(([127, 0, 0, 1], *p)), None)
                .await
                .map_err(|e| format!("replica on port {p}: {e}"))?,
        );
    }
    Ok(out)
}

// 4. Pipeline convergence
async fn pipeline_convergence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let state_path = dir.path().join("state");
    let store = dir.path().join("store");
    std::fs::create_dir_all(&store).unwrap();
    let layout = Layout::new();
    let topo = write_file(
        &dir.path().join("topology"),
        &layout.topology_text(&[("web", "v1", 3)], "probe_interval=1 poll_interval=3600"),
    );
    let served = Served::start(&state_path, "be1", &topo, &store).await?;
    let r = pipeline_inner(&state_path, &store, &layout, dir.path()).await;
    let stopped = served.stop().await;
    let detail = r?;
    stopped?;
    Ok(detail)
}

async fn pipeline_inner(state_path: &Path, store: &Path, layout: &Layout, root: &Path) -> Outcome {
    let state = StateDir::new(state_path);
    let deadline = Instant::now() + Duration::from_secs(20);
    loop {
        let (_, out) = flagforge(state_path, &["status", "--porcelain"]).await;
        if out.contains("challenge=web backend=be1 version=v1 healthy=3 desired=3") {
            break;
        }
        if Instant::now() > deadline {
            return Err(format!("v1 never became healthy: {out}"));
        }
        tokio::time::sleep(Duration::from_millis(200)).await;
    }

    let src = root.join("src/web");
    write_file(
        &src.join("challenge.meta"),
        &format!(
            "challenge=web\nversion=v2\nreplicas=3\ninternal_port=80\nexternal_port={}\nrun={} --port {{PORT}}\nprobe=tcp\n",
            layout.ext,
            echo_bin()
        ),
    );
    write_file(&src.join("flag.txt"), "flag{v2}\n");
    let store_arg = store.to_str().unwrap();
    let (code, out) = flagforge(state_path, &["package", src.to_str().unwrap(), "--store", store_arg]).await;
    check(code == 0 && Path::new(out.trim()).is_file(), || {
        format!("package: {code} {out}")
    })?;

    let (code, out) = flagforge(
        state_path,
        &["pipeline", "run-once", "--mode", "dev", "--store", store_arg],
    )
    .await;
    check(code == 0 && out.starts_with("1 update\n"), || {
        format!("first run: {code} {out}")
    })?;

    let ports = replica_ports(&state, "be1", "web");
    check(ports.len() == 3, || format!("replica ports {ports:?}"))?;
    let greetings = greetings_of(&ports).await?;
    check(greetings.iter().all(|g| version_of(g) == "v2"), || {
        format!("greetings {greetings:?}")
    })?;

    let (code, out) = flagforge(
        state_path,
        &["pipeline", "run-once", "--mode", "dev", "--store", store_arg],
    )
    .await;
    check(code == 0 && out.starts_with("0 updates\n"), || {
        format!("second run: {code} {out}")
    })?;

    let status = std::fs::read_to_string(state.status_file()).map_err(|e| e.to_string())?;
    let line = status
        .lines()
        .find(|l| l.starts_with("challenge=web "))
        .ok_or_else(|| format!("no status for web: {status}"))?;
    check(line.contains("backend=be1 version=v2 state=deployed"), || {
        format!("status line {line}")
    })?;
    Ok(format!("3/3 replicas greet v2; second run 0 updates; {line}"))
}

// 5. Rolling availability
async fn rolling_availability() -> Outcome {
    let mut c = Cluster::start(&[("web", "v1", 3)], "").await?;
    let r = rolling_inner(&mut c).await;
    c.stop().await;
    r
}

async fn rolling_inner(c: &mut Cluster) -> Outcome {
    let ext = c.external(0);
    greet(ext, None)
        .await
        .map_err(|e| format!("ingress not serving: {e}"))?;

    let stop = Arc::new(AtomicBool::new(false));
    let hammer = {
        let stop = stop.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(Duration::from_millis(50));
            let mut conns = Vec::new();
            while !stop.load(Ordering::SeqCst) {
                tick.tick().await;
                conns.push(tokio::spawn(greet(ext, None)));
            }
            let mut results = Vec::new();
            for c in conns {
                results.push(c.await.unwrap());
            }
            results
        })
    };
    tokio::time::sleep(Duration::from_millis(500)).await;
    let mut spec = c.topology.challenge("web").unwrap().clone();
    spec.version = "v2".into();
    let update = c.platform.rolling_update("be1", spec, None).await;
    tokio::time::sleep(Duration::from_millis(500)).await;
    stop.store(true, Ordering::SeqCst);
    let results = hammer.await.map_err(|e| e.to_string())?;

    let report = update.map_err(|e| e.to_string())?;
    check(!report.partial && report.replaced() == 3, || {
        format!("update {report:?}")
    })?;
    let failures: Vec<String> = results
        .iter()
        .filter_map(|r| r.as_ref().err().map(|e| e.to_string()))
        .collect();
    let versions: BTreeMap<&str, usize> = results.iter().flatten().fold(BTreeMap::new(), |mut m, g| {
        *m.entry(version_of(g)).or_default() += 1;
        m
    });
    check(failures.is_empty(), || {
        format!(
            "{} of {} connections failed: {:?}",
            failures.len(),
            results.len(),
            failures
        )
    })?;
    check(versions.contains_key("v2"), || format!("never saw v2: {versions:?}"))?;
    Ok(format!(
        "{} connections at 20/s, 0 failures, versions seen {versions:?}",
        results.len()
    ))
}

// 6. Idempotent converge
async fn idempotent_apply() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let state_path = dir.path().join("state");
    let layout = Layout::new();
    let topo = write_file(
        &dir.path().join("topology"),
        &layout.topology_text(&[("web", "v1", 2), ("pwn", "v1", 1)], ""),
    );
    let topo_arg = topo.to_str().unwrap();
    let state = StateDir::new(&state_path);
    let r = async {
        let (code, first) = flagforge(&state_path, &["apply", topo_arg]).await;
        check(code == 0, || format!("first apply exit {code}: {first}"))?;
        let map1 = std::fs::read(state.ingress_map()).map_err(|e| e.to_string())?;
        let (code, second) = flagforge(&state_path, &["apply", topo_arg]).await;
        let map2 = std::fs::read(state.ingress_map()).map_err(|e| e.to_string())?;
        check(code == 0 && second.trim_end() == "0 changes", || {
            format!("second apply exit {code}: {second}")
        })?;
        check(map1 == map2, || "ingress.map changed between runs".into())?;
        let mappings = String::from_utf8_lossy(&map1).lines().count();
        check(mappings == 2, || format!("{mappings} ingress mappings"))?;
        Ok(format!(
            "first run: {}; second run: 0 changes; ingress.map identical ({mappings} mappings)",
            first.lines().last().unwrap_or("")
        ))
    }
    .await;
    if let Ok(Some(ns)) = state.load_node("be1") {
        for svc in &ns.services {
            for rep in &svc.replicas {
                kill_group(rep.handle);
            }
        }
    }
    r
}

// 7. Isolation
async fn isolation() -> Outcome {
    let c = Cluster::start(&[("alpha", "v1", 2), ("bravo", "v1", 2)], "").await?;
    let r = isolation_inner(&c).await;
    c.stop().await;
    r
}

async fn isolation_inner(c: &Cluster) -> Outcome {
    let mut total = 0;
    for (i, name, other) in [(0u16, "alpha", "bravo"), (1, "bravo", "alpha")] {
        let own: BTreeSet<String> = c.replica_ids(name).into_iter().collect();
        let foreign: BTreeSet<String> = c.replica_ids(other).into_iter().collect();
        let balancer = c.balancer(name);
        for n in 0..100u8 {
            // Half through the ingress, half straight at the balancer with
            // distinct sources so every replica is exercised.
            let g = if n % 2 == 0 {
                greet(c.external(i), None).await
            } else {
                greet(balancer, Some(Ipv4Addr::new(10, 7, i as u8, n))).await
            }
            .map_err(|e| format!("{name} connection {n}: {e}"))?;
            let id = replica_of(&g).to_string();
            check(own.contains(&id) && !foreign.contains(&id), || {
                format!("{name} connection {n} answered by {id}")
            })?;
            total += 1;
        }
    }
    Ok(format!("{total} connections, none crossed challenges"))
}

// 8. Stick-table model equivalence

/// Brute-force stick table: a plain list scanned on every operation.
struct ModelTable {
    entries: Vec<(IpAddr, String, u64, u64)>, // ip, replica, last_seen ms, last use
    uses: u64,
    capacity: usize,
    ttl_ms: u64,
    cursor: usize,
}

impl ModelTable {
    fn connect(&mut self, replicas: &[(String, bool)], ip: IpAddr, now: u64) -> Option<String> {
        self.uses += 1;
        let live = |r: &str| replicas.iter().any(|(id, up)| id == r && *up);
        if let Some(e) = self.entries.iter_mut().find(|e| e.0 == ip) {
            if now - e.2 <= self.ttl_ms && live(&e.1) {
                e.2 = now;
                e.3 = self.uses;
                return Some(e.1.clone());
            }
        }
        let n = replicas.len();
        let pick = (0..n).map(|i| (self.cursor + i) % n).find(|&i| replicas[i].1)?;
        self.cursor = (pick + 1) % n;
        let chosen = replicas[pick].0.clone();
        if let Some(pos) = self.entries.iter().position(|e| e.0 == ip) {
            self.entries.remove(pos);
        } else if self.entries.len() >= self.capacity {
            let lru = (0..self.entries.len()).min_by_key(|&i| self.entries[i].3).unwrap();
            self.entries.remove(lru);
        }
        self.entries.push((ip, chosen.clone(), now, self.uses));
        Some(chosen)
    }

    fn expire(&mut self, now: u64) -> usize {
        let before = self.entries.len();
        self.entries.retain(|e| now - e.2 <= self.ttl_ms);
        before - self.entries.len()
    }
}

fn endpoints(replicas: &[(String, bool)]) -> Vec<ReplicaEndpoint> {
    replicas
        .iter()
        .enumerate()
        .map(|(i, (id, up))| ReplicaEndpoint {
            id: ReplicaId::new(id.as_str()),
            address: IpAddr::V4(Ipv4Addr::LOCALHOST),
            port: 30_000 + i as u16,
            version: "v1".into(),
            health: if *up { Health::Healthy } else { Health::Unhealthy },
        })
        .collect()
}

fn replay(seed: u64, events: usize) -> (Vec<String>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let capacity = 16;
    let ttl = Duration::from_secs(10);
    let mut replicas: Vec<(String, bool)> = (1..=4).map(|i| (format!("r{i}"), true)).collect();
    let mut prod = Selector::new(capacity, ttl);
    let mut model = ModelTable {
        entries: Vec::new(),
        uses: 0,
        capacity,
        ttl_ms: ttl.as_millis() as u64,
        cursor: 0,
    };
    let mut now = 0u64;
    let mut fresh = 0u32;
    let (mut a, mut b) = (Vec::with_capacity(events), Vec::with_capacity(events));
    for _ in 0..events {
        let roll = rng.gen_range(0..100);
        let ip_for = |n: u32| IpAddr::V4(Ipv4Addr::from(0x0a00_0000 + n));
        match roll {
            0..=69 => {
                let ip = if roll < 55 {
                    ip_for(rng.gen_range(0..24))
                } else {
                    // Capacity pressure: a source never seen before.
                    fresh += 1;
                    ip_for(1000 + fresh)
                };
                let eps = endpoints(&replicas);
                let got = prod
                    .select(&eps, |_| true, ip, Timestamp::from_millis(now))
                    .map(|r| r.id.to_string());
                a.push(format!("connect {ip} {got:?} len={}", prod.table.len()));
                let want = model.connect(&replicas, ip, now);
                b.push(format!("connect {ip} {want:?} len={}", model.entries.len()));
            }
            70..=79 => {
                let k = rng.gen_range(0..replicas.len());
                replicas[k].1 = !replicas[k].1;
                a.push(format!("flip {k}"));
                b.push(format!("flip {k}"));
            }
            80..=94 => {
                now += rng.gen_range(0..4_000);
                a.push(format!("advance {now}"));
                b.push(format!("advance {now}"));
            }
            _ => {
                a.push(format!("expire {}", prod.table.expire(Timestamp::from_millis(now))));
                b.push(format!("expire {}", model.expire(now)));
            }
        }
    }
    (a, b)
}

async fn model_equivalence() -> Outcome {
    let mut events = 0;
    for seed in 0..100u64 {
        let (prod, model) = replay(seed, 10_000);
        if let Some(i) = (0..prod.len()).find(|&i| prod[i] != model[i]) {
            return Err(format!(
                "seed {seed} event {i}: table {:?} vs model {:?}",
                prod[i], model[i]
            ));
        }
        events += prod.len();
    }
    Ok(format!("100 seeds x 10000 events, {events} identical decisions"))
}

// 9. Status round-trip
fn random_name(rng: &mut ChaCha8Rng, first: &[u8], rest: &[u8], max: usize) -> String {
    let len = rng.gen_range(0..max);
    let mut s = String::new();
    s.push(first[rng.gen_range(0..first.len())] as char);
    for _ in 0..len {
        s.push(rest[rng.gen_range(0..rest.len())] as char);
    }
    s
}

async fn status_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let lower = b"abcdefghijklmnopqrstuvwxyz";
    let name_chars = b"abcdefghijklmnopqrstuvwxyz0123456789-";
    let version_chars = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789._-";
    let mut keys = BTreeSet::new();
    let mut records = Vec::new();
    while records.len() < 1000 {
        let challenge = random_name(&mut rng, lower, name_chars, 12);
        let backend = random_name(&mut rng, lower, name_chars, 8);
        if !keys.insert((challenge.clone(), backend.clone())) {
            continue;
        }
        records.push(StatusRecord {
            challenge,
            backend: NodeId::new(backend),
            version: random_name(&mut rng, version_chars, version_chars, 9),
            state: [DeployState::Pending, DeployState::Deployed, DeployState::Failed][rng.gen_range(0..3)],
            timestamp: Timestamp::from_millis(rng.gen_range(0..4_102_444_800_000)),
        });
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("latest-build.txt");
    write_status(&path, &records).map_err(|e| e.to_string())?;

    let junk = [
        "garbage",
        "challenge=web",
        "challenge=web backend=be1 version=1 state=bogus ts=2026-01-01T00:00:00.000Z",
        "challenge=web backend=be1 version=1 state=deployed ts=yesterday",
        "challenge=web backend=be1 version=1 state=deployed",
        "challenge=web challenge=web backend=be1 version=1 state=deployed ts=2026-01-01T00:00:00.000Z",
        "backend=be1 version=1 state=deployed ts=2026-01-01T00:00:00.000Z extra=1",
    ];
    let mut lines: Vec<String> = std::fs::read_to_string(&path)
        .map_err(|e| e.to_string())?
        .lines()
        .map(str::to_string)
        .collect();
    let mut injected = BTreeSet::new();
    for i in 0..50 {
        let at = rng.gen_range(0..=lines.len());
        lines.insert(at, junk[i % junk.len()].to_string());
    }
    for (i, l) in lines.iter().enumerate() {
        if junk.contains(&l.as_str()) {
            injected.insert(i + 1);
        }
    }
    std::fs::write(&path, lines.join("\n") + "\n").map_err(|e| e.to_string())?;

    let read = read_status(&path).map_err(|e| e.to_string())?;
    let mut got = read.records.clone();
    got.sort();
    records.sort();
    check(got == records, || {
        format!("read {} records, wrote {}", got.len(), records.len())
    })?;
    let skipped: BTreeSet<usize> = read.skipped.iter().map(|s| s.0).collect();
    check(skipped == injected, || {
        format!("skipped lines {skipped:?}, injected {injected:?}")
    })?;
    Ok(format!(
        "1000 records round-tripped; {} malformed lines skipped and reported",
        skipped.len()
    ))
}

fn main() {
    let rt = tokio::runtime::Runtime::new().expect("runtime");
    let started = Instant::now();
    let mut failed = 0;
    rt.block_on(async {
        let criteria: [(u32, &str); 9] = [
            (1, "session persistence"),
            (2, "first-contact fairness"),
            (3, "failover and self-healing"),
            (4, "pipeline convergence"),
            (5, "rolling availability"),
            (6, "idempotent converge"),
            (7, "isolation"),
            (8, "stick-table model equivalence"),
            (9, "status round-trip"),
        ];
        for (n, title) in criteria {
            let t = Instant::now();
            let outcome = match n {
                1 => session_persistence().await,
                2 => first_contact_fairness().await,
                3 => failover().await,
                4 => pipeline_convergence().await,
                5 => rolling_availability().await,
                6 => idempotent_apply().await,
                7 => isolation().await,
                8 => model_equivalence().await,
                _ => status_round_trip().await,
            };
            let secs = t.elapsed().as_secs_f64();
            match outcome {
                Ok(detail) => println!("PASS {n} {title} ({secs:.1}s): {detail}"),
                Err(e) => {
                    failed += 1;
                    println!("FAIL {n} {title} ({secs:.1}s): {e}");
                }
            }
        }
    });
    println!(
        "acceptance: {} passed, {failed} failed in {:.1}s",
        9 - failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
