use std::collections::HashMap;
use std::fs::OpenOptions;
use std::net::IpAddr;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::ids::ReplicaId;
use crate::model::ChallengeSpec;
use crate::registry::{Health, ReplicaEndpoint};

/// Opaque token for one running replica. For the subprocess runner it is
/// the process id of the replica's process group leader.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RunnerHandle(pub u64);

pub struct SpawnRequest<'a> {
    pub spec: &'a ChallengeSpec,
    pub replica_id: &'a ReplicaId,
    pub address: IpAddr,
    pub port: u16,
    /// Unpacked artifact payload, when the service is artifact-managed.
    pub workdir: Option<&'a Path>,
}

#[derive(Debug)]
pub struct Spawned {
    pub handle: RunnerHandle,
    pub endpoint: ReplicaEndpoint,
}

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("spawn failed: {0}")]
    Spawn(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub trait RunnerBackend: Send + Sync {
    fn spawn(&self, req: &SpawnRequest<'_>) -> Result<Spawned, RunnerError>;
    /// Idempotent; returns without waiting for the replica to exit.
    fn stop(&self, handle: RunnerHandle);
    fn alive(&self, handle: RunnerHandle) -> bool;
    /// Whether `handle` is alive and still runs `replica`; used before
    /// taking over replicas recorded by an earlier process.
    fn owns(&self, handle: RunnerHandle, replica: &ReplicaId) -> bool {
        let _ = replica;
        self.alive(handle)
    }
}

pub(crate) fn starting_endpoint(req: &SpawnRequest<'_>) -> ReplicaEndpoint {
    ReplicaEndpoint {
        id: req.replica_id.clone(),
        address: req.address,
        port: req.port,
        version: req.spec.version.clone(),
        health: Health::Starting,
    }
}

pub const ENV_REPLICA_ID: &str = "FLAGFORGE_REPLICA_ID";
pub const ENV_VERSION: &str = "FLAGFORGE_VERSION";
pub const ENV_CHALLENGE: &str = "FLAGFORGE_CHALLENGE";

/// Runs each replica as `sh -c <run>` in its own process group, with
/// output appended to `<log_dir>/<replica_id>.log`.
pub struct SubprocessRunner {
    log_dir: PathBuf,
    stop_grace: Duration,
    /// Replicas outlive the runner when set; otherwise dropping the runner
    /// kills everything it spawned.
    detach: bool,
    children: Arc<Mutex<HashMap<u64, Child>>>,
}

impl SubprocessRunner {
    pub fn new(log_dir: impl Into<PathBuf>) -> Self {
        SubprocessRunner {
            log_dir: log_dir.into(),
            stop_grace: Duration::from_secs(3),
            detach: false,
            children: Arc::new(Mutex::new(HashMap::new())),
        }
    }

    pub fn detached(mut self, detach: bool) -> Self {
        self.detach = detach;
        self
    }

    pub fn with_stop_grace(mut self, grace: Duration) -> Self {
        self.stop_grace = grace;
        self
    }

    pub fn log_path(&self, replica: &ReplicaId) -> PathBuf {
        self.log_dir.join(format!("{replica}.log"))
    }
}

fn signal_group(pid: u64, sig: libc::c_int) {
    if pid == 0 || pid > i32::MAX as u64 {
        return;
    }
    // SAFETY: plain syscall on a process group id.
    unsafe {
        libc::killpg(pid as libc::pid_t, sig);
    }
}

/// Whether `pid` names a running, non-zombie process.
pub fn pid_alive(pid: u64) -> bool {
    if pid == 0 || pid > i32::MAX as u64 {
        return false;
    }
    // SAFETY: signal 0 only performs the existence and permission check.
    let rc = unsafe { libc::kill(pid as libc::pid_t, 0) };
    if rc != 0 && std::io::Error::last_os_error().raw_os_error() != Some(libc::EPERM) {
        return false;
    }
    match std::fs::read_to_string(format!("/proc/{pid}/stat")) {
        // The state field follows the parenthesised command name.
        Ok(stat) => match stat.rfind(')') {
            Some(i) => !matches!(stat[i + 1..].trim_start().chars().next(), Some('Z' | 'X')),
            None => true,
        },
        Err(_) => rc == 0,
    }
}

fn child_alive(children: &Mutex<HashMap<u64, Child>>, pid: u64) -> bool {
    let mut children = children.lock().unwrap();
    if let Some(child) = children.get_mut(&pid) {
        return match child.try_wait() {
            Ok(None) => true,
            _ => {
                children.remove(&pid);
                false
            }
        };
    }
    drop(children);
    pid_alive(pid)
}

impl RunnerBackend for SubprocessRunner {
    fn spawn(&self, req: &SpawnRequest<'_>) -> Result<Spawned, RunnerError> {
        std::fs::create_dir_all(&self.log_dir)?;
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.log_path(req.replica_id))?;
        let mut cmd = Command::new("sh");
        cmd.arg("-c")
            .arg(req.spec.command_for(req.port))
            .stdin(Stdio::null())
            .stdout(log.try_clone()?)
            .stderr(log)
            .env("PORT", req.port.to_string())
            .env(ENV_REPLICA_ID, req.replica_id.as_str())
            .env(ENV_VERSION, &req.spec.version)
            .env(ENV_CHALLENGE, &req.spec.name)
            .process_group(0);
        if let Some(dir) = req.workdir {
            cmd.current_dir(dir);
        }
        let child = cmd.spawn().map_err(|e| RunnerError::Spawn(e.to_string()))?;
        let pid = child.id() as u64;
        self.children.lock().unwrap().insert(pid, child);
        Ok(Spawned {
            handle: RunnerHandle(pid),
            endpoint: starting_endpoint(req),
        })
    }

    fn stop(&self, handle: RunnerHandle) {
        let pid = handle.0;
        if !child_alive(&self.children, pid) {
            // Stray group members may outlive the leader.
            signal_group(pid, libc::SIGKILL);
            return;
        }
        signal_group(pid, libc::SIGTERM);
        let children = self.children.clone();
        let grace = self.stop_grace;
        std::thread::spawn(move || {
            let deadline = Instant::now() + grace;
            while Instant::now() < deadline {
                if !child_alive(&children, pid) {
                    signal_group(pid, libc::SIGKILL);
                    return;
                }
                std::thread::sleep(Duration::from_millis(20));
            }
            signal_group(pid, libc::SIGKILL);
            if let Some(mut child) = children.lock().unwrap().remove(&pid) {
                let _ = child.wait();
            }
        });
    }

    fn alive(&self, handle: RunnerHandle) -> bool {
        child_alive(&self.children, handle.0)
    }

    /// Guards against pid reuse by checking the replica id in the
    /// process environment when it is readable.
    fn owns(&self, handle: RunnerHandle, replica: &ReplicaId) -> bool {
        if !self.alive(handle) {
            return false;
        }
        let path = format!("/proc/{}/environ", handle.0);
        let want = format!("{ENV_REPLICA_ID}={replica}");
        // Reads come back empty while the process is in the middle of exec.
        for _ in 0..20 {
            match std::fs::read(&path) {
                Ok(env) if env.is_empty() => std::thread::sleep(Duration::from_millis(5)),
                Ok(env) => return env.split(|&b| b == 0).any(|kv| kv == want.as_bytes()),
                Err(_) => return self.alive(handle),
            }
        }
        self.alive(handle)
    }
}

impl Drop for SubprocessRunner {
    fn drop(&mut self) {
        if self.detach {
            return;
        }
        for (pid, mut child) in self.children.lock().unwrap().drain() {
            signal_group(pid, libc::SIGKILL);
            let _ = child.wait();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ProbeSpec;

    fn spec(run: &str) -> ChallengeSpec {
        ChallengeSpec {
            name: "t".into(),
            version: "1".into(),
            replicas: 1,
            internal_port: 80,
            external_port: 9000,
            backend: "be".into(),
            run: run.into(),
            probe: ProbeSpec::tcp(),
            network: "net-t".into(),
        }
    }

    fn wait_dead(r: &SubprocessRunner, h: RunnerHandle) -> bool {
        let deadline = Instant::now() + Duration::from_secs(5);
        while Instant::now() < deadline {
            if !r.alive(h) {
                return true;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        false
    }

    #[test]
    fn spawn_env_log_and_stop() {
        let dir = tempfile::tempdir().unwrap();
        let runner = SubprocessRunner::new(dir.path().join("logs")).with_stop_grace(Duration::from_millis(500));
        let s = spec("echo \"$FLAGFORGE_REPLICA_ID $FLAGFORGE_VERSION $PORT {PORT}\"; exec sleep 30");
        let id = ReplicaId::new("t-r1");
        let req = SpawnRequest {
            spec: &s,
            replica_id: &id,
            address: "127.0.0.1".parse().unwrap(),
            port: 4242,
            workdir: None,
        };
        let spawned = runner.spawn(&req).unwrap();
        assert!(runner.alive(spawned.handle));
        assert!(runner.owns(spawned.handle, &id));
        assert!(!runner.owns(spawned.handle, &ReplicaId::new("t-r9")));
        assert_eq!(spawned.endpoint.health, Health::Starting);
        let log_path = runner.log_path(&id);
        let deadline = Instant::now() + Duration::from_secs(5);
        while std::fs::read_to_string(&log_path).unwrap_or_default().is_empty() && Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(10));
        }
        runner.stop(spawned.handle);
        runner.stop(spawned.handle);
        assert!(wait_dead(&runner, spawned.handle));
        assert!(!runner.owns(spawned.handle, &id));
        let log = std::fs::read_to_string(log_path).unwrap();
        assert_eq!(log, "t-r1 1 4242 4242\n");
    }

    #[test]
    fn stubborn_process_is_killed_after_grace() {
        let dir = tempfile::tempdir().unwrap();
        let runner = SubprocessRunner::new(dir.path()).with_stop_grace(Duration::from_millis(200));
        let s = spec("trap '' TERM; while :; do sleep 0.05; done # {PORT}");
        let id = ReplicaId::new("t-r2");
        let req = SpawnRequest {
            spec: &s,
            replica_id: &id,
            address: "127.0.0.1".parse().unwrap(),
            port: 1,
            workdir: None,
        };
        let h = runner.spawn(&req).unwrap().handle;
        std::thread::sleep(Duration::from_millis(100));
        runner.stop(h);
        assert!(wait_dead(&runner, h));
    }

    #[test]
    fn early_exit_is_not_alive() {
        let dir = tempfile::tempdir().unwrap();
        let runner = SubprocessRunner::new(dir.path());
        let s = spec("exit 3 # {PORT}");
        let id = ReplicaId::new("t-r3");
        let req = SpawnRequest {
            spec: &s,
            replica_id: &id,
            address: "127.0.0.1".parse().unwrap(),
            port: 1,
            workdir: None,
        };
        let h = runner.spawn(&req).unwrap().handle;
        assert!(wait_dead(&runner, h));
        assert!(!pid_alive(0));
    }
}
