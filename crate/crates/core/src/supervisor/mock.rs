use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use tokio::task::JoinHandle;

use super::runner::{starting_endpoint, RunnerBackend, RunnerError, RunnerHandle, SpawnRequest, Spawned};
use crate::fixture::serve_identity_echo;
use crate::ids::ReplicaId;

/// In-process runner: every replica is an identity-echo task on the
/// assigned port. Must be used from inside a tokio runtime.
#[derive(Default)]
pub struct MockRunner {
    next: AtomicU64,
    procs: Mutex<HashMap<u64, (ReplicaId, JoinHandle<()>)>>,
    /// Versions whose replicas exit right after starting.
    crashing: Mutex<HashSet<String>>,
    /// Versions that cannot be spawned at all.
    unspawnable: Mutex<HashSet<String>>,
    spawns: AtomicU64,
}

impl MockRunner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn crash_on_start(&self, version: &str) {
        self.crashing.lock().unwrap().insert(version.to_string());
    }

    pub fn refuse_spawn(&self, version: &str) {
        self.unspawnable.lock().unwrap().insert(version.to_string());
    }

    pub fn clear_faults(&self) {
        self.crashing.lock().unwrap().clear();
        self.unspawnable.lock().unwrap().clear();
    }

    /// Simulates the replica's process dying.
    pub fn kill(&self, replica: &ReplicaId) -> bool {
        let procs = self.procs.lock().unwrap();
        match procs.values().find(|(id, _)| id == replica) {
            Some((_, task)) => {
                task.abort();
                true
            }
            None => false,
        }
    }

    pub fn spawn_count(&self) -> u64 {
        self.spawns.load(Ordering::Relaxed)
    }

    pub fn running(&self) -> usize {
        self.procs
            .lock()
            .unwrap()
            .values()
            .filter(|(_, t)| !t.is_finished())
            .count()
    }
}

impl RunnerBackend for MockRunner {
    fn spawn(&self, req: &SpawnRequest<'_>) -> Result<Spawned, RunnerError> {
        let version = &req.spec.version;
        if self.unspawnable.lock().unwrap().contains(version) {
            return Err(RunnerError::Spawn(format!("version {version} is not spawnable")));
        }
        let task = if self.crashing.lock().unwrap().contains(version) {
            tokio::spawn(async {})
        } else {
            let std_listener = std::net::TcpListener::bind((req.address, req.port))?;
            std_listener.set_nonblocking(true)?;
            let listener = tokio::net::TcpListener::from_std(std_listener)?;
            tokio::spawn(serve_identity_echo(
                listener,
                req.replica_id.to_string(),
                version.clone(),
            ))
        };
        let handle = RunnerHandle(self.next.fetch_add(1, Ordering::Relaxed) + 1);
        self.spawns.fetch_add(1, Ordering::Relaxed);
        self.procs
            .lock()
            .unwrap()
            .insert(handle.0, (req.replica_id.clone(), task));
        Ok(Spawned {
            handle,
            endpoint: starting_endpoint(req),
        })
    }

    fn stop(&self, handle: RunnerHandle) {
        if let Some((_, task)) = self.procs.lock().unwrap().get(&handle.0) {
            task.abort();
        }
    }

    /// A stopped task counts as alive until its listener is actually gone.
    fn alive(&self, handle: RunnerHandle) -> bool {
        let mut procs = self.procs.lock().unwrap();
        match procs.get(&handle.0) {
            Some((_, t)) if !t.is_finished() => true,
            Some(_) => {
                procs.remove(&handle.0);
                false
            }
            None => false,
        }
    }
}

impl Drop for MockRunner {
    fn drop(&mut self) {
        for (_, (_, task)) in self.procs.lock().unwrap().drain() {
            task.abort();
        }
    }
}
