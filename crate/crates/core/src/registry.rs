//! Runtime record of services, their private networks and replica
//! endpoints, with cyclic name resolution over the healthy replicas.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::net::IpAddr;
use std::sync::{Arc, Mutex, RwLock};

use thiserror::Error;

use crate::ids::ReplicaId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Health {
    Starting,
    Healthy,
    Unhealthy,
    Stopped,
}

impl Health {
    pub fn as_str(self) -> &'static str {
        match self {
            Health::Starting => "starting",
            Health::Healthy => "healthy",
            Health::Unhealthy => "unhealthy",
            Health::Stopped => "stopped",
        }
    }
}

impl fmt::Display for Health {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplicaEndpoint {
    pub id: ReplicaId,
    pub address: IpAddr,
    pub port: u16,
    pub version: String,
    pub health: Health,
}

impl ReplicaEndpoint {
    pub fn socket_addr(&self) -> std::net::SocketAddr {
        (self.address, self.port).into()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceRecord {
    pub name: String,
    pub network: String,
    /// Registration order.
    pub replicas: Vec<ReplicaEndpoint>,
    resolutions: u64,
}

impl ServiceRecord {
    pub fn healthy(&self) -> impl Iterator<Item = &ReplicaEndpoint> {
        self.replicas.iter().filter(|r| r.health == Health::Healthy)
    }

    /// Offset the next `resolve` will rotate by; always `< max(1, healthy)`.
    pub fn rotation_cursor(&self) -> usize {
        let h = self.healthy().count().max(1) as u64;
        (self.resolutions % h) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("unknown service {0}")]
    UnknownService(String),
    #[error("service {0} already exists")]
    DuplicateService(String),
    #[error("network {network} already belongs to service {owner}")]
    NetworkInUse { network: String, owner: String },
    #[error("service {0} still has replicas")]
    ServiceNotEmpty(String),
    #[error("duplicate replica_id {0}")]
    DuplicateReplica(ReplicaId),
    #[error("address {0} already used by replica {1}")]
    AddressInUse(std::net::SocketAddr, ReplicaId),
    #[error("unknown replica {0}")]
    UnknownReplica(ReplicaId),
}

/// Notified after registry changes, outside the registry lock.
pub trait RegistryObserver: Send + Sync {
    fn replica_removed(&self, service: &str, replica: &ReplicaId);

    /// Every health write, including ones that leave the value unchanged.
    fn health_written(&self, _service: &str, _replica: &ReplicaId, _health: Health) {}
}

#[derive(Default)]
struct Inner {
    services: BTreeMap<String, ServiceRecord>,
    owner: HashMap<ReplicaId, String>,
}

#[derive(Default)]
pub struct Registry {
    inner: Mutex<Inner>,
    observers: RwLock<Vec<Arc<dyn RegistryObserver>>>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.lock().unwrap();
        f.debug_struct("Registry").field("services", &inner.services).finish()
    }
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn subscribe(&self, observer: Arc<dyn RegistryObserver>) {
        self.observers.write().unwrap().push(observer);
    }

    fn notify(&self, f: impl Fn(&dyn RegistryObserver)) {
        for o in self.observers.read().unwrap().iter() {
            f(o.as_ref());
        }
    }

    /// Creates the service and its private network.
    pub fn create_service(&self, name: &str, network: &str) -> Result<(), RegistryError> {
        let mut inner = self.inner.lock().unwrap();
        if inner.services.contains_key(name) {
            return Err(RegistryError::DuplicateService(name.to_string()));
        }
        if let Some(owner) = inner.services.values().find(|s| s.network == network) {
            return Err(RegistryError::NetworkInUse {
                network: network.to_string(),
                owner: owner.name.clone(),
            });
        }
        inner.services.insert(
            name.to_string(),
            ServiceRecord {
                name: name.to_string(),
                network: network.to_string(),
                replicas: Vec::new(),
                resolutions: 0,
            },
        );
        Ok(())
    }

    /// Moves an existing service onto a different network.
    pub fn set_network(&self, name: &str, network: &str) -> Result<(), RegistryError> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(owner) = inner.services.values().find(|s| s.network == network && s.name != name) {
            return Err(RegistryError::NetworkInUse {
                network: network.to_string(),
                owner: owner.name.clone(),
            });
        }
        let svc = inner
            .services
            .get_mut(name)
            .ok_or_else(|| RegistryError::UnknownService(name.to_string()))?;
        svc.network = network.to_string();
        Ok(())
    }

    pub fn remove_service(&self, name: &str) -> Result<(), RegistryError> {
        let mut inner = self.inner.lock().unwrap();
        match inner.services.get(name) {
            None => Err(RegistryError::UnknownService(name.to_string())),
            Some(s) if !s.replicas.is_empty() => Err(RegistryError::ServiceNotEmpty(name.to_string())),
            Some(_) => {
                inner.services.remove(name);
                Ok(())
            }
        }
    }

    pub fn register_replica(&self, service: &str, endpoint: ReplicaEndpoint) -> Result<(), RegistryError> {
        let mut inner = self.inner.lock().unwrap();
        if !inner.services.contains_key(service) {
            return Err(RegistryError::UnknownService(service.to_string()));
        }
        if inner.owner.contains_key(&endpoint.id) {
            return Err(RegistryError::DuplicateReplica(endpoint.id));
        }
        let clash = inner
            .services
            .values()
            .flat_map(|s| s.replicas.iter())
            .find(|r| r.health != Health::Stopped && r.address == endpoint.address && r.port == endpoint.port);
        if let Some(r) = clash {
            return Err(RegistryError::AddressInUse(endpoint.socket_addr(), r.id.clone()));
        }
        inner.owner.insert(endpoint.id.clone(), service.to_string());
        inner.services.get_mut(service).unwrap().replicas.push(endpoint);
        Ok(())
    }

    /// Healthy replicas, left-rotated by the number of earlier resolutions
    /// of this service modulo the healthy count.
    pub fn resolve(&self, service: &str) -> Result<Vec<ReplicaEndpoint>, RegistryError> {
        let mut inner = self.inner.lock().unwrap();
        let svc = inner
            .services
            .get_mut(service)
            .ok_or_else(|| RegistryError::UnknownService(service.to_string()))?;
        let mut healthy: Vec<ReplicaEndpoint> = svc.healthy().cloned().collect();
        if !healthy.is_empty() {
            let k = (svc.resolutions % healthy.len() as u64) as usize;
            healthy.rotate_left(k);
        }
        svc.resolutions += 1;
        Ok(healthy)
    }

    pub fn mark_health(&self, replica: &ReplicaId, health: Health) -> Result<(), RegistryError> {
        let service = {
            let mut inner = self.inner.lock().unwrap();
            let service = inner
                .owner
                .get(replica)
                .cloned()
                .ok_or_else(|| RegistryError::UnknownReplica(replica.clone()))?;
            let svc = inner.services.get_mut(&service).expect("owner index out of sync");
            if let Some(r) = svc.replicas.iter_mut().find(|r| &r.id == replica) {
                r.health = health;
            }
            service
        };
        self.notify(|o| o.health_written(&service, replica, health));
        Ok(())
    }

    pub fn deregister_replica(&self, replica: &ReplicaId) -> Result<ReplicaEndpoint, RegistryError> {
        let (service, endpoint) = {
            let mut inner = self.inner.lock().unwrap();
            let service = inner
                .owner
                .remove(replica)
                .ok_or_else(|| RegistryError::UnknownReplica(replica.clone()))?;
            let svc = inner.services.get_mut(&service).expect("owner index out of sync");
            let idx = svc
                .replicas
                .iter()
                .position(|r| &r.id == replica)
                .expect("owner index out of sync");
            (service, svc.replicas.remove(idx))
        };
        self.notify(|o| o.replica_removed(&service, replica));
        Ok(endpoint)
    }

    pub fn service(&self, name: &str) -> Option<ServiceRecord> {
        self.inner.lock().unwrap().services.get(name).cloned()
    }

    /// Replicas in registration order, without advancing the rotation.
    pub fn endpoints(&self, name: &str) -> Result<Vec<ReplicaEndpoint>, RegistryError> {
        self.inner
            .lock()
            .unwrap()
            .services
            .get(name)
            .map(|s| s.replicas.clone())
            .ok_or_else(|| RegistryError::UnknownService(name.to_string()))
    }

    pub fn replica(&self, id: &ReplicaId) -> Option<ReplicaEndpoint> {
        let inner = self.inner.lock().unwrap();
        let service = inner.owner.get(id)?;
        inner.services[service].replicas.iter().find(|r| &r.id == id).cloned()
    }

    pub fn service_of(&self, id: &ReplicaId) -> Option<String> {
        self.inner.lock().unwrap().owner.get(id).cloned()
    }

    pub fn service_names(&self) -> Vec<String> {
        self.inner.lock().unwrap().services.keys().cloned().collect()
    }

    pub fn networks(&self) -> BTreeMap<String, String> {
        self.inner
            .lock()
            .unwrap()
            .services
            .values()
            .map(|s| (s.name.clone(), s.network.clone()))
            .collect()
    }

    /// True when no two services share a network.
    pub fn networks_isolated(&self) -> bool {
        let inner = self.inner.lock().unwrap();
        let mut seen = std::collections::BTreeSet::new();
        inner.services.values().all(|s| seen.insert(s.network.as_str()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn ep(id: &str, port: u16) -> ReplicaEndpoint {
        ReplicaEndpoint {
            id: ReplicaId::new(id),
            address: "127.0.0.1".parse().unwrap(),
            port,
            version: "1".into(),
            health: Health::Healthy,
        }
    }

    fn ids(v: &[ReplicaEndpoint]) -> Vec<&str> {
        v.iter().map(|r| r.id.as_str()).collect()
    }

    fn registry_with(n: usize) -> Registry {
        let reg = Registry::new();
        reg.create_service("web", "net-web").unwrap();
        for i in 1..=n {
            reg.register_replica("web", ep(&format!("r{i}"), 20000 + i as u16))
                .unwrap();
        }
        reg
    }

    /// Reference: filter the full list, rotate by call index.
    fn reference_resolve(all: &[(&str, bool)], call: usize) -> Vec<String> {
        let mut healthy: Vec<String> = Vec::new();
        for (id, ok) in all {
            if *ok {
                healthy.push(id.to_string());
            }
        }
        if healthy.is_empty() {
            return healthy;
        }
        let k = call % healthy.len();
        let mut out = healthy[k..].to_vec();
        out.extend_from_slice(&healthy[..k]);
        out
    }

    #[test]
    fn register_and_resolve_order() {
        let reg = registry_with(1);
        assert_eq!(ids(&reg.resolve("web").unwrap()), vec!["r1"]);
        reg.register_replica("web", ep("r2", 20002)).unwrap();
        assert_eq!(ids(&reg.endpoints("web").unwrap()), vec!["r1", "r2"]);
        assert_eq!(
            reg.register_replica("web", ep("r1", 20009)),
            Err(RegistryError::DuplicateReplica("r1".into()))
        );
        assert!(matches!(
            reg.register_replica("web", ep("r3", 20001)),
            Err(RegistryError::AddressInUse(..))
        ));
        assert_eq!(
            reg.register_replica("nope", ep("r4", 1)),
            Err(RegistryError::UnknownService("nope".into()))
        );
    }

    #[test]
    fn cyclic_rotation() {
        let reg = registry_with(3);
        assert_eq!(ids(&reg.resolve("web").unwrap()), vec!["r1", "r2", "r3"]);
        assert_eq!(ids(&reg.resolve("web").unwrap()), vec!["r2", "r3", "r1"]);
        assert_eq!(ids(&reg.resolve("web").unwrap()), vec!["r3", "r1", "r2"]);
    }

    #[test]
    fn rotation_skips_unhealthy() {
        let reg = registry_with(3);
        reg.mark_health(&"r2".into(), Health::Unhealthy).unwrap();
        let table = [("r1", true), ("r2", false), ("r3", true)];
        for call in 0..4 {
            let got = reg.resolve("web").unwrap();
            assert_eq!(ids(&got), reference_resolve(&table, call));
        }
        assert_eq!(reference_resolve(&table, 0), vec!["r1", "r3"]);
        assert_eq!(reference_resolve(&table, 1), vec!["r3", "r1"]);
    }

    #[test]
    fn health_changes() {
        let reg = registry_with(2);
        reg.mark_health(&"r2".into(), Health::Unhealthy).unwrap();
        assert_eq!(ids(&reg.resolve("web").unwrap()), vec!["r1"]);
        reg.mark_health(&"r1".into(), Health::Stopped).unwrap();
        assert!(reg.resolve("web").unwrap().is_empty());
        assert!(reg.service("web").unwrap().rotation_cursor() < 1);
        reg.mark_health(&"r1".into(), Health::Healthy).unwrap();
        reg.mark_health(&"r2".into(), Health::Healthy).unwrap();
        // r2 is back at its registration position; two resolutions so far.
        let expected = reference_resolve(&[("r1", true), ("r2", true)], 2);
        assert_eq!(ids(&reg.resolve("web").unwrap()), expected);
        assert!(matches!(
            reg.mark_health(&"zz".into(), Health::Healthy),
            Err(RegistryError::UnknownReplica(_))
        ));
    }

    #[test]
    fn deregister() {
        let reg = registry_with(3);
        reg.deregister_replica(&"r2".into()).unwrap();
        assert_eq!(ids(&reg.resolve("web").unwrap()), vec!["r1", "r3"]);
        assert_eq!(ids(&reg.resolve("web").unwrap()), vec!["r3", "r1"]);
        // Same address under a new id is fine once the old one is gone.
        reg.register_replica("web", ep("r9", 20002)).unwrap();
        assert!(matches!(
            reg.deregister_replica(&"r2".into()),
            Err(RegistryError::UnknownReplica(_))
        ));

        let solo = registry_with(1);
        solo.deregister_replica(&"r1".into()).unwrap();
        assert!(solo.resolve("web").unwrap().is_empty());
    }

    #[test]
    fn stopped_replica_frees_its_address() {
        let reg = registry_with(1);
        reg.mark_health(&"r1".into(), Health::Stopped).unwrap();
        reg.register_replica("web", ep("r2", 20001)).unwrap();
    }

    #[test]
    fn networks_are_exclusive() {
        let reg = registry_with(0);
        assert!(matches!(
            reg.create_service("api", "net-web"),
            Err(RegistryError::NetworkInUse { .. })
        ));
        reg.create_service("api", "net-api").unwrap();
        assert!(reg.networks_isolated());
        assert!(matches!(
            reg.set_network("api", "net-web"),
            Err(RegistryError::NetworkInUse { .. })
        ));
    }

    #[test]
    fn observers_see_removals() {
        struct Count(AtomicUsize);
        impl RegistryObserver for Count {
            fn replica_removed(&self, _: &str, _: &ReplicaId) {
                self.0.fetch_add(1, Ordering::SeqCst);
            }
        }
        let reg = registry_with(2);
        let c = Arc::new(Count(AtomicUsize::new(0)));
        reg.subscribe(c.clone());
        reg.deregister_replica(&"r1".into()).unwrap();
        assert_eq!(c.0.load(Ordering::SeqCst), 1);
    }

    proptest! {
        #[test]
        fn rotation_fairness(h in 1usize..8, k in 1usize..10) {
            let reg = registry_with(h);
            let mut firsts = HashMap::new();
            for _ in 0..h * k {
                let list = reg.resolve("web").unwrap();
                *firsts.entry(list[0].id.clone()).or_insert(0usize) += 1;
                prop_assert!(reg.service("web").unwrap().rotation_cursor() < h);
            }
            prop_assert_eq!(firsts.len(), h);
            prop_assert!(firsts.values().all(|&c| c == k));
        }

        #[test]
        fn resolve_only_returns_healthy(flags in proptest::collection::vec(0u8..4, 1..10), calls in 1usize..20) {
            let reg = registry_with(flags.len());
            for (i, f) in flags.iter().enumerate() {
                let h = [Health::Starting, Health::Healthy, Health::Unhealthy, Health::Stopped][*f as usize];
                reg.mark_health(&ReplicaId::new(format!("r{}", i + 1)), h).unwrap();
            }
            for _ in 0..calls {
                prop_assert!(reg.resolve("web").unwrap().iter().all(|r| r.health == Health::Healthy));
            }
        }
    }
}
