use std::collections::{BTreeMap, HashMap};
use std::net::IpAddr;
use std::time::Duration;

use crate::ids::ReplicaId;
use crate::registry::{Health, ReplicaEndpoint};
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StickEntry {
    pub source_ip: IpAddr,
    pub replica: ReplicaId,
    pub last_seen: Timestamp,
}

#[derive(Debug, Clone)]
struct Slot {
    entry: StickEntry,
    /// Recency stamp; larger is more recent.
    touch: u64,
}

/// Source-IP → replica pins with a sliding TTL and an LRU capacity bound.
#[derive(Debug, Clone)]
pub struct StickTable {
    slots: HashMap<IpAddr, Slot>,
    recency: BTreeMap<u64, IpAddr>,
    next_touch: u64,
    capacity: usize,
    ttl: Duration,
}

impl StickTable {
    pub fn new(capacity: usize, ttl: Duration) -> Self {
        assert!(capacity > 0, "stick table capacity must be positive");
        StickTable {
            slots: HashMap::new(),
            recency: BTreeMap::new(),
            next_touch: 0,
            capacity,
            ttl,
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }

    fn expired(&self, entry: &StickEntry, now: Timestamp) -> bool {
        now.since(entry.last_seen) > self.ttl
    }

    pub fn get(&self, ip: &IpAddr) -> Option<&StickEntry> {
        self.slots.get(ip).map(|s| &s.entry)
    }

    /// The pinned replica for `ip`, unless the pin has outlived the TTL.
    pub fn lookup(&self, ip: &IpAddr, now: Timestamp) -> Option<&ReplicaId> {
        self.slots
            .get(ip)
            .filter(|s| !self.expired(&s.entry, now))
            .map(|s| &s.entry.replica)
    }

    fn stamp(&mut self, ip: IpAddr) -> u64 {
        let t = self.next_touch;
        self.next_touch += 1;
        self.recency.insert(t, ip);
        t
    }

    pub fn touch(&mut self, ip: &IpAddr, now: Timestamp) {
        let Some(old) = self.slots.get(ip).map(|s| s.touch) else {
            return;
        };
        self.recency.remove(&old);
        let t = self.stamp(*ip);
        let slot = self.slots.get_mut(ip).unwrap();
        slot.touch = t;
        slot.entry.last_seen = now;
    }

    /// Pins `ip` to `replica`. Returns the evicted source when the table was
    /// full and `ip` was not already present.
    pub fn insert(&mut self, ip: IpAddr, replica: ReplicaId, now: Timestamp) -> Option<IpAddr> {
        let mut evicted = None;
        if let Some(old) = self.slots.remove(&ip) {
            self.recency.remove(&old.touch);
        } else if self.slots.len() >= self.capacity {
            if let Some((_, lru)) = self.recency.pop_first() {
                self.slots.remove(&lru);
                evicted = Some(lru);
            }
        }
        let touch = self.stamp(ip);
        self.slots.insert(
            ip,
            Slot {
                entry: StickEntry {
                    source_ip: ip,
                    replica,
                    last_seen: now,
                },
                touch,
            },
        );
        evicted
    }

    fn remove_where(&mut self, pred: impl Fn(&StickEntry) -> bool) -> usize {
        let doomed: Vec<(IpAddr, u64)> = self
            .slots
            .iter()
            .filter(|(_, s)| pred(&s.entry))
            .map(|(ip, s)| (*ip, s.touch))
            .collect();
        for (ip, touch) in &doomed {
            self.slots.remove(ip);
            self.recency.remove(touch);
        }
        doomed.len()
    }

    /// Removes entries idle for strictly longer than the TTL.
    pub fn expire(&mut self, now: Timestamp) -> usize {
        let ttl = self.ttl;
        self.remove_where(|e| now.since(e.last_seen) > ttl)
    }

    pub fn invalidate(&mut self, replica: &ReplicaId) -> usize {
        self.remove_where(|e| &e.replica == replica)
    }

    pub fn entries(&self) -> impl Iterator<Item = &StickEntry> {
        self.slots.values().map(|s| &s.entry)
    }
}

/// Stick table plus round-robin cursor for one service.
#[derive(Debug, Clone)]
pub struct Selector {
    pub table: StickTable,
    next: usize,
}

impl Selector {
    pub fn new(capacity: usize, ttl: Duration) -> Self {
        Selector {
            table: StickTable::new(capacity, ttl),
            next: 0,
        }
    }

    /// Picks a replica for `ip` among `replicas` (registration order).
    ///
    /// A live pin to an eligible replica wins and is refreshed. Otherwise
    /// the round-robin cursor walks the registered list from where it last
    /// stopped, skipping ineligible replicas, and the result is pinned.
    pub fn select(
        &mut self,
        replicas: &[ReplicaEndpoint],
        eligible: impl Fn(&ReplicaEndpoint) -> bool,
        ip: IpAddr,
        now: Timestamp,
    ) -> Option<ReplicaEndpoint> {
        let usable = |r: &ReplicaEndpoint| r.health == Health::Healthy && eligible(r);
        if let Some(pinned) = self.table.lookup(&ip, now) {
            if let Some(r) = replicas.iter().find(|r| &r.id == pinned && usable(r)) {
                let r = r.clone();
                self.table.touch(&ip, now);
                return Some(r);
            }
        }
        let n = replicas.len();
        for i in 0..n {
            let idx = (self.next + i) % n;
            if usable(&replicas[idx]) {
                self.next = (idx + 1) % n;
                let r = replicas[idx].clone();
                self.table.insert(ip, r.id.clone(), now);
                return Some(r);
            }
        }
        None
    }
}
