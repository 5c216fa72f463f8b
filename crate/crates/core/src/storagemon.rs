//! Heartbeat liveness, provisioning and the replication/repair daemon.
//!
//! The monitor sees the cluster only through heartbeats: a holder is stale once more
//! than `stale_after_secs` have passed since its last report. Every `cycle_secs` the
//! daemon sweeps for stale holders, queues repairs for shards below the replica target,
//! and performs at most `rate_limit` replications in strict priority order.
//! The simulated disks of the nodes live here too, so repairs move real shard bytes
//! and decodability can be checked against ground truth.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::erasure::{rs_decode, rs_encode, CodingParams, ErasureError, Shard};
use crate::tier::Tier;

/// Simulated seconds.
pub type Secs = u64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StorageError {
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("node {0} already registered")]
    DuplicateNode(String),
    #[error("replication cycle at {now} before next scheduled slot {next}")]
    NotScheduled { now: Secs, next: Secs },
    #[error("no storage-eligible node available for placement")]
    NoCapacity,
    #[error("invalid storage config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Erasure(#[from] ErasureError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StorageConfig {
    pub stale_after_secs: Secs,
    pub cycle_secs: Secs,
    pub replica_target: usize,
    pub replica_cap: usize,
    pub rate_limit: usize,
    pub min_read_mbps: f64,
    pub min_write_mbps: f64,
    pub initial_replicas: usize,
}

impl Default for StorageConfig {
    fn default() -> Self {
        Self {
            stale_after_secs: 120,
            cycle_secs: 30,
            replica_target: 3,
            replica_cap: 5,
            rate_limit: 4,
            min_read_mbps: 100.0,
            min_write_mbps: 50.0,
            initial_replicas: 1,
        }
    }
}

impl StorageConfig {
    pub fn validate(&self) -> Result<(), StorageError> {
        let bad = |m: &str| Err(StorageError::InvalidConfig(m.to_string()));
        if self.replica_target == 0 || self.replica_target > self.replica_cap {
            return bad("need 1 <= replica_target <= replica_cap");
        }
        if self.initial_replicas == 0 || self.initial_replicas > self.replica_cap {
            return bad("need 1 <= initial_replicas <= replica_cap");
        }
        if self.rate_limit == 0 || self.cycle_secs == 0 {
            return bad("rate_limit and cycle_secs must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: String,
    pub tier: Tier,
    pub read_mbps: f64,
    pub write_mbps: f64,
    pub last_heartbeat: Secs,
    pub region: String,
    pub bond: u64,
}

/// Tier after the throughput test: below either threshold means `mobile_light`.
pub fn provision_check(node: &NodeRecord, config: &StorageConfig) -> Tier {
    if node.read_mbps < config.min_read_mbps || node.write_mbps < config.min_write_mbps {
        Tier::MobileLight
    } else {
        node.tier
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Priority {
    Critical,
    High,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ShardRef {
    pub blob: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RepairTask {
    pub shard: ShardRef,
    pub priority: Priority,
    pub enqueued_at: Secs,
    seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Replicated { shard: ShardRef, priority: Priority, from: String, to: String },
    Reconstructed { shard: ShardRef, priority: Priority, to: String },
    Deferred { shard: ShardRef, priority: Priority },
    Unrecoverable { blob: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CycleReport {
    pub time: Secs,
    pub actions: Vec<Action>,
    pub replications: usize,
    pub queued_after: usize,
}

impl CycleReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("cycle report serializes")
    }
}

#[derive(Debug, Clone)]
struct BlobInfo {
    params: CodingParams,
    original_len: u64,
}

#[derive(Debug, Clone)]
pub struct StorageMonitor {
    config: StorageConfig,
    nodes: BTreeMap<String, NodeRecord>,
    effective: BTreeMap<String, Tier>,
    blobs: BTreeMap<String, BlobInfo>,
    holders: BTreeMap<ShardRef, BTreeSet<String>>,
    disks: BTreeMap<String, BTreeMap<ShardRef, Shard>>,
    queue: Vec<RepairTask>,
    next_seq: u64,
    last_cycle: Option<Secs>,
    lost: BTreeSet<String>,
}

impl StorageMonitor {
    pub fn new(config: StorageConfig) -> Result<Self, StorageError> {
        config.validate()?;
        Ok(Self {
            config,
            nodes: BTreeMap::new(),
            effective: BTreeMap::new(),
            blobs: BTreeMap::new(),
            holders: BTreeMap::new(),
            disks: BTreeMap::new(),
            queue: Vec::new(),
            next_seq: 0,
            last_cycle: None,
            lost: BTreeSet::new(),
        })
    }

    pub fn config(&self) -> &StorageConfig {
        &self.config
    }

    /// Registers a node and returns its tier after provisioning.
    pub fn register(&mut self, node: NodeRecord) -> Result<Tier, StorageError> {
        if self.nodes.contains_key(&node.id) {
            return Err(StorageError::DuplicateNode(node.id));
        }
        let tier = provision_check(&node, &self.config);
        self.effective.insert(node.id.clone(), tier);
        self.disks.insert(node.id.clone(), BTreeMap::new());
        self.nodes.insert(node.id.clone(), node);
        Ok(tier)
    }

    pub fn node(&self, id: &str) -> Option<&NodeRecord> {
        self.nodes.get(id)
    }

    pub fn tier_of(&self, id: &str) -> Option<Tier> {
        self.effective.get(id).copied()
    }

    pub fn heartbeat(&mut self, id: &str, now: Secs) -> Result<&NodeRecord, StorageError> {
        let n = self
            .nodes
            .get_mut(id)
            .ok_or_else(|| StorageError::UnknownNode(id.to_string()))?;
        n.last_heartbeat = n.last_heartbeat.max(now);
        Ok(n)
    }

    pub fn is_live(&self, id: &str, now: Secs) -> bool {
        self.nodes
            .get(id)
            .is_some_and(|n| now.saturating_sub(n.last_heartbeat) <= self.config.stale_after_secs)
    }

    fn storage_eligible(&self, id: &str) -> bool {
        self.effective.get(id).is_some_and(|t| t.stores_shards())
    }

    /// Simulated permanent failure: the node's disk is gone. The monitor only notices
    /// through missing heartbeats.
    pub fn crash(&mut self, id: &str) -> Result<(), StorageError> {
        self.disks
            .get_mut(id)
            .ok_or_else(|| StorageError::UnknownNode(id.to_string()))?
            .clear();
        Ok(())
    }

    pub fn live_holders(&self, shard: &ShardRef, now: Secs) -> BTreeSet<String> {
        self.holders
            .get(shard)
            .map(|h| h.iter().filter(|n| self.is_live(n, now)).cloned().collect())
            .unwrap_or_default()
    }

    pub fn replica_count(&self, shard: &ShardRef, now: Secs) -> usize {
        self.live_holders(shard, now).len()
    }

    pub fn blob_ids(&self) -> impl Iterator<Item = &String> {
        self.blobs.keys()
    }

    pub fn shard_refs(&self, blob: &str) -> Vec<ShardRef> {
        self.blobs
            .get(blob)
            .map(|b| {
                (0..b.params.total())
                    .map(|index| ShardRef { blob: blob.to_string(), index })
                    .collect()
            })
            .unwrap_or_default()
    }

    fn load(&self, id: &str) -> usize {
        self.disks.get(id).map_or(0, BTreeMap::len)
    }

    /// Best new holder for `shard`: a live storage-eligible node not already holding it,
    /// preferring regions absent among current holders, then the lightest load, then id.
    fn pick_target(&self, shard: &ShardRef, now: Secs) -> Option<String> {
        let holders = self.holders.get(shard);
        let regions: BTreeSet<&str> = self
            .live_holders(shard, now)
            .iter()
            .filter_map(|h| self.nodes.get(h).map(|n| n.region.as_str()))
            .collect();
        self.nodes
            .values()
            .filter(|n| self.storage_eligible(&n.id) && self.is_live(&n.id, now))
            .filter(|n| !holders.is_some_and(|h| h.contains(&n.id)))
            .min_by_key(|n| (regions.contains(n.region.as_str()), self.load(&n.id), n.id.clone()))
            .map(|n| n.id.clone())
    }

    fn place(&mut self, shard: &ShardRef, to: &str, data: Shard) {
        self.disks.get_mut(to).expect("registered").insert(shard.clone(), data);
        self.holders.entry(shard.clone()).or_default().insert(to.to_string());
    }

    /// Encodes and places a blob, `initial_replicas` copies per shard.
    pub fn store_blob(&mut self, blob: &[u8], params: CodingParams, now: Secs) -> Result<String, StorageError> {
        let shards = rs_encode(blob, params)?;
        let id = shards[0].blob_id_hex();
        self.blobs.insert(
            id.clone(),
            BlobInfo {
                params,
                original_len: blob.len() as u64,
            },
        );
        for s in shards {
            let r = ShardRef { blob: id.clone(), index: s.index };
            for _ in 0..self.config.initial_replicas {
                let to = self.pick_target(&r, now).ok_or(StorageError::NoCapacity)?;
                self.place(&r, &to, s.clone());
            }
        }
        Ok(id)
    }

    fn surviving(&self, blob: &str, now: Secs) -> usize {
        self.shard_refs(blob)
            .iter()
            .filter(|r| self.replica_count(r, now) > 0)
            .count()
    }

    fn priority_for(&self, blob: &str, now: Secs) -> Priority {
        let k = self.blobs[blob].params.k();
        match self.surviving(blob, now) {
            s if s <= k => Priority::Critical,
            s if s == k + 1 => Priority::High,
            _ => Priority::Normal,
        }
    }

    /// Stale shard holders at `now`. Also (re)queues repairs for every shard below the
    /// replica target and refreshes queued priorities. Repeating it without a state
    /// change returns the same set and leaves the queue unchanged.
    pub fn liveness_sweep(&mut self, now: Secs) -> BTreeSet<String> {
        let stale: BTreeSet<String> = self
            .holders
            .values()
            .flatten()
            .filter(|h| !self.is_live(h, now))
            .cloned()
            .collect();
        let blob_ids: Vec<String> = self.blobs.keys().cloned().collect();
        for blob in blob_ids {
            let prio = self.priority_for(&blob, now);
            for r in self.shard_refs(&blob) {
                if self.replica_count(&r, now) >= self.config.replica_target {
                    continue;
                }
                if let Some(t) = self.queue.iter_mut().find(|t| t.shard == r) {
                    t.priority = prio;
                } else {
                    self.queue.push(RepairTask {
                        shard: r,
                        priority: prio,
                        enqueued_at: now,
                        seq: self.next_seq,
                    });
                    self.next_seq += 1;
                }
            }
            for t in self.queue.iter_mut().filter(|t| t.shard.blob == blob) {
                t.priority = prio;
            }
        }
        stale
    }

    pub fn queue(&self) -> Vec<&RepairTask> {
        let mut q: Vec<&RepairTask> = self.queue.iter().collect();
        q.sort_by_key(|t| (t.priority, t.seq));
        q
    }

    /// Bytes of a shard from a live holder whose disk still has it, or rebuilt from any
    /// K other shards.
    fn source(&self, shard: &ShardRef, now: Secs) -> Option<(Option<String>, Shard)> {
        for h in self.live_holders(shard, now) {
            if let Some(s) = self.disks.get(&h).and_then(|d| d.get(shard)) {
                return Some((Some(h), s.clone()));
            }
        }
        let available: Vec<Shard> = self
            .shard_refs(&shard.blob)
            .iter()
            .filter_map(|r| {
                self.live_holders(r, now)
                    .iter()
                    .find_map(|h| self.disks.get(h).and_then(|d| d.get(r)).cloned())
            })
            .collect();
        let blob = rs_decode(&available).ok()?;
        let info = &self.blobs[&shard.blob];
        debug_assert_eq!(blob.len() as u64, info.original_len);
        let rebuilt = rs_encode(&blob, info.params).ok()?;
        Some((None, rebuilt[shard.index].clone()))
    }

    /// One daemon pass. Tasks run in priority order (FIFO within a class); a class that
    /// cannot be fully served blocks the classes below it for this cycle.
    pub fn replication_cycle(&mut self, now: Secs) -> Result<CycleReport, StorageError> {
        if let Some(last) = self.last_cycle {
            let next = last + self.config.cycle_secs;
            if now < next {
                return Err(StorageError::NotScheduled { now, next });
            }
        }
        self.last_cycle = Some(now);
        self.queue.sort_by_key(|t| (t.priority, t.seq));
        let mut actions = Vec::new();
        let mut replications = 0;
        let mut keep = Vec::new();
        let mut blocked: Option<Priority> = None;
        let tasks = std::mem::take(&mut self.queue);
        for task in tasks {
            let live = self.replica_count(&task.shard, now);
            if live >= self.config.replica_target {
                continue;
            }
            if replications >= self.config.rate_limit || blocked.is_some_and(|b| task.priority > b) {
                keep.push(task);
                continue;
            }
            if self.surviving(&task.shard.blob, now) < self.blobs[&task.shard.blob].params.k() {
                if self.lost.insert(task.shard.blob.clone()) {
                    actions.push(Action::Unrecoverable { blob: task.shard.blob.clone() });
                }
                keep.push(task);
                continue;
            }
            let target = self.pick_target(&task.shard, now);
            let source = self.source(&task.shard, now);
            let (Some(to), Some((from, data))) = (target, source) else {
                actions.push(Action::Deferred {
                    shard: task.shard.clone(),
                    priority: task.priority,
                });
                blocked = Some(blocked.map_or(task.priority, |b| b.min(task.priority)));
                keep.push(task);
                continue;
            };
            debug_assert!(live < self.config.replica_cap);
            self.place(&task.shard, &to, data);
            replications += 1;
            actions.push(match from {
                Some(from) => Action::Replicated {
                    shard: task.shard.clone(),
                    priority: task.priority,
                    from,
                    to,
                },
                None => Action::Reconstructed {
                    shard: task.shard.clone(),
                    priority: task.priority,
                    to,
                },
            });
            if live + 1 < self.config.replica_target {
                keep.push(task);
            }
        }
        self.queue = keep;
        Ok(CycleReport {
            time: now,
            actions,
            replications,
            queued_after: self.queue.len(),
        })
    }

    /// Ground truth: can the blob be rebuilt from the shards actually on disk?
    pub fn decodable(&self, blob: &str) -> bool {
        let available: Vec<Shard> = self
            .shard_refs(blob)
            .iter()
            .filter_map(|r| self.disks.values().find_map(|d| d.get(r)).cloned())
            .collect();
        match rs_decode(&available) {
            Ok(bytes) => crate::erasure::blob_id(&bytes).as_slice() == hex::decode(blob).unwrap_or_default(),
            Err(_) => false,
        }
    }

    pub fn max_replicas(&self, now: Secs) -> usize {
        self.holders.keys().map(|r| self.replica_count(r, now)).max().unwrap_or(0)
    }

    pub fn min_replicas(&self, now: Secs) -> usize {
        self.blobs
            .keys()
            .flat_map(|b| self.shard_refs(b))
            .map(|r| self.replica_count(&r, now))
            .min()
            .unwrap_or(0)
    }
}
