//! Storage daemon under heartbeats and scheduled node failures.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{RunReport, Scenario, ScenarioError};
use crate::erasure::CodingParams;
use crate::simnet::{EventKind, Flow, SimEvent, Simnet};
use crate::storagemon::{Action, NodeRecord, Secs, StorageConfig, StorageMonitor};
use crate::tier::Tier;

const MONITOR: &str = "monitor";

/// Nodes that fail permanently at `at_secs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureBatch {
    pub at_secs: Secs,
    pub nodes: Vec<String>,
}

/// `batches` failure batches of up to `size` random live storage nodes each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomFailures {
    pub batches: usize,
    pub size: usize,
    pub start_secs: Secs,
    pub interval_secs: Secs,
}

impl Default for RandomFailures {
    fn default() -> Self {
        Self {
            batches: 2,
            size: 2,
            start_secs: 600,
            interval_secs: 900,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StorageSection {
    pub daemon: StorageConfig,
    /// Generated node count and region spread when the scenario has no roster.
    pub nodes: usize,
    pub regions: usize,
    pub blobs: usize,
    pub blob_bytes: usize,
    pub k: usize,
    pub m: usize,
    pub heartbeat_secs: Secs,
    pub duration_secs: Secs,
    pub failures: Vec<FailureBatch>,
    pub random_failures: Option<RandomFailures>,
}

impl Default for StorageSection {
    fn default() -> Self {
        Self {
            daemon: StorageConfig::default(),
            nodes: 12,
            regions: 4,
            blobs: 4,
            blob_bytes: 4096,
            k: 4,
            m: 2,
            heartbeat_secs: 10,
            duration_secs: 3600,
            failures: Vec::new(),
            random_failures: None,
        }
    }
}

#[derive(Debug, Clone)]
enum Msg {
    Heartbeat,
}

#[derive(Debug, Clone)]
struct CycleRow {
    time: Secs,
    stale: usize,
    queued: usize,
    replications: usize,
    reconstructions: usize,
    deferred: usize,
    min_replicas: usize,
    max_replicas: usize,
    decodable: usize,
}

struct Run<'a> {
    cfg: &'a StorageSection,
    monitor: StorageMonitor,
    failed: BTreeSet<String>,
    blobs: Vec<String>,
    rows: Vec<CycleRow>,
    actions: Vec<String>,
    violations: Vec<String>,
    error: Option<ScenarioError>,
}

impl Run<'_> {
    fn violation(&mut self, v: String) {
        if !self.violations.contains(&v) {
            self.violations.push(v);
        }
    }

    fn handle(&mut self, net: &mut Simnet<Msg>, ev: SimEvent<Msg>) -> Flow {
        let now_ms = ev.time;
        let now = now_ms / 1000;
        let res = match ev.kind {
            EventKind::Deliver { from, .. } => {
                self.monitor.heartbeat(&from, now).map(|_| ()).map_err(ScenarioError::runtime)
            }
            EventKind::Timer { node, tag } => match tag.as_str() {
                "heartbeat" if !self.failed.contains(&node) => net
                    .send(&node, MONITOR, Msg::Heartbeat)
                    .and_then(|_| net.schedule_timer(&node, now_ms + self.cfg.heartbeat_secs * 1000, "heartbeat"))
                    .map(|_| ())
                    .map_err(Into::into),
                "fail" => {
                    self.failed.insert(node.clone());
                    self.monitor.crash(&node).map_err(ScenarioError::runtime)
                }
                "cycle" => self.cycle(net, now),
                _ => Ok(()),
            },
        };
        if let Err(e) = res {
            self.error = Some(e);
            return Flow::Halt;
        }
        Flow::Continue
    }

    fn cycle(&mut self, net: &mut Simnet<Msg>, now: Secs) -> Result<(), ScenarioError> {
        let stale = self.monitor.liveness_sweep(now);
        let before: Vec<_> = self.monitor.queue().into_iter().cloned().collect();
        let report = self.monitor.replication_cycle(now).map_err(ScenarioError::runtime)?;

        // Strict priority: nothing of a lower class may be served while a higher-class task
        // was left waiting.
        let mut served = Vec::new();
        let mut touched = BTreeSet::new();
        for a in &report.actions {
            match a {
                Action::Replicated { shard, priority, .. } | Action::Reconstructed { shard, priority, .. } => {
                    served.push(*priority);
                    touched.insert(shard.clone());
                }
                _ => {}
            }
        }
        if served.windows(2).any(|w| w[1] < w[0]) {
            self.violation(format!("t={now}: repairs served out of priority order"));
        }
        if let Some(lowest_served) = served.iter().max() {
            let after: BTreeSet<_> = self.monitor.queue().iter().map(|t| t.shard.clone()).collect();
            let skipped_higher = before
                .iter()
                .any(|t| t.priority < *lowest_served && !touched.contains(&t.shard) && after.contains(&t.shard));
            if skipped_higher {
                self.violation(format!("t={now}: lower priority served while higher waited"));
            }
        }
        if report.replications > self.monitor.config().rate_limit {
            self.violation(format!("t={now}: {} replications exceed the rate limit", report.replications));
        }
        let max = self.monitor.max_replicas(now);
        if max > self.monitor.config().replica_cap {
            self.violation(format!("t={now}: {max} replicas exceed the cap"));
        }
        let decodable = self.blobs.iter().filter(|b| self.monitor.decodable(b)).count();
        if decodable < self.blobs.len() {
            self.violation(format!("t={now}: {} blobs not decodable", self.blobs.len() - decodable));
        }
        self.actions.push(report.to_json_line());
        let count = |f: fn(&Action) -> bool| report.actions.iter().filter(|a| f(a)).count();
        self.rows.push(CycleRow {
            time: now,
            stale: stale.len(),
            queued: report.queued_after,
            replications: count(|a| matches!(a, Action::Replicated { .. })),
            reconstructions: count(|a| matches!(a, Action::Reconstructed { .. })),
            deferred: count(|a| matches!(a, Action::Deferred { .. })),
            min_replicas: self.monitor.min_replicas(now),
            max_replicas: max,
            decodable,
        });
        let next = now + self.monitor.config().cycle_secs;
        if next <= self.cfg.duration_secs {
            net.schedule_timer(MONITOR, next * 1000, "cycle")?;
        }
        Ok(())
    }
}

fn failure_schedule(
    cfg: &StorageSection,
    eligible: &[String],
    seed: u64,
) -> Result<Vec<FailureBatch>, ScenarioError> {
    let mut batches = cfg.failures.clone();
    if let Some(r) = &cfg.random_failures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_F417);
        let mut alive: Vec<String> = eligible
            .iter()
            .filter(|n| !batches.iter().any(|b| b.nodes.contains(n)))
            .cloned()
            .collect();
        for i in 0..r.batches {
            alive.shuffle(&mut rng);
            let take = r.size.min(alive.len());
            let nodes: Vec<String> = alive.drain(..take).collect();
            batches.push(FailureBatch {
                at_secs: r.start_secs + i as Secs * r.interval_secs,
                nodes,
            });
        }
    }
    batches.sort_by_key(|b| b.at_secs);
    for b in &batches {
        if b.nodes.len() > cfg.m {
            return Err(ScenarioError::Invalid(format!(
                "failure batch at {}s has {} nodes, more than M = {}",
                b.at_secs,
                b.nodes.len(),
                cfg.m
            )));
        }
        if let Some(n) = b.nodes.iter().find(|n| !eligible.contains(n)) {
            return Err(ScenarioError::Invalid(format!("failure for unknown node {n}")));
        }
    }
    Ok(batches)
}

pub fn run_storage(scenario: &Scenario) -> Result<RunReport, ScenarioError> {
    let cfg = scenario
        .storage
        .as_ref()
        .ok_or_else(|| ScenarioError::Invalid("missing [storage] section".into()))?;
    if cfg.heartbeat_secs == 0 || cfg.heartbeat_secs >= cfg.daemon.stale_after_secs {
        return Err(ScenarioError::Invalid("need 0 < heartbeat_secs < stale_after_secs".into()));
    }
    let params = CodingParams::new(cfg.k, cfg.m).map_err(ScenarioError::invalid)?;
    let roster = scenario.roster(cfg.nodes, cfg.regions, Tier::StorageNode);
    let mut monitor = StorageMonitor::new(cfg.daemon.clone()).map_err(ScenarioError::invalid)?;
    let mut tiers = BTreeMap::new();
    for n in &roster {
        let tier = monitor
            .register(NodeRecord {
                id: n.id.clone(),
                tier: n.tier,
                read_mbps: n.read_mbps,
                write_mbps: n.write_mbps,
                last_heartbeat: 0,
                region: n.region.clone(),
                bond: n.bond,
            })
            .map_err(ScenarioError::invalid)?;
        tiers.insert(n.id.clone(), tier);
    }
    let eligible: Vec<String> = tiers
        .iter()
        .filter(|(_, t)| t.stores_shards())
        .map(|(id, _)| id.clone())
        .collect();
    let schedule = failure_schedule(cfg, &eligible, scenario.seed)?;

    let mut data_rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut blobs = Vec::new();
    for _ in 0..cfg.blobs {
        let mut bytes = vec![0u8; cfg.blob_bytes];
        data_rng.fill_bytes(&mut bytes);
        blobs.push(monitor.store_blob(&bytes, params, 0).map_err(ScenarioError::runtime)?);
    }

    let mut net = Simnet::<Msg>::new(scenario.seed.wrapping_add(1), scenario.network.clone())?;
    net.add_node(MONITOR);
    for n in &roster {
        net.add_node(n.id.clone());
        net.schedule_timer(&n.id, 0, "heartbeat")?;
    }
    for b in &schedule {
        for n in &b.nodes {
            net.schedule_timer(n, b.at_secs * 1000, "fail")?;
        }
    }
    net.schedule_timer(MONITOR, cfg.daemon.cycle_secs * 1000, "cycle")?;

    let mut run = Run {
        cfg,
        monitor,
        failed: BTreeSet::new(),
        blobs,
        rows: Vec::new(),
        actions: Vec::new(),
        violations: Vec::new(),
        error: None,
    };
    net.run_until(Some(cfg.duration_secs * 1000), |n, ev| run.handle(n, ev))?;
    if let Some(e) = run.error.take() {
        return Err(e);
    }

    let end = cfg.duration_secs;
    let live_eligible = eligible.iter().filter(|n| !run.failed.contains(*n)).count();
    let min = run.monitor.min_replicas(end);
    let max = run.monitor.max_replicas(end);
    let target = cfg.daemon.replica_target;
    let converged = min >= target && max <= cfg.daemon.replica_cap;

    let mut csv = String::from(
        "time_s,stale,queued,replications,reconstructions,deferred,min_replicas,max_replicas,decodable_blobs\n",
    );
    for r in &run.rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            r.time, r.stale, r.queued, r.replications, r.reconstructions, r.deferred, r.min_replicas, r.max_replicas, r.decodable
        );
    }
    let mut report = RunReport::new(&scenario.name);
    report.file("cycles.csv", csv);
    report.file("actions.jsonl", run.actions.iter().map(|l| format!("{l}\n")).collect());
    report.file(
        "failures.csv",
        std::iter::once("time_s,node\n".to_string())
            .chain(schedule.iter().flat_map(|b| b.nodes.iter().map(move |n| format!("{},{n}\n", b.at_secs))))
            .collect(),
    );
    report.file("trace.txt", net.trace_lines());
    report.violations = run.violations.clone();
    let summary = json!({
        "name": scenario.name,
        "seed": scenario.seed,
        "k": cfg.k,
        "m": cfg.m,
        "blobs": run.blobs,
        "storage_nodes": eligible.len(),
        "failed_nodes": run.failed,
        "live_storage_nodes": live_eligible,
        "cycles": run.rows.len(),
        "final_min_replicas": min,
        "final_max_replicas": max,
        "converged": converged,
        "all_decodable": run.blobs.iter().all(|b| run.monitor.decodable(b)),
        "trace_digest": net.trace_digest(),
        "violations": run.violations,
    });
    Ok(report.finish(summary))
}
