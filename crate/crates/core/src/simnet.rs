//! Deterministic discrete-event network.
//!
//! Virtual time is in milliseconds. Events fire in `(time, seq)` order where `seq` is
//! assigned monotonically at scheduling time, so ties never depend on heap internals.
//! All randomness (latency, drops) comes from one seeded ChaCha8 stream.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type SimTime = u64;

pub const DEFAULT_EVENT_BUDGET: u64 = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("event budget of {0} exceeded")]
    BudgetExceeded(u64),
    #[error("invalid link policy: {0}")]
    InvalidPolicy(String),
}

/// Per-message latency in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Latency {
    Fixed { ms: SimTime },
    Uniform { min_ms: SimTime, max_ms: SimTime },
}

impl Default for Latency {
    fn default() -> Self {
        Latency::Uniform { min_ms: 5, max_ms: 50 }
    }
}

impl Latency {
    fn sample(&self, rng: &mut ChaCha8Rng) -> SimTime {
        match *self {
            Latency::Fixed { ms } => ms,
            Latency::Uniform { min_ms, max_ms } => rng.gen_range(min_ms..=max_ms),
        }
    }
}

/// Nodes in `a` cannot reach nodes in `b` (and vice versa) during `[start, end)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Partition {
    pub start: SimTime,
    pub end: SimTime,
    pub a: BTreeSet<String>,
    pub b: BTreeSet<String>,
}

impl Partition {
    pub fn separates(&self, x: &str, y: &str, at: SimTime) -> bool {
        at >= self.start
            && at < self.end
            && ((self.a.contains(x) && self.b.contains(y)) || (self.b.contains(x) && self.a.contains(y)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct LinkPolicy {
    pub latency: Latency,
    pub drop_probability: f64,
    pub partitions: Vec<Partition>,
}

impl LinkPolicy {
    pub fn perfect() -> Self {
        Self {
            latency: Latency::Fixed { ms: 0 },
            drop_probability: 0.0,
            partitions: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err(SimError::InvalidPolicy(format!(
                "drop probability {} outside [0, 1]",
                self.drop_probability
            )));
        }
        if let Latency::Uniform { min_ms, max_ms } = self.latency {
            if min_ms > max_ms {
                return Err(SimError::InvalidPolicy("latency min exceeds max".into()));
            }
        }
        if let Some(p) = self.partitions.iter().find(|p| p.start > p.end) {
            return Err(SimError::InvalidPolicy(format!("partition ends before it starts at {}", p.start)));
        }
        Ok(())
    }

    pub fn partitioned(&self, x: &str, y: &str, at: SimTime) -> bool {
        self.partitions.iter().any(|p| p.separates(x, y, at))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind<M> {
    Deliver { from: String, to: String, sent_at: SimTime, msg: M },
    Timer { node: String, tag: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent<M> {
    pub time: SimTime,
    pub seq: u64,
    pub kind: EventKind<M>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Send,
    Deliver,
    Drop,
    Partitioned,
    Timer,
}

impl TraceKind {
    fn as_str(self) -> &'static str {
        match self {
            TraceKind::Send => "send",
            TraceKind::Deliver => "deliver",
            TraceKind::Drop => "drop",
            TraceKind::Partitioned => "partitioned",
            TraceKind::Timer => "timer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub time: SimTime,
    pub seq: u64,
    pub kind: TraceKind,
    pub from: String,
    pub to: String,
    pub detail: String,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {} {}",
            self.time,
            self.seq,
            self.kind.as_str(),
            self.from,
            self.to,
            self.detail
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SendOutcome {
    Scheduled(SimTime),
    Dropped,
    Partitioned,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SimStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub partitioned: u64,
    pub timers: u64,
}

/// Why `run_until` returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stop {
    Quiescent,
    TimeLimit,
    Halted,
}

/// What a handler asks the loop to do next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Halt,
}

pub struct Simnet<M> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Reverse<(SimTime, u64)>>,
    pending: BTreeMap<u64, SimEvent<M>>,
    rng: ChaCha8Rng,
    nodes: BTreeSet<String>,
    policy: LinkPolicy,
    trace: Vec<TraceRecord>,
    stats: SimStats,
    processed: u64,
    budget: u64,
}

impl<M: fmt::Debug + Clone> Simnet<M> {
    pub fn new(seed: u64, policy: LinkPolicy) -> Result<Self, SimError> {
        policy.validate()?;
        Ok(Self {
            now: 0,
            next_seq: 0,
            queue: BinaryHeap::new(),
            pending: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            nodes: BTreeSet::new(),
            policy,
            trace: Vec::new(),
            stats: SimStats::default(),
            processed: 0,
            budget: DEFAULT_EVENT_BUDGET,
        })
    }

    pub fn with_budget(mut self, budget: u64) -> Self {
        self.budget = budget;
        self
    }

    pub fn add_node(&mut self, id: impl Into<String>) {
        self.nodes.insert(id.into());
    }

    pub fn nodes(&self) -> &BTreeSet<String> {
        &self.nodes
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn policy(&self) -> &LinkPolicy {
        &self.policy
    }

    pub fn stats(&self) -> SimStats {
        self.stats
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn is_quiescent(&self) -> bool {
        self.queue.is_empty()
    }

    /// Mutable access to the shared generator, for node logic that needs seeded draws.
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn check(&self, node: &str) -> Result<(), SimError> {
        if self.nodes.contains(node) {
            Ok(())
        } else {
            Err(SimError::UnknownNode(node.to_string()))
        }
    }

    fn push(&mut self, time: SimTime, kind: EventKind<M>) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse((time, seq)));
        self.pending.insert(seq, SimEvent { time, seq, kind });
        seq
    }

    fn record(&mut self, time: SimTime, seq: u64, kind: TraceKind, from: &str, to: &str, detail: String) {
        self.trace.push(TraceRecord {
            time,
            seq,
            kind,
            from: from.to_string(),
            to: to.to_string(),
            detail,
        });
    }

    /// Samples latency and drop in that order, so the draw count per send is fixed.
    pub fn send(&mut self, from: &str, to: &str, msg: M) -> Result<SendOutcome, SimError> {
        self.check(from)?;
        self.check(to)?;
        self.stats.sent += 1;
        let latency = self.policy.latency.sample(&mut self.rng);
        let dropped = self.rng.gen_bool(self.policy.drop_probability);
        let now = self.now;
        let detail = format!("{msg:?}");
        if dropped {
            self.stats.dropped += 1;
            self.record(now, self.next_seq, TraceKind::Drop, from, to, detail);
            return Ok(SendOutcome::Dropped);
        }
        if self.policy.partitioned(from, to, now) {
            self.stats.partitioned += 1;
            self.record(now, self.next_seq, TraceKind::Partitioned, from, to, detail);
            return Ok(SendOutcome::Partitioned);
        }
        let at = now + latency;
        let seq = self.push(
            at,
            EventKind::Deliver {
                from: from.to_string(),
                to: to.to_string(),
                sent_at: now,
                msg,
            },
        );
        self.record(now, seq, TraceKind::Send, from, to, detail);
        Ok(SendOutcome::Scheduled(at))
    }

    pub fn schedule_timer(&mut self, node: &str, at: SimTime, tag: impl Into<String>) -> Result<u64, SimError> {
        self.check(node)?;
        let at = at.max(self.now);
        Ok(self.push(
            at,
            EventKind::Timer {
                node: node.to_string(),
                tag: tag.into(),
            },
        ))
    }

    /// Pops the next event, advancing the clock. Messages whose link is partitioned at
    /// delivery time are discarded here and never surface.
    pub fn next_event(&mut self) -> Option<SimEvent<M>> {
        while let Some(Reverse((time, seq))) = self.queue.pop() {
            let ev = self.pending.remove(&seq).expect("queued event is pending");
            debug_assert!(time >= self.now);
            self.now = time;
            self.processed += 1;
            match &ev.kind {
                EventKind::Deliver { from, to, msg, .. } => {
                    let (from, to, detail) = (from.clone(), to.clone(), format!("{msg:?}"));
                    if self.policy.partitioned(&from, &to, time) {
                        self.stats.partitioned += 1;
                        self.record(time, seq, TraceKind::Partitioned, &from, &to, detail);
                        continue;
                    }
                    self.stats.delivered += 1;
                    self.record(time, seq, TraceKind::Deliver, &from, &to, detail);
                }
                EventKind::Timer { node, tag } => {
                    let (node, tag) = (node.clone(), tag.clone());
                    self.stats.timers += 1;
                    self.record(time, seq, TraceKind::Timer, &node, &node, tag);
                }
            }
            return Some(ev);
        }
        None
    }

    /// Runs handlers until quiescence, until the next event lies beyond `limit`, or until a
    /// handler halts. Fails once more than the event budget has been processed.
    pub fn run_until<F>(&mut self, limit: Option<SimTime>, mut handler: F) -> Result<Stop, SimError>
    where
        F: FnMut(&mut Self, SimEvent<M>) -> Flow,
    {
        loop {
            let Some(&Reverse((time, _))) = self.queue.peek() else {
                return Ok(Stop::Quiescent);
            };
            if limit.is_some_and(|l| time > l) {
                self.now = self.now.max(limit.unwrap_or(0));
                return Ok(Stop::TimeLimit);
            }
            if self.processed >= self.budget {
                return Err(SimError::BudgetExceeded(self.budget));
            }
            if let Some(ev) = self.next_event() {
                if handler(self, ev) == Flow::Halt {
                    return Ok(Stop::Halted);
                }
            }
        }
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn trace_lines(&self) -> String {
        let mut s = String::new();
        for r in &self.trace {
            s.push_str(&r.to_string());
            s.push('\n');
        }
        s
    }

    pub fn trace_digest(&self) -> String {
        hex::encode(Sha256::digest(self.trace_lines().as_bytes()))
    }
}
