//! The DiLoCo round state machine.
//!
//! A round moves `Announced -> Collecting -> Merging -> Complete`, or to `Failed` when
//! its deadline passes first. Collection state exists from the moment of announcement,
//! so a gradient signal that overtakes the broadcast acknowledgements is still counted:
//! a signal from an eligible peer implies acceptance of the announcement. `needed` is the
//! number of accepted peers (leader included), never the eligible total.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diloco::{
    outer_update, ContributionWeight, DilocoError, OuterOptimizerState, PseudoGradient,
};
use crate::quantcore::Params;
use crate::scalar::Scalar;
use crate::simnet::SimTime;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RoundError {
    #[error("no eligible nodes")]
    NoEligible,
    #[error("{caller} is not the leader of round {round} ({leader} is)")]
    NotLeader { round: u64, caller: String, leader: String },
    #[error("round {0} was already announced")]
    DuplicateAnnounce(u64),
    #[error("round {0} is still in progress")]
    RoundInProgress(u64),
    #[error("deadline {deadline} is not after announcement time {now}")]
    InvalidDeadline { now: SimTime, deadline: SimTime },
    #[error("update_round_needed in phase {0:?}")]
    WrongPhase(Phase),
    #[error("cannot advance: round {0} neither complete nor expired")]
    AdvanceBeforeCompletion(u64),
    #[error("no active round")]
    NoRound,
    #[error("missing gradient from {0}")]
    MissingGradient(String),
    #[error(transparent)]
    Merge(#[from] DilocoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Announced,
    Collecting,
    Merging,
    Complete,
    Failed,
}

impl Phase {
    pub fn is_open(self) -> bool {
        matches!(self, Phase::Announced | Phase::Collecting)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundAnnouncement {
    pub round: u64,
    pub leader: String,
    pub inner_steps: u32,
    pub announced_at: SimTime,
    pub deadline: SimTime,
    pub base_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReadySignal {
    pub round: u64,
    pub node: String,
    pub gradient_hash: String,
    pub content_address: String,
    pub local_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalOutcome {
    Counted,
    Duplicate,
    WrongRound,
    UnknownSender,
    Closed,
}

/// `sorted(eligible)[round mod N]`.
pub fn elect_leader(eligible: &BTreeSet<String>, round: u64) -> Result<String, RoundError> {
    if eligible.is_empty() {
        return Err(RoundError::NoEligible);
    }
    let i = (round % eligible.len() as u64) as usize;
    Ok(eligible.iter().nth(i).expect("index in range").clone())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RoundState {
    pub round: u64,
    pub leader: String,
    pub phase: Phase,
    pub eligible: BTreeSet<String>,
    pub accepted: BTreeSet<String>,
    pub signalled: BTreeSet<String>,
    pub needed: usize,
    pub merges: u32,
}

impl RoundState {
    /// Fresh collection state; the leader counts as accepted from the start.
    pub fn new(round: u64, leader: &str, eligible: &BTreeSet<String>) -> Self {
        Self {
            round,
            leader: leader.to_string(),
            phase: Phase::Announced,
            eligible: eligible.clone(),
            accepted: BTreeSet::from([leader.to_string()]),
            signalled: BTreeSet::new(),
            needed: 1,
            merges: 0,
        }
    }

    pub fn collected(&self) -> usize {
        self.signalled.len()
    }

    fn member(&self, node: &str) -> bool {
        node == self.leader || self.eligible.contains(node)
    }

    pub fn accept_signal(&mut self, sig: &GradientReadySignal) -> SignalOutcome {
        if sig.round != self.round {
            return SignalOutcome::WrongRound;
        }
        if !self.phase.is_open() {
            return SignalOutcome::Closed;
        }
        if !self.member(&sig.node) {
            return SignalOutcome::UnknownSender;
        }
        if !self.signalled.insert(sig.node.clone()) {
            return SignalOutcome::Duplicate;
        }
        if self.accepted.insert(sig.node.clone()) && self.phase == Phase::Collecting {
            self.needed = self.accepted.len();
        }
        SignalOutcome::Counted
    }

    /// Folds the peers that acknowledged the broadcast into the accepted set and sets
    /// `needed` to its size. Unknown names are ignored.
    pub fn update_round_needed(&mut self, acked: &BTreeSet<String>) -> Result<(), RoundError> {
        if !self.phase.is_open() {
            return Err(RoundError::WrongPhase(self.phase));
        }
        for a in acked {
            if self.member(a) {
                self.accepted.insert(a.clone());
            }
        }
        self.needed = self.accepted.len().max(1);
        self.phase = Phase::Collecting;
        Ok(())
    }

    pub fn ready_to_merge(&self) -> bool {
        self.phase == Phase::Collecting && self.collected() >= self.needed
    }

    /// Enters `Merging` if the threshold is met; returns whether it did.
    pub fn begin_merge(&mut self) -> bool {
        if self.ready_to_merge() {
            self.phase = Phase::Merging;
            true
        } else {
            false
        }
    }

    pub fn complete_merge(&mut self) {
        debug_assert_eq!(self.phase, Phase::Merging);
        self.phase = Phase::Complete;
        self.merges += 1;
    }

    pub fn abort_merge(&mut self) {
        debug_assert_eq!(self.phase, Phase::Merging);
        self.phase = Phase::Collecting;
    }

    /// Marks an open round as failed; returns whether anything changed.
    pub fn expire(&mut self) -> bool {
        if self.phase.is_open() {
            self.phase = Phase::Failed;
            true
        } else {
            false
        }
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        if self.collected() > self.accepted.len() {
            return Err(format!("collected {} > accepted {}", self.collected(), self.accepted.len()));
        }
        if self.needed > self.accepted.len() {
            return Err(format!("needed {} > accepted {}", self.needed, self.accepted.len()));
        }
        if self.needed == 0 {
            return Err("needed dropped to zero".into());
        }
        if self.merges > 1 {
            return Err(format!("{} merges in round {}", self.merges, self.round));
        }
        Ok(())
    }
}

/// Hash-keyed blob store standing in for content addressing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContentStore {
    blobs: BTreeMap<String, Vec<u8>>,
}

pub fn content_address(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ContentStore {
    pub fn put(&mut self, bytes: Vec<u8>) -> String {
        let addr = content_address(&bytes);
        self.blobs.entry(addr.clone()).or_insert(bytes);
        addr
    }

    pub fn get(&self, addr: &str) -> Option<&[u8]> {
        self.blobs.get(addr).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blobs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundLogRecord {
    pub round: u64,
    pub phase: Phase,
    pub collected: usize,
    pub needed: usize,
    pub time: SimTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome<T> {
    pub params: Params<T>,
    pub address: String,
    pub participants: Vec<String>,
}

/// Leader-side driver: owns the base checkpoint, the outer optimizer and the round log.
#[derive(Debug, Clone)]
pub struct Coordinator<T> {
    eligible: BTreeSet<String>,
    base: Params<T>,
    base_address: String,
    outer: OuterOptimizerState<T>,
    store: ContentStore,
    current: Option<RoundState>,
    announced: BTreeSet<u64>,
    excluded: Option<(u64, String)>,
    log: Vec<RoundLogRecord>,
}

impl<T: Scalar> Coordinator<T> {
    pub fn new(
        eligible: BTreeSet<String>,
        base: Params<T>,
        outer: OuterOptimizerState<T>,
    ) -> Result<Self, RoundError> {
        if eligible.is_empty() {
            return Err(RoundError::NoEligible);
        }
        let mut store = ContentStore::default();
        let base_address = store.put(base.to_le_bytes());
        Ok(Self {
            eligible,
            base,
            base_address,
            outer,
            store,
            current: None,
            announced: BTreeSet::new(),
            excluded: None,
            log: Vec::new(),
        })
    }

    pub fn base(&self) -> &Params<T> {
        &self.base
    }

    pub fn base_address(&self) -> &str {
        &self.base_address
    }

    pub fn store(&self) -> &ContentStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ContentStore {
        &mut self.store
    }

    pub fn state(&self) -> Option<&RoundState> {
        self.current.as_ref()
    }

    pub fn log(&self) -> &[RoundLogRecord] {
        &self.log
    }

    pub fn eligible(&self) -> &BTreeSet<String> {
        &self.eligible
    }

    /// Leader for `round`, skipping a leader that failed the previous round.
    pub fn leader_for(&self, round: u64) -> Result<String, RoundError> {
        match &self.excluded {
            Some((r, who)) if *r == round && self.eligible.len() > 1 => {
                let mut pool = self.eligible.clone();
                pool.remove(who);
                elect_leader(&pool, round)
            }
            _ => elect_leader(&self.eligible, round),
        }
    }

    fn record(&mut self, now: SimTime) {
        if let Some(s) = &self.current {
            self.log.push(RoundLogRecord {
                round: s.round,
                phase: s.phase,
                collected: s.collected(),
                needed: s.needed,
                time: now,
            });
        }
    }

    /// Creates the collection state; the caller broadcasts the returned announcement.
    pub fn announce(
        &mut self,
        caller: &str,
        round: u64,
        inner_steps: u32,
        now: SimTime,
        deadline: SimTime,
    ) -> Result<RoundAnnouncement, RoundError> {
        let leader = self.leader_for(round)?;
        if caller != leader {
            return Err(RoundError::NotLeader {
                round,
                caller: caller.to_string(),
                leader,
            });
        }
        if self.announced.contains(&round) {
            return Err(RoundError::DuplicateAnnounce(round));
        }
        if let Some(s) = &self.current {
            if s.phase.is_open() || s.phase == Phase::Merging {
                return Err(RoundError::RoundInProgress(s.round));
            }
        }
        if deadline <= now {
            return Err(RoundError::InvalidDeadline { now, deadline });
        }
        self.announced.insert(round);
        self.current = Some(RoundState::new(round, &leader, &self.eligible));
        self.record(now);
        Ok(RoundAnnouncement {
            round,
            leader,
            inner_steps,
            announced_at: now,
            deadline,
            base_hash: self.base_address.clone(),
        })
    }

    pub fn on_signal(&mut self, sig: &GradientReadySignal, now: SimTime) -> SignalOutcome {
        let Some(s) = self.current.as_mut() else {
            return SignalOutcome::WrongRound;
        };
        let out = s.accept_signal(sig);
        if out == SignalOutcome::Counted {
            self.record(now);
        }
        out
    }

    pub fn update_round_needed(&mut self, acked: &BTreeSet<String>, now: SimTime) -> Result<(), RoundError> {
        let s = self.current.as_mut().ok_or(RoundError::NoRound)?;
        let before = (s.phase, s.needed);
        s.update_round_needed(acked)?;
        if before != (s.phase, s.needed) {
            self.record(now);
        }
        Ok(())
    }

    /// Runs the outer update once `collected >= needed`. Gradients are looked up by node
    /// for every counted signal; the merged checkpoint becomes the new base.
    pub fn maybe_merge(
        &mut self,
        grads: &BTreeMap<String, PseudoGradient<T>>,
        weights: &[ContributionWeight],
        now: SimTime,
    ) -> Result<Option<MergeOutcome<T>>, RoundError> {
        let Some(s) = self.current.as_mut() else {
            return Ok(None);
        };
        if !s.begin_merge() {
            return Ok(None);
        }
        let participants: Vec<String> = s.signalled.iter().cloned().collect();
        let picked = participants
            .iter()
            .map(|p| grads.get(p).cloned().ok_or_else(|| RoundError::MissingGradient(p.clone())))
            .collect::<Result<Vec<_>, _>>();
        let merged = picked.and_then(|g| outer_update(&self.base, &g, weights, &self.outer).map_err(Into::into));
        let (params, outer) = match merged {
            Ok(v) => v,
            Err(e) => {
                self.current.as_mut().expect("present").abort_merge();
                return Err(e);
            }
        };
        self.record(now);
        let address = self.store.put(params.to_le_bytes());
        self.base = params.clone();
        self.base_address = address.clone();
        self.outer = outer;
        self.current.as_mut().expect("present").complete_merge();
        self.record(now);
        Ok(Some(MergeOutcome {
            params,
            address,
            participants,
        }))
    }

    /// Deadline handler. A failed round whose leader never contributed excludes that
    /// leader from the next election.
    pub fn on_deadline(&mut self, round: u64, now: SimTime) -> bool {
        let Some(s) = self.current.as_mut() else {
            return false;
        };
        if s.round != round || !s.expire() {
            return false;
        }
        if !s.signalled.contains(&s.leader) {
            self.excluded = Some((round + 1, s.leader.clone()));
        }
        self.record(now);
        true
    }

    /// Announces the next round on the current base once this one is complete or failed.
    pub fn advance(
        &mut self,
        inner_steps: u32,
        now: SimTime,
        deadline: SimTime,
    ) -> Result<RoundAnnouncement, RoundError> {
        let s = self.current.as_ref().ok_or(RoundError::NoRound)?;
        if !matches!(s.phase, Phase::Complete | Phase::Failed) {
            return Err(RoundError::AdvanceBeforeCompletion(s.round));
        }
        let next = s.round + 1;
        let leader = self.leader_for(next)?;
        self.announce(&leader, next, inner_steps, now, deadline)
    }
}

// ---------------------------------------------------------------------------
// Exhaustive small-model check

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Msg {
    BroadcastDone,
    Ack(u8),
    Sig(u8),
    StaleSig,
    FutureSig,
    UnknownSig,
    Deadline,
}

const MODEL_MESSAGES: [Msg; 12] = [
    Msg::BroadcastDone,
    Msg::Ack(1),
    Msg::Ack(2),
    Msg::Sig(0),
    Msg::Sig(1),
    Msg::Sig(2),
    Msg::Sig(1),
    Msg::Ack(2),
    Msg::StaleSig,
    Msg::FutureSig,
    Msg::UnknownSig,
    Msg::Deadline,
];

const MODEL_NODES: [&str; 3] = ["L", "P1", "P2"];

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct ModelState {
    pending: u16,
    acks: BTreeSet<String>,
    valid_sigs: BTreeSet<String>,
    broadcast_done: bool,
    round: RoundState,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ModelCheckReport {
    pub messages: usize,
    pub distinct_states: usize,
    /// Number of delivery orders times drop choices covered, as a decimal string.
    pub interleavings: String,
    pub merges_observed: u64,
    pub fast_peer_cases: u64,
    pub violations: Vec<String>,
}

impl ModelCheckReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn sig_for(node: &str, round: u64) -> GradientReadySignal {
    GradientReadySignal {
        round,
        node: node.to_string(),
        gradient_hash: String::new(),
        content_address: String::new(),
        local_loss: 0.0,
    }
}

/// Leader handler for one event in the model, mirroring `Coordinator`'s event handling.
fn model_step(s: &mut ModelState, msg: Msg, report: &mut ModelCheckReport) -> Result<(), String> {
    let r = s.round.round;
    let before = s.round.clone();
    match msg {
        Msg::BroadcastDone => {
            s.broadcast_done = true;
            if s.round.phase.is_open() {
                s.round.update_round_needed(&s.acks).map_err(|e| e.to_string())?;
            }
        }
        Msg::Ack(i) => {
            s.acks.insert(MODEL_NODES[i as usize].to_string());
            if s.broadcast_done && s.round.phase.is_open() {
                s.round.update_round_needed(&s.acks).map_err(|e| e.to_string())?;
            }
        }
        Msg::Sig(i) => {
            let node = MODEL_NODES[i as usize];
            let was_open = s.round.phase.is_open();
            let early = s.round.phase == Phase::Announced;
            s.valid_sigs.insert(node.to_string());
            s.round.accept_signal(&sig_for(node, r));
            if was_open && !s.round.signalled.contains(node) {
                return Err(format!("signal from {node} lost in phase {:?}", before.phase));
            }
            if early {
                report.fast_peer_cases += 1;
            }
        }
        Msg::StaleSig | Msg::FutureSig | Msg::UnknownSig => {
            let sig = match msg {
                Msg::StaleSig => sig_for("P2", r.wrapping_sub(1)),
                Msg::FutureSig => sig_for("P1", r + 1),
                _ => sig_for("X", r),
            };
            s.round.accept_signal(&sig);
            if s.round != before {
                return Err(format!("{msg:?} changed the round state"));
            }
        }
        Msg::Deadline => {
            s.round.expire();
        }
    }
    if s.round.begin_merge() {
        let expected: BTreeSet<String> = std::iter::once("L".to_string())
            .chain(s.acks.iter().cloned())
            .chain(s.valid_sigs.iter().cloned())
            .collect();
        if s.round.accepted != expected {
            return Err(format!("accepted {:?} != acknowledged {:?}", s.round.accepted, expected));
        }
        if s.round.needed != s.round.accepted.len() {
            return Err(format!("needed {} != accepted {}", s.round.needed, s.round.accepted.len()));
        }
        if s.round.signalled != s.valid_sigs {
            return Err("merge participants differ from delivered signals".into());
        }
        s.round.complete_merge();
        report.merges_observed += 1;
    }
    s.round.check_invariants()?;
    if s.round.ready_to_merge() {
        return Err("handler returned with a merge still pending".into());
    }
    Ok(())
}

fn explore(
    s: &ModelState,
    memo: &mut HashMap<ModelState, u128>,
    report: &mut ModelCheckReport,
) -> u128 {
    if let Some(&n) = memo.get(s) {
        return n;
    }
    if s.pending == 0 {
        if !matches!(s.round.phase, Phase::Complete | Phase::Failed) {
            report
                .violations
                .push(format!("round ended in phase {:?}", s.round.phase));
        }
        memo.insert(s.clone(), 1);
        return 1;
    }
    let mut paths: u128 = 0;
    for (i, msg) in MODEL_MESSAGES.iter().enumerate() {
        if s.pending & (1 << i) == 0 {
            continue;
        }
        let droppable = !matches!(msg, Msg::BroadcastDone | Msg::Deadline);
        let mut delivered = s.clone();
        delivered.pending &= !(1 << i);
        if droppable {
            paths += explore(&delivered.clone(), memo, report);
        }
        match model_step(&mut delivered, *msg, report) {
            Ok(()) => paths += explore(&delivered, memo, report),
            Err(v) => {
                if report.violations.len() < 32 {
                    report.violations.push(v);
                }
                paths += 1;
            }
        }
    }
    memo.insert(s.clone(), paths);
    paths
}

/// Explores every order of the twelve leader-side events of one round among three
/// nodes (each peer message either delivered or dropped) and checks single merge,
/// fast-peer counting, `needed` accounting and termination on every path.
pub fn model_check_round() -> ModelCheckReport {
    let eligible: BTreeSet<String> = MODEL_NODES.iter().map(|s| s.to_string()).collect();
    let start = ModelState {
        pending: (1 << MODEL_MESSAGES.len()) - 1,
        acks: BTreeSet::new(),
        valid_sigs: BTreeSet::new(),
        broadcast_done: false,
        round: RoundState::new(7, "L", &eligible),
    };
    let mut report = ModelCheckReport {
        messages: MODEL_MESSAGES.len(),
        ..Default::default()
    };
    let mut memo = HashMap::new();
    let paths = explore(&start, &mut memo, &mut report);
    report.distinct_states = memo.len();
    report.interleavings = paths.to_string();
    report
}
