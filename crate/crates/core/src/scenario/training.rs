//! Outer-round training over the simulated network, plus the centralized baseline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{fmt_f, RunReport, Scenario, ScenarioError};
use crate::diloco::{
    requantize_after_merge, weights_from_scores, ContributionWeight, MergeRecord, OuterConfig,
    OuterOptimizerState, PseudoGradient,
};
use crate::quantcore::{
    inner_step_mut, loss, loss_and_gradient, AdamWConfig, InnerOptimizerState, Params, ToyTask,
};
use crate::rounds::{
    content_address, Coordinator, GradientReadySignal, Phase, RoundAnnouncement, SignalOutcome,
};
use crate::simnet::{EventKind, Flow, SimEvent, SimTime, Simnet, Stop};
use crate::tier::Tier;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    /// Weight by the number of merges each node has contributed to so far.
    Contribution,
}

/// A node that stops responding from the start of `round` onward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Crash {
    pub node: String,
    pub round: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DilocoSection {
    /// Generated node count when the scenario has no roster.
    pub nodes: usize,
    pub rounds: u64,
    pub inner_steps: u32,
    pub rows_per_node: usize,
    pub features: usize,
    pub noise: f64,
    pub inner: AdamWConfig,
    pub outer: OuterConfig,
    /// Centralized optimizer steps; defaults to `rounds * inner_steps`.
    pub baseline_steps: Option<u64>,
    pub compute_ms: SimTime,
    pub ack_window_ms: SimTime,
    pub round_timeout_ms: SimTime,
    pub weighting: Weighting,
    pub crashes: Vec<Crash>,
}

impl Default for DilocoSection {
    fn default() -> Self {
        Self {
            nodes: 4,
            rounds: 30,
            inner_steps: 20,
            rows_per_node: 64,
            features: 8,
            noise: 0.1,
            inner: AdamWConfig {
                lr: 0.05,
                ..AdamWConfig::default()
            },
            outer: OuterConfig::default(),
            baseline_steps: None,
            compute_ms: 1000,
            ack_window_ms: 200,
            round_timeout_ms: 5000,
            weighting: Weighting::Uniform,
            crashes: Vec::new(),
        }
    }
}

impl DilocoSection {
    fn validate(&self, nodes: usize) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::Invalid(m.to_string()));
        if nodes == 0 {
            return bad("diloco needs at least one node");
        }
        if self.inner_steps == 0 || self.rows_per_node == 0 || self.features == 0 {
            return bad("inner_steps, rows_per_node and features must be positive");
        }
        if self.ack_window_ms == 0 || self.round_timeout_ms <= self.ack_window_ms {
            return bad("need 0 < ack_window_ms < round_timeout_ms");
        }
        if !(self.inner.lr > 0.0 && self.outer.lr > 0.0) {
            return bad("learning rates must be positive");
        }
        Ok(())
    }

    pub fn baseline_steps(&self) -> u64 {
        self.baseline_steps
            .unwrap_or(self.rounds * u64::from(self.inner_steps))
    }
}

#[derive(Debug, Clone)]
enum Msg {
    Announce(RoundAnnouncement),
    Ack { round: u64 },
    Ready(GradientReadySignal),
}

struct Worker {
    data: ToyTask<f64>,
    opt: InnerOptimizerState<f64>,
    pending: Option<RoundAnnouncement>,
}

#[derive(Debug, Clone)]
struct RoundRow {
    round: u64,
    leader: String,
    outcome: Phase,
    collected: usize,
    needed: usize,
    participants: Vec<String>,
    pre_loss: f64,
    post_loss: f64,
    time: SimTime,
}

struct Run<'a> {
    cfg: &'a DilocoSection,
    coord: Coordinator<f64>,
    workers: BTreeMap<String, Worker>,
    crashes: BTreeMap<String, u64>,
    pooled: ToyTask<f64>,
    acked: BTreeSet<String>,
    grads: BTreeMap<String, PseudoGradient<f64>>,
    scores: BTreeMap<String, f64>,
    rows: Vec<RoundRow>,
    merges: Vec<MergeRecord>,
    violations: Vec<String>,
    error: Option<ScenarioError>,
    finished: u64,
    done: bool,
}

fn tag_round(tag: &str) -> Option<(&str, u64)> {
    let (name, r) = tag.split_once(':')?;
    Some((name, r.parse().ok()?))
}

impl Run<'_> {
    fn crashed(&self, node: &str, round: u64) -> bool {
        self.crashes.get(node).is_some_and(|r| round >= *r)
    }

    fn pooled_loss(&self, w: &Params<f64>) -> f64 {
        loss(w, &self.pooled).unwrap_or(f64::NAN)
    }

    fn handle(&mut self, net: &mut Simnet<Msg>, ev: SimEvent<Msg>) -> Flow {
        let res = match ev.kind {
            EventKind::Deliver { from, to, msg, .. } => match msg {
                Msg::Announce(a) => self.on_announce(net, &to, a),
                Msg::Ack { round } => {
                    if let Some(s) = self.coord.state() {
                        if s.round == round && s.leader == to && s.phase == Phase::Announced {
                            self.acked.insert(from);
                        }
                    }
                    Ok(())
                }
                Msg::Ready(sig) => {
                    if self.coord.state().is_some_and(|s| s.leader == to) {
                        self.on_signal(net, sig)
                    } else {
                        Ok(())
                    }
                }
            },
            EventKind::Timer { node, tag } => self.on_timer(net, &node, &tag),
        };
        if let Err(e) = res {
            self.error = Some(e);
            return Flow::Halt;
        }
        self.check();
        if self.done {
            Flow::Halt
        } else {
            Flow::Continue
        }
    }

    fn check(&mut self) {
        let mut found = Vec::new();
        if let Some(s) = self.coord.state() {
            if let Err(e) = s.check_invariants() {
                found.push(format!("round {}: {e}", s.round));
            }
        }
        if !self.coord.base().is_finite() {
            found.push("non-finite parameters".to_string());
        }
        for v in found {
            if !self.violations.contains(&v) {
                self.violations.push(v);
            }
        }
    }

    fn on_timer(&mut self, net: &mut Simnet<Msg>, node: &str, tag: &str) -> Result<(), ScenarioError> {
        let now = net.now();
        if tag == "advance" {
            return self.advance(net);
        }
        let Some((name, round)) = tag_round(tag) else {
            return Ok(());
        };
        match name {
            "trained" => self.on_trained(net, node, round),
            "ack-window" => {
                let open = self
                    .coord
                    .state()
                    .is_some_and(|s| s.round == round && s.phase == Phase::Announced);
                if open {
                    self.coord
                        .update_round_needed(&self.acked, now)
                        .map_err(ScenarioError::runtime)?;
                    self.try_merge(net)?;
                }
                Ok(())
            }
            "deadline" => {
                if self.coord.on_deadline(round, now) {
                    let s = self.coord.state().expect("round exists").clone();
                    let l = self.pooled_loss(self.coord.base());
                    self.rows.push(RoundRow {
                        round,
                        leader: s.leader.clone(),
                        outcome: s.phase,
                        collected: s.collected(),
                        needed: s.needed,
                        participants: Vec::new(),
                        pre_loss: l,
                        post_loss: l,
                        time: now,
                    });
                    self.finish_round(net, &s.leader)?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn broadcast(&mut self, net: &mut Simnet<Msg>, a: RoundAnnouncement) -> Result<(), ScenarioError> {
        let now = net.now();
        net.schedule_timer(&a.leader, a.deadline, format!("deadline:{}", a.round))?;
        if self.crashed(&a.leader, a.round) {
            return Ok(());
        }
        let peers: Vec<String> = self.workers.keys().filter(|p| **p != a.leader).cloned().collect();
        for p in peers {
            net.send(&a.leader, &p, Msg::Announce(a.clone()))?;
        }
        net.schedule_timer(&a.leader, now + self.cfg.ack_window_ms, format!("ack-window:{}", a.round))?;
        net.schedule_timer(&a.leader, now + self.cfg.compute_ms, format!("trained:{}", a.round))?;
        let leader = a.leader.clone();
        self.workers.get_mut(&leader).expect("leader is a worker").pending = Some(a);
        Ok(())
    }

    fn on_announce(&mut self, net: &mut Simnet<Msg>, me: &str, a: RoundAnnouncement) -> Result<(), ScenarioError> {
        if self.crashed(me, a.round) {
            return Ok(());
        }
        let now = net.now();
        net.send(me, &a.leader, Msg::Ack { round: a.round })?;
        net.schedule_timer(me, now + self.cfg.compute_ms, format!("trained:{}", a.round))?;
        if let Some(w) = self.workers.get_mut(me) {
            w.pending = Some(a);
        }
        Ok(())
    }

    /// Local training finished: run the inner steps, publish the delta, signal the leader.
    fn on_trained(&mut self, net: &mut Simnet<Msg>, me: &str, round: u64) -> Result<(), ScenarioError> {
        if self.crashed(me, round) {
            return Ok(());
        }
        let Some(w) = self.workers.get_mut(me) else {
            return Ok(());
        };
        let Some(a) = w.pending.take_if(|a| a.round == round) else {
            return Ok(());
        };
        let base = self
            .coord
            .store()
            .get(&a.base_hash)
            .and_then(Params::<f64>::from_le_bytes)
            .ok_or_else(|| ScenarioError::Runtime(format!("base {} missing from store", a.base_hash)))?;
        let mut local = base.clone();
        for _ in 0..a.inner_steps {
            let (_, g) = loss_and_gradient(&local, &w.data).map_err(ScenarioError::runtime)?;
            inner_step_mut(&mut local, &g, &mut w.opt).map_err(ScenarioError::runtime)?;
        }
        let local_loss = loss(&local, &w.data).map_err(ScenarioError::runtime)?;
        let addr = self.coord.store_mut().put(base.sub(&local).to_le_bytes());
        let sig = GradientReadySignal {
            round,
            node: me.to_string(),
            gradient_hash: addr.clone(),
            content_address: addr,
            local_loss,
        };
        if me == a.leader {
            self.on_signal(net, sig)
        } else {
            net.send(me, &a.leader, Msg::Ready(sig))?;
            Ok(())
        }
    }

    fn on_signal(&mut self, net: &mut Simnet<Msg>, sig: GradientReadySignal) -> Result<(), ScenarioError> {
        let Some(bytes) = self.coord.store().get(&sig.content_address) else {
            return Ok(());
        };
        if content_address(bytes) != sig.gradient_hash {
            return Ok(());
        }
        let Some(delta) = Params::<f64>::from_le_bytes(bytes) else {
            return Ok(());
        };
        if self.coord.on_signal(&sig, net.now()) == SignalOutcome::Counted {
            self.grads.insert(
                sig.node.clone(),
                PseudoGradient {
                    delta,
                    node: sig.node.clone(),
                    inner_steps: self.cfg.inner_steps,
                    staleness: 0,
                    local_loss: sig.local_loss,
                },
            );
            self.try_merge(net)?;
        }
        Ok(())
    }

    fn weights(&self, participants: &BTreeSet<String>) -> Vec<ContributionWeight> {
        let parts: Vec<String> = participants.iter().cloned().collect();
        match self.cfg.weighting {
            Weighting::Uniform => weights_from_scores(&parts, &BTreeMap::new()),
            Weighting::Contribution => {
                let scores = parts
                    .iter()
                    .map(|p| (p.clone(), 1.0 + self.scores.get(p).copied().unwrap_or(0.0)))
                    .collect();
                weights_from_scores(&parts, &scores)
            }
        }
    }

    fn try_merge(&mut self, net: &mut Simnet<Msg>) -> Result<(), ScenarioError> {
        let Some(s) = self.coord.state().cloned() else {
            return Ok(());
        };
        if !s.ready_to_merge() {
            return Ok(());
        }
        let now = net.now();
        let weights = self.weights(&s.signalled);
        let pre_loss = self.pooled_loss(self.coord.base());
        let Some(out) = self
            .coord
            .maybe_merge(&self.grads, &weights, now)
            .map_err(ScenarioError::runtime)?
        else {
            return Ok(());
        };
        let post_loss = self.pooled_loss(&out.params);
        for p in &out.participants {
            *self.scores.entry(p.clone()).or_insert(0.0) += 1.0;
        }
        self.merges.push(MergeRecord {
            round: s.round,
            participants: out.participants.clone(),
            weights: weights.iter().map(|w| w.weight).collect(),
            pre_loss,
            post_loss,
            merged_hash: out.address.clone(),
            ternary_hash: requantize_after_merge(&out.params).digest_hex(),
        });
        let after = self.coord.state().expect("round exists");
        self.rows.push(RoundRow {
            round: s.round,
            leader: s.leader.clone(),
            outcome: after.phase,
            collected: after.collected(),
            needed: after.needed,
            participants: out.participants,
            pre_loss,
            post_loss,
            time: now,
        });
        self.finish_round(net, &s.leader)
    }

    fn finish_round(&mut self, net: &mut Simnet<Msg>, leader: &str) -> Result<(), ScenarioError> {
        self.finished += 1;
        if self.finished >= self.cfg.rounds {
            self.done = true;
        } else {
            net.schedule_timer(leader, net.now() + 1, "advance")?;
        }
        Ok(())
    }

    fn advance(&mut self, net: &mut Simnet<Msg>) -> Result<(), ScenarioError> {
        self.acked.clear();
        self.grads.clear();
        let now = net.now();
        let a = self
            .coord
            .advance(self.cfg.inner_steps, now, now + self.cfg.round_timeout_ms)
            .map_err(ScenarioError::runtime)?;
        self.broadcast(net, a)
    }
}

/// Full-batch AdamW on the pooled data; returns `(step, loss)` every `every` steps and
/// at the end.
pub(crate) fn centralized_baseline(
    pooled: &ToyTask<f64>,
    init: &Params<f64>,
    config: AdamWConfig,
    steps: u64,
    every: u64,
) -> Result<Vec<(u64, f64)>, ScenarioError> {
    let mut w = init.clone();
    let mut opt = InnerOptimizerState::new(w.len(), config);
    let mut curve = vec![(0, loss(&w, pooled).map_err(ScenarioError::runtime)?)];
    for step in 1..=steps {
        let (_, g) = loss_and_gradient(&w, pooled).map_err(ScenarioError::runtime)?;
        inner_step_mut(&mut w, &g, &mut opt).map_err(ScenarioError::runtime)?;
        if step % every.max(1) == 0 || step == steps {
            curve.push((step, loss(&w, pooled).map_err(ScenarioError::runtime)?));
        }
    }
    Ok(curve)
}

pub fn run_diloco(scenario: &Scenario) -> Result<RunReport, ScenarioError> {
    let cfg = scenario
        .diloco
        .as_ref()
        .ok_or_else(|| ScenarioError::Invalid("missing [diloco] section".into()))?;
    let roster = scenario.roster(cfg.nodes, 1, Tier::GpuCompute);
    cfg.validate(roster.len())?;
    let ids: Vec<String> = roster.iter().map(|n| n.id.clone()).collect();
    for c in &cfg.crashes {
        if !ids.contains(&c.node) {
            return Err(ScenarioError::Invalid(format!("crash for unknown node {}", c.node)));
        }
    }

    let mut data_rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let (pooled, truth) =
        ToyTask::<f64>::synthetic_regression(&mut data_rng, cfg.rows_per_node * ids.len(), cfg.features, cfg.noise);
    let reference_loss = loss(&truth, &pooled).map_err(ScenarioError::runtime)?;
    let init = Params::zeros(cfg.features);
    let initial_loss = loss(&init, &pooled).map_err(ScenarioError::runtime)?;

    let baseline_steps = cfg.baseline_steps();
    let curve = centralized_baseline(&pooled, &init, cfg.inner, baseline_steps, u64::from(cfg.inner_steps))?;
    let centralized_final = curve.last().map_or(initial_loss, |c| c.1);

    let mut report = RunReport::new(&scenario.name);
    let mut baseline_csv = String::from("step,loss\n");
    for (step, l) in &curve {
        let _ = writeln!(baseline_csv, "{step},{}", fmt_f(*l));
    }
    report.file("baseline.csv", baseline_csv);

    if cfg.rounds == 0 {
        report.file(
            "comparison.csv",
            format!(
                "metric,value\ncentralized_steps,{baseline_steps}\ncentralized_final_loss,{}\nreference_loss,{}\n",
                fmt_f(centralized_final),
                fmt_f(reference_loss)
            ),
        );
        let summary = json!({
            "name": scenario.name,
            "seed": scenario.seed,
            "rounds_requested": 0,
            "centralized_steps": baseline_steps,
            "centralized_final_loss": centralized_final,
            "reference_loss": reference_loss,
            "violations": [],
        });
        return Ok(report.finish(summary));
    }

    let workers = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let idx: Vec<usize> = (i * cfg.rows_per_node..(i + 1) * cfg.rows_per_node).collect();
            let w = Worker {
                data: pooled.select(&idx),
                opt: InnerOptimizerState::new(cfg.features, cfg.inner),
                pending: None,
            };
            (id.clone(), w)
        })
        .collect();
    let eligible: BTreeSet<String> = ids.iter().cloned().collect();
    let coord = Coordinator::new(
        eligible,
        init.clone(),
        OuterOptimizerState::new(cfg.features, cfg.outer),
    )
    .map_err(ScenarioError::runtime)?;

    let mut net = Simnet::<Msg>::new(scenario.seed.wrapping_add(1), scenario.network.clone())?;
    for id in &ids {
        net.add_node(id.clone());
    }
    let mut run = Run {
        cfg,
        coord,
        workers,
        crashes: cfg.crashes.iter().map(|c| (c.node.clone(), c.round)).collect(),
        pooled,
        acked: BTreeSet::new(),
        grads: BTreeMap::new(),
        scores: BTreeMap::new(),
        rows: Vec::new(),
        merges: Vec::new(),
        violations: Vec::new(),
        error: None,
        finished: 0,
        done: false,
    };
    let leader = run.coord.leader_for(0).map_err(ScenarioError::runtime)?;
    let first = run
        .coord
        .announce(&leader, 0, cfg.inner_steps, 0, cfg.round_timeout_ms)
        .map_err(ScenarioError::runtime)?;
    run.broadcast(&mut net, first)?;
    let stop = net.run_until(None, |n, ev| run.handle(n, ev))?;
    if let Some(e) = run.error.take() {
        return Err(e);
    }
    if stop == Stop::Quiescent && !run.done {
        run.violations
            .push(format!("stalled after {} of {} rounds", run.finished, cfg.rounds));
    }

    let final_loss = run.pooled_loss(run.coord.base());
    let completed = run.rows.iter().filter(|r| r.outcome == Phase::Complete).count();
    let failed = run.rows.iter().filter(|r| r.outcome == Phase::Failed).count();
    let ratio = final_loss / centralized_final;

    let mut rounds_csv = String::from("round,leader,outcome,collected,needed,participants,pre_loss,post_loss,time_ms\n");
    for r in &run.rows {
        let _ = writeln!(
            rounds_csv,
            "{},{},{:?},{},{},{},{},{},{}",
            r.round,
            r.leader,
            r.outcome,
            r.collected,
            r.needed,
            r.participants.join(";"),
            fmt_f(r.pre_loss),
            fmt_f(r.post_loss),
            r.time
        );
    }
    report.file("rounds.csv", rounds_csv);
    report.file(
        "merges.jsonl",
        run.merges.iter().map(|m| m.to_json_line() + "\n").collect(),
    );
    report.file(
        "round_log.jsonl",
        run.coord
            .log()
            .iter()
            .map(|r| serde_json::to_string(r).expect("log serializes") + "\n")
            .collect(),
    );
    report.file(
        "comparison.csv",
        format!(
            "metric,value\nrounds_completed,{completed}\nrounds_failed,{failed}\ninitial_loss,{}\ndistributed_final_loss,{}\ncentralized_steps,{baseline_steps}\ncentralized_final_loss,{}\nloss_ratio,{}\nreference_loss,{}\n",
            fmt_f(initial_loss),
            fmt_f(final_loss),
            fmt_f(centralized_final),
            fmt_f(ratio),
            fmt_f(reference_loss)
        ),
    );
    report.file("trace.txt", net.trace_lines());
    report.violations = run.violations.clone();
    let stats = net.stats();
    let summary = json!({
        "name": scenario.name,
        "seed": scenario.seed,
        "nodes": ids,
        "rounds_requested": cfg.rounds,
        "rounds_completed": completed,
        "rounds_failed": failed,
        "initial_loss": initial_loss,
        "distributed_final_loss": final_loss,
        "centralized_steps": baseline_steps,
        "centralized_final_loss": centralized_final,
        "loss_ratio": ratio,
        "reference_loss": reference_loss,
        "final_params_hash": run.coord.base().digest_hex(),
        "virtual_time_ms": net.now(),
        "events": net.processed(),
        "messages": {"sent": stats.sent, "delivered": stats.delivered, "dropped": stats.dropped, "partitioned": stats.partitioned},
        "trace_digest": net.trace_digest(),
        "violations": run.violations,
    });
    Ok(report.finish(summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(extra: &str) -> Scenario {
        Scenario::from_toml_str(&format!("seed = 7\n[diloco]\n{extra}")).unwrap()
    }

    #[test]
    fn small_run_completes_and_improves() {
        let r = run_diloco(&scenario("rounds = 5\n")).unwrap();
        assert!(r.ok(), "{:?}", r.violations);
        assert_eq!(r.summary["rounds_completed"], 5);
        let init = r.summary["initial_loss"].as_f64().unwrap();
        let fin = r.summary["distributed_final_loss"].as_f64().unwrap();
        assert!(fin < init / 2.0, "{fin} vs {init}");
    }

    #[test]
    fn zero_rounds_is_baseline_only() {
        let r = run_diloco(&scenario("rounds = 0\nbaseline_steps = 50\n")).unwrap();
        assert!(r.files.contains_key("baseline.csv"));
        assert!(!r.files.contains_key("rounds.csv"));
        assert_eq!(r.summary["centralized_steps"], 50);
    }

    #[test]
    fn crashed_leader_fails_round_then_progresses() {
        let r = run_diloco(&scenario("rounds = 4\ncrashes = [{ node = \"node-01\", round = 0 }]\n")).unwrap();
        assert!(r.ok(), "{:?}", r.violations);
        let rows = &r.files["rounds.csv"];
        assert!(rows.lines().any(|l| l.starts_with("1,node-01,Failed")), "{rows}");
        assert!(rows.lines().any(|l| l.starts_with("2,") && l.contains(",Complete,")), "{rows}");
    }

    #[test]
    fn deterministic_outputs() {
        let s = scenario("rounds = 3\n");
        assert_eq!(run_diloco(&s).unwrap(), run_diloco(&s).unwrap());
    }
}
