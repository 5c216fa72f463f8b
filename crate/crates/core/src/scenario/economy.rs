//! Randomized epochs of contribution, settlement, commit-reveal and data challenges.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use num_bigint::BigInt;
use num_rational::BigRational;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{RunReport, Scenario, ScenarioError};
use crate::ledger::{
    commitment, rational_shares, CommitStatus, EventLog, Ledger, LedgerError, RecordStatus, Units,
    EPOCHS_PER_DAY, EPOCH_SECS,
};
use crate::tier::Tier;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LedgerSection {
    pub epochs: u64,
    /// Generated contributor count when the scenario has no roster.
    pub contributors: usize,
    /// Upper bound of the per-axis units a node reports in an epoch.
    pub max_units: u32,
    pub idle_probability: f64,
    pub empty_epoch_probability: f64,
    /// Open a commit-reveal round every this many epochs; 0 disables.
    pub commit_every: u64,
    pub cheat_probability: f64,
    /// Register a data record every this many epochs; 0 disables.
    pub data_every: u64,
    pub bad_data_probability: f64,
}

impl Default for LedgerSection {
    fn default() -> Self {
        Self {
            epochs: 432,
            contributors: 6,
            max_units: 100,
            idle_probability: 0.1,
            empty_epoch_probability: 0.03,
            commit_every: 12,
            cheat_probability: 0.1,
            data_every: 24,
            bad_data_probability: 0.25,
        }
    }
}

impl LedgerSection {
    fn validate(&self) -> Result<(), ScenarioError> {
        for (name, p) in [
            ("idle_probability", self.idle_probability),
            ("empty_epoch_probability", self.empty_epoch_probability),
            ("cheat_probability", self.cheat_probability),
            ("bad_data_probability", self.bad_data_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ScenarioError::Invalid(format!("{name} = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

struct Checker {
    violations: Vec<String>,
}

impl Checker {
    fn fail(&mut self, v: String) {
        self.violations.push(v);
    }

    /// Sum equals the pool and every payout is within one unit of its exact share.
    fn settlement(&mut self, epoch: u64, pool: Units, weights: &BTreeMap<String, BigRational>, paid: &BTreeMap<String, Units>) {
        let sum: Units = paid.values().sum();
        if sum != pool {
            self.fail(format!("epoch {epoch}: paid {sum} of pool {pool}"));
        }
        let one = BigRational::from_integer(BigInt::from(1));
        for (node, exact) in rational_shares(pool, weights) {
            let got = BigRational::from_integer(BigInt::from(paid.get(&node).copied().unwrap_or(0)));
            let diff = if got > exact { &got - &exact } else { &exact - &got };
            if diff >= one {
                self.fail(format!("epoch {epoch}: {node} paid {got}, exact share {exact}"));
            }
        }
    }
}

#[derive(Debug)]
struct EpochRow {
    epoch: u64,
    settled_on: u64,
    status: &'static str,
    pool: Units,
    paid: Units,
    carry_after: Units,
    emitted_today: Units,
}

/// `(node, result, nonce, honest)` awaiting its reveal.
type PendingReveal = (String, Vec<u8>, Vec<u8>, bool);

pub fn run_ledger(scenario: &Scenario) -> Result<RunReport, ScenarioError> {
    let cfg = scenario
        .ledger
        .as_ref()
        .ok_or_else(|| ScenarioError::Invalid("missing [ledger] section".into()))?;
    cfg.validate()?;
    let eco = &scenario.economics;
    let roster = if scenario.nodes.is_empty() {
        (0..cfg.contributors)
            .map(|i| super::NodeSpec {
                id: format!("node-{i:02}"),
                tier: Tier::ALL[i % Tier::ALL.len()],
                ..super::NodeSpec::default()
            })
            .collect()
    } else {
        scenario.nodes.clone()
    };
    if roster.is_empty() {
        return Err(ScenarioError::Invalid("ledger scenario needs contributors".into()));
    }
    let multipliers = eco.multipliers(&roster)?;
    let axes = eco.score_weights()?;
    let mut ledger = Ledger::new(eco.ledger.clone()).map_err(ScenarioError::invalid)?;
    for n in &roster {
        ledger.post_bond(&n.id, n.bond);
    }
    let notaries: Vec<String> = roster
        .iter()
        .filter(|n| n.bond >= eco.ledger.min_notary_bond)
        .take(eco.ledger.notary_quorum)
        .map(|n| n.id.clone())
        .collect();
    for n in &notaries {
        ledger.register_notary(n).map_err(ScenarioError::runtime)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut check = Checker { violations: Vec::new() };
    let mut rows = Vec::new();
    let mut deferred: VecDeque<u64> = VecDeque::new();
    let mut weights_of: BTreeMap<u64, BTreeMap<String, BigRational>> = BTreeMap::new();
    let mut totals: BTreeMap<String, Units> = BTreeMap::new();
    let mut closed_epochs: u64 = 0;
    let mut pending_commits: Vec<(u64, u64, Vec<PendingReveal>)> = Vec::new();
    let mut pending_records: Vec<(String, u64, bool)> = Vec::new();
    let mut cheats = 0u64;
    let mut bad_records = 0u64;
    let pool = eco.ledger.epoch_pool;
    let cap = eco.ledger.cap();

    // Settles one epoch against `day`, checking every invariant. Returns false if deferred.
    let settle = |ledger: &mut Ledger,
                      epoch: u64,
                      day: u64,
                      weights: &BTreeMap<String, BigRational>,
                      check: &mut Checker,
                      rows: &mut Vec<EpochRow>,
                      totals: &mut BTreeMap<String, Units>,
                      retry: bool|
     -> Result<bool, ScenarioError> {
        let carry_before = ledger.carry();
        let epoch_pool = pool + carry_before;
        match ledger.settle_epoch_on(epoch, day, &multipliers) {
            Ok(paid) => {
                let emitted_today = ledger.emitted_on(day);
                if emitted_today > cap {
                    check.fail(format!("day {day}: emitted {emitted_today} above cap {cap}"));
                }
                let status = if paid.is_empty() {
                    if ledger.carry() != epoch_pool {
                        check.fail(format!("epoch {epoch}: carry {} != {epoch_pool}", ledger.carry()));
                    }
                    "carried"
                } else {
                    check.settlement(epoch, epoch_pool, weights, &paid);
                    if ledger.carry() != 0 {
                        check.fail(format!("epoch {epoch}: carry survived settlement"));
                    }
                    if retry {
                        "settled-late"
                    } else {
                        "settled"
                    }
                };
                for (n, v) in &paid {
                    *totals.entry(n.clone()).or_insert(0) += v;
                }
                rows.push(EpochRow {
                    epoch,
                    settled_on: day,
                    status,
                    pool: epoch_pool,
                    paid: paid.values().sum(),
                    carry_after: ledger.carry(),
                    emitted_today,
                });
                Ok(true)
            }
            Err(LedgerError::CapExceeded { emitted_today, .. }) => {
                if !retry {
                    rows.push(EpochRow {
                        epoch,
                        settled_on: day,
                        status: "deferred",
                        pool: epoch_pool,
                        paid: 0,
                        carry_after: ledger.carry(),
                        emitted_today,
                    });
                }
                if ledger.carry() != carry_before {
                    check.fail(format!("epoch {epoch}: deferral touched the carry"));
                }
                Ok(false)
            }
            Err(e) => Err(ScenarioError::runtime(e)),
        }
    };

    for epoch in 0..cfg.epochs {
        let now = epoch * EPOCH_SECS;
        let day = epoch / EPOCHS_PER_DAY;

        // Contributions.
        let empty = rng.gen_bool(cfg.empty_epoch_probability);
        let mut weights = BTreeMap::new();
        for n in &roster {
            let units: [u32; 3] = [
                rng.gen_range(0..=cfg.max_units),
                rng.gen_range(0..=cfg.max_units),
                rng.gen_range(0..=cfg.max_units),
            ];
            if empty || rng.gen_bool(cfg.idle_probability) {
                continue;
            }
            let r = |v: u32| BigRational::from_integer(BigInt::from(v));
            let score = axes.combine(&r(units[0]), &r(units[1]), &r(units[2]));
            ledger
                .record_contribution(epoch, &n.id, score.clone())
                .map_err(ScenarioError::runtime)?;
            weights.insert(n.id.clone(), &multipliers[&n.id] * score);
        }
        weights_of.insert(epoch, weights);

        // Backlog first, oldest epoch first; stop at the first one the cap still blocks.
        while let Some(&e) = deferred.front() {
            if settle(&mut ledger, e, day, &weights_of[&e], &mut check, &mut rows, &mut totals, true)? {
                deferred.pop_front();
                closed_epochs += 1;
            } else {
                break;
            }
        }
        let attempted = deferred.is_empty();
        if attempted && settle(&mut ledger, epoch, day, &weights_of[&epoch], &mut check, &mut rows, &mut totals, false)? {
            closed_epochs += 1;
        } else {
            if !attempted {
                rows.push(EpochRow {
                    epoch,
                    settled_on: day,
                    status: "deferred",
                    pool: pool + ledger.carry(),
                    paid: 0,
                    carry_after: ledger.carry(),
                    emitted_today: ledger.emitted_on(day),
                });
            }
            deferred.push_back(epoch);
        }

        // Commit-reveal.
        if cfg.commit_every > 0 && epoch % cfg.commit_every == 0 {
            ledger.open_commit_round(epoch, now).map_err(ScenarioError::runtime)?;
            let mut entries = Vec::new();
            for n in &roster {
                let result = format!("eval-{epoch}-{}", n.id).into_bytes();
                let mut nonce = vec![0u8; 16];
                rng.fill_bytes(&mut nonce);
                let cheat = rng.gen_bool(cfg.cheat_probability);
                ledger
                    .commit(epoch, &n.id, commitment(&result, &nonce), now + 1)
                    .map_err(ScenarioError::runtime)?;
                entries.push((n.id.clone(), result, nonce, cheat));
            }
            // An early reveal must be refused without effect.
            let (node, result, nonce, _) = &entries[0];
            let before = ledger.bond(node);
            match ledger.reveal(epoch, node, result, nonce, now + 2) {
                Err(LedgerError::RevealBeforeClose { .. }) => {}
                other => check.fail(format!("round {epoch}: early reveal returned {other:?}")),
            }
            if ledger.bond(node) != before
                || ledger.commit_round(epoch).map(|r| r.records[node].status) != Some(CommitStatus::Pending)
            {
                check.fail(format!("round {epoch}: early reveal changed state"));
            }
            pending_commits.push((epoch, now + eco.ledger.commit_window_secs, entries));
        }
        let due: Vec<_> = pending_commits.iter().filter(|p| p.1 <= now).cloned().collect();
        pending_commits.retain(|p| p.1 > now);
        for (round, _, entries) in due {
            for (node, result, nonce, cheat) in entries {
                let bond_before = ledger.bond(&node).unwrap_or(0);
                let shown = if cheat { b"forged".to_vec() } else { result };
                let status = ledger
                    .reveal(round, &node, &shown, &nonce, now)
                    .map_err(ScenarioError::runtime)?;
                let expected = if cheat { CommitStatus::Slashed } else { CommitStatus::RevealedOk };
                if status != expected {
                    check.fail(format!("round {round}: {node} reveal gave {status:?}"));
                }
                if cheat {
                    cheats += 1;
                    check_slash(&mut check, &ledger, &node, bond_before, eco.ledger.slash.mismatched_reveal);
                } else if ledger.bond(&node) != Some(bond_before) {
                    check.fail(format!("round {round}: honest {node} lost bond"));
                }
            }
        }

        // Data records and notary challenges.
        if cfg.data_every > 0 && epoch % cfg.data_every == 0 {
            let who = &roster[rng.gen_range(0..roster.len())].id;
            let id = format!("record-{epoch}");
            let bad = rng.gen_bool(cfg.bad_data_probability);
            ledger.register_data(&id, who, 10, now).map_err(ScenarioError::runtime)?;
            if bad && notaries.len() >= eco.ledger.notary_quorum {
                bad_records += 1;
                let bond_before = ledger.bond(who).unwrap_or(0);
                let mut last = RecordStatus::Pending;
                for n in &notaries {
                    last = ledger.challenge(&id, n, now + 60).map_err(ScenarioError::runtime)?;
                }
                if last != RecordStatus::Rejected {
                    check.fail(format!("{id}: quorum did not reject"));
                }
                check_slash(&mut check, &ledger, who, bond_before, eco.ledger.slash.inaccurate_data);
            } else {
                pending_records.push((id, now + eco.ledger.challenge_window_secs, bad));
            }
        }
        let due: Vec<_> = pending_records.iter().filter(|p| p.1 <= now).cloned().collect();
        pending_records.retain(|p| p.1 > now);
        for (id, _, _) in due {
            let status = ledger.finalize_data(&id, now).map_err(ScenarioError::runtime)?;
            if status != RecordStatus::Confirmed {
                check.fail(format!("{id}: unchallenged record ended {status:?}"));
            }
        }
    }

    // Global conservation: every closed epoch's pool is either paid out or carried.
    let paid_total: Units = totals.values().sum();
    if paid_total + ledger.carry() != pool * closed_epochs {
        check.fail(format!(
            "paid {paid_total} + carry {} != {closed_epochs} epochs x {pool}",
            ledger.carry()
        ));
    }
    let chain_ok = EventLog::verify_chain(ledger.log().entries()).is_ok();
    if !chain_ok {
        check.fail("event log chain broken".into());
    }

    let mut epochs_csv = String::from("epoch,day,status,pool,paid,carry_after,emitted_today,cap\n");
    rows.sort_by_key(|r| (r.epoch, r.status != "deferred"));
    for r in &rows {
        let _ = writeln!(
            epochs_csv,
            "{},{},{},{},{},{},{},{cap}",
            r.epoch, r.settled_on, r.status, r.pool, r.paid, r.carry_after, r.emitted_today
        );
    }
    let mut nodes_csv = String::from("node,tier,multiplier,rewards,bond\n");
    for n in &roster {
        let _ = writeln!(
            nodes_csv,
            "{},{},{},{},{}",
            n.id,
            n.tier,
            multipliers[&n.id],
            totals.get(&n.id).copied().unwrap_or(0),
            ledger.bond(&n.id).unwrap_or(0)
        );
    }
    let mut slashes_csv = String::from("node,offense,rate,amount\n");
    for s in ledger.slashes() {
        let _ = writeln!(slashes_csv, "{},{:?},{},{}", s.node, s.reason, s.rate, s.amount);
    }

    let mut report = RunReport::new(&scenario.name);
    report.file("epochs.csv", epochs_csv);
    report.file("nodes.csv", nodes_csv);
    report.file("slashes.csv", slashes_csv);
    report.file("ledger.jsonl", ledger.log().to_lines());
    report.violations = check.violations.clone();
    let summary = json!({
        "name": scenario.name,
        "seed": scenario.seed,
        "epochs": cfg.epochs,
        "closed_epochs": closed_epochs,
        "pending_epochs": deferred.len(),
        "epoch_pool": pool,
        "daily_cap": cap,
        "paid_total": paid_total,
        "carry": ledger.carry(),
        "emitted_by_day": ledger.emitted_by_day(),
        "slashes": ledger.slashes().len(),
        "cheats": cheats,
        "bad_records": bad_records,
        "log_entries": ledger.log().entries().len(),
        "log_head": ledger.log().head(),
        "chain_verified": chain_ok,
        "violations": check.violations,
    });
    Ok(report.finish(summary))
}

/// Slashed amount must be `floor(rate * bond)`, computed here in integer thousandths.
fn check_slash(check: &mut Checker, ledger: &Ledger, node: &str, bond_before: Units, rate: f64) {
    let milli = (rate * 1000.0).round() as u128;
    let expected = (u128::from(bond_before) * milli / 1000) as Units;
    let after = ledger.bond(node).unwrap_or(0);
    if bond_before - after != expected {
        check.fail(format!(
            "{node}: slashed {} from {bond_before} at rate {rate}, expected {expected}",
            bond_before - after
        ));
    }
}
