//! Epoch reward ledger.
//!
//! Contributions accumulate per epoch as exact rationals; at the epoch boundary the
//! pool is split as `R_i = pool * T_i C_i / sum_j T_j C_j`, rounded to integer units
//! by largest remainder so the rewards always sum to the pool. The ledger also runs
//! commit-reveal rounds, bond slashing, data registration with a challenge window,
//! and keeps a hash-chained event log of every mutation.

mod analysis;
mod log;
mod settlement;

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tier::decimal_from_f64;

pub use analysis::{ic_check, sybil_total, IcOutcome, SybilReport};
pub use log::{EventLog, LedgerEvent, LogEntry, GENESIS_DIGEST};
pub use settlement::{largest_remainder, rational_shares};

/// Integer reward units.
pub type Units = u64;

/// Ten-minute epochs per day.
pub const EPOCHS_PER_DAY: u64 = 144;
pub const EPOCH_SECS: u64 = 600;
pub const MIN_SLASH_RATE: f64 = 0.1;
pub const MAX_SLASH_RATE: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LedgerError {
    #[error("epoch {0} is already settled")]
    AlreadySettled(u64),
    #[error("contribution deltas must be non-negative")]
    NegativeContribution,
    #[error("no tier multiplier for node {0}")]
    MissingTier(String),
    #[error("settlement of epoch {epoch} deferred: {emitted_today} + {pool} exceeds daily cap {cap}")]
    CapExceeded { epoch: u64, pool: Units, emitted_today: Units, cap: Units },
    #[error("slash rate {0} outside [0.1, 1.0]")]
    RateOutOfRange(f64),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("node {node} already committed in round {round}")]
    DuplicateCommit { round: u64, node: String },
    #[error("commit window for round {0} is closed")]
    CommitWindowClosed(u64),
    #[error("reveal for round {round} before commit window closes at {closes_at}")]
    RevealBeforeClose { round: u64, closes_at: u64 },
    #[error("node {node} has no commitment in round {round}")]
    NoCommit { round: u64, node: String },
    #[error("node {node} already revealed in round {round}")]
    AlreadyRevealed { round: u64, node: String },
    #[error("unknown commit round {0}")]
    UnknownRound(u64),
    #[error("commit round {0} already exists")]
    DuplicateRound(u64),
    #[error("unknown data record {0}")]
    UnknownRecord(String),
    #[error("data record {0} already exists")]
    DuplicateRecord(String),
    #[error("challenge window for {0} is closed")]
    ChallengeWindowClosed(String),
    #[error("challenge window for {0} is still open")]
    ChallengeWindowOpen(String),
    #[error("{0} is not a bonded notary")]
    NotANotary(String),
    #[error("record {0} is already finalized")]
    RecordFinalized(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Offense {
    FraudulentApproval,
    MismatchedReveal,
    InaccurateData,
    MissedReveal,
}

/// Slash rate per offense.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlashSchedule {
    pub fraudulent_approval: f64,
    pub mismatched_reveal: f64,
    pub inaccurate_data: f64,
    pub missed_reveal: f64,
}

impl Default for SlashSchedule {
    fn default() -> Self {
        Self {
            fraudulent_approval: 1.0,
            mismatched_reveal: 0.5,
            inaccurate_data: 0.3,
            missed_reveal: 0.1,
        }
    }
}

impl SlashSchedule {
    pub fn rate(&self, offense: Offense) -> f64 {
        match offense {
            Offense::FraudulentApproval => self.fraudulent_approval,
            Offense::MismatchedReveal => self.mismatched_reveal,
            Offense::InaccurateData => self.inaccurate_data,
            Offense::MissedReveal => self.missed_reveal,
        }
    }

    pub fn validate(&self) -> Result<(), LedgerError> {
        for o in [
            Offense::FraudulentApproval,
            Offense::MismatchedReveal,
            Offense::InaccurateData,
            Offense::MissedReveal,
        ] {
            check_rate(self.rate(o))?;
        }
        Ok(())
    }
}

fn check_rate(rate: f64) -> Result<(), LedgerError> {
    if (MIN_SLASH_RATE..=MAX_SLASH_RATE).contains(&rate) {
        Ok(())
    } else {
        Err(LedgerError::RateOutOfRange(rate))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LedgerConfig {
    pub epoch_pool: Units,
    /// Defaults to one day of epochs at the configured pool.
    pub daily_cap: Option<Units>,
    pub commit_window_secs: u64,
    pub challenge_window_secs: u64,
    pub notary_quorum: usize,
    pub min_notary_bond: Units,
    pub slash: SlashSchedule,
}

impl Default for LedgerConfig {
    fn default() -> Self {
        Self {
            epoch_pool: 1000,
            daily_cap: None,
            commit_window_secs: 120,
            challenge_window_secs: 3600,
            notary_quorum: 2,
            min_notary_bond: 100,
            slash: SlashSchedule::default(),
        }
    }
}

impl LedgerConfig {
    pub fn cap(&self) -> Units {
        self.daily_cap.unwrap_or(self.epoch_pool * EPOCHS_PER_DAY)
    }
}

/// Weighted combination of the three contribution axes (data quality, training
/// compute, model quality). Weights are non-negative and sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreWeights {
    pub data_quality: BigRational,
    pub training_compute: BigRational,
    pub model_quality: BigRational,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        let third = BigRational::new(1.into(), 3.into());
        Self {
            data_quality: third.clone(),
            training_compute: third.clone(),
            model_quality: third,
        }
    }
}

impl ScoreWeights {
    pub fn new(data: f64, compute: f64, model: f64) -> Result<Self, LedgerError> {
        let conv = |v: f64| {
            decimal_from_f64(v)
                .filter(|r| r >= &BigRational::zero())
                .ok_or_else(|| LedgerError::InvalidParameter(format!("bad axis weight {v}")))
        };
        let w = Self {
            data_quality: conv(data)?,
            training_compute: conv(compute)?,
            model_quality: conv(model)?,
        };
        let sum = &w.data_quality + &w.training_compute + &w.model_quality;
        if sum != BigRational::from_integer(1.into()) {
            return Err(LedgerError::InvalidParameter("axis weights must sum to 1".into()));
        }
        Ok(w)
    }

    pub fn combine(
        &self,
        data: &BigRational,
        compute: &BigRational,
        model: &BigRational,
    ) -> BigRational {
        &self.data_quality * data + &self.training_compute * compute + &self.model_quality * model
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLedger {
    pub epoch: u64,
    pub contributions: BTreeMap<String, BigRational>,
    pub rewards: BTreeMap<String, Units>,
    pub pool: Option<Units>,
    pub settled: bool,
}

impl EpochLedger {
    fn new(epoch: u64) -> Self {
        Self {
            epoch,
            contributions: BTreeMap::new(),
            rewards: BTreeMap::new(),
            pool: None,
            settled: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommitStatus {
    Pending,
    RevealedOk,
    Slashed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommitRecord {
    pub node: String,
    pub commitment: [u8; 32],
    pub commit_time: u64,
    pub revealed: Option<(Vec<u8>, Vec<u8>)>,
    pub status: CommitStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommitRound {
    pub round: u64,
    pub opened_at: u64,
    pub closes_at: u64,
    pub records: BTreeMap<String, CommitRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlashEvent {
    pub node: String,
    pub rate: f64,
    pub amount: Units,
    pub reason: Offense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Pending,
    Confirmed,
    Rejected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataRecord {
    pub id: String,
    pub contributor: String,
    pub fee: Units,
    pub window_close: u64,
    pub challengers: BTreeSet<String>,
    pub status: RecordStatus,
}

/// `SHA-256(result || nonce)`.
pub fn commitment(result: &[u8], nonce: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(result);
    h.update(nonce);
    h.finalize().into()
}

#[derive(Debug, Clone)]
pub struct Ledger {
    config: LedgerConfig,
    epochs: BTreeMap<u64, EpochLedger>,
    carry: Units,
    emitted: BTreeMap<u64, Units>,
    bonds: BTreeMap<String, Units>,
    notaries: BTreeSet<String>,
    rounds: BTreeMap<u64, CommitRound>,
    records: BTreeMap<String, DataRecord>,
    slashes: Vec<SlashEvent>,
    log: EventLog,
}

impl Ledger {
    pub fn new(config: LedgerConfig) -> Result<Self, LedgerError> {
        config.slash.validate()?;
        if config.notary_quorum == 0 {
            return Err(LedgerError::InvalidParameter("notary quorum must be >= 1".into()));
        }
        Ok(Self {
            config,
            epochs: BTreeMap::new(),
            carry: 0,
            emitted: BTreeMap::new(),
            bonds: BTreeMap::new(),
            notaries: BTreeSet::new(),
            rounds: BTreeMap::new(),
            records: BTreeMap::new(),
            slashes: Vec::new(),
            log: EventLog::default(),
        })
    }

    pub fn config(&self) -> &LedgerConfig {
        &self.config
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn epoch(&self, epoch: u64) -> Option<&EpochLedger> {
        self.epochs.get(&epoch)
    }

    pub fn carry(&self) -> Units {
        self.carry
    }

    pub fn emitted_on(&self, day: u64) -> Units {
        self.emitted.get(&day).copied().unwrap_or(0)
    }

    pub fn emitted_by_day(&self) -> &BTreeMap<u64, Units> {
        &self.emitted
    }

    pub fn bond(&self, node: &str) -> Option<Units> {
        self.bonds.get(node).copied()
    }

    pub fn slashes(&self) -> &[SlashEvent] {
        &self.slashes
    }

    pub fn commit_round(&self, round: u64) -> Option<&CommitRound> {
        self.rounds.get(&round)
    }

    pub fn record(&self, id: &str) -> Option<&DataRecord> {
        self.records.get(id)
    }

    pub fn post_bond(&mut self, node: &str, amount: Units) -> Units {
        let total = self.bonds.entry(node.to_string()).or_insert(0);
        *total += amount;
        let total = *total;
        self.log.append(LedgerEvent::BondPosted {
            node: node.to_string(),
            amount,
            total,
        });
        total
    }

    /// Registers a notary; its bond must meet the configured minimum.
    pub fn register_notary(&mut self, node: &str) -> Result<(), LedgerError> {
        if self.bond(node).unwrap_or(0) < self.config.min_notary_bond {
            return Err(LedgerError::NotANotary(node.to_string()));
        }
        self.notaries.insert(node.to_string());
        Ok(())
    }

    // --- contributions and settlement ---

    pub fn record_contribution(
        &mut self,
        epoch: u64,
        node: &str,
        delta: BigRational,
    ) -> Result<&BigRational, LedgerError> {
        if delta < BigRational::zero() {
            return Err(LedgerError::NegativeContribution);
        }
        let e = self.epochs.entry(epoch).or_insert_with(|| EpochLedger::new(epoch));
        if e.settled {
            return Err(LedgerError::AlreadySettled(epoch));
        }
        let score = e
            .contributions
            .entry(node.to_string())
            .or_insert_with(BigRational::zero);
        *score += &delta;
        self.log.append(LedgerEvent::Contribution {
            epoch,
            node: node.to_string(),
            delta: delta.to_string(),
            score: score.to_string(),
        });
        Ok(&self.epochs[&epoch].contributions[node])
    }

    /// Pays out the epoch pool (base pool plus any carried amount), counted against the
    /// epoch's own day. Returns the rewards; an empty map means the epoch had zero total
    /// weight and the pool was carried.
    pub fn settle_epoch(
        &mut self,
        epoch: u64,
        multipliers: &BTreeMap<String, BigRational>,
    ) -> Result<BTreeMap<String, Units>, LedgerError> {
        self.settle_epoch_on(epoch, epoch / EPOCHS_PER_DAY, multipliers)
    }

    /// As `settle_epoch`, with the emission counted against `day`; used to retry a
    /// deferred epoch on a later day.
    pub fn settle_epoch_on(
        &mut self,
        epoch: u64,
        day: u64,
        multipliers: &BTreeMap<String, BigRational>,
    ) -> Result<BTreeMap<String, Units>, LedgerError> {
        let e = self.epochs.entry(epoch).or_insert_with(|| EpochLedger::new(epoch));
        if e.settled {
            return Err(LedgerError::AlreadySettled(epoch));
        }
        let mut weights = BTreeMap::new();
        for (node, c) in &e.contributions {
            let t = multipliers
                .get(node)
                .ok_or_else(|| LedgerError::MissingTier(node.clone()))?;
            weights.insert(node.clone(), t * c);
        }
        let pool = self.config.epoch_pool + self.carry;
        let total: BigRational = weights.values().cloned().sum();
        if total.is_zero() {
            e.settled = true;
            e.pool = Some(0);
            self.carry = pool;
            self.log.append(LedgerEvent::PoolCarried { epoch, amount: pool });
            return Ok(BTreeMap::new());
        }
        let cap = self.config.cap();
        let emitted_today = self.emitted.get(&day).copied().unwrap_or(0);
        if emitted_today + pool > cap {
            self.log.append(LedgerEvent::SettlementDeferred {
                epoch,
                day,
                pool,
                emitted_today,
            });
            return Err(LedgerError::CapExceeded {
                epoch,
                pool,
                emitted_today,
                cap,
            });
        }
        let rewards = largest_remainder(pool, &weights);
        debug_assert_eq!(rewards.values().sum::<Units>(), pool);
        e.rewards = rewards.clone();
        e.pool = Some(pool);
        e.settled = true;
        self.carry = 0;
        let today = self.emitted.entry(day).or_insert(0);
        *today += pool;
        let emitted_today = *today;
        self.log.append(LedgerEvent::Settlement {
            epoch,
            day,
            pool,
            rewards: rewards.iter().map(|(k, v)| (k.clone(), *v)).collect(),
        });
        self.log.append(LedgerEvent::Emission {
            day,
            emitted_today,
            cap,
        });
        Ok(rewards)
    }

    // --- slashing ---

    /// Confiscates `floor(rate * bond)`; the rate is taken as the decimal it prints as.
    pub fn slash(&mut self, node: &str, rate: f64, reason: Offense) -> Result<SlashEvent, LedgerError> {
        check_rate(rate)?;
        let bond = self
            .bonds
            .get_mut(node)
            .ok_or_else(|| LedgerError::UnknownNode(node.to_string()))?;
        let exact = decimal_from_f64(rate).expect("finite rate") * BigRational::from_integer(BigInt::from(*bond));
        let amount = exact.floor().to_integer().to_u64().expect("amount <= bond");
        *bond -= amount;
        let bond_after = *bond;
        let event = SlashEvent {
            node: node.to_string(),
            rate,
            amount,
            reason,
        };
        self.slashes.push(event.clone());
        self.log.append(LedgerEvent::Slash {
            node: node.to_string(),
            rate: format!("{rate}"),
            amount,
            offense: reason,
            bond_after,
        });
        Ok(event)
    }

    pub fn slash_for(&mut self, node: &str, offense: Offense) -> Result<SlashEvent, LedgerError> {
        let rate = self.config.slash.rate(offense);
        self.slash(node, rate, offense)
    }

    // --- commit-reveal ---

    pub fn open_commit_round(&mut self, round: u64, now: u64) -> Result<&CommitRound, LedgerError> {
        if self.rounds.contains_key(&round) {
            return Err(LedgerError::DuplicateRound(round));
        }
        self.rounds.insert(
            round,
            CommitRound {
                round,
                opened_at: now,
                closes_at: now + self.config.commit_window_secs,
                records: BTreeMap::new(),
            },
        );
        Ok(&self.rounds[&round])
    }

    pub fn commit(
        &mut self,
        round: u64,
        node: &str,
        digest: [u8; 32],
        now: u64,
    ) -> Result<CommitStatus, LedgerError> {
        let r = self.rounds.get_mut(&round).ok_or(LedgerError::UnknownRound(round))?;
        if now >= r.closes_at {
            return Err(LedgerError::CommitWindowClosed(round));
        }
        if r.records.contains_key(node) {
            return Err(LedgerError::DuplicateCommit {
                round,
                node: node.to_string(),
            });
        }
        r.records.insert(
            node.to_string(),
            CommitRecord {
                node: node.to_string(),
                commitment: digest,
                commit_time: now,
                revealed: None,
                status: CommitStatus::Pending,
            },
        );
        self.log.append(LedgerEvent::Commit {
            round,
            node: node.to_string(),
            commitment: hex::encode(digest),
        });
        Ok(CommitStatus::Pending)
    }

    /// A matching reveal after the window closes is accepted; a mismatched one slashes
    /// the node at the configured rate. Early reveals are rejected and change nothing.
    pub fn reveal(
        &mut self,
        round: u64,
        node: &str,
        result: &[u8],
        nonce: &[u8],
        now: u64,
    ) -> Result<CommitStatus, LedgerError> {
        let r = self.rounds.get_mut(&round).ok_or(LedgerError::UnknownRound(round))?;
        if now < r.closes_at {
            return Err(LedgerError::RevealBeforeClose {
                round,
                closes_at: r.closes_at,
            });
        }
        let rec = r.records.get_mut(node).ok_or_else(|| LedgerError::NoCommit {
            round,
            node: node.to_string(),
        })?;
        if rec.status != CommitStatus::Pending {
            return Err(LedgerError::AlreadyRevealed {
                round,
                node: node.to_string(),
            });
        }
        let ok = commitment(result, nonce) == rec.commitment;
        rec.revealed = Some((result.to_vec(), nonce.to_vec()));
        rec.status = if ok {
            CommitStatus::RevealedOk
        } else {
            CommitStatus::Slashed
        };
        self.log.append(LedgerEvent::Reveal {
            round,
            node: node.to_string(),
            ok,
        });
        if !ok && self.bonds.contains_key(node) {
            self.slash_for(node, Offense::MismatchedReveal)?;
        }
        Ok(if ok {
            CommitStatus::RevealedOk
        } else {
            CommitStatus::Slashed
        })
    }

    // --- data registration ---

    pub fn register_data(
        &mut self,
        id: &str,
        contributor: &str,
        fee: Units,
        now: u64,
    ) -> Result<RecordStatus, LedgerError> {
        if self.records.contains_key(id) {
            return Err(LedgerError::DuplicateRecord(id.to_string()));
        }
        let window_close = now + self.config.challenge_window_secs;
        self.records.insert(
            id.to_string(),
            DataRecord {
                id: id.to_string(),
                contributor: contributor.to_string(),
                fee,
                window_close,
                challengers: BTreeSet::new(),
                status: RecordStatus::Pending,
            },
        );
        self.log.append(LedgerEvent::DataRegistered {
            record: id.to_string(),
            contributor: contributor.to_string(),
            fee,
            window_close,
        });
        Ok(RecordStatus::Pending)
    }

    /// A bonded notary upholds a challenge. Reaching the quorum rejects the record and
    /// slashes the contributor for inaccurate data.
    pub fn challenge(&mut self, id: &str, notary: &str, now: u64) -> Result<RecordStatus, LedgerError> {
        if !self.notaries.contains(notary) {
            return Err(LedgerError::NotANotary(notary.to_string()));
        }
        let quorum = self.config.notary_quorum;
        let rec = self
            .records
            .get_mut(id)
            .ok_or_else(|| LedgerError::UnknownRecord(id.to_string()))?;
        if rec.status != RecordStatus::Pending {
            return Err(LedgerError::RecordFinalized(id.to_string()));
        }
        if now >= rec.window_close {
            return Err(LedgerError::ChallengeWindowClosed(id.to_string()));
        }
        rec.challengers.insert(notary.to_string());
        let approvals = rec.challengers.len();
        let contributor = rec.contributor.clone();
        self.log.append(LedgerEvent::DataChallenged {
            record: id.to_string(),
            notary: notary.to_string(),
            approvals,
        });
        if approvals >= quorum {
            self.records.get_mut(id).expect("present").status = RecordStatus::Rejected;
            self.log.append(LedgerEvent::DataRejected { record: id.to_string() });
            if self.bonds.contains_key(&contributor) {
                self.slash_for(&contributor, Offense::InaccurateData)?;
            }
            return Ok(RecordStatus::Rejected);
        }
        Ok(RecordStatus::Pending)
    }

    /// Confirms a record whose window closed without a sustained challenge.
    pub fn finalize_data(&mut self, id: &str, now: u64) -> Result<RecordStatus, LedgerError> {
        let rec = self
            .records
            .get_mut(id)
            .ok_or_else(|| LedgerError::UnknownRecord(id.to_string()))?;
        match rec.status {
            RecordStatus::Pending if now < rec.window_close => {
                Err(LedgerError::ChallengeWindowOpen(id.to_string()))
            }
            RecordStatus::Pending => {
                rec.status = RecordStatus::Confirmed;
                let fee = rec.fee;
                self.log.append(LedgerEvent::DataConfirmed {
                    record: id.to_string(),
                    fee_released: fee,
                });
                Ok(RecordStatus::Confirmed)
            }
            other => Ok(other),
        }
    }

    /// Debug dump of every stored field, for structural checks on what the ledger holds.
    pub fn state_dump(&self) -> String {
        format!(
            "{:?}{:?}{:?}{:?}{:?}{:?}",
            self.epochs, self.bonds, self.rounds, self.records, self.slashes, self.log
        )
    }
}
