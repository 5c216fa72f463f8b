//! Append-only event log with SHA-256 chaining.
//!
//! `digest_n = SHA-256(digest_{n-1} as hex || canonical JSON of event_n)`, with the
//! all-zero digest as the predecessor of the first entry.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Offense, Units};

pub const GENESIS_DIGEST: &str =
    "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LedgerEvent {
    BondPosted { node: String, amount: Units, total: Units },
    Contribution { epoch: u64, node: String, delta: String, score: String },
    Settlement { epoch: u64, day: u64, pool: Units, rewards: Vec<(String, Units)> },
    PoolCarried { epoch: u64, amount: Units },
    SettlementDeferred { epoch: u64, day: u64, pool: Units, emitted_today: Units },
    Emission { day: u64, emitted_today: Units, cap: Units },
    Commit { round: u64, node: String, commitment: String },
    Reveal { round: u64, node: String, ok: bool },
    Slash { node: String, rate: String, amount: Units, offense: Offense, bond_after: Units },
    DataRegistered { record: String, contributor: String, fee: Units, window_close: u64 },
    DataChallenged { record: String, notary: String, approvals: usize },
    DataRejected { record: String },
    DataConfirmed { record: String, fee_released: Units },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    pub prev: String,
    pub digest: String,
    pub event: LedgerEvent,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    entries: Vec<LogEntry>,
}

fn chain_digest(prev: &str, event: &LedgerEvent) -> String {
    let mut h = Sha256::new();
    h.update(prev.as_bytes());
    h.update(serde_json::to_vec(event).expect("events serialize"));
    hex::encode(h.finalize())
}

impl EventLog {
    pub fn append(&mut self, event: LedgerEvent) -> &LogEntry {
        let prev = self
            .entries
            .last()
            .map_or_else(|| GENESIS_DIGEST.to_string(), |e| e.digest.clone());
        let digest = chain_digest(&prev, &event);
        self.entries.push(LogEntry {
            seq: self.entries.len() as u64,
            prev,
            digest,
            event,
        });
        self.entries.last().expect("just pushed")
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn head(&self) -> &str {
        self.entries.last().map_or(GENESIS_DIGEST, |e| &e.digest)
    }

    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entries serialize"));
            out.push('\n');
        }
        out
    }

    /// Index of the first entry whose link or digest does not check out.
    pub fn verify_chain(entries: &[LogEntry]) -> Result<(), usize> {
        let mut prev = GENESIS_DIGEST.to_string();
        for (i, e) in entries.iter().enumerate() {
            if e.seq != i as u64 || e.prev != prev || e.digest != chain_digest(&prev, &e.event) {
                return Err(i);
            }
            prev = e.digest.clone();
        }
        Ok(())
    }

    pub fn parse_lines(text: &str) -> Result<Vec<LogEntry>, serde_json::Error> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_detects_tampering() {
        let mut log = EventLog::default();
        log.append(LedgerEvent::BondPosted { node: "a".into(), amount: 5, total: 5 });
        log.append(LedgerEvent::PoolCarried { epoch: 1, amount: 9 });
        let parsed = EventLog::parse_lines(&log.to_lines()).unwrap();
        assert_eq!(parsed, log.entries());
        assert_eq!(EventLog::verify_chain(&parsed), Ok(()));

        let mut forged = parsed.clone();
        forged[0].event = LedgerEvent::BondPosted { node: "a".into(), amount: 6, total: 6 };
        assert_eq!(EventLog::verify_chain(&forged), Err(0));
        let mut dropped = parsed;
        dropped.remove(0);
        assert_eq!(EventLog::verify_chain(&dropped), Err(0));
    }
}
