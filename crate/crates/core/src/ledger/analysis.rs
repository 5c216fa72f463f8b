//! Incentive-compatibility and identity-splitting calculators.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use serde::Serialize;

use super::settlement::{largest_remainder, rational_shares};
use super::{LedgerError, Units};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IcOutcome {
    /// `s * B + gamma * R / (1 - gamma)`
    pub cost_of_attack: f64,
    pub holds: bool,
    pub margin: f64,
}

/// Checks `s * B + sum_{t>=1} gamma^t R > G`, using the closed form of the series.
pub fn ic_check(
    bond: f64,
    rate: f64,
    discount: f64,
    reward: f64,
    gain: f64,
) -> Result<IcOutcome, LedgerError> {
    if !(discount > 0.0 && discount < 1.0) {
        return Err(LedgerError::InvalidParameter(format!(
            "discount must lie in (0, 1), got {discount}"
        )));
    }
    if !(0.1..=1.0).contains(&rate) {
        return Err(LedgerError::RateOutOfRange(rate));
    }
    for (name, v) in [("bond", bond), ("reward", reward), ("gain", gain)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(LedgerError::InvalidParameter(format!("{name} must be >= 0, got {v}")));
        }
    }
    let cost_of_attack = rate * bond + discount * reward / (1.0 - discount);
    Ok(IcOutcome {
        cost_of_attack,
        holds: cost_of_attack > gain,
        margin: cost_of_attack - gain,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SybilReport {
    pub unsplit_exact: BigRational,
    pub split_exact: BigRational,
    pub unsplit_units: Units,
    pub split_units: Units,
    pub identities: usize,
    pub bond_capital: Units,
}

impl SybilReport {
    pub fn unit_difference(&self) -> u64 {
        self.unsplit_units.abs_diff(self.split_units)
    }
}

/// Settles the same epoch twice: once with the node as one identity, once with its
/// contribution split across `parts.len()` identities of the same tier.
/// `others` are the remaining participants as `(id, tier multiplier, contribution)`.
pub fn sybil_total(
    pool: Units,
    tier: &BigRational,
    contribution: &BigRational,
    parts: &[BigRational],
    others: &[(String, BigRational, BigRational)],
    bond: Units,
) -> Result<SybilReport, LedgerError> {
    if parts.is_empty() {
        return Err(LedgerError::InvalidParameter("at least one identity".into()));
    }
    let sum: BigRational = parts.iter().cloned().sum();
    if &sum != contribution || parts.iter().any(|p| p < &BigRational::zero()) {
        return Err(LedgerError::InvalidParameter(
            "split parts must be non-negative and sum to the contribution".into(),
        ));
    }
    let base: BTreeMap<String, BigRational> = others
        .iter()
        .map(|(id, t, c)| (format!("other/{id}"), t * c))
        .collect();

    let mut unsplit = base.clone();
    unsplit.insert("self/0".into(), tier * contribution);
    let mut split = base;
    for (i, p) in parts.iter().enumerate() {
        split.insert(format!("self/{i}"), tier * p);
    }

    let own = |m: &BTreeMap<String, BigRational>| -> BigRational {
        m.iter()
            .filter(|(k, _)| k.starts_with("self/"))
            .map(|(_, v)| v.clone())
            .sum()
    };
    let own_units = |m: &BTreeMap<String, Units>| -> Units {
        m.iter()
            .filter(|(k, _)| k.starts_with("self/"))
            .map(|(_, v)| *v)
            .sum()
    };
    let zero_if_empty = |r: BigRational, m: &BTreeMap<String, BigRational>| {
        if m.is_empty() {
            BigRational::from_integer(BigInt::zero())
        } else {
            r
        }
    };

    let us = rational_shares(pool, &unsplit);
    let ss = rational_shares(pool, &split);
    Ok(SybilReport {
        unsplit_exact: zero_if_empty(own(&us), &us),
        split_exact: zero_if_empty(own(&ss), &ss),
        unsplit_units: own_units(&largest_remainder(pool, &unsplit)),
        split_units: own_units(&largest_remainder(pool, &split)),
        identities: parts.len(),
        bond_capital: bond * parts.len() as Units,
    })
}
