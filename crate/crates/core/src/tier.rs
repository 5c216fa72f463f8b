//! Hardware tiers and their reward multipliers.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    ClaudeSession,
    GpuCompute,
    StorageNode,
    CpuOnly,
    MobileLight,
}

impl Tier {
    pub const ALL: [Tier; 5] = [
        Tier::ClaudeSession,
        Tier::GpuCompute,
        Tier::StorageNode,
        Tier::CpuOnly,
        Tier::MobileLight,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Tier::ClaudeSession => "claude_session",
            Tier::GpuCompute => "gpu_compute",
            Tier::StorageNode => "storage_node",
            Tier::CpuOnly => "cpu_only",
            Tier::MobileLight => "mobile_light",
        }
    }

    /// Tiers that hold shards.
    pub fn stores_shards(self) -> bool {
        !matches!(self, Tier::MobileLight)
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tier {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Tier::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown tier `{s}`"))
    }
}

/// Parses a plain decimal (`"3"`, `"0.3"`, `"-1.25"`, `"1e-3"`) into an exact rational.
pub fn parse_decimal(s: &str) -> Option<BigRational> {
    let s = s.trim();
    let (mantissa, exp) = match s.find(['e', 'E']) {
        Some(i) => (&s[..i], s[i + 1..].parse::<i32>().ok()?),
        None => (s, 0),
    };
    let (neg, digits) = match mantissa.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, mantissa.strip_prefix('+').unwrap_or(mantissa)),
    };
    let (int_part, frac_part) = match digits.split_once('.') {
        Some((a, b)) => (a, b),
        None => (digits, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.chars().chain(frac_part.chars()).all(|c| c.is_ascii_digit()) {
        return None;
    }
    let all = format!("{int_part}{frac_part}");
    let mut numer: BigInt = all.parse().ok()?;
    if neg {
        numer = -numer;
    }
    let scale = exp - frac_part.len() as i32;
    let ten = BigInt::from(10);
    Some(if scale >= 0 {
        BigRational::from_integer(numer * num_traits::pow(ten, scale as usize))
    } else {
        BigRational::new(numer, num_traits::pow(ten, (-scale) as usize))
    })
}

/// The exact decimal the value prints as, e.g. `0.3_f64` becomes `3/10`.
pub fn decimal_from_f64(v: f64) -> Option<BigRational> {
    if !v.is_finite() {
        return None;
    }
    parse_decimal(&format!("{v}"))
}

/// Multiplier per tier, held as exact rationals.
#[derive(Debug, Clone, PartialEq)]
pub struct TierTable {
    multipliers: BTreeMap<Tier, BigRational>,
}

impl Default for TierTable {
    fn default() -> Self {
        let r = |n: i64, d: i64| BigRational::new(n.into(), d.into());
        Self {
            multipliers: BTreeMap::from([
                (Tier::ClaudeSession, r(3, 1)),
                (Tier::GpuCompute, r(1, 1)),
                (Tier::StorageNode, r(3, 10)),
                (Tier::CpuOnly, r(3, 10)),
                (Tier::MobileLight, r(1, 10)),
            ]),
        }
    }
}

impl TierTable {
    pub fn multiplier(&self, tier: Tier) -> &BigRational {
        &self.multipliers[&tier]
    }

    /// Overrides one entry; multipliers must be non-negative.
    pub fn set(&mut self, tier: Tier, value: BigRational) -> Result<(), String> {
        if value < BigRational::from_integer(0.into()) {
            return Err(format!("negative multiplier for {tier}"));
        }
        self.multipliers.insert(tier, value);
        Ok(())
    }

    pub fn from_overrides(overrides: &BTreeMap<Tier, f64>) -> Result<Self, String> {
        let mut table = Self::default();
        for (tier, v) in overrides {
            let r = decimal_from_f64(*v).ok_or_else(|| format!("non-finite multiplier for {tier}"))?;
            table.set(*tier, r)?;
        }
        Ok(table)
    }
}
