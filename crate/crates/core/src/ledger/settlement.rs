//! Proportional pool splitting in exact arithmetic.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};

use super::Units;

/// `pool * w_i / sum_j w_j` for every entry, exactly. Empty when the total weight is zero.
pub fn rational_shares(
    pool: Units,
    weights: &BTreeMap<String, BigRational>,
) -> BTreeMap<String, BigRational> {
    let total: BigRational = weights.values().cloned().sum();
    if total.is_zero() {
        return BTreeMap::new();
    }
    let pool = BigRational::from_integer(BigInt::from(pool));
    weights
        .iter()
        .map(|(k, w)| (k.clone(), &pool * w / &total))
        .collect()
}

/// Largest-remainder rounding of the exact shares: every entry gets the floor of its
/// share, and the leftover units go one each to the largest fractional parts
/// (ties broken by ascending key). The result sums to `pool` exactly.
pub fn largest_remainder(
    pool: Units,
    weights: &BTreeMap<String, BigRational>,
) -> BTreeMap<String, Units> {
    let shares = rational_shares(pool, weights);
    if shares.is_empty() {
        return BTreeMap::new();
    }
    let mut out = BTreeMap::new();
    let mut remainders: Vec<(BigRational, &String)> = Vec::with_capacity(shares.len());
    let mut assigned: Units = 0;
    for (k, share) in &shares {
        let (q, r) = share.numer().div_mod_floor(share.denom());
        let floor = q.to_u64().expect("share is within [0, pool]");
        assigned += floor;
        out.insert(k.clone(), floor);
        remainders.push((BigRational::new(r, share.denom().clone()), k));
    }
    let leftover = pool - assigned;
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    for (_, k) in remainders.into_iter().take(leftover as usize) {
        *out.get_mut(k).expect("key present") += 1;
    }
    out
}
