//! Guess budgets and restriction sets.
//!
//! A restriction set caps how many distinct bits the intruder may guess, per
//! `(bitstring, role)` and per group of positions. The default caps for `n`
//! positions are `n/2` and `max(1, n/4)`.

use std::collections::BTreeSet;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deduction::{GuessKey, GuessLedger};

/// Largest `n` for which tail probabilities are computed exactly.
pub const MAX_EXACT_N: usize = 24;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RestrictionError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RoleCap {
    pub bitstring: String,
    pub role: String,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GroupCap {
    pub label: String,
    pub positions: BTreeSet<usize>,
    pub bitstrings: BTreeSet<String>,
    pub roles: BTreeSet<String>,
    pub max: usize,
}

impl GroupCap {
    pub fn covers(&self, key: &GuessKey) -> bool {
        self.positions.contains(&key.position)
            && self.bitstrings.contains(&key.bitstring)
            && self.roles.contains(&key.role)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RestrictionSet {
    #[serde(default)]
    pub per_bitstring_role: Vec<RoleCap>,
    #[serde(default)]
    pub groups: Vec<GroupCap>,
}

impl RestrictionSet {
    /// Default caps for `n` positions: every `(bitstring, role)` pair gets the
    /// half budget and each same-value group the quarter budget.
    pub fn standard(
        n: usize,
        pairs: &[(String, String)],
        same_value_groups: &[BTreeSet<usize>],
    ) -> Result<RestrictionSet, RestrictionError> {
        let (half, quarter) = default_budgets(n)?;
        let bitstrings: BTreeSet<String> = pairs.iter().map(|(b, _)| b.clone()).collect();
        let roles: BTreeSet<String> = pairs.iter().map(|(_, r)| r.clone()).collect();
        Ok(RestrictionSet {
            per_bitstring_role: pairs
                .iter()
                .map(|(b, r)| RoleCap {
                    bitstring: b.clone(),
                    role: r.clone(),
                    max: half,
                })
                .collect(),
            groups: same_value_groups
                .iter()
                .map(|positions| GroupCap {
                    label: group_label(positions),
                    positions: positions.clone(),
                    bitstrings: bitstrings.clone(),
                    roles: roles.clone(),
                    max: quarter,
                })
                .collect(),
        })
    }

    pub fn cap_for(&self, bitstring: &str, role: &str) -> Option<usize> {
        self.per_bitstring_role
            .iter()
            .filter(|c| c.bitstring == bitstring && c.role == role)
            .map(|c| c.max)
            .min()
    }

    pub fn validate(&self, n: usize) -> Result<(), RestrictionError> {
        for g in &self.groups {
            if let Some(p) = g.positions.iter().find(|&&p| p == 0 || p > n) {
                return Err(RestrictionError::InvalidParameter(format!(
                    "group {} mentions position {p} outside 1..={n}",
                    g.label
                )));
            }
        }
        Ok(())
    }

    /// Would adding `keys` to `ledger` keep every cap?
    pub fn admits<'a>(&self, ledger: &GuessLedger, keys: impl IntoIterator<Item = &'a GuessKey>) -> bool {
        let mut extended = ledger.clone();
        for k in keys {
            extended.record(k.clone());
        }
        check_ledger(&extended, self)
    }
}

pub fn group_label(positions: &BTreeSet<usize>) -> String {
    let parts: Vec<String> = positions.iter().map(|p| p.to_string()).collect();
    format!("{{{}}}", parts.join(","))
}

/// `(n/2, max(1, n/4))`.
pub fn default_budgets(n: usize) -> Result<(usize, usize), RestrictionError> {
    if n < 2 || n % 2 != 0 {
        return Err(RestrictionError::InvalidParameter(format!(
            "security parameter must be even and at least 2, got {n}"
        )));
    }
    Ok((n / 2, (n / 4).max(1)))
}

pub fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u64 / (i + 1) as u64;
    }
    acc
}

/// Probability that a uniform `n`-bit string agrees with a fixed target on at
/// least `k` positions.
pub fn exact_tail_probability(n: usize, k: usize) -> Result<Ratio<u64>, RestrictionError> {
    if n > MAX_EXACT_N {
        return Err(RestrictionError::InvalidParameter(format!(
            "n = {n} exceeds the exact range (at most {MAX_EXACT_N})"
        )));
    }
    if k > n {
        return Err(RestrictionError::InvalidParameter(format!(
            "threshold {k} exceeds length {n}"
        )));
    }
    let hits: u64 = (k..=n).map(|j| binomial(n, j)).sum();
    Ok(Ratio::new(hits, 1u64 << n))
}

pub fn check_ledger(ledger: &GuessLedger, rs: &RestrictionSet) -> bool {
    let per_role_ok = rs
        .per_bitstring_role
        .iter()
        .all(|c| ledger.count_for(&c.bitstring, &c.role) <= c.max);
    let groups_ok = rs
        .groups
        .iter()
        .all(|g| ledger.keys().filter(|k| g.covers(k)).count() <= g.max);
    per_role_ok && groups_ok
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(b: &str, r: &str, p: usize) -> GuessKey {
        GuessKey::new(b, r, p)
    }

    fn four_qubit_caps() -> RestrictionSet {
        let pairs = [("b", "Alice"), ("b", "Bob"), ("d", "Alice")]
            .map(|(b, r)| (b.to_string(), r.to_string()));
        let groups = [BTreeSet::from([1, 4]), BTreeSet::from([2, 3])];
        let mut rs = RestrictionSet::standard(4, &pairs, &groups).unwrap();
        for g in &mut rs.groups {
            g.roles = ["Alice", "Bob"].map(String::from).into();
        }
        rs
    }

    #[test]
    fn budgets() {
        assert_eq!(default_budgets(4).unwrap(), (2, 1));
        assert_eq!(default_budgets(2).unwrap(), (1, 1));
        assert_eq!(default_budgets(8).unwrap(), (4, 2));
        assert!(default_budgets(3).is_err());
        assert!(default_budgets(0).is_err());
    }

    #[test]
    fn tails() {
        assert_eq!(exact_tail_probability(4, 0).unwrap(), Ratio::new(1, 1));
        assert_eq!(exact_tail_probability(4, 4).unwrap(), Ratio::new(1, 16));
        assert_eq!(exact_tail_probability(4, 2).unwrap(), Ratio::new(11, 16));
        assert!(exact_tail_probability(4, 5).is_err());
        assert!(exact_tail_probability(25, 1).is_err());
    }

    #[test]
    fn brute_force_tails() {
        for n in 0..=12usize {
            for k in 0..=n {
                // Count strings agreeing with the all-zero target on >= k positions.
                let hits = (0u32..1 << n).filter(|s| n - s.count_ones() as usize >= k).count();
                let expected = Ratio::new(hits as u64, 1u64 << n);
                assert_eq!(exact_tail_probability(n, k).unwrap(), expected, "n={n} k={k}");
            }
        }
    }

    #[test]
    fn half_tail_closed_form() {
        for n in (2..=MAX_EXACT_N).step_by(2) {
            let closed = Ratio::new(1, 2) + Ratio::new(binomial(n, n / 2), 1u64 << (n + 1));
            assert_eq!(exact_tail_probability(n, n / 2).unwrap(), closed);
        }
    }

    #[test]
    fn four_qubit_ledgers() {
        let rs = four_qubit_caps();
        let mut ledger = GuessLedger::default();
        ledger.record(key("b", "Alice", 1));
        ledger.record(key("b", "Alice", 2));
        assert!(check_ledger(&ledger, &rs));
        let mut more = ledger.clone();
        more.record(key("b", "Alice", 3));
        assert!(!check_ledger(&more, &rs));

        let mut cross = GuessLedger::default();
        cross.record(key("b", "Alice", 1));
        cross.record(key("d", "Bob", 4));
        assert!(!check_ledger(&cross, &rs));
    }

    #[test]
    fn repeated_guess_counts_once() {
        let rs = four_qubit_caps();
        let mut ledger = GuessLedger::default();
        for _ in 0..3 {
            ledger.record(key("b", "Alice", 1));
        }
        assert!(check_ledger(&ledger, &rs));
    }

    #[test]
    fn group_positions_are_validated() {
        let mut rs = four_qubit_caps();
        assert!(rs.validate(4).is_ok());
        rs.groups[0].positions.insert(7);
        assert!(rs.validate(4).is_err());
    }
}
