mod common;

use std::collections::BTreeSet;

use common::config;
use num_rational::Ratio;
use proptest::prelude::*;
use qdy_core::deduction::{GuessKey, GuessLedger};
use qdy_core::restrictions::{
    binomial, check_ledger, default_budgets, exact_tail_probability, RestrictionSet, MAX_EXACT_N,
};

const N: usize = 4;

fn key() -> impl Strategy<Value = GuessKey> {
    (
        prop_oneof![Just("b"), Just("d")],
        prop_oneof![Just("Alice"), Just("Bob")],
        1..=N,
    )
        .prop_map(|(b, r, p)| GuessKey::new(b, r, p))
}

fn ledger(keys: &[GuessKey]) -> GuessLedger {
    let mut l = GuessLedger::default();
    for k in keys {
        l.record(k.clone());
    }
    l
}

// Standard caps over a random partition of positions into same-value groups.
fn restriction_set() -> impl Strategy<Value = RestrictionSet> {
    prop::collection::vec(0usize..3, N).prop_map(|labels| {
        let pairs: Vec<(String, String)> = ["b", "d"]
            .iter()
            .flat_map(|b| ["Alice", "Bob"].map(|r| (b.to_string(), r.to_string())))
            .collect();
        let mut groups: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); 3];
        for (i, l) in labels.iter().enumerate() {
            groups[*l].insert(i + 1);
        }
        groups.retain(|g| !g.is_empty());
        RestrictionSet::standard(N, &pairs, &groups).unwrap()
    })
}

// Direct count of the caps, independent of the library's own bookkeeping.
fn within_caps(keys: &BTreeSet<GuessKey>, rs: &RestrictionSet) -> bool {
    rs.per_bitstring_role.iter().all(|c| {
        keys.iter().filter(|k| k.bitstring == c.bitstring && k.role == c.role).count() <= c.max
    }) && rs.groups.iter().all(|g| keys.iter().filter(|k| g.covers(k)).count() <= g.max)
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn tail_is_antitone_in_the_threshold(n in 0usize..=MAX_EXACT_N, a in 0usize..=MAX_EXACT_N, b in 0usize..=MAX_EXACT_N) {
        let (lo, hi) = (a.min(b).min(n), a.max(b).min(n));
        let p_lo = exact_tail_probability(n, lo).unwrap();
        let p_hi = exact_tail_probability(n, hi).unwrap();
        prop_assert!(p_hi <= p_lo);
        prop_assert!(p_lo <= Ratio::new(1, 1));
        prop_assert_eq!(exact_tail_probability(n, 0).unwrap(), Ratio::new(1, 1));
    }

    #[test]
    fn tail_matches_enumeration(n in 0usize..=12, k in 0usize..=12, target in any::<u16>()) {
        let k = k.min(n);
        let mask = if n == 0 { 0 } else { (1u32 << n) - 1 };
        let target = target as u32 & mask;
        let hits = (0u32..1 << n).filter(|s| n - ((s ^ target) & mask).count_ones() as usize >= k).count();
        prop_assert_eq!(exact_tail_probability(n, k).unwrap(), Ratio::new(hits as u64, 1u64 << n));
    }

    #[test]
    fn even_half_tail_has_a_closed_form(half in 1usize..=MAX_EXACT_N / 2) {
        let n = 2 * half;
        let closed = Ratio::new(1, 2) + Ratio::new(binomial(n, half), 1u64 << (n + 1));
        prop_assert_eq!(exact_tail_probability(n, half).unwrap(), closed);
        let (h, q) = default_budgets(n).unwrap();
        prop_assert_eq!(h, half);
        prop_assert_eq!(q, (n / 4).max(1));
    }

    #[test]
    fn check_ledger_agrees_with_direct_count(keys in prop::collection::vec(key(), 0..8), rs in restriction_set()) {
        let distinct: BTreeSet<GuessKey> = keys.iter().cloned().collect();
        prop_assert_eq!(check_ledger(&ledger(&keys), &rs), within_caps(&distinct, &rs));
    }

    #[test]
    fn violations_persist_in_supersets(
        keys in prop::collection::vec(key(), 0..8),
        more in prop::collection::vec(key(), 0..4),
        rs in restriction_set(),
    ) {
        let small = ledger(&keys);
        let mut all = keys.clone();
        all.extend(more.iter().cloned());
        let big = ledger(&all);
        if !check_ledger(&small, &rs) {
            prop_assert!(!check_ledger(&big, &rs));
        }
        if check_ledger(&big, &rs) {
            prop_assert!(check_ledger(&small, &rs));
        }
        prop_assert_eq!(rs.admits(&small, more.iter()), check_ledger(&big, &rs));
    }
}
