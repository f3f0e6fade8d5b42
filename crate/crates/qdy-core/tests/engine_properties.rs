mod common;

use common::*;
use proptest::prelude::*;
use qdy_core::explorer::{Strategy as Search, Verdict};
use qdy_core::models::Preset;

proptest! {
    #![proptest_config(config())]

    #[test]
    fn attack_traces_never_clone_qubits(inst in instance()) {
        if let Verdict::Attack(a) = run(&inst, 1, Search::BreadthFirst)? {
            audit_no_cloning(&a)?;
        }
    }

    #[test]
    fn attack_traces_respect_guess_caps(inst in instance()) {
        if let Verdict::Attack(a) = run(&inst, 1, Search::BreadthFirst)? {
            audit_ledger(&inst.spec(), &a)?;
        }
    }

    #[test]
    fn attack_traces_replay_to_the_violation(inst in instance()) {
        if let Verdict::Attack(a) = run(&inst, 1, Search::BreadthFirst)? {
            audit_replay(&inst, &a)?;
        }
    }

    #[test]
    fn worker_count_does_not_change_the_verdict(inst in instance()) {
        let v = run(&inst, 1, Search::BreadthFirst)?;
        audit_agreement(&inst, &v)?;
    }

    #[test]
    fn exhausted_only_without_inconclusive_branches(inst in instance()) {
        match run(&inst, 1, Search::BreadthFirst)? {
            Verdict::Exhausted { stats } => prop_assert_eq!(stats.inconclusive_branches, 0),
            Verdict::Inconclusive { reasons, stats } => {
                prop_assert!(!reasons.is_empty());
                prop_assert!(stats.inconclusive_branches > 0);
            }
            Verdict::Attack(_) => {}
        }
    }

    #[test]
    fn stronger_presets_keep_attacks(inst in instance()) {
        let full = Instance { preset: Preset::Full, ..inst.clone() };
        if let Verdict::Exhausted { .. } = run(&full, 1, Search::BreadthFirst)? {
            for p in [Preset::Passive, Preset::Forge, Preset::Epr, Preset::Guess] {
                let weaker = Instance { preset: p, ..inst.clone() };
                let v = run(&weaker, 1, Search::BreadthFirst)?;
                prop_assert!(matches!(v, Verdict::Exhausted { .. }), "{:?} under {:?}", v.name(), p);
            }
        }
    }
}
