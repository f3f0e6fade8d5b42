mod common;

use std::collections::BTreeSet;

use common::{channels, config, preset};
use proptest::prelude::*;
use qdy_core::explorer::{ExplorationBounds, Explorer};
use qdy_core::models::{builtin_qkd, Variant};
use qdy_core::protocol::{Blocked, ChannelAssumptions, Output, ProtocolSpec, RoleState, Status};
use qdy_core::terms::{eq_e_calls, NameSupply, Term};

/// Everything observable about one honest run.
#[derive(Debug, PartialEq, Eq)]
struct Run {
    outputs: Vec<(String, Output)>,
    roles: Vec<RoleState>,
}

/// Delivers every message to its receiver unchanged, picking among the
/// enabled deliveries with `schedule`.
fn forward(spec: &ProtocolSpec, schedule: &[u8]) -> Run {
    let mut roles: Vec<RoleState> = spec.roles.iter().map(RoleState::new).collect();
    let mut names = NameSupply::new();
    let mut fired: BTreeSet<String> = BTreeSet::new();
    let mut pending: Vec<Output> = Vec::new();
    let mut outputs = Vec::new();
    let mut blocked: Vec<Blocked> = vec![Blocked::Terminated; roles.len()];
    let mut choices = schedule.iter().copied().cycle();

    let step = |i: usize,
                roles: &mut Vec<RoleState>,
                fired: &mut BTreeSet<String>,
                pending: &mut Vec<Output>,
                outputs: &mut Vec<(String, Output)>,
                blocked: &mut Vec<Blocked>| {
        let mut out = Vec::new();
        let seen = fired.clone();
        blocked[i] = roles[i].run(&spec.roles[i].program, &spec.cfg, &|l| seen.contains(l), &mut out);
        for o in out {
            if let Output::Event { label, .. } = &o {
                fired.insert(label.clone());
            }
            outputs.push((spec.roles[i].name.clone(), o.clone()));
            pending.push(o);
        }
    };

    for i in 0..roles.len() {
        step(i, &mut roles, &mut fired, &mut pending, &mut outputs, &mut blocked);
    }
    loop {
        // (role, index into pending) for deliveries; None for a close or a fired await.
        let mut enabled: Vec<(usize, Option<usize>)> = Vec::new();
        for (i, b) in blocked.iter().enumerate() {
            match b {
                Blocked::ReceiveClassical { tag } => enabled.extend(
                    pending
                        .iter()
                        .position(|o| matches!(o, Output::Classical { tag: t, .. } if t == tag))
                        .map(|p| (i, Some(p))),
                ),
                Blocked::ReceiveQuantum { tag } => enabled.extend(
                    pending
                        .iter()
                        .position(|o| matches!(o, Output::Quantum { tag: t, .. } if t == tag))
                        .map(|p| (i, Some(p))),
                ),
                Blocked::AwaitEvent(l) if fired.contains(l) => enabled.push((i, None)),
                Blocked::CloseQuantum => enabled.push((i, None)),
                _ => {}
            }
        }
        if enabled.is_empty() {
            break;
        }
        let (i, p) = enabled[choices.next().unwrap_or(0) as usize % enabled.len()];
        let program = &spec.roles[i].program;
        match p {
            Some(p) => match pending.remove(p) {
                Output::Classical { msg, .. } => roles[i].deliver_classical(program, msg).unwrap(),
                Output::Quantum { qubits, .. } => {
                    roles[i].deliver_quantum(program, &qubits, &spec.cfg, &mut names).unwrap();
                }
                _ => unreachable!(),
            },
            None if matches!(blocked[i], Blocked::CloseQuantum) => roles[i].close_quantum(program).unwrap(),
            None => {}
        }
        step(i, &mut roles, &mut fired, &mut pending, &mut outputs, &mut blocked);
    }
    Run { outputs, roles }
}

fn qkd() -> impl Strategy<Value = ProtocolSpec> {
    (prop_oneof![Just(Variant::TwoQubit), Just(Variant::FourQubit)], channels())
        .prop_map(|(v, c)| builtin_qkd(v, c))
}

fn bases_sent_by_alice(o: &Output) -> bool {
    matches!(o, Output::Classical { tag, .. } if tag == "bases")
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn roles_are_deterministic(spec in qkd(), schedule in prop::collection::vec(any::<u8>(), 1..16)) {
        prop_assert_eq!(forward(&spec, &schedule), forward(&spec, &schedule));
    }

    #[test]
    fn forwarded_runs_finish_with_equal_keys(spec in qkd(), schedule in prop::collection::vec(any::<u8>(), 1..16)) {
        let run = forward(&spec, &schedule);
        for r in &run.roles {
            prop_assert_eq!(&r.status, &Status::Finished);
        }
        let keys: Vec<&Option<Vec<Term>>> = run.roles.iter().map(|r| &r.key).collect();
        prop_assert_eq!(keys[0], keys[1]);
        prop_assert!(keys[0].as_ref().is_some_and(|k| !k.is_empty()));
    }

    #[test]
    fn honest_runs_never_compare_exactly(spec in qkd(), schedule in prop::collection::vec(any::<u8>(), 1..16)) {
        let before = eq_e_calls();
        forward(&spec, &schedule);
        prop_assert_eq!(eq_e_calls(), before);
    }

    #[test]
    fn ordered_runs_reveal_bases_only_after_measurement(
        channels in channels(),
        rules in preset(),
        walk in prop::collection::vec(any::<u16>(), 1..12),
    ) {
        let spec = builtin_qkd(Variant::TwoQubit, ChannelAssumptions { order: true, ..channels });
        let ex = Explorer::new(&spec, &rules.rules(), ExplorationBounds::default()).unwrap();
        let mut s = ex.initial_state();
        for c in walk {
            let Ok(next) = ex.successors(&s) else { break };
            if next.is_empty() {
                break;
            }
            s = next[c as usize % next.len()].clone();
        }
        let mut measured = false;
        for step in s.steps() {
            for h in &step.honest {
                if h.role == "Alice" && bases_sent_by_alice(&h.output) {
                    prop_assert!(measured, "bases sent before Bob measured at step {}", step.index);
                }
                if h.role == "Bob" && matches!(&h.output, Output::Event { label, .. } if label == "measured") {
                    measured = true;
                }
            }
        }
    }
}
