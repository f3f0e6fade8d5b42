//! Generators and engine audits shared by the property suites and the
//! acceptance run.

#![allow(dead_code)]

use std::collections::BTreeSet;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use qdy_core::explorer::{explore, Attack, ExplorationBounds, Explorer, Strategy as Search, Verdict};
use qdy_core::models::{self, Preset};
use qdy_core::protocol::{ChannelAssumptions, ProtocolSpec, ScenarioConfig};
use qdy_core::restrictions::check_ledger;
use qdy_core::terms::{eq_b, eq_e, InterchangeabilityConfig, Symbol, Term, Value};

pub const CASES: u32 = 1000;

pub fn config() -> Config {
    Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    }
}

/// Runs `check` on `CASES` generated inputs; the error names the first
/// failing input after shrinking.
pub fn run_property<S: Strategy>(
    strategy: S,
    check: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    TestRunner::new(config())
        .run(&strategy, check)
        .map_err(|e| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Model {
    /// Two-qubit QKD with the given bases of Alice, bases of Bob and data.
    Qkd([u8; 2], [u8; 2], [u8; 2]),
    Qbc([u8; 2]),
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub model: Model,
    pub preset: Preset,
    pub channels: ChannelAssumptions,
    pub view: &'static str,
    pub max_depth: usize,
}

impl Instance {
    pub fn spec(&self) -> ProtocolSpec {
        match &self.model {
            Model::Qkd(ba, bb, d) => {
                let sc = ScenarioConfig::new(
                    2,
                    &[("b", "Alice", &ba[..]), ("b", "Bob", &bb[..]), ("d", "Alice", &d[..])],
                    vec![BTreeSet::from([1]), BTreeSet::from([2])],
                )
                .expect("balanced two-qubit scenario");
                models::qkd_spec("qkd-2q-random", sc, self.channels, self.view).expect("valid model")
            }
            Model::Qbc(bb) => {
                let mut sc = ScenarioConfig::new(2, &[("b", "Bob", &bb[..])], vec![]).expect("scenario");
                sc.restrictions = models::qbc_restrictions();
                models::qbc_spec("qbc-2q-random", sc).expect("valid model")
            }
        }
    }

    pub fn bounds(&self, workers: usize, strategy: Search) -> ExplorationBounds {
        ExplorationBounds {
            max_depth: self.max_depth,
            max_states: 200_000,
            workers,
            strategy,
            ..ExplorationBounds::default()
        }
    }
}

fn balanced() -> impl Strategy<Value = [u8; 2]> {
    prop_oneof![Just([0u8, 1]), Just([1u8, 0])]
}

pub fn preset() -> impl Strategy<Value = Preset> {
    prop_oneof![
        Just(Preset::Passive),
        Just(Preset::Forge),
        Just(Preset::Epr),
        Just(Preset::Guess),
        Just(Preset::Full),
    ]
}

pub fn channels() -> impl Strategy<Value = ChannelAssumptions> {
    (any::<bool>(), any::<bool>(), any::<bool>(), any::<bool>(), any::<bool>()).prop_map(|(d, b, m, v, o)| {
        ChannelAssumptions {
            auth_done: d,
            auth_bases: b,
            auth_matching_bases: m,
            auth_verif: v,
            order: o,
        }
    })
}

/// Desk-scale instances: two-qubit QKD and QBC with random scenario bits,
/// threat presets, channel assumptions, viewpoints and depth bounds.
pub fn instance() -> impl Strategy<Value = Instance> {
    let model = prop_oneof![
        4 => (balanced(), balanced(), balanced()).prop_map(|(a, b, d)| Model::Qkd(a, b, d)),
        1 => balanced().prop_map(Model::Qbc),
    ];
    (model, preset(), channels(), prop_oneof![Just("Alice"), Just("Bob")], 2usize..=8).prop_map(
        |(model, preset, channels, view, max_depth)| Instance {
            model,
            preset,
            channels,
            view,
            max_depth,
        },
    )
}

pub fn run(inst: &Instance, workers: usize, strategy: Search) -> Result<Verdict, TestCaseError> {
    explore(&inst.spec(), &inst.preset.rules(), inst.bounds(workers, strategy))
        .map_err(|e| TestCaseError::fail(format!("exploration failed: {e}")))
}

/// Each qubit id is consumed by at most one `ID_Q` instance in the trace.
pub fn audit_no_cloning(attack: &Attack) -> Result<(), TestCaseError> {
    let ids = attack.trace.idq_instances();
    let distinct: BTreeSet<_> = ids.iter().collect();
    prop_assert_eq!(distinct.len(), ids.len(), "qubit used twice: {:?}", ids);
    Ok(())
}

/// The guesses of the trace respect the scenario restrictions.
pub fn audit_ledger(spec: &ProtocolSpec, attack: &Attack) -> Result<(), TestCaseError> {
    let ledger = attack.trace.guesses();
    prop_assert!(
        check_ledger(&ledger, &spec.scenario.restrictions),
        "ledger {:?} exceeds {:?}",
        ledger,
        spec.scenario.restrictions
    );
    Ok(())
}

pub fn audit_replay(inst: &Instance, attack: &Attack) -> Result<(), TestCaseError> {
    let ex = Explorer::new(&inst.spec(), &inst.preset.rules(), inst.bounds(1, Search::BreadthFirst))
        .map_err(|e| TestCaseError::fail(e.to_string()))?;
    let report = ex.replay(&attack.trace).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert!(report.violated, "replay did not reach the violation");
    prop_assert_eq!(report.violation.as_deref(), Some(attack.violation.as_str()));
    Ok(())
}

/// Worker count never changes the verdict, and breadth-first search is
/// fully deterministic.
pub fn audit_agreement(inst: &Instance, sequential: &Verdict) -> Result<(), TestCaseError> {
    let parallel = run(inst, 4, Search::BreadthFirst)?;
    prop_assert_eq!(sequential.name(), parallel.name());
    prop_assert_eq!(sequential.attack().map(|a| &a.trace), parallel.attack().map(|a| &a.trace));
    let dfs = run(inst, 1, Search::DepthFirst)?;
    if !matches!(sequential, Verdict::Inconclusive { .. }) && !matches!(dfs, Verdict::Inconclusive { .. }) {
        prop_assert_eq!(sequential.name(), dfs.name());
    }
    Ok(())
}

/// One exploration audited for every engine invariant.
pub fn engine_case(inst: Instance) -> Result<(), TestCaseError> {
    let verdict = run(&inst, 1, Search::BreadthFirst)?;
    if let Verdict::Attack(a) = &verdict {
        audit_no_cloning(a)?;
        audit_ledger(&inst.spec(), a)?;
        audit_replay(&inst, a)?;
    }
    if let Verdict::Inconclusive { reasons, stats } = &verdict {
        prop_assert!(!reasons.is_empty());
        prop_assert!(stats.inconclusive_branches > 0);
    }
    audit_agreement(&inst, &verdict)
}

// Terms for the equality laws.

const SEED: &str = "k";

fn value() -> impl Strategy<Value = Value> {
    prop_oneof![Just(Value::Zero), Just(Value::One)]
}

pub fn bit_term() -> impl Strategy<Value = Term> {
    (
        prop_oneof![Just("b"), Just("d")],
        1usize..=3,
        prop_oneof![Just("Alice"), Just("Bob"), Just("Eve")],
        value(),
    )
        .prop_map(|(bs, pos, role, v)| Term::bit(Term::name(SEED), bs, pos, role, v))
}

pub fn term() -> impl Strategy<Value = Term> {
    let leaf = prop_oneof![
        3 => bit_term(),
        1 => prop_oneof![Just("a"), Just("m")].prop_map(Term::name),
        1 => prop_oneof![Just("0"), Just("1"), Just("done")].prop_map(Term::constant),
    ];
    leaf.prop_recursive(3, 16, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Term::pair(a, b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Term::senc(a, b)),
            (inner.clone(), inner).prop_map(|(a, b)| Term::qubit(a, b)),
        ]
    })
}

pub fn interchangeability() -> impl Strategy<Value = InterchangeabilityConfig> {
    prop_oneof![
        Just(InterchangeabilityConfig::empty()),
        Just(InterchangeabilityConfig::cross(&["b"])),
        Just(InterchangeabilityConfig::cross(&["b", "d"])),
    ]
}

/// A term built from `t` by replacing random bits with interchangeable ones.
pub fn perturb(t: &Term, choices: &mut impl Iterator<Item = u8>, cfg: &InterchangeabilityConfig) -> Term {
    if let Some(b) = t.as_bit() {
        let c = choices.next().unwrap_or(0);
        let role = ["Alice", "Bob", "Eve"][(c % 3) as usize];
        let mut pos = b.position.clone();
        if cfg.is_cross(b.bitstring) && c >= 128 {
            pos = Term::constant(&((c as usize % 3) + 1).to_string());
        }
        return b.with(&pos, &Term::constant(role), b.value);
    }
    match t {
        Term::App(sym, args) => {
            let args: Vec<Term> = args.iter().map(|a| perturb(a, choices, cfg)).collect();
            Term::app(*sym, args).expect("same arity")
        }
        other => other.clone(),
    }
}

/// Equality laws of the honest comparison relation on one sample.
pub fn eq_laws_case(
    (a, b, c, cfg, choices): (Term, Term, Term, InterchangeabilityConfig, Vec<u8>),
) -> Result<(), TestCaseError> {
    prop_assert!(eq_b(&a, &a, &cfg));
    prop_assert_eq!(eq_b(&a, &b, &cfg), eq_b(&b, &a, &cfg));
    if eq_b(&a, &b, &cfg) && eq_b(&b, &c, &cfg) {
        prop_assert!(eq_b(&a, &c, &cfg));
    }
    if eq_e(&a, &b) {
        prop_assert!(eq_b(&a, &b, &cfg));
    }
    let mut it = choices.iter().copied().cycle();
    let a2 = perturb(&a, &mut it, &cfg);
    let b2 = perturb(&b, &mut it, &cfg);
    prop_assert!(eq_b(&a, &a2, &cfg), "{} vs {}", a, a2);
    let a3 = perturb(&a2, &mut it, &cfg);
    prop_assert!(eq_b(&a2, &a3, &cfg) && eq_b(&a, &a3, &cfg), "chain {} {} {}", a, a2, a3);
    for sym in [Symbol::Pair, Symbol::Senc, Symbol::Qubit] {
        let f = Term::app(sym, vec![a.clone(), b.clone()]).expect("binary");
        let g = Term::app(sym, vec![a2.clone(), b2.clone()]).expect("binary");
        prop_assert!(eq_b(&f, &g, &cfg), "congruence fails for {} and {}", f, g);
    }
    if let (Some(x), Some(y)) = (a.as_bit(), b.as_bit()) {
        if x.value != y.value {
            prop_assert!(!eq_b(&a, &b, &cfg));
        }
    }
    Ok(())
}

pub fn eq_laws_input(
) -> impl Strategy<Value = (Term, Term, Term, InterchangeabilityConfig, Vec<u8>)> {
    (term(), term(), term(), interchangeability(), prop::collection::vec(any::<u8>(), 1..8))
}
