//! Built-in protocols (BB84 key distribution and bit commitment) and
//! threat-model presets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::deduction::{Rule, ThreatRuleSet};
use crate::protocol::{
    Action, ChannelAssumptions, ChannelProps, Expr, HintPart, ProtocolKind, ProtocolSpec, PropertySpec,
    RoleSpec, ScenarioConfig, ScenarioError,
};
use crate::restrictions::{RestrictionSet, RoleCap};
use crate::terms::{InterchangeabilityConfig, Term, Value};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("unknown threat preset `{0}` (expected passive, forge, epr, guess or full)")]
    UnknownPreset(String),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Preset {
    Passive,
    Forge,
    Epr,
    Guess,
    Full,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::Passive, Preset::Forge, Preset::Epr, Preset::Guess, Preset::Full];

    pub fn rules(self) -> ThreatRuleSet {
        use Rule::*;
        let passive = vec![IdQ];
        let forge = [passive.clone(), vec![Measure, Forge]].concat();
        match self {
            Preset::Passive => ThreatRuleSet::new(passive),
            Preset::Forge => ThreatRuleSet::new(forge),
            Preset::Epr => ThreatRuleSet::new([forge, vec![Epr, EprLeak]].concat()),
            Preset::Guess => ThreatRuleSet::new([forge, vec![Guess, Complem]].concat()),
            Preset::Full => ThreatRuleSet::all(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Passive => "passive",
            Preset::Forge => "forge",
            Preset::Epr => "epr",
            Preset::Guess => "guess",
            Preset::Full => "full",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| ModelError::UnknownPreset(s.to_string()))
    }
}

pub fn threat_preset(name: &str) -> Result<ThreatRuleSet, ModelError> {
    Ok(name.parse::<Preset>()?.rules())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    TwoQubit,
    FourQubit,
}

impl Variant {
    pub fn n(self) -> usize {
        match self {
            Variant::TwoQubit => 2,
            Variant::FourQubit => 4,
        }
    }
}

pub const DONE: &str = "done";

/// Both bases match in the two-qubit scenario; the four-qubit one matches at
/// positions 1 and 4.
pub fn qkd_scenario(variant: Variant) -> ScenarioConfig {
    let (bitstrings, groups): (Vec<(&str, &str, &[u8])>, Vec<BTreeSet<usize>>) = match variant {
        Variant::TwoQubit => (
            vec![("b", "Alice", &[0, 1]), ("b", "Bob", &[0, 1]), ("d", "Alice", &[0, 1])],
            vec![BTreeSet::from([1]), BTreeSet::from([2])],
        ),
        Variant::FourQubit => (
            vec![
                ("b", "Alice", &[0, 1, 0, 1]),
                ("b", "Bob", &[0, 0, 1, 1]),
                ("d", "Alice", &[0, 1, 1, 0]),
            ],
            vec![BTreeSet::from([1, 4]), BTreeSet::from([2, 3])],
        ),
    };
    ScenarioConfig::new(variant.n(), &bitstrings, groups).expect("built-in scenario")
}

/// Minimum number of matching positions before a run continues.
pub const MIN_MATCHING: usize = 2;

pub fn qkd_spec(
    name: &str,
    scenario: ScenarioConfig,
    channels: ChannelAssumptions,
    view: &str,
) -> Result<ProtocolSpec, ScenarioError> {
    for (bs, role) in [("b", "Alice"), ("b", "Bob"), ("d", "Alice")] {
        if scenario.bitstrings.get(bs).and_then(|r| r.get(role)).is_none() {
            return Err(ScenarioError::Validation(format!(
                "qkd scenario needs bitstring {bs} for {role}"
            )));
        }
    }
    if view != "Alice" && view != "Bob" {
        return Err(ScenarioError::Validation(format!("unknown viewpoint `{view}`")));
    }
    let var = Expr::var;
    let done = Term::constant(DONE);

    let mut alice = vec![
        Action::SendQuantum {
            tag: "q".into(),
            data: var("d"),
            bases: var("b"),
        },
        Action::ReceiveClassical {
            tag: "done".into(),
            bind: "x".into(),
            hints: vec![HintPart::Against(Expr::Const(done.clone()))],
        },
        Action::CompareB {
            left: var("x"),
            right: Expr::Const(done.clone()),
        },
    ];
    if channels.order {
        alice.push(Action::AwaitEvent("measured".into()));
        alice.push(Action::CloseQuantum);
    }
    alice.extend([
        Action::SendClassical {
            tag: "bases".into(),
            msg: vec![var("b")],
        },
        Action::ReceiveClassical {
            tag: "matching".into(),
            bind: "m".into(),
            hints: vec![HintPart::Indices],
        },
        Action::SplitVerification {
            indices: "m".into(),
            verif: "v".into(),
            key: "k".into(),
            min: MIN_MATCHING,
        },
        Action::SendClassical {
            tag: "verif".into(),
            msg: vec![Expr::select(var("d"), "v")],
        },
        Action::SendClassical {
            tag: "keycheck".into(),
            msg: vec![Expr::select(var("d"), "m")],
        },
        Action::Finish {
            key: Expr::select(var("d"), "k"),
        },
    ]);

    let bob = vec![
        Action::ReceiveQuantumAndMeasure {
            tag: "q".into(),
            bases: var("bp"),
            bind: "dp".into(),
        },
        Action::Event {
            label: "measured".into(),
            terms: vec![],
        },
        Action::SendClassical {
            tag: "done".into(),
            msg: vec![Expr::Const(done)],
        },
        Action::ReceiveClassical {
            tag: "bases".into(),
            bind: "ba".into(),
            hints: vec![HintPart::Against(var("bp"))],
        },
        Action::MatchBases {
            received: var("ba"),
            own: var("bp"),
            bind: "m".into(),
            min: MIN_MATCHING,
        },
        Action::SendClassical {
            tag: "matching".into(),
            msg: vec![var("m")],
        },
        Action::SplitVerification {
            indices: "m".into(),
            verif: "v".into(),
            key: "k".into(),
            min: MIN_MATCHING,
        },
        Action::ReceiveClassical {
            tag: "verif".into(),
            bind: "vr".into(),
            hints: vec![HintPart::Against(Expr::select(var("dp"), "v"))],
        },
        Action::CompareB {
            left: var("vr"),
            right: Expr::select(var("dp"), "v"),
        },
        Action::ReceiveClassical {
            tag: "keycheck".into(),
            bind: "kc".into(),
            hints: vec![HintPart::Against(Expr::select(var("dp"), "m"))],
        },
        Action::CompareB {
            left: var("kc"),
            right: Expr::select(var("dp"), "m"),
        },
        Action::Finish {
            key: Expr::select(var("dp"), "k"),
        },
    ];

    let auth = |authentic| ChannelProps {
        authentic,
        confidential: false,
    };
    let channel_props = BTreeMap::from([
        ("done".to_string(), auth(channels.auth_done)),
        ("bases".to_string(), auth(channels.auth_bases)),
        ("matching".to_string(), auth(channels.auth_matching_bases)),
        ("verif".to_string(), auth(channels.auth_verif)),
        (
            "keycheck".to_string(),
            ChannelProps {
                authentic: channels.auth_verif,
                confidential: true,
            },
        ),
    ]);

    let spec = ProtocolSpec {
        name: name.to_string(),
        kind: ProtocolKind::Qkd,
        roles: vec![
            RoleSpec {
                name: "Alice".into(),
                program: alice,
                initial: BTreeMap::from([
                    ("b".to_string(), scenario.bits("b", "Alice")),
                    ("d".to_string(), scenario.bits("d", "Alice")),
                ]),
            },
            RoleSpec {
                name: "Bob".into(),
                program: bob,
                initial: BTreeMap::from([("bp".to_string(), scenario.bits("b", "Bob"))]),
            },
        ],
        scenario,
        cfg: InterchangeabilityConfig::empty(),
        channels,
        channel_props,
        property: PropertySpec::Secrecy {
            viewpoint: view.to_string(),
        },
        initial_knowledge: vec![],
        data_bitstrings: vec!["d".into()],
        disabled_rules: BTreeSet::new(),
        threat_model: None,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn builtin_qkd(variant: Variant, channels: ChannelAssumptions) -> ProtocolSpec {
    let name = match variant {
        Variant::TwoQubit => "qkd-2q",
        Variant::FourQubit => "qkd-4q",
    };
    qkd_spec(name, qkd_scenario(variant), channels, "Bob").expect("built-in model")
}

pub fn with_view(mut spec: ProtocolSpec, view: &str) -> ProtocolSpec {
    if let PropertySpec::Secrecy { viewpoint } = &mut spec.property {
        *viewpoint = view.to_string();
    }
    spec
}

/// The value Alice reveals after the commitment (the `[+]` base).
pub fn qbc_plus() -> Term {
    Term::bit(crate::protocol::secret_seed(), "b", 1, "Alice", Value::Zero)
}

/// The `[×]` base, known to the intruder from the start.
pub fn qbc_times() -> Term {
    Term::bit(crate::protocol::secret_seed(), "b", 1, "Alice", Value::One)
}

pub fn qbc_scenario(variant: Variant) -> ScenarioConfig {
    let bases: &[u8] = match variant {
        Variant::TwoQubit => &[0, 1],
        Variant::FourQubit => &[0, 1, 0, 1],
    };
    let mut sc = ScenarioConfig::new(variant.n(), &[("b", "Bob", bases)], vec![]).expect("built-in scenario");
    sc.restrictions = qbc_restrictions();
    sc
}

/// No base may be guessed.
pub fn qbc_restrictions() -> RestrictionSet {
    RestrictionSet {
        per_bitstring_role: ["Alice", "Bob"]
            .into_iter()
            .map(|role| RoleCap {
                bitstring: "b".into(),
                role: role.into(),
                max: 0,
            })
            .collect(),
        groups: vec![],
    }
}

/// Bob measures the intruder's qubits, commits, then accepts an unveiled
/// base when the data bits at positions measured in that base agree.
pub fn qbc_spec(name: &str, scenario: ScenarioConfig) -> Result<ProtocolSpec, ScenarioError> {
    if scenario.bitstrings.get("b").and_then(|r| r.get("Bob")).is_none() {
        return Err(ScenarioError::Validation("qbc scenario needs bitstring b for Bob".into()));
    }
    let n = scenario.n;
    let var = Expr::var;
    let bob = vec![
        Action::ReceiveQuantumAndMeasure {
            tag: "q".into(),
            bases: var("bp"),
            bind: "dp".into(),
        },
        Action::Event {
            label: "committed".into(),
            terms: vec![],
        },
        Action::ReceiveClassical {
            tag: "unveil".into(),
            bind: "u".into(),
            hints: vec![HintPart::AgainstAny(var("bp")), HintPart::Against(var("dp"))],
        },
        Action::MatchBases {
            received: Expr::Repeat(Box::new(Expr::Elem("u".into(), 0)), n),
            own: var("bp"),
            bind: "m".into(),
            min: 1,
        },
        Action::CompareB {
            left: Expr::Select(Box::new(Expr::Slice("u".into(), 1)), "m".into()),
            right: Expr::select(var("dp"), "m"),
        },
        Action::Event {
            label: "accept".into(),
            terms: vec![Expr::Elem("u".into(), 0)],
        },
        Action::Finish {
            key: Expr::Elem("u".into(), 0),
        },
    ];
    let env = vec![
        Action::AwaitEvent("committed".into()),
        Action::SendClassical {
            tag: "reveal".into(),
            msg: vec![Expr::Const(qbc_plus())],
        },
        Action::Finish {
            key: Expr::Const(qbc_plus()),
        },
    ];
    let spec = ProtocolSpec {
        name: name.to_string(),
        kind: ProtocolKind::Qbc,
        roles: vec![
            RoleSpec {
                name: "Bob".into(),
                program: bob,
                initial: BTreeMap::from([("bp".to_string(), scenario.bits("b", "Bob"))]),
            },
            RoleSpec {
                name: "Env".into(),
                program: env,
                initial: BTreeMap::new(),
            },
        ],
        scenario,
        cfg: InterchangeabilityConfig::cross(&["b"]),
        channels: ChannelAssumptions::default(),
        channel_props: BTreeMap::new(),
        property: PropertySpec::Binding {
            role: "Bob".into(),
            event: "accept".into(),
            value: qbc_plus(),
        },
        initial_knowledge: vec![qbc_times()],
        data_bitstrings: vec![],
        disabled_rules: BTreeSet::from([Rule::Complem]),
        threat_model: None,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn builtin_qbc(variant: Variant) -> ProtocolSpec {
    let name = match variant {
        Variant::TwoQubit => "qbc-2q",
        Variant::FourQubit => "qbc-4q",
    };
    qbc_spec(name, qbc_scenario(variant)).expect("built-in model")
}

pub const MODELS: [(&str, &str); 4] = [
    ("qkd-2q", "BB84 key distribution, 2 qubits, both bases match"),
    ("qkd-4q", "BB84 key distribution, 4 qubits, bases match at positions 1 and 4"),
    ("qbc-2q", "BB84 bit commitment, 2 qubits, intruder commits"),
    ("qbc-4q", "BB84 bit commitment, 4 qubits, intruder commits"),
];

/// Looks up a built-in model; channel assumptions and view apply to QKD only.
pub fn by_name(name: &str, channels: ChannelAssumptions, view: &str) -> Result<ProtocolSpec, ModelError> {
    let spec = match name {
        "qkd-2q" => builtin_qkd(Variant::TwoQubit, channels),
        "qkd-4q" => builtin_qkd(Variant::FourQubit, channels),
        "qbc-2q" => return Ok(builtin_qbc(Variant::TwoQubit)),
        "qbc-4q" => return Ok(builtin_qbc(Variant::FourQubit)),
        other => return Err(ModelError::UnknownModel(other.to_string())),
    };
    Ok(with_view(spec, view))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::terms::eq_b;

    #[test]
    fn presets() {
        use Rule::*;
        assert_eq!(threat_preset("passive").unwrap(), ThreatRuleSet::new([IdQ]));
        assert_eq!(
            threat_preset("EPR").unwrap(),
            ThreatRuleSet::new([IdQ, Measure, Forge, Epr, EprLeak])
        );
        assert_eq!(threat_preset("full").unwrap(), ThreatRuleSet::all());
        assert!(matches!(threat_preset("nope"), Err(ModelError::UnknownPreset(_))));
        for p in Preset::ALL {
            assert!(p.rules().is_subset(&Preset::Full.rules()));
        }
    }

    #[test]
    fn four_qubit_matching_positions() {
        let sc = qkd_scenario(Variant::FourQubit);
        let cfg = InterchangeabilityConfig::empty();
        let matching: Vec<usize> = (1..=4)
            .filter(|&p| eq_b(&sc.bit("b", "Alice", p).unwrap(), &sc.bit("b", "Bob", p).unwrap(), &cfg))
            .collect();
        assert_eq!(matching, vec![1, 4]);
        assert!(sc.validate().is_ok());
    }

    #[test]
    fn two_qubit_caps() {
        let sc = qkd_scenario(Variant::TwoQubit);
        assert_eq!(sc.restrictions.cap_for("b", "Alice"), Some(1));
        assert!(sc.restrictions.groups.iter().all(|g| g.max == 1));
    }

    #[test]
    fn catalog_resolves() {
        for (name, _) in MODELS {
            let spec = by_name(name, ChannelAssumptions::default(), "Bob").unwrap();
            assert!(spec.validate().is_ok());
        }
        assert!(by_name("qkd-9q", ChannelAssumptions::default(), "Bob").is_err());
    }

    #[test]
    fn example_scenario_document() {
        let doc = r#"{"protocol":"qkd","n":4,
            "bitstrings":{"b":{"Alice":["0","1","0","1"],"Bob":["0","0","1","1"]},"d":{"Alice":["0","1","1","0"]}},
            "sameValueGroups":[[1,4],[2,3]],
            "channels":{"authDone":true,"authMatchingBases":true,"authVerif":true},
            "threatModel":"full","property":{"secrecy":"Bob"}}"#;
        let spec = crate::protocol::parse_scenario(doc).unwrap();
        assert_eq!(spec.scenario, qkd_scenario(Variant::FourQubit));
        assert!(spec.channels.auth_verif);
        assert_eq!(spec.threat_model.as_deref(), Some("full"));
    }
}
