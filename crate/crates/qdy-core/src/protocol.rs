//! Role programs, channel assumptions and the honest small-step semantics.
//!
//! A role is a straight-line program over list-valued variables. Receives
//! carry hints describing how the bound value is used later; the explorer
//! reads them to build a finite set of intruder candidates.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deduction::{measure_honest, EprEvent, Rule};
use crate::restrictions::{RestrictionError, RestrictionSet};
use crate::terms::{eq_b_all, InterchangeabilityConfig, NameSupply, Term, Value};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("variable `{0}` is not bound")]
    Unbound(String),
    #[error("input does not match: {0}")]
    PatternMismatch(String),
    #[error("invalid protocol: {0}")]
    Validation(String),
    #[error("role `{role}` is not blocked on {expected}")]
    NotBlocked { role: String, expected: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("schema error at {location}: {message}")]
    Schema { location: String, message: String },
    #[error("validation error: {0}")]
    Validation(String),
}

impl From<RestrictionError> for ScenarioError {
    fn from(e: RestrictionError) -> Self {
        ScenarioError::Validation(e.to_string())
    }
}

impl From<ProtocolError> for ScenarioError {
    fn from(e: ProtocolError) -> Self {
        ScenarioError::Validation(e.to_string())
    }
}

/// List-valued expression over the role environment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Var(String),
    /// Zero-based element.
    Elem(String, usize),
    Const(Term),
    /// Elements of the list at the 1-based index constants bound to the variable.
    Select(Box<Expr>, String),
    /// Suffix starting at a zero-based offset.
    Slice(String, usize),
    /// A single-element expression repeated.
    Repeat(Box<Expr>, usize),
}

impl Expr {
    pub fn var(v: &str) -> Expr {
        Expr::Var(v.to_string())
    }

    pub fn select(list: Expr, idx: &str) -> Expr {
        Expr::Select(Box::new(list), idx.to_string())
    }

    pub fn eval(&self, env: &BTreeMap<String, Vec<Term>>) -> Result<Vec<Term>, ProtocolError> {
        let get = |v: &str| env.get(v).ok_or_else(|| ProtocolError::Unbound(v.to_string()));
        match self {
            Expr::Var(v) => Ok(get(v)?.clone()),
            Expr::Elem(v, i) => get(v)?
                .get(*i)
                .map(|t| vec![t.clone()])
                .ok_or_else(|| ProtocolError::PatternMismatch(format!("`{v}` has no element {i}"))),
            Expr::Const(t) => Ok(vec![t.clone()]),
            Expr::Select(list, idx) => {
                let items = list.eval(env)?;
                get(idx)?
                    .iter()
                    .map(|i| {
                        i.label()
                            .and_then(|l| l.parse::<usize>().ok())
                            .filter(|&p| p >= 1 && p <= items.len())
                            .map(|p| items[p - 1].clone())
                            .ok_or_else(|| ProtocolError::PatternMismatch(format!("bad index {i}")))
                    })
                    .collect()
            }
            Expr::Slice(v, from) => {
                let items = get(v)?;
                if *from > items.len() {
                    return Err(ProtocolError::PatternMismatch(format!("`{v}` shorter than {from}")));
                }
                Ok(items[*from..].to_vec())
            }
            Expr::Repeat(e, n) => {
                let items = e.eval(env)?;
                if items.len() != 1 {
                    return Err(ProtocolError::PatternMismatch("repeat of a non-singleton".into()));
                }
                Ok(vec![items[0].clone(); *n])
            }
        }
    }

    fn vars(&self, out: &mut Vec<String>) {
        match self {
            Expr::Var(v) | Expr::Elem(v, _) | Expr::Slice(v, _) => out.push(v.clone()),
            Expr::Const(_) => {}
            Expr::Select(list, idx) => {
                list.vars(out);
                out.push(idx.clone());
            }
            Expr::Repeat(e, _) => e.vars(out),
        }
    }

    /// Variables whose contents flow into the value (index variables excluded).
    fn payload_vars(&self, out: &mut Vec<String>) {
        match self {
            Expr::Var(v) | Expr::Elem(v, _) | Expr::Slice(v, _) => out.push(v.clone()),
            Expr::Const(_) => {}
            Expr::Select(list, _) => list.payload_vars(out),
            Expr::Repeat(e, _) => e.payload_vars(out),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Elem(v, i) => write!(f, "{v}[{i}]"),
            Expr::Const(t) => write!(f, "{t}"),
            Expr::Select(l, i) => write!(f, "{l}@{i}"),
            Expr::Slice(v, i) => write!(f, "{v}[{i}..]"),
            Expr::Repeat(e, n) => write!(f, "{e}^{n}"),
        }
    }
}

/// How a received component is used later.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HintPart {
    /// One component per element, each only compared against that element.
    Against(Expr),
    /// One component compared against each element of the list.
    AgainstAny(Expr),
    /// The remaining components are position indices.
    Indices,
}

/// Evaluated hint for one or more message components.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Slot {
    Against(Term),
    AgainstAny(Vec<Term>),
    Indices,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    SendClassical { tag: String, msg: Vec<Expr> },
    ReceiveClassical { tag: String, bind: String, hints: Vec<HintPart> },
    SendQuantum { tag: String, data: Expr, bases: Expr },
    ReceiveQuantumAndMeasure { tag: String, bases: Expr, bind: String },
    /// Indices (1-based) where `received` and `own` agree modulo ≈ᵇ; aborts
    /// when fewer than `min` agree.
    MatchBases { received: Expr, own: Expr, bind: String, min: usize },
    /// Last index is the verification index, the rest are key indices.
    SplitVerification { indices: String, verif: String, key: String, min: usize },
    CompareB { left: Expr, right: Expr },
    Event { label: String, terms: Vec<Expr> },
    AwaitEvent(String),
    /// Held qubits on the quantum channel expire.
    CloseQuantum,
    Finish { key: Expr },
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |xs: &[Expr]| xs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(", ");
        match self {
            Action::SendClassical { tag, msg } => write!(f, "send {tag}({})", list(msg)),
            Action::ReceiveClassical { tag, bind, .. } => write!(f, "receive {tag} -> {bind}"),
            Action::SendQuantum { tag, data, bases } => write!(f, "send {tag} qubits({data}, {bases})"),
            Action::ReceiveQuantumAndMeasure { tag, bases, bind } => {
                write!(f, "receive {tag}, measure in {bases} -> {bind}")
            }
            Action::MatchBases { received, own, bind, .. } => write!(f, "{bind} := match({received}, {own})"),
            Action::SplitVerification { indices, verif, key, .. } => {
                write!(f, "({verif}, {key}) := split({indices})")
            }
            Action::CompareB { left, right } => write!(f, "check {left} ≈ {right}"),
            Action::Event { label, terms } => write!(f, "event {label}({})", list(terms)),
            Action::AwaitEvent(l) => write!(f, "await {l}"),
            Action::CloseQuantum => write!(f, "close quantum channel"),
            Action::Finish { key } => write!(f, "finish key {key}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleSpec {
    pub name: String,
    pub program: Vec<Action>,
    pub initial: BTreeMap<String, Vec<Term>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ChannelAssumptions {
    #[serde(default)]
    pub auth_done: bool,
    #[serde(default)]
    pub auth_bases: bool,
    #[serde(default)]
    pub auth_matching_bases: bool,
    #[serde(default)]
    pub auth_verif: bool,
    #[serde(default)]
    pub order: bool,
}

impl ChannelAssumptions {
    /// Parses a comma-separated list of `done`, `bases`, `matchingBases`, `verif`.
    pub fn from_auth_list(csv: &str) -> Result<Self, String> {
        let mut c = Self::default();
        for item in csv.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "done" => c.auth_done = true,
                "bases" => c.auth_bases = true,
                "matchingBases" => c.auth_matching_bases = true,
                "verif" => c.auth_verif = true,
                other => return Err(format!("unknown channel `{other}`")),
            }
        }
        Ok(c)
    }
}

impl fmt::Display for ChannelAssumptions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        for (on, name) in [
            (self.auth_done, "done"),
            (self.auth_bases, "bases"),
            (self.auth_matching_bases, "matchingBases"),
            (self.auth_verif, "verif"),
        ] {
            if on {
                parts.push(name);
            }
        }
        write!(f, "Auth({})", parts.join(","))?;
        if self.order {
            write!(f, " + Order")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ChannelProps {
    /// The receiver only accepts the honest message.
    pub authentic: bool,
    /// The intruder does not learn the message.
    pub confidential: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PropertySpec {
    /// The viewpoint role's key must not be deducible without guessing.
    Secrecy { viewpoint: String },
    /// `role` must never emit `event` with a term ≈ `value`.
    Binding { role: String, event: String, value: Term },
}

impl fmt::Display for PropertySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PropertySpec::Secrecy { viewpoint } => write!(f, "secrecy of the key ({viewpoint} view)"),
            PropertySpec::Binding { value, .. } => write!(f, "binding (no acceptance of {value})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioConfig {
    pub n: usize,
    /// bitstring → role → values by position.
    pub bitstrings: BTreeMap<String, BTreeMap<String, Vec<Value>>>,
    pub same_value_groups: Vec<BTreeSet<usize>>,
    pub restrictions: RestrictionSet,
    pub allow_unbalanced: bool,
}

impl ScenarioConfig {
    pub fn new(
        n: usize,
        bitstrings: &[(&str, &str, &[u8])],
        same_value_groups: Vec<BTreeSet<usize>>,
    ) -> Result<Self, ScenarioError> {
        let mut map: BTreeMap<String, BTreeMap<String, Vec<Value>>> = BTreeMap::new();
        for (bs, role, values) in bitstrings {
            let vals = values
                .iter()
                .map(|v| if *v == 0 { Value::Zero } else { Value::One })
                .collect();
            map.entry(bs.to_string()).or_default().insert(role.to_string(), vals);
        }
        let pairs = pairs_of(&map);
        let restrictions = RestrictionSet::standard(n, &pairs, &same_value_groups)?;
        Ok(Self {
            n,
            bitstrings: map,
            same_value_groups,
            restrictions,
            allow_unbalanced: false,
        })
    }

    /// `bit(~k, bs, pos, role, v)` for the fixed sample at `pos` (1-based).
    pub fn bit(&self, bitstring: &str, role: &str, pos: usize) -> Option<Term> {
        let v = *self.bitstrings.get(bitstring)?.get(role)?.get(pos.checked_sub(1)?)?;
        Some(Term::bit(secret_seed(), bitstring, pos, role, v))
    }

    pub fn bits(&self, bitstring: &str, role: &str) -> Vec<Term> {
        (1..=self.n).filter_map(|p| self.bit(bitstring, role, p)).collect()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        crate::restrictions::default_budgets(self.n)?;
        for (bs, roles) in &self.bitstrings {
            for (role, values) in roles {
                if values.len() != self.n {
                    return Err(ScenarioError::Validation(format!(
                        "bitstring {bs} of {role} has {} positions, expected {}",
                        values.len(),
                        self.n
                    )));
                }
                let ones = values.iter().filter(|v| **v == Value::One).count();
                if !self.allow_unbalanced && ones * 2 != values.len() {
                    return Err(ScenarioError::Validation(format!(
                        "bitstring {bs} of {role} is unbalanced ({ones} ones out of {})",
                        values.len()
                    )));
                }
            }
        }
        for g in &self.same_value_groups {
            if g.iter().any(|&p| p == 0 || p > self.n) {
                return Err(ScenarioError::Validation(format!(
                    "same-value group {} is outside 1..={}",
                    crate::restrictions::group_label(g),
                    self.n
                )));
            }
        }
        self.restrictions.validate(self.n)?;
        Ok(())
    }
}

fn pairs_of(map: &BTreeMap<String, BTreeMap<String, Vec<Value>>>) -> Vec<(String, String)> {
    map.iter()
        .flat_map(|(bs, roles)| roles.keys().map(move |r| (bs.clone(), r.clone())))
        .collect()
}

pub fn secret_seed() -> Term {
    Term::name("k")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolKind {
    Qkd,
    Qbc,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolSpec {
    pub name: String,
    pub kind: ProtocolKind,
    pub roles: Vec<RoleSpec>,
    pub scenario: ScenarioConfig,
    pub cfg: InterchangeabilityConfig,
    pub channels: ChannelAssumptions,
    pub channel_props: BTreeMap<String, ChannelProps>,
    pub property: PropertySpec,
    pub initial_knowledge: Vec<Term>,
    /// Bitstrings whose bits are carried as qubit data.
    pub data_bitstrings: Vec<String>,
    /// Rules removed from any threat model applied to this protocol.
    pub disabled_rules: BTreeSet<Rule>,
    /// Threat preset named by the scenario document, if any.
    pub threat_model: Option<String>,
}

impl ProtocolSpec {
    pub fn channel(&self, tag: &str) -> ChannelProps {
        self.channel_props.get(tag).copied().unwrap_or_default()
    }

    pub fn role_index(&self, name: &str) -> Option<usize> {
        self.roles.iter().position(|r| r.name == name)
    }

    /// Checks that variables are bound before use and that values received
    /// under comparison hints are never re-sent.
    pub fn validate(&self) -> Result<(), ProtocolError> {
        for role in &self.roles {
            let mut bound: BTreeSet<String> = role.initial.keys().cloned().collect();
            let mut hinted: BTreeSet<String> = BTreeSet::new();
            let check = |e: &Expr, bound: &BTreeSet<String>| -> Result<(), ProtocolError> {
                let mut vs = Vec::new();
                e.vars(&mut vs);
                match vs.into_iter().find(|v| !bound.contains(v)) {
                    Some(v) => Err(ProtocolError::Validation(format!(
                        "role {}: `{v}` used before it is bound",
                        role.name
                    ))),
                    None => Ok(()),
                }
            };
            for action in &role.program {
                match action {
                    Action::SendClassical { msg, .. } => {
                        for e in msg {
                            check(e, &bound)?;
                            let mut vs = Vec::new();
                            e.payload_vars(&mut vs);
                            if let Some(v) = vs.iter().find(|v| hinted.contains(*v)) {
                                return Err(ProtocolError::Validation(format!(
                                    "role {}: received value `{v}` is re-sent",
                                    role.name
                                )));
                            }
                        }
                    }
                    Action::ReceiveClassical { bind, hints, .. } => {
                        for h in hints {
                            match h {
                                HintPart::Against(e) | HintPart::AgainstAny(e) => {
                                    check(e, &bound)?;
                                    hinted.insert(bind.clone());
                                }
                                HintPart::Indices => {}
                            }
                        }
                        bound.insert(bind.clone());
                    }
                    Action::SendQuantum { data, bases, .. } => {
                        check(data, &bound)?;
                        check(bases, &bound)?;
                    }
                    Action::ReceiveQuantumAndMeasure { bases, bind, .. } => {
                        check(bases, &bound)?;
                        bound.insert(bind.clone());
                    }
                    Action::MatchBases { received, own, bind, .. } => {
                        check(received, &bound)?;
                        check(own, &bound)?;
                        bound.insert(bind.clone());
                    }
                    Action::SplitVerification { indices, verif, key, .. } => {
                        check(&Expr::var(indices), &bound)?;
                        bound.insert(verif.clone());
                        bound.insert(key.clone());
                    }
                    Action::CompareB { left, right } => {
                        check(left, &bound)?;
                        check(right, &bound)?;
                    }
                    Action::Event { terms, .. } => {
                        for e in terms {
                            check(e, &bound)?;
                        }
                    }
                    Action::Finish { key } => check(key, &bound)?,
                    Action::AwaitEvent(_) | Action::CloseQuantum => {}
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase", tag = "status", content = "reason")]
pub enum Status {
    Running,
    Aborted(String),
    Finished,
}

/// What an eager run produced.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Output {
    Classical { tag: String, msg: Vec<Term> },
    Quantum { tag: String, qubits: Vec<Term> },
    Event { label: String, terms: Vec<Term> },
    Finished { key: Vec<Term> },
    Aborted { reason: String },
}

/// Why a role stopped running.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Blocked {
    ReceiveClassical { tag: String },
    ReceiveQuantum { tag: String },
    AwaitEvent(String),
    CloseQuantum,
    Terminated,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RoleState {
    pub pc: usize,
    pub env: BTreeMap<String, Vec<Term>>,
    pub status: Status,
    pub key: Option<Vec<Term>>,
}

impl RoleState {
    pub fn new(spec: &RoleSpec) -> Self {
        Self {
            pc: 0,
            env: spec.initial.clone(),
            status: Status::Running,
            key: None,
        }
    }

    pub fn is_running(&self) -> bool {
        self.status == Status::Running
    }

    fn abort(&mut self, reason: String, out: &mut Vec<Output>) {
        self.status = Status::Aborted(reason.clone());
        out.push(Output::Aborted { reason });
    }

    /// Executes local actions until the next blocking action.
    pub fn run(
        &mut self,
        program: &[Action],
        cfg: &InterchangeabilityConfig,
        fired: &dyn Fn(&str) -> bool,
        out: &mut Vec<Output>,
    ) -> Blocked {
        while self.is_running() {
            let Some(action) = program.get(self.pc) else {
                self.abort("program ended without finishing".into(), out);
                break;
            };
            match action {
                Action::ReceiveClassical { tag, .. } => {
                    return Blocked::ReceiveClassical { tag: tag.clone() };
                }
                Action::ReceiveQuantumAndMeasure { tag, .. } => {
                    return Blocked::ReceiveQuantum { tag: tag.clone() };
                }
                Action::AwaitEvent(label) => {
                    if fired(label) {
                        self.pc += 1;
                        continue;
                    }
                    return Blocked::AwaitEvent(label.clone());
                }
                Action::CloseQuantum => return Blocked::CloseQuantum,
                _ => {}
            }
            let result: Result<(), ProtocolError> = (|| {
                match action {
                    Action::SendClassical { tag, msg } => {
                        let mut items = Vec::new();
                        for e in msg {
                            items.extend(e.eval(&self.env)?);
                        }
                        out.push(Output::Classical { tag: tag.clone(), msg: items });
                    }
                    Action::SendQuantum { tag, data, bases } => {
                        let d = data.eval(&self.env)?;
                        let b = bases.eval(&self.env)?;
                        if d.len() != b.len() {
                            return Err(ProtocolError::PatternMismatch("data and bases differ in length".into()));
                        }
                        let qubits = d.into_iter().zip(b).map(|(d, b)| Term::qubit(d, b)).collect();
                        out.push(Output::Quantum { tag: tag.clone(), qubits });
                    }
                    Action::MatchBases { received, own, bind, min } => {
                        let r = received.eval(&self.env)?;
                        let o = own.eval(&self.env)?;
                        if r.len() != o.len() {
                            return Err(ProtocolError::PatternMismatch("bases differ in length".into()));
                        }
                        let m: Vec<Term> = (0..r.len())
                            .filter(|&i| eq_b_all(&r[i..=i], &o[i..=i], cfg))
                            .map(|i| Term::constant(&(i + 1).to_string()))
                            .collect();
                        if m.len() < *min {
                            return Err(ProtocolError::PatternMismatch(format!(
                                "{} matching positions, need {min}",
                                m.len()
                            )));
                        }
                        self.env.insert(bind.clone(), m);
                    }
                    Action::SplitVerification { indices, verif, key, min } => {
                        let m = Expr::var(indices).eval(&self.env)?;
                        if m.len() < *min || m.is_empty() {
                            return Err(ProtocolError::PatternMismatch(format!(
                                "{} indices, need {min}",
                                m.len()
                            )));
                        }
                        let (last, rest) = m.split_last().expect("non-empty");
                        self.env.insert(verif.clone(), vec![last.clone()]);
                        self.env.insert(key.clone(), rest.to_vec());
                    }
                    Action::CompareB { left, right } => {
                        let l = left.eval(&self.env)?;
                        let r = right.eval(&self.env)?;
                        if !eq_b_all(&l, &r, cfg) {
                            return Err(ProtocolError::PatternMismatch(format!("{left} ≉ {right}")));
                        }
                    }
                    Action::Event { label, terms } => {
                        let mut items = Vec::new();
                        for e in terms {
                            items.extend(e.eval(&self.env)?);
                        }
                        out.push(Output::Event { label: label.clone(), terms: items });
                    }
                    Action::Finish { key } => {
                        let k = key.eval(&self.env)?;
                        self.key = Some(k.clone());
                        self.status = Status::Finished;
                        out.push(Output::Finished { key: k });
                    }
                    Action::ReceiveClassical { .. }
                    | Action::ReceiveQuantumAndMeasure { .. }
                    | Action::AwaitEvent(_)
                    | Action::CloseQuantum => unreachable!("blocking actions are handled by the caller"),
                }
                Ok(())
            })();
            match result {
                Ok(()) => {
                    if self.is_running() {
                        self.pc += 1;
                    }
                }
                Err(e) => self.abort(e.to_string(), out),
            }
        }
        Blocked::Terminated
    }

    pub fn current<'a>(&self, program: &'a [Action]) -> Option<&'a Action> {
        if self.is_running() {
            program.get(self.pc)
        } else {
            None
        }
    }

    /// Evaluated hints of the pending classical receive.
    pub fn slots(&self, program: &[Action]) -> Result<Vec<Slot>, ProtocolError> {
        let Some(Action::ReceiveClassical { hints, .. }) = self.current(program) else {
            return Err(ProtocolError::NotBlocked {
                role: String::new(),
                expected: "a classical receive".into(),
            });
        };
        let mut slots = Vec::new();
        for h in hints {
            match h {
                HintPart::Against(e) => slots.extend(e.eval(&self.env)?.into_iter().map(Slot::Against)),
                HintPart::AgainstAny(e) => slots.push(Slot::AgainstAny(e.eval(&self.env)?)),
                HintPart::Indices => slots.push(Slot::Indices),
            }
        }
        Ok(slots)
    }

    /// Measurement bases of the pending quantum receive.
    pub fn measurement_bases(&self, program: &[Action]) -> Result<Vec<Term>, ProtocolError> {
        match self.current(program) {
            Some(Action::ReceiveQuantumAndMeasure { bases, .. }) => bases.eval(&self.env),
            _ => Err(ProtocolError::NotBlocked {
                role: String::new(),
                expected: "a quantum receive".into(),
            }),
        }
    }

    pub fn deliver_classical(&mut self, program: &[Action], msg: Vec<Term>) -> Result<(), ProtocolError> {
        match self.current(program) {
            Some(Action::ReceiveClassical { bind, .. }) => {
                self.env.insert(bind.clone(), msg);
                self.pc += 1;
                Ok(())
            }
            _ => Err(ProtocolError::NotBlocked {
                role: String::new(),
                expected: "a classical receive".into(),
            }),
        }
    }

    /// Measures each received qubit in the role's basis for that position.
    pub fn deliver_quantum(
        &mut self,
        program: &[Action],
        qubits: &[Term],
        cfg: &InterchangeabilityConfig,
        names: &mut NameSupply,
    ) -> Result<(Vec<Term>, Vec<EprEvent>), ProtocolError> {
        let bases = self.measurement_bases(program)?;
        let Some(Action::ReceiveQuantumAndMeasure { bind, .. }) = self.current(program) else {
            unreachable!();
        };
        if bases.len() != qubits.len() {
            return Err(ProtocolError::PatternMismatch(format!(
                "expected {} qubits, got {}",
                bases.len(),
                qubits.len()
            )));
        }
        let mut outcomes = Vec::new();
        let mut events = Vec::new();
        for (q, b) in qubits.iter().zip(&bases) {
            let (o, ev) = measure_honest(q, b, cfg, names)
                .map_err(|e| ProtocolError::PatternMismatch(e.to_string()))?;
            outcomes.push(o);
            events.extend(ev);
        }
        self.env.insert(bind.clone(), outcomes.clone());
        self.pc += 1;
        Ok((outcomes, events))
    }

    pub fn close_quantum(&mut self, program: &[Action]) -> Result<(), ProtocolError> {
        match self.current(program) {
            Some(Action::CloseQuantum) => {
                self.pc += 1;
                Ok(())
            }
            _ => Err(ProtocolError::NotBlocked {
                role: String::new(),
                expected: "a quantum-channel close".into(),
            }),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct ScenarioDoc {
    protocol: ProtocolKind,
    n: usize,
    bitstrings: BTreeMap<String, BTreeMap<String, Vec<String>>>,
    #[serde(default)]
    same_value_groups: Vec<BTreeSet<usize>>,
    #[serde(default)]
    restrictions: Option<RestrictionSet>,
    #[serde(default)]
    channels: ChannelAssumptions,
    #[serde(default)]
    threat_model: Option<String>,
    #[serde(default)]
    property: Option<PropertyDoc>,
    #[serde(default)]
    allow_unbalanced: bool,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct PropertyDoc {
    #[serde(default)]
    secrecy: Option<String>,
    #[serde(default)]
    binding: Option<bool>,
}

/// Parses and validates a JSON scenario document.
pub fn parse_scenario(document: &str) -> Result<ProtocolSpec, ScenarioError> {
    let doc: ScenarioDoc = serde_json::from_str(document).map_err(|e| ScenarioError::Schema {
        location: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    let mut bitstrings: BTreeMap<String, BTreeMap<String, Vec<Value>>> = BTreeMap::new();
    for (bs, roles) in &doc.bitstrings {
        for (role, values) in roles {
            let vals = values
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    Value::from_label(v).ok_or_else(|| ScenarioError::Schema {
                        location: format!("bitstrings.{bs}.{role}[{i}]"),
                        message: format!("expected \"0\" or \"1\", got {v:?}"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            bitstrings.entry(bs.clone()).or_default().insert(role.clone(), vals);
        }
    }
    let restrictions = match doc.restrictions {
        Some(r) => r,
        None => {
            crate::restrictions::default_budgets(doc.n)?;
            RestrictionSet::standard(doc.n, &pairs_of(&bitstrings), &doc.same_value_groups)?
        }
    };
    let scenario = ScenarioConfig {
        n: doc.n,
        bitstrings,
        same_value_groups: doc.same_value_groups,
        restrictions,
        allow_unbalanced: doc.allow_unbalanced,
    };
    scenario.validate()?;
    let mut spec = match doc.protocol {
        ProtocolKind::Qkd => {
            let view = match &doc.property {
                None => "Bob".to_string(),
                Some(PropertyDoc { secrecy: Some(v), binding: None }) => v.clone(),
                Some(_) => {
                    return Err(ScenarioError::Validation(
                        "qkd scenarios support only a secrecy property".into(),
                    ))
                }
            };
            crate::models::qkd_spec("scenario", scenario, doc.channels, &view)?
        }
        ProtocolKind::Qbc => {
            match &doc.property {
                None | Some(PropertyDoc { secrecy: None, binding: Some(true) }) => {}
                Some(_) => {
                    return Err(ScenarioError::Validation(
                        "qbc scenarios support only the binding property".into(),
                    ))
                }
            }
            crate::models::qbc_spec("scenario", scenario)?
        }
    };
    spec.threat_model = doc.threat_model;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> InterchangeabilityConfig {
        InterchangeabilityConfig::empty()
    }

    fn bit(bs: &str, pos: usize, role: &str, v: Value) -> Term {
        Term::bit(secret_seed(), bs, pos, role, v)
    }

    fn no_events(_: &str) -> bool {
        false
    }

    #[test]
    fn compare_b_accepts_interchangeable_bits() {
        let program = vec![
            Action::CompareB {
                left: Expr::var("x"),
                right: Expr::var("y"),
            },
            Action::Finish { key: Expr::var("x") },
        ];
        let mut st = RoleState {
            pc: 0,
            env: BTreeMap::from([
                ("x".into(), vec![bit("b", 1, "Alice", Value::Zero)]),
                ("y".into(), vec![bit("b", 1, "Bob", Value::Zero)]),
            ]),
            status: Status::Running,
            key: None,
        };
        let mut out = Vec::new();
        assert_eq!(st.run(&program, &cfg(), &no_events, &mut out), Blocked::Terminated);
        assert_eq!(st.status, Status::Finished);
    }

    #[test]
    fn verification_mismatch_aborts() {
        let program = vec![
            Action::CompareB {
                left: Expr::var("d"),
                right: Expr::var("dp"),
            },
            Action::Finish { key: Expr::var("d") },
        ];
        let mut st = RoleState {
            pc: 0,
            env: BTreeMap::from([
                ("d".into(), vec![bit("d", 2, "Alice", Value::One)]),
                ("dp".into(), vec![Term::name("n1")]),
            ]),
            status: Status::Running,
            key: None,
        };
        let mut out = Vec::new();
        st.run(&program, &cfg(), &no_events, &mut out);
        assert!(matches!(st.status, Status::Aborted(_)));
    }

    #[test]
    fn await_blocks_until_fired() {
        let program = vec![Action::AwaitEvent("go".into()), Action::Finish { key: Expr::Const(Term::constant("x")) }];
        let spec = RoleSpec {
            name: "R".into(),
            program: program.clone(),
            initial: BTreeMap::new(),
        };
        let mut st = RoleState::new(&spec);
        let mut out = Vec::new();
        assert_eq!(
            st.run(&program, &cfg(), &no_events, &mut out),
            Blocked::AwaitEvent("go".into())
        );
        assert_eq!(st.run(&program, &cfg(), &|l| l == "go", &mut out), Blocked::Terminated);
        assert_eq!(st.status, Status::Finished);
    }

    #[test]
    fn select_and_split() {
        let env = BTreeMap::from([
            (
                "d".to_string(),
                vec![Term::constant("a"), Term::constant("b"), Term::constant("c")],
            ),
            ("m".to_string(), vec![Term::constant("1"), Term::constant("3")]),
        ]);
        let sel = Expr::select(Expr::var("d"), "m").eval(&env).unwrap();
        assert_eq!(sel, vec![Term::constant("a"), Term::constant("c")]);
        let program = vec![
            Action::SplitVerification {
                indices: "m".into(),
                verif: "v".into(),
                key: "k".into(),
                min: 2,
            },
            Action::Finish {
                key: Expr::select(Expr::var("d"), "k"),
            },
        ];
        let mut st = RoleState {
            pc: 0,
            env,
            status: Status::Running,
            key: None,
        };
        st.run(&program, &cfg(), &no_events, &mut Vec::new());
        assert_eq!(st.env["v"], vec![Term::constant("3")]);
        assert_eq!(st.key, Some(vec![Term::constant("a")]));
    }

    #[test]
    fn rejects_short_bitstring() {
        let doc = r#"{"protocol":"qkd","n":4,
            "bitstrings":{"b":{"Alice":["0","1","0"],"Bob":["0","0","1","1"]},"d":{"Alice":["0","1","1","0"]}}}"#;
        assert!(matches!(parse_scenario(doc), Err(ScenarioError::Validation(_))));
    }

    #[test]
    fn rejects_unknown_keys() {
        let doc = r#"{"protocol":"qkd","n":2,"bogus":1,"bitstrings":{}}"#;
        assert!(matches!(parse_scenario(doc), Err(ScenarioError::Schema { .. })));
    }

    #[test]
    fn unbalanced_needs_override() {
        let doc = |allow: bool| {
            format!(
                r#"{{"protocol":"qkd","n":2,"allowUnbalanced":{allow},
                "bitstrings":{{"b":{{"Alice":["0","0"],"Bob":["0","0"]}},"d":{{"Alice":["0","1"]}}}}}}"#
            )
        };
        assert!(parse_scenario(&doc(false)).is_err());
        assert!(parse_scenario(&doc(true)).is_ok());
    }

    #[test]
    fn resend_of_hinted_value_is_rejected() {
        let mut spec = crate::models::builtin_qkd(crate::models::Variant::TwoQubit, ChannelAssumptions::default());
        spec.roles[1].program.push(Action::SendClassical {
            tag: "echo".into(),
            msg: vec![Expr::var("ba")],
        });
        assert!(spec.validate().is_err());
    }
}
