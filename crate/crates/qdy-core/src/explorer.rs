//! Bounded exploration of honest roles interleaved with the intruder.
//!
//! The search is level-synchronous breadth-first over trace length, so the
//! first attack found is a shortest one. Successors of a level are generated
//! in parallel and then committed sequentially in a fixed order, which makes
//! verdicts and traces independent of the worker count.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

pub use crate::deduction::{Rule, ThreatRuleSet};
use crate::deduction::{
    encoded, idq_found, Cost, Deducer, DeductionContext, DeductionError, Derivation, Found, GuessKey,
    GuessLedger, KnowledgeState, QubitId, RuleInstance, Universe,
};
use crate::protocol::{
    Blocked, Output, PropertySpec, ProtocolError, ProtocolKind, ProtocolSpec, RoleState, Slot, Status,
};
use crate::terms::{eq_b, NameSupply, Term, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub enum Strategy {
    BreadthFirst,
    DepthFirst,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExplorationBounds {
    /// Maximum number of intruder-driven transitions in a trace.
    pub max_depth: usize,
    /// Maximum number of distinct states.
    pub max_states: usize,
    /// Maximum number of candidate inputs for one delivery.
    pub max_candidates: usize,
    /// Construction-depth bound for deducibility.
    pub deduction_depth: usize,
    pub workers: usize,
    pub strategy: Strategy,
}

impl Default for ExplorationBounds {
    fn default() -> Self {
        Self {
            max_depth: 32,
            max_states: 400_000,
            max_candidates: 250_000,
            deduction_depth: crate::deduction::DEFAULT_DEDUCTION_DEPTH,
            workers: 1,
            strategy: Strategy::BreadthFirst,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum InconclusiveReason {
    DepthBound { max_depth: usize },
    EnumerationCap { role: String, tag: String, cap: usize },
    DeductionDepth { target: String, depth: usize },
}

impl fmt::Display for InconclusiveReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InconclusiveReason::DepthBound { max_depth } => write!(f, "trace depth bound {max_depth} reached"),
            InconclusiveReason::EnumerationCap { role, tag, cap } => {
                write!(f, "more than {cap} candidate inputs for {role} on {tag}")
            }
            InconclusiveReason::DeductionDepth { target, depth } => {
                write!(f, "deduction depth {depth} reached for {target}")
            }
        }
    }
}

impl From<DeductionError> for InconclusiveReason {
    fn from(e: DeductionError) -> Self {
        match e {
            DeductionError::DepthBoundExceeded { target, depth } => InconclusiveReason::DeductionDepth {
                target: target.to_string(),
                depth,
            },
            DeductionError::NotAQubit(t) => InconclusiveReason::DeductionDepth {
                target: t.to_string(),
                depth: 0,
            },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Stats {
    pub states_explored: usize,
    pub dedup_hits: usize,
    pub transitions: usize,
    pub max_depth_reached: usize,
    pub inconclusive_branches: usize,
    pub wall_ms: u64,
}

#[derive(Debug, Error)]
pub enum ExploreError {
    #[error("state cap of {max_states} states exceeded after {} states", stats.states_explored)]
    ResourceExhausted { max_states: usize, stats: Stats },
    #[error("invalid protocol: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("could not start worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackTag {
    /// The intruder impersonated each role to the other.
    Mitm,
    /// Alice accepted a completion message Bob had not sent.
    Done,
    Epr,
    Binding,
}

impl fmt::Display for AttackTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackTag::Mitm => "mitm",
            AttackTag::Done => "done",
            AttackTag::Epr => "epr",
            AttackTag::Binding => "binding",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub enum StepKind {
    Deliver,
    DeliverQuantum,
    Close,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HonestOutput {
    pub role: String,
    pub output: Output,
}

impl HonestOutput {
    pub fn description(&self) -> String {
        match &self.output {
            Output::Classical { tag, msg } => format!("sends {tag}({})", list(msg)),
            Output::Quantum { tag, qubits } => {
                format!("sends {} qubits on {tag}: {}", qubits.len(), list(qubits))
            }
            Output::Event { label, terms } => format!("event {label}({})", list(terms)),
            Output::Finished { key } => format!("finishes with key [{}]", list(key)),
            Output::Aborted { reason } => format!("aborts: {reason}"),
        }
    }
}

impl Serialize for HonestOutput {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = serializer.serialize_struct("HonestOutput", 2)?;
        st.serialize_field("role", &self.role)?;
        st.serialize_field("description", &self.description())?;
        st.end()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct TraceStep {
    pub index: usize,
    pub actor: String,
    pub kind: StepKind,
    pub role: String,
    pub tag: String,
    pub message: Vec<Term>,
    pub forwarded: bool,
    pub derivations: Vec<Derivation>,
    pub outcomes: Vec<Term>,
    pub honest: Vec<HonestOutput>,
    pub learned: Vec<Term>,
}

impl TraceStep {
    pub fn uses(&self, pred: &dyn Fn(&RuleInstance) -> bool) -> bool {
        self.derivations.iter().any(|d| d.uses(pred))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Trace {
    pub prelude: Vec<HonestOutput>,
    pub steps: Vec<TraceStep>,
}

impl Trace {
    pub fn uses(&self, pred: &dyn Fn(&RuleInstance) -> bool) -> bool {
        self.steps.iter().any(|s| s.uses(pred))
    }

    /// Every `ID_Q` instance in the trace, duplicates included.
    pub fn idq_instances(&self) -> Vec<QubitId> {
        self.steps
            .iter()
            .flat_map(|s| s.derivations.iter().flat_map(|d| d.idq_instances()))
            .collect()
    }

    /// Distinct guess keys spent over the whole trace.
    pub fn guesses(&self) -> GuessLedger {
        let mut ledger = GuessLedger::default();
        for s in &self.steps {
            for d in &s.derivations {
                for k in d.accounting().0 {
                    ledger.record(k);
                }
            }
        }
        ledger
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Attack {
    pub trace: Trace,
    pub classification: BTreeSet<AttackTag>,
    pub violation: String,
    pub stats: Stats,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "verdict", rename_all = "camelCase")]
pub enum Verdict {
    Attack(Attack),
    Exhausted { stats: Stats },
    Inconclusive { reasons: Vec<InconclusiveReason>, stats: Stats },
}

impl Verdict {
    pub fn name(&self) -> &'static str {
        match self {
            Verdict::Attack(_) => "Attack",
            Verdict::Exhausted { .. } => "Exhausted",
            Verdict::Inconclusive { .. } => "Inconclusive",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Verdict::Exhausted { .. } => 0,
            Verdict::Attack(_) => 1,
            Verdict::Inconclusive { .. } => 2,
        }
    }

    pub fn stats(&self) -> &Stats {
        match self {
            Verdict::Attack(a) => &a.stats,
            Verdict::Exhausted { stats } | Verdict::Inconclusive { stats, .. } => stats,
        }
    }

    pub fn attack(&self) -> Option<&Attack> {
        match self {
            Verdict::Attack(a) => Some(a),
            _ => None,
        }
    }
}

#[derive(Debug)]
struct HistNode {
    step: TraceStep,
    prev: Option<Arc<HistNode>>,
}

/// One point of an execution. The history is shared between branches and
/// excluded from the state fingerprint.
#[derive(Debug, Clone)]
pub struct ExecState {
    roles: Vec<RoleState>,
    blocked: Vec<Blocked>,
    knowledge: KnowledgeState,
    ledger: GuessLedger,
    names: NameSupply,
    queues: BTreeMap<String, VecDeque<Vec<Term>>>,
    last_sent: BTreeMap<String, Vec<Term>>,
    events: Vec<(usize, String, Vec<Term>)>,
    /// Sender tag and 1-based position of each `Δ` entry.
    qubit_meta: Vec<(String, usize)>,
    crafted: Vec<bool>,
    early: BTreeSet<String>,
    depth: usize,
    history: Option<Arc<HistNode>>,
}

impl ExecState {
    pub fn knowledge(&self) -> &KnowledgeState {
        &self.knowledge
    }

    pub fn ledger(&self) -> &GuessLedger {
        &self.ledger
    }

    pub fn roles(&self) -> &[RoleState] {
        &self.roles
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn last_step(&self) -> Option<&TraceStep> {
        self.history.as_ref().map(|h| &h.step)
    }

    pub fn steps(&self) -> Vec<TraceStep> {
        let mut out = Vec::new();
        let mut cur = self.history.clone();
        while let Some(node) = cur {
            out.push(node.step.clone());
            cur = node.prev.clone();
        }
        out.reverse();
        out
    }

    /// 128-bit digest of everything but the history.
    pub fn fingerprint(&self) -> u128 {
        let digest = |salt: u8| {
            let mut h = DefaultHasher::new();
            salt.hash(&mut h);
            self.roles.hash(&mut h);
            self.knowledge.canonical().hash(&mut h);
            self.ledger.hash(&mut h);
            self.names.issued().hash(&mut h);
            self.queues.hash(&mut h);
            self.last_sent.hash(&mut h);
            self.events.hash(&mut h);
            self.crafted.hash(&mut h);
            self.early.hash(&mut h);
            h.finish()
        };
        ((digest(0) as u128) << 64) | digest(1) as u128
    }
}

/// A candidate for part of a message.
#[derive(Debug, Clone)]
struct Piece {
    terms: Vec<Term>,
    derivation: Option<Derivation>,
    cost: Cost,
    epr: bool,
}

impl Piece {
    fn from_found(f: Found) -> Self {
        Piece {
            terms: vec![f.derivation.conclusion.clone()],
            derivation: Some(f.derivation),
            cost: f.cost,
            epr: false,
        }
    }

    fn free(terms: Vec<Term>) -> Self {
        Piece {
            terms,
            derivation: None,
            cost: Cost::default(),
            epr: false,
        }
    }
}

#[derive(Default)]
struct Expansion {
    successors: Vec<(ExecState, Option<String>)>,
    inconclusive: Vec<InconclusiveReason>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayReport {
    pub violated: bool,
    pub violation: Option<String>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplayError {
    #[error("step {0} cannot be reproduced")]
    StepNotReproducible(usize),
    #[error("inconclusive while replaying: {0}")]
    Inconclusive(InconclusiveReason),
}

pub struct Explorer {
    spec: ProtocolSpec,
    rules: ThreatRuleSet,
    universe: Universe,
    bounds: ExplorationBounds,
}

impl Explorer {
    pub fn new(spec: &ProtocolSpec, threat: &ThreatRuleSet, bounds: ExplorationBounds) -> Result<Self, ExploreError> {
        spec.validate()?;
        let disabled: Vec<Rule> = spec.disabled_rules.iter().copied().collect();
        let mut roles: BTreeSet<String> = ["Alice", "Bob"].map(String::from).into();
        let mut guessable = BTreeSet::new();
        for (bs, by_role) in &spec.scenario.bitstrings {
            for (role, values) in by_role {
                roles.insert(role.clone());
                for p in 1..=values.len() {
                    guessable.insert(GuessKey::new(bs, role, p));
                }
            }
        }
        let role_refs: Vec<&str> = roles.iter().map(String::as_str).collect();
        Ok(Self {
            spec: spec.clone(),
            rules: threat.without(&disabled),
            universe: Universe::new(spec.scenario.n, &role_refs, guessable),
            bounds,
        })
    }

    pub fn spec(&self) -> &ProtocolSpec {
        &self.spec
    }

    pub fn rules(&self) -> &ThreatRuleSet {
        &self.rules
    }

    fn ctx(&self, clean_only: bool) -> DeductionContext<'_> {
        DeductionContext {
            rules: &self.rules,
            cfg: &self.spec.cfg,
            universe: &self.universe,
            restrictions: &self.spec.scenario.restrictions,
            max_depth: self.bounds.deduction_depth,
            clean_only,
        }
    }

    fn a0(&self) -> Term {
        self.universe.attacker_bit(Value::Zero)
    }

    pub fn initial_state(&self) -> ExecState {
        self.initial_with_prelude().0
    }

    fn initial_with_prelude(&self) -> (ExecState, Vec<HonestOutput>) {
        let mut knowledge = KnowledgeState::new();
        for t in &self.spec.initial_knowledge {
            knowledge.learn(t.clone(), true);
        }
        let mut s = ExecState {
            roles: self.spec.roles.iter().map(RoleState::new).collect(),
            blocked: vec![Blocked::Terminated; self.spec.roles.len()],
            knowledge,
            ledger: GuessLedger::default(),
            names: NameSupply::new(),
            queues: BTreeMap::new(),
            last_sent: BTreeMap::new(),
            events: Vec::new(),
            qubit_meta: Vec::new(),
            crafted: vec![false; self.spec.roles.len()],
            early: BTreeSet::new(),
            depth: 0,
            history: None,
        };
        let mut prelude = Vec::new();
        self.settle(&mut s, &mut prelude);
        (s, prelude)
    }

    fn settle(&self, s: &mut ExecState, honest: &mut Vec<HonestOutput>) {
        loop {
            let mut progressed = false;
            for r in 0..s.roles.len() {
                let before = (s.roles[r].pc, s.roles[r].status.clone());
                let fired: BTreeSet<String> = s.events.iter().map(|(_, l, _)| l.clone()).collect();
                let mut out = Vec::new();
                let program = &self.spec.roles[r].program;
                s.blocked[r] = s.roles[r].run(program, &self.spec.cfg, &|l| fired.contains(l), &mut out);
                for o in out {
                    self.apply_output(s, r, o, honest);
                }
                if (s.roles[r].pc, s.roles[r].status.clone()) != before {
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
    }

    fn apply_output(&self, s: &mut ExecState, r: usize, o: Output, honest: &mut Vec<HonestOutput>) {
        let role = self.spec.roles[r].name.clone();
        match &o {
            Output::Classical { tag, msg } => {
                let props = self.spec.channel(tag);
                if !props.confidential {
                    for t in msg {
                        s.knowledge.learn(t.clone(), true);
                    }
                }
                if props.authentic {
                    s.queues.entry(tag.clone()).or_default().push_back(msg.clone());
                }
                s.last_sent.insert(tag.clone(), msg.clone());
            }
            Output::Quantum { tag, qubits } => {
                for (i, q) in qubits.iter().enumerate() {
                    s.knowledge.add_qubit(q.clone());
                    s.qubit_meta.push((tag.clone(), i + 1));
                }
            }
            Output::Event { label, terms } => s.events.push((r, label.clone(), terms.clone())),
            Output::Finished { .. } | Output::Aborted { .. } => {}
        }
        honest.push(HonestOutput { role, output: o });
    }

    /// Commits the intruder work recorded in `derivations`.
    fn commit(&self, s: &mut ExecState, derivations: &[Derivation]) -> Vec<Term> {
        let mut learned = Vec::new();
        for d in derivations {
            let (guesses, consumed) = d.accounting();
            for k in guesses {
                s.ledger.record(k);
            }
            for id in consumed {
                s.knowledge.consume(id);
            }
            for (t, clean) in d.observations() {
                if !s.knowledge.knows_clean(&t) {
                    learned.push(t.clone());
                }
                s.knowledge.learn(t, clean);
            }
            d.walk(&mut |n| {
                if matches!(n.rule, RuleInstance::Guess(_)) && !s.knowledge.knows(&n.conclusion) {
                    learned.push(n.conclusion.clone());
                    s.knowledge.learn(n.conclusion.clone(), false);
                }
            });
        }
        learned
    }

    fn push_step(&self, s: &mut ExecState, mut step: TraceStep) {
        s.depth += 1;
        step.index = s.depth;
        s.history = Some(Arc::new(HistNode {
            step,
            prev: s.history.take(),
        }));
    }

    /// Property violation in `s`, if any.
    pub fn violation(&self, s: &ExecState) -> Result<Option<String>, InconclusiveReason> {
        match &self.spec.property {
            PropertySpec::Secrecy { viewpoint } => {
                let Some(r) = self.spec.role_index(viewpoint) else {
                    return Ok(None);
                };
                let Some(key) = s.roles[r].key.as_ref().filter(|_| s.roles[r].status == Status::Finished) else {
                    return Ok(None);
                };
                let ctx = self.ctx(true);
                let mut ded = Deducer::new(&s.knowledge, &ctx, &s.ledger);
                for t in key {
                    if !ded.classical(t)?.is_empty() {
                        return Ok(Some(format!("{viewpoint}'s key bit {t} is deducible without guessing")));
                    }
                }
                Ok(None)
            }
            PropertySpec::Binding { role, event, value } => {
                let r = self.spec.role_index(role);
                for (who, label, terms) in &s.events {
                    if Some(*who) == r && label == event && terms.first().is_some_and(|t| eq_b(t, value, &self.spec.cfg)) {
                        return Ok(Some(format!("{role} accepted {} after the commitment", terms[0])));
                    }
                }
                Ok(None)
            }
        }
    }

    /// All successors of `s` in deterministic order.
    pub fn successors(&self, s: &ExecState) -> Result<Vec<ExecState>, InconclusiveReason> {
        let e = self.expand(s);
        match e.inconclusive.into_iter().next() {
            Some(r) => Err(r),
            None => Ok(e.successors.into_iter().map(|(st, _)| st).collect()),
        }
    }

    fn expand(&self, s: &ExecState) -> Expansion {
        let mut out = Expansion::default();
        let enabled = s
            .blocked
            .iter()
            .any(|b| matches!(b, Blocked::ReceiveClassical { .. } | Blocked::ReceiveQuantum { .. } | Blocked::CloseQuantum));
        if !enabled {
            return out;
        }
        if s.depth >= self.bounds.max_depth {
            out.inconclusive.push(InconclusiveReason::DepthBound {
                max_depth: self.bounds.max_depth,
            });
            return out;
        }
        let ctx = self.ctx(false);
        let mut ded = Deducer::new(&s.knowledge, &ctx, &s.ledger);
        for r in 0..s.roles.len() {
            let result = match &s.blocked[r] {
                Blocked::ReceiveClassical { tag } => self.expand_classical(s, r, tag, &mut ded),
                Blocked::ReceiveQuantum { tag } => self.expand_quantum(s, r, tag, &mut ded),
                Blocked::CloseQuantum => self.expand_close(s, r, &mut ded),
                _ => Ok(vec![]),
            };
            match result {
                Ok(states) => {
                    for st in states {
                        match self.violation(&st) {
                            Ok(v) => out.successors.push((st, v)),
                            Err(reason) => {
                                out.inconclusive.push(reason);
                                out.successors.push((st, None));
                            }
                        }
                    }
                }
                Err(reason) => out.inconclusive.push(reason),
            }
        }
        out
    }

    fn combine(
        &self,
        slots: &[Vec<Piece>],
        ledger: &GuessLedger,
        role: &str,
        tag: &str,
    ) -> Result<Vec<(Vec<usize>, Cost)>, InconclusiveReason> {
        let cap = self.bounds.max_candidates;
        let mut acc: Vec<(Vec<usize>, Cost)> = vec![(Vec::new(), Cost::default())];
        for slot in slots {
            let mut next = Vec::new();
            for (idx, cost) in &acc {
                for (j, p) in slot.iter().enumerate() {
                    let Some(merged) = cost.merge(&p.cost) else {
                        continue;
                    };
                    if !self.spec.scenario.restrictions.admits(ledger, &merged.guesses) {
                        continue;
                    }
                    let mut i2 = idx.clone();
                    i2.push(j);
                    next.push((i2, merged));
                    if next.len() > cap {
                        return Err(InconclusiveReason::EnumerationCap {
                            role: role.to_string(),
                            tag: tag.to_string(),
                            cap,
                        });
                    }
                }
            }
            acc = next;
        }
        Ok(acc)
    }

    fn against(&self, ded: &mut Deducer<'_>, target: &Term) -> Result<Vec<Piece>, InconclusiveReason> {
        let mut out: Vec<Piece> = ded.equivalents(target)?.into_iter().map(Piece::from_found).collect();
        let a0 = self.a0();
        if !eq_b(&a0, target, &self.spec.cfg) {
            if let Some(f) = ded.classical(&a0)?.into_iter().next() {
                out.push(Piece::from_found(f));
            }
        }
        Ok(out)
    }

    fn expand_classical(
        &self,
        s: &ExecState,
        r: usize,
        tag: &str,
        ded: &mut Deducer<'_>,
    ) -> Result<Vec<ExecState>, InconclusiveReason> {
        let role = &self.spec.roles[r];
        let props = self.spec.channel(tag);
        let mut candidates: Vec<(Vec<Term>, Vec<Derivation>)> = Vec::new();
        if props.authentic {
            if let Some(msg) = s.queues.get(tag).and_then(|q| q.front()) {
                candidates.push((msg.clone(), vec![]));
            }
        } else {
            if let Some(msg) = s.last_sent.get(tag) {
                candidates.push((msg.clone(), vec![]));
            }
            let slots = s.roles[r]
                .slots(&role.program)
                .map_err(|e| InconclusiveReason::DeductionDepth {
                    target: e.to_string(),
                    depth: 0,
                })?;
            let mut pieces: Vec<Vec<Piece>> = Vec::new();
            for slot in &slots {
                pieces.push(match slot {
                    Slot::Against(t) => self.against(ded, t)?,
                    Slot::AgainstAny(ts) => {
                        let mut all: Vec<Piece> = Vec::new();
                        for t in ts {
                            for p in self.against(ded, t)? {
                                if !all.iter().any(|q| q.terms == p.terms) {
                                    all.push(p);
                                }
                            }
                        }
                        all
                    }
                    Slot::Indices => {
                        let n = self.spec.scenario.n;
                        (1..(1u32 << n))
                            .rev()
                            .map(|mask| {
                                Piece::free(
                                    (1..=n)
                                        .filter(|p| mask & (1 << (n - p)) != 0)
                                        .map(|p| Term::constant(&p.to_string()))
                                        .collect(),
                                )
                            })
                            .collect()
                    }
                });
            }
            for (idx, _) in self.combine(&pieces, &s.ledger, &role.name, tag)? {
                let mut msg = Vec::new();
                let mut ders = Vec::new();
                for (slot, &j) in pieces.iter().zip(&idx) {
                    msg.extend(slot[j].terms.iter().cloned());
                    ders.extend(slot[j].derivation.iter().cloned());
                }
                if !candidates.iter().any(|(m, _)| m == &msg) {
                    candidates.push((msg, ders));
                }
            }
        }
        let mut out = Vec::new();
        for (msg, ders) in candidates {
            let mut st = s.clone();
            let learned = self.commit(&mut st, &ders);
            if props.authentic {
                if let Some(q) = st.queues.get_mut(tag) {
                    q.pop_front();
                }
            }
            let forwarded = s.last_sent.get(tag) == Some(&msg);
            if !s.last_sent.contains_key(tag) {
                st.early.insert(tag.to_string());
            }
            st.crafted[r] |= !forwarded;
            if st.roles[r].deliver_classical(&role.program, msg.clone()).is_err() {
                continue;
            }
            let mut honest = Vec::new();
            self.settle(&mut st, &mut honest);
            self.push_step(
                &mut st,
                TraceStep {
                    index: 0,
                    actor: "Intruder".into(),
                    kind: StepKind::Deliver,
                    role: role.name.clone(),
                    tag: tag.to_string(),
                    message: msg,
                    forwarded,
                    derivations: ders,
                    outcomes: vec![],
                    honest,
                    learned,
                },
            );
            out.push(st);
        }
        Ok(out)
    }

    /// Candidate data values for a forged qubit at `position`.
    fn data_candidates(&self, s: &ExecState, position: usize) -> Vec<Term> {
        let relevant = |t: &Term| match t {
            Term::Name(_) => true,
            _ => t.as_bit().is_some_and(|b| {
                b.bitstring_label().is_some_and(|l| self.spec.data_bitstrings.iter().any(|d| d == l))
                    && (b.position_index() == Some(position) || self.spec.cfg.is_cross(b.bitstring))
            }),
        };
        let mut xs = vec![self.a0()];
        let mut add = |t: &Term| {
            if relevant(t) && !xs.contains(t) {
                xs.push(t.clone());
            }
        };
        for e in s.knowledge.delta() {
            if let Some((d, _)) = encoded(&e.term) {
                add(d);
            }
        }
        for (t, _) in s.knowledge.gamma() {
            add(t);
        }
        for (n, _) in s.knowledge.epr_log().values() {
            add(n);
        }
        for bs in &self.spec.data_bitstrings {
            if let Some(roles) = self.spec.scenario.bitstrings.get(bs) {
                for role in roles.keys() {
                    if let Some(t) = self.spec.scenario.bit(bs, role, position) {
                        add(&t);
                    }
                }
            }
        }
        xs
    }

    fn quantum_pieces(
        &self,
        s: &ExecState,
        position: usize,
        base: &Term,
        ded: &mut Deducer<'_>,
    ) -> Result<Vec<Piece>, InconclusiveReason> {
        let mut out = Vec::new();
        if self.rules.allows(Rule::IdQ) {
            for (id, e) in s.knowledge.delta().iter().enumerate() {
                if !e.consumed {
                    out.push(Piece::from_found(idq_found(id as QubitId, &e.term)));
                }
            }
        }
        let a0 = self.a0();
        if self.rules.allows(Rule::Forge) {
            let bases = ded.equivalents(base)?;
            for x in self.data_candidates(s, position) {
                let mut per_x: Vec<Piece> = Vec::new();
                for fx in ded.classical(&x)? {
                    for fy in &bases {
                        let Some(cost) = fx.cost.merge(&fy.cost) else {
                            continue;
                        };
                        let q = Term::qubit(x.clone(), fy.derivation.conclusion.clone());
                        let d = Derivation::node(
                            RuleInstance::Forge,
                            q.clone(),
                            vec![fx.derivation.clone(), fy.derivation.clone()],
                        )
                        .quantum();
                        per_x.push(Piece {
                            terms: vec![q],
                            derivation: Some(d),
                            cost,
                            epr: false,
                        });
                    }
                }
                per_x.sort_by(|a, b| a.cost.cmp(&b.cost));
                let mut kept: Vec<Piece> = Vec::new();
                for p in per_x {
                    if !kept.iter().any(|k| k.cost.dominates(&p.cost)) {
                        kept.push(p);
                    }
                }
                out.extend(kept);
            }
            if !eq_b(&a0, base, &self.spec.cfg) {
                for f in ded.quantum(&Term::qubit(a0.clone(), a0.clone()))? {
                    out.push(Piece::from_found(f));
                }
            }
        }
        if self.rules.allows(Rule::Epr) && !eq_b(&a0, base, &self.spec.cfg) {
            let next = s.knowledge.epr_log().keys().max().copied().unwrap_or(0).max(epr_high(s));
            let template = Term::qubit_epr(a0.clone(), a0.clone(), next + 1);
            if let Some(f) = ded.quantum(&template)?.into_iter().next() {
                let mut p = Piece::from_found(f);
                p.epr = true;
                out.push(p);
            }
        }
        Ok(out)
    }

    fn expand_quantum(
        &self,
        s: &ExecState,
        r: usize,
        tag: &str,
        ded: &mut Deducer<'_>,
    ) -> Result<Vec<ExecState>, InconclusiveReason> {
        let role = &self.spec.roles[r];
        let bases = s.roles[r]
            .measurement_bases(&role.program)
            .map_err(|e| InconclusiveReason::DeductionDepth {
                target: e.to_string(),
                depth: 0,
            })?;
        let mut pieces = Vec::new();
        for (i, b) in bases.iter().enumerate() {
            pieces.push(self.quantum_pieces(s, i + 1, b, ded)?);
        }
        let mut out = Vec::new();
        for (idx, _) in self.combine(&pieces, &s.ledger, &role.name, tag)? {
            let mut st = s.clone();
            let mut qubits = Vec::new();
            let mut ders = Vec::new();
            let mut forwarded = true;
            for (pos, (slot, &j)) in pieces.iter().zip(&idx).enumerate() {
                let p = &slot[j];
                let mut d = p.derivation.clone().expect("quantum pieces carry derivations");
                if p.epr {
                    let id = st.knowledge.allocate_epr();
                    let a0 = self.a0();
                    d.rule = RuleInstance::Epr(id);
                    d.conclusion = Term::qubit_epr(a0.clone(), a0, id);
                }
                match d.rule {
                    RuleInstance::IdQ(id) => {
                        let meta = &s.qubit_meta[id as usize];
                        forwarded &= meta.0 == *tag && meta.1 == pos + 1;
                    }
                    _ => forwarded = false,
                }
                qubits.push(d.conclusion.clone());
                ders.push(d);
            }
            let learned = self.commit(&mut st, &ders);
            let names = &mut st.names;
            let Ok((outcomes, events)) = st.roles[r].deliver_quantum(&role.program, &qubits, &self.spec.cfg, names)
            else {
                continue;
            };
            for ev in &events {
                st.knowledge.record_epr(ev);
            }
            st.crafted[r] |= !forwarded;
            let mut honest = Vec::new();
            self.settle(&mut st, &mut honest);
            self.push_step(
                &mut st,
                TraceStep {
                    index: 0,
                    actor: "Intruder".into(),
                    kind: StepKind::DeliverQuantum,
                    role: role.name.clone(),
                    tag: tag.to_string(),
                    message: qubits,
                    forwarded,
                    derivations: ders,
                    outcomes,
                    honest,
                    learned,
                },
            );
            out.push(st);
        }
        Ok(out)
    }

    /// The intruder may measure each held qubit in an interchangeable base
    /// before the channel closes; the rest expire.
    fn expand_close(&self, s: &ExecState, r: usize, ded: &mut Deducer<'_>) -> Result<Vec<ExecState>, InconclusiveReason> {
        let role = &self.spec.roles[r];
        let mut pieces: Vec<Vec<Piece>> = Vec::new();
        if self.rules.allows(Rule::Measure) && self.rules.allows(Rule::IdQ) {
            for (id, e) in s.knowledge.delta().iter().enumerate() {
                if e.consumed {
                    continue;
                }
                let Some((d, b)) = encoded(&e.term) else {
                    continue;
                };
                let mut options = vec![Piece::free(vec![])];
                for fb in ded.equivalents(b)? {
                    let idq = idq_found(id as QubitId, &e.term);
                    let Some(cost) = fb.cost.merge(&idq.cost) else {
                        continue;
                    };
                    let m = Derivation::node(RuleInstance::Measure, d.clone(), vec![idq.derivation, fb.derivation]);
                    options.push(Piece {
                        terms: vec![d.clone()],
                        derivation: Some(m),
                        cost,
                        epr: false,
                    });
                }
                pieces.push(options);
            }
        }
        let mut out = Vec::new();
        for (idx, _) in self.combine(&pieces, &s.ledger, &role.name, "close")? {
            let mut st = s.clone();
            let ders: Vec<Derivation> = pieces
                .iter()
                .zip(&idx)
                .filter_map(|(slot, &j)| slot[j].derivation.clone())
                .collect();
            let learned = self.commit(&mut st, &ders);
            st.knowledge.expire_qubits();
            if st.roles[r].close_quantum(&role.program).is_err() {
                continue;
            }
            let mut honest = Vec::new();
            self.settle(&mut st, &mut honest);
            self.push_step(
                &mut st,
                TraceStep {
                    index: 0,
                    actor: "Intruder".into(),
                    kind: StepKind::Close,
                    role: role.name.clone(),
                    tag: "q".into(),
                    message: ders.iter().map(|d| d.conclusion.clone()).collect(),
                    forwarded: false,
                    derivations: ders,
                    outcomes: vec![],
                    honest,
                    learned,
                },
            );
            out.push(st);
        }
        Ok(out)
    }

    fn classify(&self, s: &ExecState, trace: &Trace) -> BTreeSet<AttackTag> {
        let mut tags = BTreeSet::new();
        if matches!(self.spec.property, PropertySpec::Binding { .. }) {
            tags.insert(AttackTag::Binding);
        }
        if trace.uses(&|r| matches!(r, RuleInstance::Epr(_))) {
            tags.insert(AttackTag::Epr);
        }
        if s.early.contains("done") {
            tags.insert(AttackTag::Done);
        }
        if self.spec.kind == ProtocolKind::Qkd {
            let alice = self.spec.role_index("Alice");
            let bob = self.spec.role_index("Bob");
            if let (Some(a), Some(b)) = (alice, bob) {
                if s.crafted[a] && s.crafted[b] {
                    tags.insert(AttackTag::Mitm);
                }
            }
        }
        tags
    }

    fn make_attack(&self, s: &ExecState, violation: String, stats: Stats) -> Attack {
        let trace = Trace {
            prelude: self.initial_with_prelude().1,
            steps: s.steps(),
        };
        Attack {
            classification: self.classify(s, &trace),
            trace,
            violation,
            stats,
        }
    }

    /// Attack built from a state reached by other means (for example a
    /// scripted walk over [`Explorer::successors`]).
    pub fn attack_from(&self, s: &ExecState) -> Result<Option<Attack>, InconclusiveReason> {
        Ok(self
            .violation(s)?
            .map(|v| self.make_attack(s, v, Stats::default())))
    }

    pub fn explore(&self) -> Result<Verdict, ExploreError> {
        let start = Instant::now();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.bounds.workers.max(1))
            .build()
            .map_err(|e| ExploreError::Pool(e.to_string()))?;
        let init = self.initial_state();
        let mut stats = Stats {
            states_explored: 1,
            ..Stats::default()
        };
        let mut reasons: BTreeSet<InconclusiveReason> = BTreeSet::new();
        let mut visited: HashSet<u128> = HashSet::from([init.fingerprint()]);
        if let Ok(Some(v)) = self.violation(&init) {
            return Ok(Verdict::Attack(self.make_attack(&init, v, stats)));
        }
        let mut found: Option<(ExecState, String)> = None;
        match self.bounds.strategy {
            Strategy::BreadthFirst => {
                let chunk = BFS_CHUNK * self.bounds.workers.max(1);
                let mut frontier = vec![init];
                'search: while !frontier.is_empty() {
                    let mut next = Vec::new();
                    let mut level = frontier.into_iter();
                    loop {
                        let batch: Vec<ExecState> = level.by_ref().take(chunk).collect();
                        if batch.is_empty() {
                            break;
                        }
                        let expansions: Vec<Expansion> =
                            pool.install(|| batch.par_iter().map(|s| self.expand(s)).collect());
                        drop(batch);
                        for e in expansions {
                            if !e.inconclusive.is_empty() {
                                stats.inconclusive_branches += 1;
                                reasons.extend(e.inconclusive);
                            }
                            for (st, violation) in e.successors {
                                stats.transitions += 1;
                                stats.max_depth_reached = stats.max_depth_reached.max(st.depth);
                                if let Some(v) = violation {
                                    found = Some((st, v));
                                    break 'search;
                                }
                                if visited.insert(st.fingerprint()) {
                                    stats.states_explored += 1;
                                    if stats.states_explored > self.bounds.max_states {
                                        stats.wall_ms = start.elapsed().as_millis() as u64;
                                        return Err(ExploreError::ResourceExhausted {
                                            max_states: self.bounds.max_states,
                                            stats,
                                        });
                                    }
                                    next.push(st);
                                } else {
                                    stats.dedup_hits += 1;
                                }
                            }
                        }
                    }
                    log::debug!(
                        "level done: {} states, {} transitions, next frontier {}",
                        stats.states_explored,
                        stats.transitions,
                        next.len()
                    );
                    frontier = next;
                }
            }
            Strategy::DepthFirst => {
                let mut stack = vec![init];
                while let Some(s) = stack.pop() {
                    let e = self.expand(&s);
                    if !e.inconclusive.is_empty() {
                        stats.inconclusive_branches += 1;
                        reasons.extend(e.inconclusive);
                    }
                    let mut children = Vec::new();
                    for (st, violation) in e.successors {
                        stats.transitions += 1;
                        stats.max_depth_reached = stats.max_depth_reached.max(st.depth);
                        if let Some(v) = violation {
                            found = Some((st, v));
                            break;
                        }
                        if visited.insert(st.fingerprint()) {
                            stats.states_explored += 1;
                            if stats.states_explored > self.bounds.max_states {
                                stats.wall_ms = start.elapsed().as_millis() as u64;
                                return Err(ExploreError::ResourceExhausted {
                                    max_states: self.bounds.max_states,
                                    stats,
                                });
                            }
                            children.push(st);
                        } else {
                            stats.dedup_hits += 1;
                        }
                    }
                    if found.is_some() {
                        break;
                    }
                    stack.extend(children.into_iter().rev());
                }
            }
        }
        stats.wall_ms = start.elapsed().as_millis() as u64;
        log::info!("{} under {}: {} states in {} ms", self.spec.name, self.rules, stats.states_explored, stats.wall_ms);
        if let Some((st, v)) = found {
            return Ok(Verdict::Attack(self.make_attack(&st, v, stats)));
        }
        if reasons.is_empty() {
            Ok(Verdict::Exhausted { stats })
        } else {
            Ok(Verdict::Inconclusive {
                reasons: reasons.into_iter().collect(),
                stats,
            })
        }
    }

    /// Re-executes `trace` step by step and reports whether the final state
    /// violates the property.
    pub fn replay(&self, trace: &Trace) -> Result<ReplayReport, ReplayError> {
        let mut s = self.initial_state();
        for step in &trace.steps {
            let e = self.expand(&s);
            let next = e
                .successors
                .into_iter()
                .map(|(st, _)| st)
                .find(|st| st.last_step() == Some(step));
            s = match next {
                Some(st) => st,
                None => return Err(ReplayError::StepNotReproducible(step.index)),
            };
        }
        let violation = self.violation(&s).map_err(ReplayError::Inconclusive)?;
        Ok(ReplayReport {
            violated: violation.is_some(),
            violation,
            steps: trace.steps.len(),
        })
    }
}

fn epr_high(s: &ExecState) -> u64 {
    // Ids already handed out, whether or not a measurement was logged.
    s.knowledge.canonical().3
}

fn list(ts: &[Term]) -> String {
    ts.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(", ")
}

pub fn explore(spec: &ProtocolSpec, threat: &ThreatRuleSet, bounds: ExplorationBounds) -> Result<Verdict, ExploreError> {
    Explorer::new(spec, threat, bounds)?.explore()
}

fn intruder_work(d: &Derivation) -> bool {
    d.uses(&|r| {
        !matches!(
            r,
            RuleInstance::Member | RuleInstance::Compose(_) | RuleInstance::Decrypt | RuleInstance::Project
        )
    })
}

/// Compact rendering of a derivation: intruder rules with their premises,
/// plain composition shown as the composed term.
pub fn recipe(d: &Derivation) -> String {
    if !intruder_work(d) {
        return d.conclusion.to_string();
    }
    let args: Vec<String> = d.premises.iter().map(recipe).collect();
    if args.is_empty() {
        d.rule.to_string()
    } else {
        format!("{}({})", d.rule, args.join(", "))
    }
}

impl fmt::Display for Trace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for h in &self.prelude {
            writeln!(f, "   {}: {}", h.role, h.description())?;
        }
        for s in &self.steps {
            let what = match s.kind {
                StepKind::Close => format!("{} closes the quantum channel", s.role),
                _ => format!(
                    "{} -> {} [{}]{}: {}",
                    s.actor,
                    s.role,
                    s.tag,
                    if s.forwarded { " (forwarded)" } else { "" },
                    list(&s.message)
                ),
            };
            writeln!(f, "{:>3}. {what}", s.index)?;
            for d in s.derivations.iter().filter(|d| intruder_work(d)) {
                writeln!(f, "       via {}", recipe(d))?;
            }
            if !s.outcomes.is_empty() {
                writeln!(f, "       {} measures: {}", s.role, list(&s.outcomes))?;
            }
            if !s.learned.is_empty() {
                writeln!(f, "       intruder learns: {}", list(&s.learned))?;
            }
            for h in &s.honest {
                writeln!(f, "       {}: {}", h.role, h.description())?;
            }
        }
        Ok(())
    }
}

/// Frontier states expanded per worker between sequential commits.
const BFS_CHUNK: usize = 256;

pub const JSON_SCHEMA_VERSION: u32 = 1;

/// JSON report of a verdict.
pub fn verdict_json(spec: &ProtocolSpec, rules: &ThreatRuleSet, verdict: &Verdict) -> serde_json::Value {
    let mut v = json!({
        "schemaVersion": JSON_SCHEMA_VERSION,
        "model": spec.name,
        "threat": rules.to_string(),
        "channels": spec.channels.to_string(),
        "property": spec.property.to_string(),
        "verdict": verdict.name(),
        "stats": verdict.stats(),
    });
    match verdict {
        Verdict::Attack(a) => {
            v["classification"] = json!(a.classification);
            v["violation"] = json!(a.violation);
            v["trace"] = json!(a.trace);
        }
        Verdict::Inconclusive { reasons, .. } => {
            v["reasons"] = json!(reasons);
        }
        Verdict::Exhausted { .. } => {}
    }
    v
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Graphviz rendering of an attack trace.
pub fn trace_dot(trace: &Trace) -> String {
    let mut out = String::from("digraph attack {\n  rankdir=TB;\n  node [shape=box, fontname=\"monospace\"];\n");
    out.push_str("  start [label=\"start\", shape=oval];\n");
    let mut prev = "start".to_string();
    for s in &trace.steps {
        let id = format!("s{}", s.index);
        let mut label = match s.kind {
            StepKind::Close => format!("{}. {} closes quantum channel", s.index, s.role),
            _ => format!("{}. {} -> {} [{}]", s.index, s.actor, s.role, s.tag),
        };
        if s.kind != StepKind::Close {
            label.push_str(&format!("\\n{}", dot_escape(&list(&s.message))));
        }
        for d in s.derivations.iter().filter(|d| intruder_work(d)) {
            label.push_str(&format!("\\nvia {}", dot_escape(&recipe(d))));
        }
        for h in &s.honest {
            label.push_str(&format!("\\n{}: {}", h.role, dot_escape(&h.description())));
        }
        let color = if s.forwarded { "gray" } else { "red" };
        out.push_str(&format!("  {id} [label=\"{label}\", color={color}];\n"));
        out.push_str(&format!("  {prev} -> {id};\n"));
        prev = id;
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{builtin_qbc, builtin_qkd, Preset, Variant};
    use crate::protocol::ChannelAssumptions;

    fn bounds() -> ExplorationBounds {
        ExplorationBounds::default()
    }

    #[test]
    fn honest_run_completes_under_forwarding() {
        for variant in [Variant::TwoQubit, Variant::FourQubit] {
            let spec = builtin_qkd(variant, ChannelAssumptions::default());
            let ex = Explorer::new(&spec, &Preset::Passive.rules(), bounds()).unwrap();
            let mut s = ex.initial_state();
            loop {
                let next = ex.successors(&s).unwrap();
                let Some(st) = next.into_iter().find(|st| st.last_step().unwrap().forwarded) else {
                    break;
                };
                s = st;
            }
            assert!(s.roles().iter().all(|r| r.status == Status::Finished), "{variant:?}");
        }
    }

    #[test]
    fn qbc_honest_commitment_is_accepted() {
        let spec = builtin_qbc(Variant::TwoQubit);
        let ex = Explorer::new(&spec, &Preset::Forge.rules(), bounds()).unwrap();
        let s = ex.initial_state();
        let times = crate::models::qbc_times();
        let unveil = ex
            .successors(&s)
            .unwrap()
            .iter()
            .flat_map(|q| ex.successors(q).unwrap())
            .find(|st| st.last_step().unwrap().message.first() == Some(&times) && st.roles()[0].status == Status::Finished)
            .expect("unveiling the committed base");
        assert_eq!(unveil.roles()[0].status, Status::Finished);
        assert!(ex.violation(&unveil).unwrap().is_none());
    }

    #[test]
    fn passive_two_qubit_is_exhausted() {
        let spec = builtin_qkd(Variant::TwoQubit, ChannelAssumptions::default());
        let v = explore(&spec, &Preset::Passive.rules(), bounds()).unwrap();
        assert!(matches!(v, Verdict::Exhausted { .. }), "{v:?}");
    }

    #[test]
    fn fingerprint_ignores_history() {
        let spec = builtin_qkd(Variant::TwoQubit, ChannelAssumptions::default());
        let ex = Explorer::new(&spec, &Preset::Passive.rules(), bounds()).unwrap();
        let s = ex.initial_state();
        let mut t = s.clone();
        t.history = None;
        t.depth = 7;
        assert_eq!(s.fingerprint(), t.fingerprint());
    }
}
