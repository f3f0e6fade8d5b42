//! Intruder deduction: the classical judgment `Γ;Δ;S ⊢ M` and the quantum
//! judgment `Γ;Δ;S ⊢_Q M`.
//!
//! Search is goal-directed over an analysed knowledge base. Decryption and
//! projection are applied eagerly when terms are learned, so only composition
//! and the intruder-specific rules are explored on demand, up to a
//! construction-depth bound.
//!
//! Every derivation carries a [`Cost`]: the new guesses it spends, the qubit
//! identifiers it consumes and whether it relies on guessed material. Only the
//! Pareto-minimal derivations are returned.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::restrictions::RestrictionSet;
use crate::terms::{eq_b, InterchangeabilityConfig, NameSupply, Symbol, Term, Value};

pub const DEFAULT_DEDUCTION_DEPTH: usize = 4;

pub type QubitId = u64;
pub type EprId = u64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeductionError {
    #[error("construction depth bound {depth} reached while deducing {target}")]
    DepthBoundExceeded { target: Term, depth: usize },
    #[error("{0} is not a qubit")]
    NotAQubit(Term),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GuessKey {
    pub bitstring: String,
    pub role: String,
    pub position: usize,
}

impl GuessKey {
    pub fn new(bitstring: &str, role: &str, position: usize) -> Self {
        Self {
            bitstring: bitstring.to_string(),
            role: role.to_string(),
            position,
        }
    }
}

impl fmt::Display for GuessKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.bitstring, self.role, self.position)
    }
}

/// Guesses spent in one execution, deduplicated by `(bitstring, role, position)`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize)]
pub struct GuessLedger {
    guessed: BTreeSet<GuessKey>,
}

impl GuessLedger {
    /// Returns false when the key was already present.
    pub fn record(&mut self, key: GuessKey) -> bool {
        self.guessed.insert(key)
    }

    pub fn contains(&self, key: &GuessKey) -> bool {
        self.guessed.contains(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &GuessKey> {
        self.guessed.iter()
    }

    pub fn len(&self) -> usize {
        self.guessed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.guessed.is_empty()
    }

    pub fn count_for(&self, bitstring: &str, role: &str) -> usize {
        self.guessed
            .iter()
            .filter(|k| k.bitstring == bitstring && k.role == role)
            .count()
    }

    pub fn group_count(&self, positions: &BTreeSet<usize>) -> usize {
        self.guessed.iter().filter(|k| positions.contains(&k.position)).count()
    }
}

/// Intruder rules that a threat model may switch on. Composition,
/// decryption, projection and membership are always available.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Rule {
    IdQ,
    Measure,
    Forge,
    Epr,
    EprLeak,
    Guess,
    Complem,
}

impl Rule {
    pub const ALL: [Rule; 7] = [
        Rule::IdQ,
        Rule::Measure,
        Rule::Forge,
        Rule::Epr,
        Rule::EprLeak,
        Rule::Guess,
        Rule::Complem,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Rule::IdQ => "ID_Q",
            Rule::Measure => "Measure",
            Rule::Forge => "Forge",
            Rule::Epr => "Epr",
            Rule::EprLeak => "EprLeak",
            Rule::Guess => "Guess",
            Rule::Complem => "Complem",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ThreatRuleSet {
    enabled: BTreeSet<Rule>,
}

impl ThreatRuleSet {
    pub fn new(rules: impl IntoIterator<Item = Rule>) -> Self {
        Self {
            enabled: rules.into_iter().collect(),
        }
    }

    pub fn all() -> Self {
        Self::new(Rule::ALL)
    }

    pub fn allows(&self, rule: Rule) -> bool {
        self.enabled.contains(&rule)
    }

    pub fn rules(&self) -> impl Iterator<Item = Rule> + '_ {
        self.enabled.iter().copied()
    }

    pub fn without(&self, rules: &[Rule]) -> Self {
        Self::new(self.enabled.iter().copied().filter(|r| !rules.contains(r)))
    }

    pub fn is_subset(&self, other: &ThreatRuleSet) -> bool {
        self.enabled.is_subset(&other.enabled)
    }
}

impl fmt::Display for ThreatRuleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.enabled.iter().map(|r| r.name()).collect();
        write!(f, "{{{}}}", names.join(","))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum RuleInstance {
    Guess(GuessKey),
    IdQ(QubitId),
    Epr(EprId),
    EprLeak(EprId),
    Complem,
    Measure,
    Forge,
    Compose(String),
    Decrypt,
    Project,
    Member,
}

impl RuleInstance {
    /// Candidate ordering: forwarding first, then forging, EPR, guessing.
    fn rank(&self) -> u8 {
        match self {
            RuleInstance::Member
            | RuleInstance::Compose(_)
            | RuleInstance::Decrypt
            | RuleInstance::Project
            | RuleInstance::IdQ(_) => 0,
            RuleInstance::Measure | RuleInstance::Forge => 1,
            RuleInstance::Epr(_) | RuleInstance::EprLeak(_) => 2,
            RuleInstance::Complem | RuleInstance::Guess(_) => 3,
        }
    }
}

impl fmt::Display for RuleInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RuleInstance::Guess(k) => write!(f, "Guess({k})"),
            RuleInstance::IdQ(id) => write!(f, "ID_Q({id})"),
            RuleInstance::Epr(id) => write!(f, "Epr(#{id})"),
            RuleInstance::EprLeak(id) => write!(f, "EprLeak(#{id})"),
            RuleInstance::Complem => write!(f, "Complem"),
            RuleInstance::Measure => write!(f, "Measure"),
            RuleInstance::Forge => write!(f, "Forge"),
            RuleInstance::Compose(s) => write!(f, "Compose({s})"),
            RuleInstance::Decrypt => write!(f, "Decrypt"),
            RuleInstance::Project => write!(f, "Project"),
            RuleInstance::Member => write!(f, "Member"),
        }
    }
}

impl Serialize for RuleInstance {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// Proof tree for `⊢ conclusion` (or `⊢_Q conclusion` when `quantum`).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Derivation {
    pub rule: RuleInstance,
    pub conclusion: Term,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub quantum: bool,
    pub premises: Vec<Derivation>,
    #[serde(skip)]
    pub tainted: bool,
}

impl Derivation {
    pub fn node(rule: RuleInstance, conclusion: Term, premises: Vec<Derivation>) -> Self {
        let tainted = matches!(rule, RuleInstance::Guess(_)) || premises.iter().any(|p| p.tainted);
        Derivation {
            rule,
            conclusion,
            quantum: false,
            premises,
            tainted,
        }
    }

    pub fn quantum(mut self) -> Self {
        self.quantum = true;
        self
    }

    /// Guess keys and consumed qubits obtained by walking the rule instances.
    pub fn accounting(&self) -> (BTreeSet<GuessKey>, BTreeSet<QubitId>) {
        let mut guesses = BTreeSet::new();
        let mut consumed = BTreeSet::new();
        self.walk(&mut |d| match &d.rule {
            RuleInstance::Guess(k) => {
                guesses.insert(k.clone());
            }
            RuleInstance::IdQ(id) => {
                consumed.insert(*id);
            }
            _ => {}
        });
        (guesses, consumed)
    }

    /// Every `ID_Q` identifier in tree order, duplicates included.
    pub fn idq_instances(&self) -> Vec<QubitId> {
        let mut out = Vec::new();
        self.walk(&mut |d| {
            if let RuleInstance::IdQ(id) = d.rule {
                out.push(id);
            }
        });
        out
    }

    pub fn uses(&self, pred: &dyn Fn(&RuleInstance) -> bool) -> bool {
        pred(&self.rule) || self.premises.iter().any(|p| p.uses(pred))
    }

    pub fn walk(&self, f: &mut dyn FnMut(&Derivation)) {
        f(self);
        for p in &self.premises {
            p.walk(f);
        }
    }

    /// Classical facts the intruder observes while performing this derivation
    /// (measurement and EPR outcomes), with a cleanliness flag.
    pub fn observations(&self) -> Vec<(Term, bool)> {
        let mut out = Vec::new();
        self.walk(&mut |d| {
            if matches!(d.rule, RuleInstance::Measure | RuleInstance::EprLeak(_)) {
                out.push((d.conclusion.clone(), !d.tainted));
            }
        });
        out
    }

    pub fn size(&self) -> usize {
        1 + self.premises.iter().map(Derivation::size).sum::<usize>()
    }
}

/// Resources a derivation spends on top of the current ledger.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Cost {
    pub tainted: bool,
    pub guesses: BTreeSet<GuessKey>,
    pub consumed: BTreeSet<QubitId>,
}

impl Cost {
    pub fn dominates(&self, other: &Cost) -> bool {
        (!self.tainted || other.tainted)
            && self.guesses.is_subset(&other.guesses)
            && self.consumed.is_subset(&other.consumed)
    }

    /// Union of two costs; `None` when both consume the same qubit.
    pub fn merge(&self, other: &Cost) -> Option<Cost> {
        if !self.consumed.is_disjoint(&other.consumed) {
            return None;
        }
        Some(Cost {
            tainted: self.tainted || other.tainted,
            guesses: self.guesses.union(&other.guesses).cloned().collect(),
            consumed: self.consumed.union(&other.consumed).cloned().collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Found {
    pub derivation: Derivation,
    pub cost: Cost,
}

impl Found {
    pub fn term(&self) -> &Term {
        &self.derivation.conclusion
    }

    fn sort_key(&self) -> (bool, usize, usize, u8, usize, &Term) {
        (
            self.cost.tainted,
            self.cost.guesses.len(),
            self.cost.consumed.len(),
            self.derivation.rule.rank(),
            self.derivation.size(),
            &self.derivation.conclusion,
        )
    }
}

/// Keeps the Pareto-minimal entries in a deterministic order.
pub fn pareto(mut found: Vec<Found>) -> Vec<Found> {
    found.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    let mut kept: Vec<Found> = Vec::new();
    for f in found {
        if !kept.iter().any(|k| k.cost.dominates(&f.cost)) {
            kept.push(f);
        }
    }
    kept
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
enum Origin {
    Given,
    Project(Term),
    Decrypt(Term, Term),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct Known {
    clean: bool,
    origin: Origin,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct QubitEntry {
    pub term: Term,
    pub consumed: bool,
}

/// Intruder hypotheses `Γ`, `Δ` and `S`.
///
/// `Γ` is kept analysed: pairs are split and ciphertexts opened as soon as
/// their key is composable. Each entry remembers whether it was obtained
/// without guessing ("clean").
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct KnowledgeState {
    gamma: BTreeMap<Term, Known>,
    delta: Vec<QubitEntry>,
    epr_log: BTreeMap<EprId, (Term, Term)>,
    next_epr: EprId,
}

impl KnowledgeState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_terms(terms: impl IntoIterator<Item = Term>) -> Self {
        let mut k = Self::new();
        for t in terms {
            k.learn(t, true);
        }
        k
    }

    pub fn gamma(&self) -> impl Iterator<Item = (&Term, bool)> {
        self.gamma.iter().map(|(t, k)| (t, k.clean))
    }

    pub fn knows(&self, t: &Term) -> bool {
        self.gamma.contains_key(t)
    }

    pub fn knows_clean(&self, t: &Term) -> bool {
        self.gamma.get(t).is_some_and(|k| k.clean)
    }

    pub fn delta(&self) -> &[QubitEntry] {
        &self.delta
    }

    pub fn epr_log(&self) -> &BTreeMap<EprId, (Term, Term)> {
        &self.epr_log
    }

    pub fn learn(&mut self, t: Term, clean: bool) {
        self.learn_with(t, clean, Origin::Given);
    }

    fn learn_with(&mut self, t: Term, clean: bool, origin: Origin) {
        let mut work = vec![(t, clean, origin)];
        while let Some((t, clean, origin)) = work.pop() {
            match self.gamma.get(&t) {
                Some(k) if k.clean || !clean => continue,
                _ => {}
            }
            // Already composable: storing it adds nothing and could make
            // recorded origins cyclic.
            let composed = match &t {
                Term::Const(_) => Some(true),
                Term::App(s, args) if !s.is_quantum() => args
                    .iter()
                    .map(|a| self.synth_clean(a))
                    .try_fold(true, |acc, c| c.map(|c| acc && c)),
                _ => None,
            };
            if composed.is_some_and(|c| c || !clean) {
                continue;
            }
            self.gamma.insert(t.clone(), Known { clean, origin });
            match &t {
                Term::App(Symbol::Pair, a) => {
                    work.push((a[0].clone(), clean, Origin::Project(t.clone())));
                    work.push((a[1].clone(), clean, Origin::Project(t.clone())));
                }
                Term::App(Symbol::Senc, a) => {
                    if let Some(kc) = self.synth_clean(&a[1]) {
                        work.push((a[0].clone(), clean && kc, Origin::Decrypt(t.clone(), a[1].clone())));
                    }
                }
                _ => {}
            }
            // A new term may be the key of a ciphertext learned earlier.
            for (c, known) in &self.gamma {
                if let Term::App(Symbol::Senc, a) = c {
                    if let Some(kc) = self.synth_clean(&a[1]) {
                        let clean_msg = known.clean && kc;
                        let better = match self.gamma.get(&a[0]) {
                            None => true,
                            Some(m) => clean_msg && !m.clean,
                        };
                        if better {
                            work.push((a[0].clone(), clean_msg, Origin::Decrypt(c.clone(), a[1].clone())));
                        }
                    }
                }
            }
        }
    }

    /// Composable from `Γ` and public constants alone; returns cleanliness.
    fn synth_clean(&self, t: &Term) -> Option<bool> {
        if let Some(k) = self.gamma.get(t) {
            return Some(k.clean);
        }
        match t {
            Term::Const(_) => Some(true),
            Term::Name(_) => None,
            Term::App(s, _) if s.is_quantum() => None,
            Term::App(_, args) => args
                .iter()
                .map(|a| self.synth_clean(a))
                .try_fold(true, |acc, c| c.map(|c| acc && c)),
        }
    }

    pub fn add_qubit(&mut self, term: Term) -> QubitId {
        self.delta.push(QubitEntry { term, consumed: false });
        (self.delta.len() - 1) as QubitId
    }

    pub fn is_available(&self, id: QubitId) -> bool {
        self.delta.get(id as usize).is_some_and(|e| !e.consumed)
    }

    pub fn consume(&mut self, id: QubitId) -> bool {
        match self.delta.get_mut(id as usize) {
            Some(e) if !e.consumed => {
                e.consumed = true;
                true
            }
            _ => false,
        }
    }

    pub fn allocate_epr(&mut self) -> EprId {
        self.next_epr += 1;
        self.next_epr
    }

    pub fn record_epr(&mut self, event: &EprEvent) {
        self.epr_log
            .insert(event.id, (event.outcome.clone(), event.base.clone()));
    }

    fn member_derivation(&self, t: &Term) -> Derivation {
        let known = &self.gamma[t];
        let mut d = match &known.origin {
            Origin::Given => Derivation::node(RuleInstance::Member, t.clone(), vec![]),
            Origin::Project(p) => {
                Derivation::node(RuleInstance::Project, t.clone(), vec![self.member_derivation(p)])
            }
            Origin::Decrypt(c, k) => {
                let key = self.compose_derivation(k);
                Derivation::node(
                    RuleInstance::Decrypt,
                    t.clone(),
                    vec![self.member_derivation(c), key],
                )
            }
        };
        d.tainted = !known.clean;
        d
    }

    fn compose_derivation(&self, t: &Term) -> Derivation {
        if self.gamma.contains_key(t) {
            return self.member_derivation(t);
        }
        match t {
            Term::Const(l) => Derivation::node(RuleInstance::Compose(l.to_string()), t.clone(), vec![]),
            Term::App(s, args) => Derivation::node(
                RuleInstance::Compose(s.name().to_string()),
                t.clone(),
                args.iter().map(|a| self.compose_derivation(a)).collect(),
            ),
            Term::Name(_) => Derivation::node(RuleInstance::Member, t.clone(), vec![]),
        }
    }

    /// Qubit channel closes: remaining held qubits become unusable.
    pub fn expire_qubits(&mut self) -> Vec<QubitId> {
        let mut expired = Vec::new();
        for (i, e) in self.delta.iter_mut().enumerate() {
            if !e.consumed {
                e.consumed = true;
                expired.push(i as QubitId);
            }
        }
        expired
    }

    /// Stable digest input: `Γ` with cleanliness, `Δ` flags and `S`.
    pub fn canonical(&self) -> (Vec<(&Term, bool)>, Vec<bool>, &BTreeMap<EprId, (Term, Term)>, EprId) {
        (
            self.gamma.iter().map(|(t, k)| (t, k.clean)).collect(),
            self.delta.iter().map(|e| e.consumed).collect(),
            &self.epr_log,
            self.next_epr,
        )
    }
}

/// Scenario constants the intruder rules range over.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Universe {
    pub secret_seed: Term,
    pub attacker_seed: Term,
    pub roles: Vec<String>,
    pub n: usize,
    pub guessable: BTreeSet<GuessKey>,
}

impl Universe {
    pub fn new(n: usize, roles: &[&str], guessable: BTreeSet<GuessKey>) -> Self {
        Self {
            secret_seed: Term::name("k"),
            attacker_seed: Term::constant("seedE"),
            roles: roles.iter().map(|r| r.to_string()).collect(),
            n,
            guessable,
        }
    }

    /// A bit built on the public attacker seed; never interchangeable with an
    /// honest bit.
    pub fn attacker_bit(&self, value: Value) -> Term {
        Term::bit(self.attacker_seed.clone(), "e", 1, "Eve", value)
    }

    /// All terms interchangeable with `t` that differ only in role or, for
    /// cross-position bitstrings, position.
    pub fn variants(&self, t: &Term, cfg: &InterchangeabilityConfig) -> Vec<Term> {
        let Some(b) = t.as_bit() else {
            return vec![t.clone()];
        };
        let mut roles: Vec<Term> = self.roles.iter().map(|r| Term::constant(r)).collect();
        if !roles.contains(b.role) {
            roles.push(b.role.clone());
        }
        let positions: Vec<Term> = if cfg.is_cross(b.bitstring) {
            let mut ps: Vec<Term> = (1..=self.n).map(|p| Term::constant(&p.to_string())).collect();
            if !ps.contains(b.position) {
                ps.push(b.position.clone());
            }
            ps
        } else {
            vec![b.position.clone()]
        };
        let mut out = vec![t.clone()];
        for p in &positions {
            for r in &roles {
                let v = b.with(p, r, b.value);
                if !out.contains(&v) {
                    out.push(v);
                }
            }
        }
        out
    }
}

pub struct DeductionContext<'a> {
    pub rules: &'a ThreatRuleSet,
    pub cfg: &'a InterchangeabilityConfig,
    pub universe: &'a Universe,
    pub restrictions: &'a RestrictionSet,
    pub max_depth: usize,
    /// Ignore guessed knowledge and disable the Guess rule.
    pub clean_only: bool,
}

type Memo = HashMap<(Term, usize, bool), (Vec<Found>, bool)>;

/// One deduction session over a fixed state snapshot.
pub struct Deducer<'a> {
    state: &'a KnowledgeState,
    ctx: &'a DeductionContext<'a>,
    ledger: &'a GuessLedger,
    memo: Memo,
}

impl<'a> Deducer<'a> {
    pub fn new(state: &'a KnowledgeState, ctx: &'a DeductionContext<'a>, ledger: &'a GuessLedger) -> Self {
        Self {
            state,
            ctx,
            ledger,
            memo: HashMap::new(),
        }
    }

    /// Pareto-minimal derivations of `target`.
    pub fn classical(&mut self, target: &Term) -> Result<Vec<Found>, DeductionError> {
        let depth = self.ctx.max_depth;
        let (found, hit) = self.derive(target, depth, true);
        if found.is_empty() && hit {
            return Err(DeductionError::DepthBoundExceeded {
                target: target.clone(),
                depth,
            });
        }
        Ok(found)
    }

    /// Pareto-minimal derivations of any term interchangeable with `target`.
    pub fn equivalents(&mut self, target: &Term) -> Result<Vec<Found>, DeductionError> {
        let depth = self.ctx.max_depth;
        let (found, hit) = self.derive_equiv(target, depth);
        if found.is_empty() && hit {
            return Err(DeductionError::DepthBoundExceeded {
                target: target.clone(),
                depth,
            });
        }
        Ok(found)
    }

    pub fn quantum(&mut self, target: &Term) -> Result<Vec<Found>, DeductionError> {
        let depth = self.ctx.max_depth;
        let mut out = Vec::new();
        let mut hit = false;
        if self.ctx.rules.allows(Rule::IdQ) {
            for (i, e) in self.state.delta.iter().enumerate() {
                if !e.consumed && &e.term == target {
                    out.push(idq_found(i as QubitId, target));
                }
            }
        }
        match target {
            Term::App(Symbol::Qubit, a) if self.ctx.rules.allows(Rule::Forge) => {
                let (f, h) = self.derive_all(&a[..], depth.saturating_sub(1));
                hit |= h;
                for (prem, cost) in f {
                    let d = Derivation::node(RuleInstance::Forge, target.clone(), prem).quantum();
                    out.push(Found { derivation: d, cost });
                }
            }
            Term::App(Symbol::QubitEpr, a) if self.ctx.rules.allows(Rule::Epr) => {
                let id = a[2]
                    .label()
                    .and_then(|l| l.strip_prefix('#'))
                    .and_then(|l| l.parse::<EprId>().ok());
                let fresh = id.is_some_and(|id| id > self.state.next_epr);
                if fresh {
                    let (f, h) = self.derive_all(&a[..2], depth.saturating_sub(1));
                    hit |= h;
                    for (prem, cost) in f {
                        let d = Derivation::node(RuleInstance::Epr(id.unwrap()), target.clone(), prem)
                            .quantum();
                        out.push(Found { derivation: d, cost });
                    }
                }
            }
            _ => {}
        }
        let out = pareto(out);
        if out.is_empty() && hit {
            return Err(DeductionError::DepthBoundExceeded {
                target: target.clone(),
                depth,
            });
        }
        Ok(out)
    }

    fn admissible(&self, guesses: &BTreeSet<GuessKey>) -> bool {
        self.ctx.restrictions.admits(self.ledger, guesses)
    }

    fn derive_all(&mut self, targets: &[Term], depth: usize) -> (Vec<(Vec<Derivation>, Cost)>, bool) {
        let mut acc: Vec<(Vec<Derivation>, Cost)> = vec![(Vec::new(), Cost::default())];
        let mut hit = false;
        for t in targets {
            let (found, h) = self.derive(t, depth, true);
            hit |= h;
            let mut next = Vec::new();
            for (prems, cost) in &acc {
                for f in &found {
                    if let Some(c) = cost.merge(&f.cost) {
                        if self.admissible(&c.guesses) {
                            let mut p = prems.clone();
                            p.push(f.derivation.clone());
                            next.push((p, c));
                        }
                    }
                }
            }
            acc = prune_pairs(next);
            if acc.is_empty() {
                break;
            }
        }
        (acc, hit)
    }

    fn derive_equiv(&mut self, target: &Term, depth: usize) -> (Vec<Found>, bool) {
        let mut out = Vec::new();
        let mut hit = false;
        for v in self.ctx.universe.variants(target, self.ctx.cfg) {
            let (f, h) = self.derive(&v, depth, true);
            hit |= h;
            out.extend(f);
        }
        for (t, clean) in self.state.gamma() {
            if (clean || !self.ctx.clean_only)
                && !out.iter().any(|f| f.term() == t)
                && eq_b(t, target, self.ctx.cfg)
            {
                out.push(Found {
                    derivation: self.state.member_derivation(t),
                    cost: Cost {
                        tainted: !clean,
                        ..Cost::default()
                    },
                });
            }
        }
        (pareto(out), hit)
    }

    fn derive(&mut self, t: &Term, depth: usize, allow_complem: bool) -> (Vec<Found>, bool) {
        let key = (t.clone(), depth, allow_complem);
        if let Some(r) = self.memo.get(&key) {
            return r.clone();
        }
        let r = self.derive_uncached(t, depth, allow_complem);
        self.memo.insert(key, r.clone());
        r
    }

    fn derive_uncached(&mut self, t: &Term, depth: usize, allow_complem: bool) -> (Vec<Found>, bool) {
        if let Term::Const(l) = t {
            let d = Derivation::node(RuleInstance::Compose(l.to_string()), t.clone(), vec![]);
            return (vec![Found { derivation: d, cost: Cost::default() }], false);
        }
        let mut out = Vec::new();
        if let Some(k) = self.state.gamma.get(t) {
            if k.clean || !self.ctx.clean_only {
                out.push(Found {
                    derivation: self.state.member_derivation(t),
                    cost: Cost {
                        tainted: !k.clean,
                        ..Cost::default()
                    },
                });
                if k.clean {
                    return (out, false);
                }
            }
        }
        let rules = self.ctx.rules;
        let mut hit = false;
        if depth == 0 {
            return (pareto(out), matches!(t, Term::App(s, _) if !s.is_quantum()));
        }
        if let Term::App(sym, args) = t {
            if !sym.is_quantum() {
                let (f, h) = self.derive_all(args, depth - 1);
                hit |= h;
                for (prem, cost) in f {
                    let d = Derivation::node(RuleInstance::Compose(sym.name().to_string()), t.clone(), prem);
                    out.push(Found { derivation: d, cost });
                }
            }
        }
        if let Some(b) = t.as_bit().filter(|b| b.seed == &self.ctx.universe.secret_seed) {
            if rules.allows(Rule::Guess) && !self.ctx.clean_only && b.value().is_some() {
                if let (Some(bs), Some(role), Some(pos)) =
                    (b.bitstring_label(), b.role_label(), b.position_index())
                {
                    let gk = GuessKey::new(bs, role, pos);
                    if self.ctx.universe.guessable.contains(&gk) {
                        let mut guesses = BTreeSet::new();
                        if !self.ledger.contains(&gk) {
                            guesses.insert(gk.clone());
                        }
                        if self.admissible(&guesses) {
                            let value = Derivation::node(
                                RuleInstance::Compose(b.value.label().unwrap_or_default().to_string()),
                                b.value.clone(),
                                vec![],
                            );
                            let d = Derivation::node(RuleInstance::Guess(gk), t.clone(), vec![value]);
                            out.push(Found {
                                derivation: d,
                                cost: Cost {
                                    tainted: true,
                                    guesses,
                                    consumed: BTreeSet::new(),
                                },
                            });
                        }
                    }
                }
            }
            if rules.allows(Rule::Complem) && allow_complem {
                if let Some(v) = b.value() {
                    let other = b.with(b.position, b.role, &v.flip().term());
                    let (f, h) = self.derive(&other, depth - 1, false);
                    hit |= h;
                    for p in f {
                        let value = Derivation::node(
                            RuleInstance::Compose(v.label().to_string()),
                            v.term(),
                            vec![],
                        );
                        let d = Derivation::node(RuleInstance::Complem, t.clone(), vec![p.derivation, value]);
                        out.push(Found { derivation: d, cost: p.cost });
                    }
                }
            }
        }
        if rules.allows(Rule::Measure) && rules.allows(Rule::IdQ) {
            let entries: Vec<(QubitId, Term, Term)> = self
                .state
                .delta
                .iter()
                .enumerate()
                .filter(|(_, e)| !e.consumed)
                .filter_map(|(i, e)| {
                    let (d, b) = encoded(&e.term)?;
                    (d == t).then(|| (i as QubitId, e.term.clone(), b.clone()))
                })
                .collect();
            for (id, q, base) in entries {
                let (bases, h) = self.derive_equiv(&base, depth - 1);
                hit |= h;
                for bf in bases {
                    if bf.cost.consumed.contains(&id) {
                        continue;
                    }
                    let mut cost = bf.cost.clone();
                    cost.consumed.insert(id);
                    let d = Derivation::node(
                        RuleInstance::Measure,
                        t.clone(),
                        vec![idq_found(id, &q).derivation, bf.derivation],
                    );
                    out.push(Found { derivation: d, cost });
                }
            }
        }
        if rules.allows(Rule::EprLeak) {
            let leaks: Vec<(EprId, Term)> = self
                .state
                .epr_log
                .iter()
                .filter(|(_, (n, _))| n == t)
                .map(|(id, (_, b))| (*id, b.clone()))
                .collect();
            for (id, base) in leaks {
                let (bases, h) = self.derive_equiv(&base, depth - 1);
                hit |= h;
                for bf in bases {
                    let d = Derivation::node(RuleInstance::EprLeak(id), t.clone(), vec![bf.derivation]);
                    out.push(Found { derivation: d, cost: bf.cost });
                }
            }
        }
        let out = pareto(out);
        let hit = hit && out.is_empty();
        (out, hit)
    }
}

fn prune_pairs(v: Vec<(Vec<Derivation>, Cost)>) -> Vec<(Vec<Derivation>, Cost)> {
    let mut v = v;
    v.sort_by(|a, b| a.1.cmp(&b.1));
    let mut kept: Vec<(Vec<Derivation>, Cost)> = Vec::new();
    for item in v {
        if !kept.iter().any(|k| k.1.dominates(&item.1)) {
            kept.push(item);
        }
    }
    kept
}

pub fn idq_found(id: QubitId, q: &Term) -> Found {
    let d = Derivation::node(RuleInstance::IdQ(id), q.clone(), vec![]).quantum();
    Found {
        derivation: d,
        cost: Cost {
            consumed: BTreeSet::from([id]),
            ..Cost::default()
        },
    }
}

/// `(data, base)` of a qubit-sorted term.
pub fn encoded(q: &Term) -> Option<(&Term, &Term)> {
    match q {
        Term::App(Symbol::Qubit, a) => Some((&a[0], &a[1])),
        Term::App(Symbol::QubitEpr, a) => Some((&a[1], &a[0])),
        _ => None,
    }
}

pub fn deduce_classical(
    state: &KnowledgeState,
    target: &Term,
    ctx: &DeductionContext<'_>,
    ledger: &GuessLedger,
) -> Result<Vec<Found>, DeductionError> {
    Deducer::new(state, ctx, ledger).classical(target)
}

pub fn deduce_quantum(
    state: &KnowledgeState,
    target: &Term,
    ctx: &DeductionContext<'_>,
    ledger: &GuessLedger,
) -> Result<Vec<Found>, DeductionError> {
    Deducer::new(state, ctx, ledger).quantum(target)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct EprEvent {
    pub id: EprId,
    pub outcome: Term,
    pub base: Term,
}

/// Honest measurement of `q` in `base`.
pub fn measure_honest(
    q: &Term,
    base: &Term,
    cfg: &InterchangeabilityConfig,
    names: &mut NameSupply,
) -> Result<(Term, Option<EprEvent>), DeductionError> {
    let (d, b) = encoded(q).ok_or_else(|| DeductionError::NotAQubit(q.clone()))?;
    let outcome = if eq_b(b, base, cfg) { d.clone() } else { names.fresh() };
    let event = match q {
        Term::App(Symbol::QubitEpr, a) => a[2]
            .label()
            .and_then(|l| l.strip_prefix('#'))
            .and_then(|l| l.parse().ok())
            .map(|id| EprEvent {
                id,
                outcome: outcome.clone(),
                base: base.clone(),
            }),
        _ => None,
    };
    Ok((outcome, event))
}
