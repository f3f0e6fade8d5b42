//! Term algebra over `senc`, `pair`, `bit`, `qubit` and `qubitEPR`.
//!
//! Two equalities live here. [`eq_e`] is the intruder's equality; the
//! signature has no equations so it is plain structural identity. [`eq_b`] is
//! the coarser relation honest agents use when they compare bits: it forgets
//! the `role` field of a bit and, for configured bitstrings, its `position`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TermError {
    #[error("symbol {symbol} expects {expected} arguments, got {got}")]
    Arity {
        symbol: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Symbol {
    Senc,
    Pair,
    Bit,
    Qubit,
    QubitEpr,
}

impl Symbol {
    pub const ALL: [Symbol; 5] = [
        Symbol::Senc,
        Symbol::Pair,
        Symbol::Bit,
        Symbol::Qubit,
        Symbol::QubitEpr,
    ];

    pub fn arity(self) -> usize {
        match self {
            Symbol::Senc | Symbol::Pair | Symbol::Qubit => 2,
            Symbol::QubitEpr => 3,
            Symbol::Bit => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Symbol::Senc => "senc",
            Symbol::Pair => "pair",
            Symbol::Bit => "bit",
            Symbol::Qubit => "qubit",
            Symbol::QubitEpr => "qubitEPR",
        }
    }

    pub fn from_name(name: &str) -> Option<Symbol> {
        Symbol::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Qubit-sorted symbols can only be produced through the quantum rules.
    pub fn is_quantum(self) -> bool {
        matches!(self, Symbol::Qubit | Symbol::QubitEpr)
    }
}

/// A symbolic message. Cloning is cheap: labels and argument vectors are shared.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Term {
    Name(Arc<str>),
    Const(Arc<str>),
    App(Symbol, Arc<[Term]>),
}

impl Term {
    pub fn name(id: &str) -> Term {
        Term::Name(Arc::from(id))
    }

    pub fn constant(label: &str) -> Term {
        Term::Const(Arc::from(label))
    }

    pub fn app(symbol: Symbol, args: Vec<Term>) -> Result<Term, TermError> {
        if args.len() != symbol.arity() {
            return Err(TermError::Arity {
                symbol: symbol.name(),
                expected: symbol.arity(),
                got: args.len(),
            });
        }
        Ok(Term::App(symbol, args.into()))
    }

    fn app_unchecked(symbol: Symbol, args: Vec<Term>) -> Term {
        debug_assert_eq!(args.len(), symbol.arity());
        Term::App(symbol, args.into())
    }

    pub fn pair(a: Term, b: Term) -> Term {
        Term::app_unchecked(Symbol::Pair, vec![a, b])
    }

    pub fn senc(m: Term, k: Term) -> Term {
        Term::app_unchecked(Symbol::Senc, vec![m, k])
    }

    pub fn qubit(d: Term, b: Term) -> Term {
        Term::app_unchecked(Symbol::Qubit, vec![d, b])
    }

    pub fn qubit_epr(b: Term, d: Term, id: u64) -> Term {
        Term::app_unchecked(Symbol::QubitEpr, vec![b, d, epr_label(id)])
    }

    /// `bit(seed, bitstring, position, role, value)` with public-constant labels.
    pub fn bit(seed: Term, bitstring: &str, position: usize, role: &str, value: Value) -> Term {
        Term::app_unchecked(
            Symbol::Bit,
            vec![
                seed,
                Term::constant(bitstring),
                Term::constant(&position.to_string()),
                Term::constant(role),
                value.term(),
            ],
        )
    }

    /// Right-nested pairs; a single element is returned as is.
    pub fn tuple(items: &[Term]) -> Term {
        match items {
            [] => Term::constant("nil"),
            [one] => one.clone(),
            [first, rest @ ..] => Term::pair(first.clone(), Term::tuple(rest)),
        }
    }

    pub fn label(&self) -> Option<&str> {
        match self {
            Term::Const(l) => Some(l),
            _ => None,
        }
    }

    pub fn is_name(&self) -> bool {
        matches!(self, Term::Name(_))
    }

    pub fn args(&self) -> &[Term] {
        match self {
            Term::App(_, args) => args,
            _ => &[],
        }
    }

    pub fn symbol(&self) -> Option<Symbol> {
        match self {
            Term::App(s, _) => Some(*s),
            _ => None,
        }
    }

    pub fn as_bit(&self) -> Option<BitView<'_>> {
        match self {
            Term::App(Symbol::Bit, a) => Some(BitView {
                seed: &a[0],
                bitstring: &a[1],
                position: &a[2],
                role: &a[3],
                value: &a[4],
            }),
            _ => None,
        }
    }

    pub fn is_quantum(&self) -> bool {
        matches!(self, Term::App(s, _) if s.is_quantum())
    }

    /// Nesting depth; atoms have depth 0.
    pub fn depth(&self) -> usize {
        match self {
            Term::App(_, args) => 1 + args.iter().map(Term::depth).max().unwrap_or(0),
            _ => 0,
        }
    }

    pub fn subterms(&self, out: &mut BTreeSet<Term>) {
        if out.insert(self.clone()) {
            for a in self.args() {
                a.subterms(out);
            }
        }
    }
}

pub fn epr_label(id: u64) -> Term {
    Term::constant(&format!("#{id}"))
}

/// One of the two public bit values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Value {
    Zero,
    One,
}

impl Value {
    pub fn term(self) -> Term {
        Term::constant(self.label())
    }

    pub fn label(self) -> &'static str {
        match self {
            Value::Zero => "0",
            Value::One => "1",
        }
    }

    pub fn flip(self) -> Value {
        match self {
            Value::Zero => Value::One,
            Value::One => Value::Zero,
        }
    }

    pub fn from_label(s: &str) -> Option<Value> {
        match s {
            "0" => Some(Value::Zero),
            "1" => Some(Value::One),
            _ => None,
        }
    }

    pub fn of_term(t: &Term) -> Option<Value> {
        t.label().and_then(Value::from_label)
    }
}

/// Field access for `bit/5` applications.
#[derive(Clone, Copy, Debug)]
pub struct BitView<'a> {
    pub seed: &'a Term,
    pub bitstring: &'a Term,
    pub position: &'a Term,
    pub role: &'a Term,
    pub value: &'a Term,
}

impl BitView<'_> {
    pub fn bitstring_label(&self) -> Option<&str> {
        self.bitstring.label()
    }

    pub fn role_label(&self) -> Option<&str> {
        self.role.label()
    }

    pub fn position_index(&self) -> Option<usize> {
        self.position.label().and_then(|p| p.parse().ok())
    }

    pub fn value(&self) -> Option<Value> {
        Value::of_term(self.value)
    }

    /// Same bit with other role, position or value fields.
    pub fn with(&self, position: &Term, role: &Term, value: &Term) -> Term {
        Term::app_unchecked(
            Symbol::Bit,
            vec![
                self.seed.clone(),
                self.bitstring.clone(),
                position.clone(),
                role.clone(),
                value.clone(),
            ],
        )
    }
}

/// Bitstrings whose bits are interchangeable across positions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterchangeabilityConfig {
    pub cross_position_bitstrings: BTreeSet<String>,
}

impl InterchangeabilityConfig {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn cross(labels: &[&str]) -> Self {
        Self {
            cross_position_bitstrings: labels.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn is_cross(&self, bitstring: &Term) -> bool {
        bitstring
            .label()
            .is_some_and(|l| self.cross_position_bitstrings.contains(l))
    }
}

thread_local! {
    static EQ_E_CALLS: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

pub fn eq_e(t1: &Term, t2: &Term) -> bool {
    EQ_E_CALLS.with(|c| c.set(c.get() + 1));
    t1 == t2
}

/// Number of [`eq_e`] calls made on the current thread.
pub fn eq_e_calls() -> u64 {
    EQ_E_CALLS.with(|c| c.get())
}

pub fn eq_b(t1: &Term, t2: &Term, cfg: &InterchangeabilityConfig) -> bool {
    if t1 == t2 {
        return true;
    }
    if let (Some(x), Some(y)) = (t1.as_bit(), t2.as_bit()) {
        // Role is ignored; position too when the bitstring is cross-position.
        return eq_b(x.seed, y.seed, cfg)
            && eq_b(x.bitstring, y.bitstring, cfg)
            && eq_b(x.value, y.value, cfg)
            && (eq_b(x.position, y.position, cfg) || cfg.is_cross(x.bitstring));
    }
    match (t1, t2) {
        (Term::App(f, a), Term::App(g, b)) if f == g => {
            a.iter().zip(b.iter()).all(|(x, y)| eq_b(x, y, cfg))
        }
        _ => false,
    }
}

/// Pointwise [`eq_b`] over equal-length sequences.
pub fn eq_b_all(xs: &[Term], ys: &[Term], cfg: &InterchangeabilityConfig) -> bool {
    xs.len() == ys.len() && xs.iter().zip(ys).all(|(x, y)| eq_b(x, y, cfg))
}

/// Monotone supply of fresh names, local to one execution branch.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct NameSupply {
    next: u64,
}

impl NameSupply {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fresh(&mut self) -> Term {
        self.next += 1;
        Term::name(&format!("n{}", self.next))
    }

    pub fn issued(&self) -> u64 {
        self.next
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Name(id) => write!(f, "~{id}"),
            Term::Const(l) if l.starts_with('#') => write!(f, "{l}"),
            Term::Const(l) => write!(f, "'{l}'"),
            Term::App(s, args) => {
                write!(f, "{}(", s.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

impl FromStr for Term {
    type Err = TermError;

    fn from_str(s: &str) -> Result<Term, TermError> {
        let mut p = Parser { src: s.as_bytes(), pos: 0 };
        let t = p.term()?;
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(p.error("trailing input"));
        }
        Ok(t)
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: &str) -> TermError {
        TermError::Parse {
            offset: self.pos,
            message: message.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn ident(&mut self) -> String {
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || b"_-".contains(&self.src[self.pos]))
        {
            self.pos += 1;
        }
        String::from_utf8_lossy(&self.src[start..self.pos]).into_owned()
    }

    fn term(&mut self) -> Result<Term, TermError> {
        self.skip_ws();
        match self.src.get(self.pos) {
            Some(b'~') => {
                self.pos += 1;
                let id = self.ident();
                if id.is_empty() {
                    return Err(self.error("empty name"));
                }
                Ok(Term::name(&id))
            }
            Some(b'#') => {
                self.pos += 1;
                let id = self.ident();
                Ok(Term::constant(&format!("#{id}")))
            }
            Some(b'\'') => {
                self.pos += 1;
                let start = self.pos;
                while self.pos < self.src.len() && self.src[self.pos] != b'\'' {
                    self.pos += 1;
                }
                if self.pos == self.src.len() {
                    return Err(self.error("unterminated constant"));
                }
                let label = String::from_utf8_lossy(&self.src[start..self.pos]).into_owned();
                self.pos += 1;
                Ok(Term::constant(&label))
            }
            Some(c) if c.is_ascii_alphabetic() => {
                let name = self.ident();
                let symbol = Symbol::from_name(&name)
                    .ok_or_else(|| self.error(&format!("unknown symbol {name}")))?;
                self.skip_ws();
                if self.src.get(self.pos) != Some(&b'(') {
                    return Err(self.error("expected '('"));
                }
                self.pos += 1;
                let mut args = Vec::new();
                loop {
                    args.push(self.term()?);
                    self.skip_ws();
                    match self.src.get(self.pos) {
                        Some(b',') => self.pos += 1,
                        Some(b')') => {
                            self.pos += 1;
                            break;
                        }
                        _ => return Err(self.error("expected ',' or ')'")),
                    }
                }
                Term::app(symbol, args)
            }
            _ => Err(self.error("expected a term")),
        }
    }
}

impl Serialize for Term {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Term {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Term, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k() -> Term {
        Term::name("k")
    }

    fn b(pos: usize, role: &str, v: Value) -> Term {
        Term::bit(k(), "b", pos, role, v)
    }

    #[test]
    fn canonical_text() {
        let t = b(1, "Alice", Value::Zero);
        assert_eq!(t.to_string(), "bit(~k,'b','1','Alice','0')");
        let q = Term::qubit_epr(Term::constant("x"), Term::constant("y"), 3);
        assert_eq!(q.to_string(), "qubitEPR('x','y',#3)");
        assert_eq!(q.to_string().parse::<Term>().unwrap(), q);
    }

    #[test]
    fn arity_is_checked() {
        let err = Term::app(Symbol::Bit, vec![k()]).unwrap_err();
        assert!(matches!(err, TermError::Arity { expected: 5, got: 1, .. }));
        assert!("pair('a')".parse::<Term>().is_err());
    }

    #[test]
    fn roles_differ_under_eq_e_only() {
        let a = b(1, "Alice", Value::Zero);
        let bob = b(1, "Bob", Value::Zero);
        let none = InterchangeabilityConfig::empty();
        assert!(eq_e(&a, &a));
        assert!(!eq_e(&a, &bob));
        assert!(eq_b(&a, &bob, &none));
    }

    #[test]
    fn positions_need_configuration() {
        let a = b(1, "Alice", Value::Zero);
        let other = b(2, "Bob", Value::Zero);
        assert!(!eq_b(&a, &other, &InterchangeabilityConfig::empty()));
        assert!(eq_b(&a, &other, &InterchangeabilityConfig::cross(&["b"])));
    }

    #[test]
    fn values_never_merge() {
        let cfg = InterchangeabilityConfig::cross(&["b"]);
        assert!(!eq_b(&b(1, "Alice", Value::Zero), &b(1, "Alice", Value::One), &cfg));
    }

    #[test]
    fn lifting_through_qubit() {
        let x = Term::constant("x");
        let d_a = Term::bit(k(), "d", 1, "Alice", Value::Zero);
        let d_b = Term::bit(k(), "d", 1, "Bob", Value::Zero);
        let cfg = InterchangeabilityConfig::empty();
        assert!(eq_b(&Term::qubit(d_a.clone(), x.clone()), &Term::qubit(d_b, x.clone()), &cfg));
        let b2 = b(1, "Alice", Value::One);
        assert!(!eq_e(&Term::qubit(d_a.clone(), x), &Term::qubit(d_a, b2)));
    }

    #[test]
    fn fresh_names_are_distinct() {
        let mut names = NameSupply::new();
        let drawn: BTreeSet<Term> = (0..50).map(|_| names.fresh()).collect();
        assert_eq!(drawn.len(), 50);
    }
}
