//! First-order vocabulary, ground atoms, symbolic states and rules.
//!
//! States are finite sets of ground atoms. Rules use the text grammar
//!
//! ```text
//! head(Args) :- body1(Args), ..., bodyN(Args).
//! ```
//!
//! where identifiers match `[a-z][a-z0-9_]*` and variables `[A-Z][a-z0-9_]*`.
//! A rule with no body is written `head(Args).`

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LogicError {
    #[error("syntax error at byte {pos}: expected {expected}, found {found}")]
    Syntax {
        pos: usize,
        expected: String,
        found: String,
    },
    #[error("unknown predicate `{0}`")]
    UnknownPredicate(String),
    #[error("predicate `{name}` expects {expected} arguments, got {got}")]
    ArityMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("rule head `{0}` is not an action predicate")]
    HeadNotAction(String),
    #[error("head variable `{0}` does not occur in the body and is not the agent variable")]
    UnsafeHeadVariable(String),
    #[error("variable `{var}` is used with conflicting sorts `{first}` and `{second}`")]
    SortMismatch {
        var: String,
        first: String,
        second: String,
    },
    #[error("constant `{constant}` is not of sort `{sort}`")]
    UnknownConstant { constant: String, sort: String },
    #[error("atom `{0}` is not in the vocabulary")]
    UnknownAtom(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
}

pub type Result<T, E = LogicError> = std::result::Result<T, E>;

/// Name, arity and argument sorts of a predicate.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PredicateSig {
    pub name: String,
    pub arity: usize,
    pub arg_sorts: Vec<String>,
}

impl PredicateSig {
    pub fn new(name: &str, arg_sorts: &[&str]) -> Self {
        PredicateSig {
            name: name.to_string(),
            arity: arg_sorts.len(),
            arg_sorts: arg_sorts.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Predicates, typed constants and action predicates of one domain.
///
/// Orderings are normalized on construction (by name, then arity) so that
/// ground-atom enumeration and vectorization are stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub predicates: Vec<PredicateSig>,
    pub constants: BTreeMap<String, Vec<String>>,
    pub actions: Vec<PredicateSig>,
}

fn sig_order(a: &PredicateSig, b: &PredicateSig) -> std::cmp::Ordering {
    (a.name.as_str(), a.arity).cmp(&(b.name.as_str(), b.arity))
}

impl Vocabulary {
    pub fn new(
        mut predicates: Vec<PredicateSig>,
        mut constants: BTreeMap<String, Vec<String>>,
        mut actions: Vec<PredicateSig>,
    ) -> Result<Self> {
        predicates.sort_by(sig_order);
        actions.sort_by(sig_order);
        for consts in constants.values_mut() {
            consts.sort();
            consts.dedup();
        }
        let vocab = Vocabulary {
            predicates,
            constants,
            actions,
        };
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Vocabulary =
            serde_json::from_str(text).map_err(|e| LogicError::InvalidVocabulary(e.to_string()))?;
        Vocabulary::new(raw.predicates, raw.constants, raw.actions)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocabulary serializes")
    }

    fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for sig in self.predicates.iter().chain(&self.actions) {
            if !is_identifier(&sig.name) {
                return Err(LogicError::InvalidVocabulary(format!(
                    "bad predicate name `{}`",
                    sig.name
                )));
            }
            if sig.arity != sig.arg_sorts.len() {
                return Err(LogicError::InvalidVocabulary(format!(
                    "`{}` has arity {} but {} sorts",
                    sig.name,
                    sig.arity,
                    sig.arg_sorts.len()
                )));
            }
            if !names.insert(sig.name.as_str()) {
                return Err(LogicError::InvalidVocabulary(format!(
                    "duplicate predicate `{}`",
                    sig.name
                )));
            }
            for sort in &sig.arg_sorts {
                if !self.constants.contains_key(sort) {
                    return Err(LogicError::InvalidVocabulary(format!(
                        "`{}` uses undeclared sort `{sort}`",
                        sig.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn predicate(&self, name: &str) -> Option<&PredicateSig> {
        self.predicates.iter().find(|p| p.name == name)
    }

    pub fn action(&self, name: &str) -> Option<&PredicateSig> {
        self.actions.iter().find(|p| p.name == name)
    }

    pub fn predicate_names(&self) -> Vec<String> {
        self.predicates.iter().map(|p| p.name.clone()).collect()
    }

    pub fn action_names(&self) -> Vec<String> {
        self.actions.iter().map(|p| p.name.clone()).collect()
    }

    pub fn constants_of(&self, sort: &str) -> &[String] {
        self.constants.get(sort).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Every ground atom over the state predicates, in the stable order.
    pub fn ground_atoms(&self) -> Vec<GroundAtom> {
        let mut out = Vec::new();
        for sig in &self.predicates {
            let mut tuples: Vec<Vec<String>> = vec![Vec::new()];
            for sort in &sig.arg_sorts {
                let consts = self.constants_of(sort);
                tuples = tuples
                    .into_iter()
                    .flat_map(|prefix| {
                        consts.iter().map(move |c| {
                            let mut t = prefix.clone();
                            t.push(c.clone());
                            t
                        })
                    })
                    .collect();
            }
            out.extend(tuples.into_iter().map(|args| GroundAtom {
                pred: sig.name.clone(),
                args,
            }));
        }
        out
    }

    /// Short stable fingerprint, used to tie serialized models to a vocabulary.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(serde_json::to_vec(self).expect("vocabulary serializes"));
        hex::encode(&digest[..8])
    }
}

/// A predicate applied to constants only.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "AtomRepr", into = "AtomRepr")]
pub struct GroundAtom {
    pub pred: String,
    pub args: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct AtomRepr(String, Vec<String>);

impl From<AtomRepr> for GroundAtom {
    fn from(r: AtomRepr) -> Self {
        GroundAtom { pred: r.0, args: r.1 }
    }
}

impl From<GroundAtom> for AtomRepr {
    fn from(a: GroundAtom) -> Self {
        AtomRepr(a.pred, a.args)
    }
}

impl GroundAtom {
    pub fn new(pred: &str, args: &[&str]) -> Self {
        GroundAtom {
            pred: pred.to_string(),
            args: args.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl fmt::Display for GroundAtom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_atom(f, &self.pred, self.args.iter().map(String::as_str))
    }
}

fn write_atom<'a>(
    f: &mut fmt::Formatter<'_>,
    pred: &str,
    args: impl Iterator<Item = &'a str>,
) -> fmt::Result {
    f.write_str(pred)?;
    let mut first = true;
    for arg in args {
        f.write_str(if first { "(" } else { ", " })?;
        f.write_str(arg)?;
        first = false;
    }
    if !first {
        f.write_str(")")?;
    }
    Ok(())
}

/// The set of ground atoms true at one timestep.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SymbolicState {
    pub atoms: BTreeSet<GroundAtom>,
}

impl SymbolicState {
    pub fn new(atoms: impl IntoIterator<Item = GroundAtom>) -> Self {
        SymbolicState {
            atoms: atoms.into_iter().collect(),
        }
    }

    pub fn contains(&self, atom: &GroundAtom) -> bool {
        self.atoms.contains(atom)
    }

    /// True when every atom of `conj` holds in this state.
    pub fn satisfies(&self, conj: &BTreeSet<GroundAtom>) -> bool {
        conj.is_subset(&self.atoms)
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn predicates(&self) -> BTreeSet<String> {
        self.atoms.iter().map(|a| a.pred.clone()).collect()
    }
}

impl fmt::Display for SymbolicState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for atom in &self.atoms {
            if !first {
                f.write_str(", ")?;
            }
            write!(f, "{atom}")?;
            first = false;
        }
        Ok(())
    }
}

/// Restrict a state to the atoms whose predicate is in `preds`.
pub fn project_state(state: &SymbolicState, preds: &BTreeSet<String>) -> SymbolicState {
    SymbolicState {
        atoms: state
            .atoms
            .iter()
            .filter(|a| preds.contains(&a.pred))
            .cloned()
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Term {
    Var(String),
    Const(String),
}

impl Term {
    pub fn as_str(&self) -> &str {
        match self {
            Term::Var(s) | Term::Const(s) => s,
        }
    }
}

/// An atom whose arguments may be variables.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Atom {
    pub pred: String,
    pub args: Vec<Term>,
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_atom(f, &self.pred, self.args.iter().map(Term::as_str))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rule {
    pub head: Atom,
    pub body: Vec<Atom>,
}

impl Rule {
    pub fn action(&self) -> &str {
        &self.head.pred
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.head)?;
        if !self.body.is_empty() {
            f.write_str(" :- ")?;
            for (i, atom) in self.body.iter().enumerate() {
                if i > 0 {
                    f.write_str(", ")?;
                }
                write!(f, "{atom}")?;
            }
        }
        f.write_str(".")
    }
}

/// Canonical text of a rule: single spaces after commas, trailing period.
pub fn format_rule(rule: &Rule) -> String {
    rule.to_string()
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some('a'..='z'))
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while let Some(c) = self.src[self.pos..].chars().next() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.src[self.pos..].chars().next()
    }

    fn error(&mut self, expected: &str) -> LogicError {
        let found = match self.peek() {
            Some(c) => format!("`{c}`"),
            None => "end of input".to_string(),
        };
        LogicError::Syntax {
            pos: self.pos,
            expected: expected.to_string(),
            found,
        }
    }

    fn eat(&mut self, token: &str) -> bool {
        self.skip_ws();
        if self.src[self.pos..].starts_with(token) {
            self.pos += token.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, token: &str) -> Result<()> {
        if self.eat(token) {
            Ok(())
        } else {
            Err(self.error(&format!("`{token}`")))
        }
    }

    fn word(&mut self) -> Option<&'a str> {
        self.skip_ws();
        let rest = &self.src[self.pos..];
        let len = rest
            .char_indices()
            .find(|(_, c)| !(c.is_ascii_alphanumeric() || *c == '_'))
            .map(|(i, _)| i)
            .unwrap_or(rest.len());
        if len == 0 {
            return None;
        }
        self.pos += len;
        Some(&rest[..len])
    }

    fn term(&mut self) -> Result<Term> {
        let start = self.pos;
        match self.word() {
            Some(w) if w.starts_with(|c: char| c.is_ascii_uppercase()) && valid_tail(&w[1..]) => {
                Ok(Term::Var(w.to_string()))
            }
            Some(w) if is_identifier(w) => Ok(Term::Const(w.to_string())),
            _ => {
                self.pos = start;
                Err(self.error("a variable or constant"))
            }
        }
    }

    fn atom(&mut self) -> Result<Atom> {
        let start = self.pos;
        let pred = match self.word() {
            Some(w) if is_identifier(w) => w.to_string(),
            _ => {
                self.pos = start;
                return Err(self.error("a predicate name"));
            }
        };
        let mut args = Vec::new();
        if self.eat("(") {
            args.push(self.term()?);
            while self.eat(",") {
                args.push(self.term()?);
            }
            self.expect(")")?;
        }
        Ok(Atom { pred, args })
    }

    fn rule(&mut self) -> Result<Rule> {
        let head = self.atom()?;
        let mut body = Vec::new();
        if self.eat(":-") {
            body.push(self.atom()?);
            while self.eat(",") {
                body.push(self.atom()?);
            }
        }
        self.expect(".")?;
        if self.peek().is_some() {
            return Err(self.error("end of input"));
        }
        Ok(Rule { head, body })
    }
}

fn valid_tail(s: &str) -> bool {
    s.chars()
        .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

/// Parse rule text without consulting a vocabulary.
pub fn parse_rule_syntax(text: &str) -> Result<Rule> {
    Parser { src: text, pos: 0 }.rule()
}

/// Parse and check a rule against `vocab`: the head must be an action, body
/// atoms must be state predicates with matching arity, and head variables
/// must be bound by the body unless they are of sort `agent`.
pub fn parse_rule(text: &str, vocab: &Vocabulary) -> Result<Rule> {
    let rule = parse_rule_syntax(text)?;
    check_rule(&rule, vocab)?;
    Ok(rule)
}

pub fn check_rule(rule: &Rule, vocab: &Vocabulary) -> Result<()> {
    let head_sig = match vocab.action(&rule.head.pred) {
        Some(sig) => sig,
        None if vocab.predicate(&rule.head.pred).is_some() => {
            return Err(LogicError::HeadNotAction(rule.head.pred.clone()))
        }
        None => return Err(LogicError::UnknownPredicate(rule.head.pred.clone())),
    };
    check_arity(&rule.head, head_sig)?;
    for atom in &rule.body {
        let sig = vocab
            .predicate(&atom.pred)
            .ok_or_else(|| LogicError::UnknownPredicate(atom.pred.clone()))?;
        check_arity(atom, sig)?;
        for (term, sort) in atom.args.iter().zip(&sig.arg_sorts) {
            if let Term::Const(c) = term {
                if !vocab.constants_of(sort).contains(c) {
                    return Err(LogicError::UnknownConstant {
                        constant: c.clone(),
                        sort: sort.clone(),
                    });
                }
            }
        }
    }
    variable_sorts(rule, vocab)?;
    for (term, sort) in rule.head.args.iter().zip(&head_sig.arg_sorts) {
        if let Term::Var(v) = term {
            let bound = rule.body.iter().any(|a| a.args.contains(term));
            if !bound && sort != "agent" {
                return Err(LogicError::UnsafeHeadVariable(v.clone()));
            }
        }
    }
    Ok(())
}

fn check_arity(atom: &Atom, sig: &PredicateSig) -> Result<()> {
    if atom.args.len() != sig.arity {
        return Err(LogicError::ArityMismatch {
            name: atom.pred.clone(),
            expected: sig.arity,
            got: atom.args.len(),
        });
    }
    Ok(())
}

/// Sort of every variable, inferred from its argument positions in the
/// head and body.
pub fn variable_sorts(rule: &Rule, vocab: &Vocabulary) -> Result<BTreeMap<String, String>> {
    let mut sorts: BTreeMap<String, String> = BTreeMap::new();
    let head = std::iter::once((&rule.head, vocab.action(&rule.head.pred)));
    let body = rule.body.iter().map(|a| (a, vocab.predicate(&a.pred)));
    for (atom, sig) in head.chain(body) {
        let Some(sig) = sig else {
            return Err(LogicError::UnknownPredicate(atom.pred.clone()));
        };
        for (term, sort) in atom.args.iter().zip(&sig.arg_sorts) {
            if let Term::Var(v) = term {
                match sorts.get(v) {
                    Some(prev) if prev != sort => {
                        return Err(LogicError::SortMismatch {
                            var: v.clone(),
                            first: prev.clone(),
                            second: sort.clone(),
                        })
                    }
                    Some(_) => {}
                    None => {
                        sorts.insert(v.clone(), sort.clone());
                    }
                }
            }
        }
    }
    Ok(sorts)
}

/// Crisp valuation of a rule body: 1.0 iff some typed substitution makes
/// every body atom a member of `state`.
pub fn ground_body(rule: &Rule, state: &SymbolicState, vocab: &Vocabulary) -> Result<f64> {
    let sorts = variable_sorts(rule, vocab)?;
    let mut by_pred: HashMap<&str, Vec<&GroundAtom>> = HashMap::new();
    for atom in &state.atoms {
        by_pred.entry(atom.pred.as_str()).or_default().push(atom);
    }
    let mut binding = HashMap::new();
    let ok = satisfy(&rule.body, &by_pred, &sorts, vocab, &mut binding);
    Ok(if ok { 1.0 } else { 0.0 })
}

fn satisfy<'s>(
    body: &[Atom],
    by_pred: &HashMap<&str, Vec<&'s GroundAtom>>,
    sorts: &BTreeMap<String, String>,
    vocab: &Vocabulary,
    binding: &mut HashMap<String, &'s str>,
) -> bool {
    let Some((first, rest)) = body.split_first() else {
        return true;
    };
    let Some(facts) = by_pred.get(first.pred.as_str()) else {
        return false;
    };
    'facts: for fact in facts {
        if fact.args.len() != first.args.len() {
            continue;
        }
        let mut fresh = Vec::new();
        for (term, value) in first.args.iter().zip(&fact.args) {
            match term {
                Term::Const(c) => {
                    if c != value {
                        undo(binding, &fresh);
                        continue 'facts;
                    }
                }
                Term::Var(v) => match binding.get(v) {
                    Some(bound) => {
                        if *bound != value.as_str() {
                            undo(binding, &fresh);
                            continue 'facts;
                        }
                    }
                    None => {
                        let typed = sorts
                            .get(v)
                            .map(|s| vocab.constants_of(s).iter().any(|c| c == value))
                            .unwrap_or(false);
                        if !typed {
                            undo(binding, &fresh);
                            continue 'facts;
                        }
                        binding.insert(v.clone(), value.as_str());
                        fresh.push(v.clone());
                    }
                },
            }
        }
        if satisfy(rest, by_pred, sorts, vocab, binding) {
            return true;
        }
        undo(binding, &fresh);
    }
    false
}

fn undo(binding: &mut HashMap<String, &str>, fresh: &[String]) {
    for v in fresh {
        binding.remove(v);
    }
}

/// Fixed mapping from ground atoms to vector coordinates.
#[derive(Debug, Clone)]
pub struct AtomIndex {
    atoms: Vec<GroundAtom>,
    index: HashMap<GroundAtom, usize>,
}

impl AtomIndex {
    pub fn new(vocab: &Vocabulary) -> Self {
        let atoms = vocab.ground_atoms();
        let index = atoms
            .iter()
            .enumerate()
            .map(|(i, a)| (a.clone(), i))
            .collect();
        AtomIndex { atoms, index }
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atom(&self, i: usize) -> &GroundAtom {
        &self.atoms[i]
    }

    pub fn position(&self, atom: &GroundAtom) -> Option<usize> {
        self.index.get(atom).copied()
    }

    /// Sorted coordinates of the atoms present in `state`.
    pub fn active(&self, state: &SymbolicState) -> Result<Vec<usize>> {
        let mut out = state
            .atoms
            .iter()
            .map(|a| {
                self.position(a)
                    .ok_or_else(|| LogicError::UnknownAtom(a.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        out.sort_unstable();
        Ok(out)
    }

    pub fn vectorize(&self, state: &SymbolicState) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.len()];
        for i in self.active(state)? {
            v[i] = 1.0;
        }
        Ok(v)
    }
}

/// Binary indicator vector of `state` over all ground atoms of `vocab`.
pub fn state_to_vector(state: &SymbolicState, vocab: &Vocabulary) -> Result<Vec<f64>> {
    AtomIndex::new(vocab).vectorize(state)
}
